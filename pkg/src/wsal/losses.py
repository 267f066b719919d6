"""Training objectives and their analytic gradients.

The localization half (attention net + classifier) trains on a weighted sum
of a discriminative loss over attention-pooled features, a reconstruction
loss that scores each frame's feature under the frozen generative model
conditioned on its attention, and a self-guidance loss tying attention to
the classifier's smoothed per-frame activation. The generative half trains
separately on the variational loss with current attentions as fixed
conditioning. Gradients accumulate into the owning ParamStore; gradients
with respect to the attention vector are returned to the caller, who pushes
them through the attention net.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import Classifier, CvaeDecoder, CvaeEncoder, LatentPrior, ModelBundle
from .numerics import softmax

POOL_EPS = 1e-6


class InvalidLabelError(ValueError):
    """An operation that needs an action class received the background label."""


@dataclass(frozen=True)
class LossWeights:
    """Weights of the loss terms plus the knobs of their estimators.

    alpha scales the background discriminative term, beta the KL term of the
    variational loss, gamma1 the reconstruction term, gamma2 the guidance
    term. mc_samples is the Monte-Carlo sample count L; smooth_sigma the
    standard deviation (in frames) of the activation-smoothing kernel.
    """

    alpha: float = 0.03
    beta: float = 0.1
    gamma1: float = 0.5
    gamma2: float = 0.1
    mc_samples: int = 1
    smooth_sigma: float = 2.0

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma1", "gamma2", "smooth_sigma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.mc_samples < 1:
            raise ValueError("mc_samples must be >= 1")


@dataclass
class TcamPair:
    """Smoothed per-frame activations: label-class mass and total action mass."""

    fg: np.ndarray
    bg: np.ndarray


def _pool(features: np.ndarray, weights: np.ndarray):
    """Clamped attention pooling; returns (pooled, denominator, clamped?)."""
    raw = weights.sum()
    denom = max(raw, POOL_EPS)
    pooled = (weights[:, None] * features).sum(axis=0) / denom
    return pooled, denom, raw <= POOL_EPS


def _cross_entropy(logits: np.ndarray, target: int):
    """Returns (-log softmax(logits)[target], softmax(logits))."""
    shift = logits - logits.max()
    log_z = math.log(np.exp(shift).sum())
    probs = np.exp(shift - log_z)
    return log_z - shift[target], probs


def discriminative_loss(features, lam, label, classifier: Classifier, alpha):
    """Softmax loss on the attention-pooled foreground plus, weighted by
    alpha, the background-class loss on the complement-pooled feature.

    Accumulates classifier gradients in its store and returns
    (loss, d loss / d lam, (foreground term, background term)).
    """
    x = np.asarray(features, dtype=np.float64)
    lam = np.asarray(lam, dtype=np.float64)
    x_fg, s_fg, fg_clamped = _pool(x, lam)
    x_bg, s_bg, bg_clamped = _pool(x, 1.0 - lam)

    u_fg = classifier.logits(x_fg)
    loss_fg, p_fg = _cross_entropy(u_fg, label)
    u_bg = classifier.logits(x_bg)
    loss_bg, p_bg = _cross_entropy(u_bg, 0)

    du_fg = p_fg.copy()
    du_fg[label] -= 1.0
    g_fg = classifier.backward(du_fg, x_fg)
    du_bg = alpha * p_bg
    du_bg[0] -= alpha
    g_bg = classifier.backward(du_bg, x_bg)

    dlam = (x @ g_fg - (0.0 if fg_clamped else x_fg @ g_fg)) / s_fg
    dlam -= (x @ g_bg - (0.0 if bg_clamped else x_bg @ g_bg)) / s_bg
    return loss_fg + alpha * loss_bg, dlam, (loss_fg, loss_bg)


def gaussian_smooth(values: np.ndarray, sigma: float) -> np.ndarray:
    """Convolve with a truncated (radius 3*sigma), renormalized Gaussian kernel.

    Edge positions renormalize over the in-range kernel mass, so a constant
    input smooths to itself. sigma <= 0 is the identity.
    """
    v = np.asarray(values, dtype=np.float64)
    if sigma <= 0:
        return v.copy()
    radius = int(math.ceil(3.0 * sigma))
    offsets = np.arange(-radius, radius + 1)
    kernel = np.exp(-0.5 * (offsets / sigma) ** 2)
    kernel /= kernel.sum()
    # full-mode convolution keeps the slice aligned even when the kernel is
    # longer than the signal
    t = v.shape[0]
    num = np.convolve(v, kernel, mode="full")[radius : radius + t]
    norm = np.convolve(np.ones(t), kernel, mode="full")[radius : radius + t]
    return num / norm


def tcam(features, classifier: Classifier, label: int, smooth_sigma: float) -> TcamPair:
    """Smoothed per-frame classifier activations for a video with class `label`.

    fg is the smoothed probability of the label class per frame; bg the
    smoothed total probability of all action classes (1 - background mass).
    """
    if label < 1:
        raise InvalidLabelError("activation maps need an action class (label >= 1)")
    probs = softmax(classifier.logits(np.asarray(features, dtype=np.float64)))
    fg = gaussian_smooth(probs[:, label], smooth_sigma)
    bg = gaussian_smooth(1.0 - probs[:, 0], smooth_sigma)
    return TcamPair(fg=fg, bg=bg)


def guide_loss(lam, pair: TcamPair):
    """Mean absolute deviation of the attention from both activation maps.

    Returns (loss, subgradient wrt lam); the subgradient at a kink is 0.
    """
    lam = np.asarray(lam, dtype=np.float64)
    t = lam.shape[0]
    if pair.fg.shape != lam.shape or pair.bg.shape != lam.shape:
        raise ValueError("activation maps and attention must have equal length")
    loss = (np.abs(lam - pair.fg) + np.abs(lam - pair.bg)).sum() / t
    dlam = (np.sign(lam - pair.fg) + np.sign(lam - pair.bg)) / t
    return loss, dlam


def cvae_loss(
    features,
    lam,
    encoder: CvaeEncoder,
    decoder: CvaeDecoder,
    prior: LatentPrior,
    beta: float,
    mc_samples: int,
    rng: np.random.Generator,
    obs_sigma: float = 1.0,
):
    """Variational loss of the generative model, averaged over frames.

    Per frame: Monte-Carlo negative reconstruction log-likelihood under
    reparameterized posterior samples, plus beta times the closed-form KL
    from the posterior to the attention-conditioned prior. Attention values
    are fixed conditioning here. Accumulates encoder and decoder gradients;
    returns (loss, reconstruction term, KL term).
    """
    x = np.asarray(features, dtype=np.float64)
    lam = np.asarray(lam, dtype=np.float64)
    t = x.shape[0]
    var = obs_sigma**2

    mu, logvar, enc_cache = encoder.forward(x, lam)
    prior_mean = prior.mean_rows(lam)

    kl_rows = 0.5 * (np.exp(logvar) + (mu - prior_mean) ** 2 - 1.0 - logvar).sum(axis=1)
    dmu = beta * (mu - prior_mean) / t
    dlogvar = beta * 0.5 * (np.exp(logvar) - 1.0) / t

    std = np.exp(0.5 * logvar)
    recon_rows = np.zeros(t)
    const = 0.5 * x.shape[1] * math.log(2.0 * math.pi * var)
    for _ in range(mc_samples):
        noise = rng.standard_normal(mu.shape)
        z = mu + std * noise
        xhat, dec_cache = decoder.forward(lam, z)
        resid = xhat - x
        recon_rows += const + (resid**2).sum(axis=1) / (2.0 * var)
        dxhat = resid / (var * t * mc_samples)
        _, dz = decoder.backward(dxhat, dec_cache, update_params=True)
        dmu += dz
        dlogvar += dz * noise * 0.5 * std
    recon_rows /= mc_samples
    encoder.backward(dmu, dlogvar, enc_cache)

    recon = float(recon_rows.mean())
    kl = float(kl_rows.mean())
    return recon + beta * kl, recon, kl


def reconstruction_loss(
    features,
    lam,
    decoder: CvaeDecoder,
    prior: LatentPrior,
    mc_samples: int,
    rng: np.random.Generator,
    obs_sigma: float = 1.0,
):
    """Frame-feature reconstruction error under prior-sampled latents, as a
    function of the attention (decoder frozen).

    Latents are reparameterized as prior mean + noise, so the gradient wrt
    each attention value flows both through the decoder's conditioning input
    and through the prior mean. With one sample the per-frame term is the
    squared error over 2*sigma^2; with more, the log of their averaged
    Gaussian likelihoods (constants dropped). Returns (loss, dlam).
    """
    x = np.asarray(features, dtype=np.float64)
    lam = np.asarray(lam, dtype=np.float64)
    t = x.shape[0]
    var = obs_sigma**2

    energies = np.empty((mc_samples, t))
    caches = []
    resids = []
    for l in range(mc_samples):
        noise = rng.standard_normal((t, prior.latent_dim))
        z = prior.mean_rows(lam) + noise
        xhat, dec_cache = decoder.forward(lam, z)
        resid = xhat - x
        energies[l] = (resid**2).sum(axis=1) / (2.0 * var)
        caches.append(dec_cache)
        resids.append(resid)

    # -log mean_l exp(-E_l) per frame, stably; reduces to E with one sample
    shift = energies.min(axis=0)
    weights = np.exp(-(energies - shift))
    mean_w = weights.mean(axis=0)
    loss_rows = shift - np.log(mean_w)
    weights /= weights.sum(axis=0)

    dlam = np.zeros(t)
    for l in range(mc_samples):
        dxhat = resids[l] * (weights[l] / (var * t))[:, None]
        dlam_direct, dz = decoder.backward(dxhat, caches[l], update_params=False)
        dlam += dlam_direct + prior.r * dz.sum(axis=1)
    return float(loss_rows.mean()), dlam


def combined_loss(
    features,
    label: int,
    model: ModelBundle,
    weights: LossWeights,
    rng: np.random.Generator,
):
    """One video's localization objective: discriminative + gamma1 *
    reconstruction + gamma2 * guidance, with the generative model frozen.

    Runs the attention net forward, pushes the summed attention gradient back
    through it, and accumulates attention-net and classifier gradients only.
    Returns (total, per-term dict, attention vector).
    """
    x = np.asarray(features, dtype=np.float64)
    lam, att_cache = model.attention.forward(x)

    total, dlam, (loss_fg, loss_bg) = discriminative_loss(
        x, lam, label, model.classifier, weights.alpha
    )
    terms = {"fg": loss_fg, "bg": loss_bg, "re": 0.0, "guide": 0.0}

    if weights.gamma1 > 0:
        loss_re, dlam_re = reconstruction_loss(
            x, lam, model.decoder, model.prior, weights.mc_samples, rng,
            model.config.obs_sigma,
        )
        terms["re"] = loss_re
        total += weights.gamma1 * loss_re
        dlam = dlam + weights.gamma1 * dlam_re

    if weights.gamma2 > 0 and label >= 1:
        pair = tcam(x, model.classifier, label, weights.smooth_sigma)
        loss_guide, dlam_guide = guide_loss(lam, pair)
        terms["guide"] = loss_guide
        total += weights.gamma2 * loss_guide
        dlam = dlam + weights.gamma2 * dlam_guide

    model.attention.backward(dlam, att_cache)
    return total, terms, lam
