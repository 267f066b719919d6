"""Alternating optimization of the localization and generative halves.

Each epoch first updates the attention net and classifier on the combined
localization loss with the generative model frozen (phase a), then, when the
generative path is enabled, updates the CVAE on the variational loss with
the current attentions as fixed pseudo-labels (phase b). During warm-up the
reconstruction term is held at zero while the CVAE still pre-trains, so the
generative signal is trustworthy once it switches on. Every source of
randomness draws from its own stream spawned off the run seed, which makes
runs bit-reproducible and ablation variants comparable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

from .dataio import ConfigurationError, FeatureSequence, frame_label_mask
from .evaluation import frame_auc
from .losses import LossWeights, combined_loss, cvae_loss
from .model import ModelBundle, ModelConfig
from .numerics import adam_step

ABLATION_VARIANTS = ("fg-only", "+bg", "+guide", "+re")
FULL_VARIANT = "+re"


class TrainingError(RuntimeError):
    """Training aborted; the message names the offending term and epoch."""


@dataclass(frozen=True)
class TrainConfig:
    """Schedule and optimizer settings for one training run."""

    epochs: int = 60
    batch_size: int = 16
    learning_rate: float = 1e-3
    alternation_period: int = 1
    warmup_epochs: int = 15
    frames_per_video: int = 400
    seed: int = 0
    weights: LossWeights = LossWeights()

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigurationError("epochs must be >= 0")
        for name in ("batch_size", "alternation_period", "frames_per_video"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive")
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be positive")
        if not 0 <= self.warmup_epochs <= max(self.epochs, 0):
            raise ConfigurationError("warmup_epochs must lie in [0, epochs]")


class TrainLog:
    """Append-only per-epoch records; monitoring values never feed back."""

    def __init__(self):
        self.records: list[dict] = []

    def append(self, **fields) -> None:
        self.records.append(fields)

    def to_lines(self) -> list[str]:
        return [json.dumps(r) for r in self.records]


def subsample_frames(sequence: FeatureSequence, max_frames: int, rng=None) -> FeatureSequence:
    """Uniform-stride subsampling to at most `max_frames`, order preserving.

    Sequences already short enough pass through unchanged. The stride scheme
    is deterministic; `rng` is accepted for interface stability and unused.
    """
    if max_frames < 1:
        raise ConfigurationError("max_frames must be >= 1")
    t = sequence.num_frames
    if t <= max_frames:
        return sequence
    idx = subsample_indices(t, max_frames)
    return FeatureSequence(sequence.video_id, sequence.features[idx], sequence.label)


def subsample_indices(length: int, max_frames: int) -> np.ndarray:
    """Source indices of the uniform-stride subsampling, strictly increasing."""
    if length <= max_frames:
        return np.arange(length)
    return (np.arange(max_frames) * length) // max_frames


def variant_weights(weights: LossWeights, variant: str):
    """Effective loss weights and generative-phase switch for one ablation variant."""
    if variant == "fg-only":
        return replace(weights, alpha=0.0, gamma1=0.0, gamma2=0.0), False
    if variant == "+bg":
        return replace(weights, gamma1=0.0, gamma2=0.0), False
    if variant == "+guide":
        return replace(weights, gamma1=0.0), False
    if variant == "+re":
        return weights, True
    raise ConfigurationError(f"unknown ablation variant {variant!r}")


def _check_finite(terms: dict, epoch: int) -> None:
    for name, value in terms.items():
        if not np.isfinite(value):
            raise TrainingError(f"non-finite loss term {name!r} at epoch {epoch}")


def train(
    sequences,
    num_classes: int,
    config: TrainConfig,
    model_config: ModelConfig | None = None,
    monitor_segments=None,
    variant: str = FULL_VARIANT,
    initial_model: ModelBundle | None = None,
    start_epoch: int = 0,
):
    """Train a model on (features, label) pairs only.

    Ground-truth segments, when passed, feed a per-epoch frame-attention AUC
    monitor and nothing else. Returns (model, TrainLog).
    """
    if not sequences:
        raise ConfigurationError("cannot train on an empty dataset")
    model_config = model_config or ModelConfig()
    weights, generative = variant_weights(config.weights, variant)

    streams = np.random.SeedSequence(config.seed).spawn(5)
    rng_init = np.random.default_rng(streams[0])
    rng_order = np.random.default_rng(streams[1])
    rng_phase_a = np.random.default_rng(streams[2])
    rng_phase_b = np.random.default_rng(streams[3])
    rng_order_b = np.random.default_rng(streams[4])

    d = sequences[0].dim
    model = initial_model if initial_model is not None else ModelBundle(
        d, num_classes, model_config, rng_init
    )
    clipped = [subsample_frames(s, config.frames_per_video) for s in sequences]
    masks = None
    if monitor_segments is not None:
        masks = [
            frame_label_mask(full, monitor_segments)[
                subsample_indices(full.num_frames, config.frames_per_video)
            ]
            for full in sequences
        ]

    log = TrainLog()
    loc_names = list(ModelBundle.LOCALIZATION_PARAMS)
    gen_names = list(ModelBundle.GENERATIVE_PARAMS)

    try:
        _run_epochs(
            clipped, masks, model, config, weights, generative, log,
            rng_order, rng_order_b, rng_phase_a, rng_phase_b,
            loc_names, gen_names, start_epoch,
        )
    except TrainingError as exc:
        exc.partial_log = log
        raise
    return model, log


def _run_epochs(
    clipped, masks, model, config, weights, generative, log,
    rng_order, rng_order_b, rng_phase_a, rng_phase_b,
    loc_names, gen_names, start_epoch,
):
    n = len(clipped)
    for epoch in range(start_epoch, start_epoch + config.epochs):
        gamma1 = 0.0 if epoch < config.warmup_epochs else weights.gamma1
        epoch_weights = replace(weights, gamma1=gamma1)

        sums = {"fg": 0.0, "bg": 0.0, "re": 0.0, "guide": 0.0, "total": 0.0}
        grad_norm_loc = 0.0
        lam_all, mask_all = [], []
        order = rng_order.permutation(n)
        for chunk_start in range(0, n, config.batch_size):
            batch = order[chunk_start : chunk_start + config.batch_size]
            model.store.zero_grads(loc_names)
            for vid_idx in batch:
                seq = clipped[vid_idx]
                total, terms, lam = combined_loss(
                    seq.features, seq.label, model, epoch_weights, rng_phase_a
                )
                _check_finite({**terms, "total": total}, epoch)
                for key in terms:
                    sums[key] += terms[key]
                sums["total"] += total
                if masks is not None:
                    lam_all.append(lam)
                    mask_all.append(masks[vid_idx])
            model.store.scale_grads(1.0 / len(batch), loc_names)
            grad_norm_loc = max(grad_norm_loc, model.store.grad_norm(loc_names))
            adam_step(model.store, config.learning_rate, names=loc_names)

        record = {
            "epoch": epoch,
            "fg": float(sums["fg"] / n),
            "bg": float(sums["bg"] / n),
            "re": float(sums["re"] / n),
            "guide": float(sums["guide"] / n),
            "total": float(sums["total"] / n),
            "grad_norm_loc": float(grad_norm_loc),
        }

        if generative and (epoch + 1) % config.alternation_period == 0:
            cvae_sum = recon_sum = kl_sum = 0.0
            grad_norm_gen = 0.0
            order_b = rng_order_b.permutation(n)
            for chunk_start in range(0, n, config.batch_size):
                batch = order_b[chunk_start : chunk_start + config.batch_size]
                model.store.zero_grads(gen_names)
                for vid_idx in batch:
                    seq = clipped[vid_idx]
                    lam, _ = model.attention.forward(seq.features)
                    loss, recon, kl = cvae_loss(
                        seq.features, lam, model.encoder, model.decoder,
                        model.prior, weights.beta, weights.mc_samples,
                        rng_phase_b, model.config.obs_sigma,
                    )
                    _check_finite({"cvae": loss}, epoch)
                    cvae_sum += loss
                    recon_sum += recon
                    kl_sum += kl
                model.store.scale_grads(1.0 / len(batch), gen_names)
                grad_norm_gen = max(grad_norm_gen, model.store.grad_norm(gen_names))
                adam_step(model.store, config.learning_rate, names=gen_names)
            record.update(
                cvae=float(cvae_sum / n),
                cvae_recon=float(recon_sum / n),
                cvae_kl=float(kl_sum / n),
                grad_norm_gen=float(grad_norm_gen),
            )

        if masks is not None and lam_all:
            lam_cat = np.concatenate(lam_all)
            mask_cat = np.concatenate(mask_all)
            if mask_cat.any() and not mask_cat.all():
                record["attention_auc"] = frame_auc(lam_cat, mask_cat)
        log.append(**record)


def train_ablation(
    sequences,
    num_classes: int,
    config: TrainConfig,
    variant: str,
    model_config: ModelConfig | None = None,
    monitor_segments=None,
):
    """Train with the named subset of loss terms; see ABLATION_VARIANTS."""
    if variant not in ABLATION_VARIANTS:
        raise ConfigurationError(
            f"variant must be one of {ABLATION_VARIANTS}, got {variant!r}"
        )
    return train(
        sequences, num_classes, config, model_config,
        monitor_segments=monitor_segments, variant=variant,
    )
