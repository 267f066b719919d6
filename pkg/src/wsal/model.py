"""The learnable pieces: frame attention, video classifier, conditional VAE.

All three are small feed-forward stacks over per-frame features, vectorized
across the frames of one video. Parameters live in a shared ParamStore under
dotted names ("att.*", "cls.*", "enc.*", "dec.*") so the optimizer can step
the localization and generative halves independently.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numerics import (
    DiagGaussian,
    ParamStore,
    ShapeError,
    affine_backward,
    affine_forward,
    sigmoid,
    softmax,
    tanh_backward,
    tanh_forward,
)

CHECKPOINT_MAGIC = b"WSALCKPT"
CHECKPOINT_VERSION = 1


class DegeneratePoolingError(ValueError):
    """Attention pooling with zero total weight."""


class CheckpointError(ValueError):
    """Unreadable or inconsistent checkpoint file."""


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyper-parameters shared by training and inference."""

    attention_hidden: int = 256
    cvae_hidden: int = 256
    latent_dim: int = 128
    prior_r: float = 1.0
    obs_sigma: float = 1.0

    def __post_init__(self):
        if min(self.attention_hidden, self.cvae_hidden, self.latent_dim) < 1:
            raise ValueError("layer widths must be positive")
        if self.prior_r < 0:
            raise ValueError("prior_r must be >= 0")
        if self.obs_sigma <= 0:
            raise ValueError("obs_sigma must be positive")


def _init_weight(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class AttentionNet:
    """Per-frame attention: features -> hidden tanh -> sigmoid scalar in (0,1)."""

    def __init__(self, store: ParamStore, d: int, hidden: int, rng=None):
        self.store = store
        self.d = d
        if rng is not None:
            store.add("att.w1", _init_weight(rng, d, hidden))
            store.add("att.b1", np.zeros(hidden))
            store.add("att.w2", _init_weight(rng, hidden, 1))
            store.add("att.b2", np.zeros(1))

    def forward(self, features: np.ndarray):
        """Returns (attention (T,), cache). One value per frame."""
        x = np.asarray(features, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.d:
            raise ShapeError(f"attention input must be (T, {self.d}), got {x.shape}")
        h = tanh_forward(affine_forward(x, self.store.value("att.w1"), self.store.value("att.b1")))
        logits = affine_forward(h, self.store.value("att.w2"), self.store.value("att.b2"))
        lam = sigmoid(logits[:, 0])
        return lam, (x, h, lam)

    def backward(self, dlam: np.ndarray, cache) -> None:
        """Accumulates parameter gradients for upstream d(loss)/d(attention)."""
        x, h, lam = cache
        dlogits = (dlam * lam * (1.0 - lam))[:, None]
        dh, dw2, db2 = affine_backward(dlogits, h, self.store.value("att.w2"))
        dpre = tanh_backward(dh, h)
        _, dw1, db1 = affine_backward(dpre, x, self.store.value("att.w1"))
        self.store.accumulate("att.w2", dw2)
        self.store.accumulate("att.b2", db2)
        self.store.accumulate("att.w1", dw1)
        self.store.accumulate("att.b1", db1)


class Classifier:
    """Single affine layer over pooled features, one weight vector per class 0..C."""

    def __init__(self, store: ParamStore, d: int, num_classes: int, rng=None):
        self.store = store
        self.d = d
        self.num_classes = num_classes
        if rng is not None:
            store.add("cls.w", _init_weight(rng, d, num_classes + 1))
            store.add("cls.b", np.zeros(num_classes + 1))

    def logits(self, x: np.ndarray) -> np.ndarray:
        x2 = np.asarray(x, dtype=np.float64)
        single = x2.ndim == 1
        out = affine_forward(x2, self.store.value("cls.w"), self.store.value("cls.b"))
        return out[0] if single else out

    def probabilities(self, x: np.ndarray) -> np.ndarray:
        return softmax(self.logits(x))

    def backward(self, dlogits: np.ndarray, x: np.ndarray) -> np.ndarray:
        """Accumulates classifier gradients; returns gradient wrt the input."""
        dlogits2 = np.atleast_2d(np.asarray(dlogits, dtype=np.float64))
        x2 = np.atleast_2d(np.asarray(x, dtype=np.float64))
        dx, dw, db = affine_backward(dlogits2, x2, self.store.value("cls.w"))
        self.store.accumulate("cls.w", dw)
        self.store.accumulate("cls.b", db)
        return dx[0] if np.asarray(x).ndim == 1 else dx


def classify(classifier: Classifier, pooled: np.ndarray) -> np.ndarray:
    """Class distribution over {0..C} for one pooled feature vector."""
    return softmax(classifier.logits(pooled))


def attention_pool(features: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Weighted temporal average: sum_t w_t x_t / sum_t w_t.

    Raises DegeneratePoolingError when the weights sum to zero; training code
    clamps the denominator instead (see losses).
    """
    x = np.asarray(features, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (x.shape[0],):
        raise ShapeError(f"weights shape {w.shape} != ({x.shape[0]},)")
    total = w.sum()
    if total <= 0.0:
        raise DegeneratePoolingError("attention weights sum to zero")
    return (w[:, None] * x).sum(axis=0) / total


class CvaeEncoder:
    """Posterior network: (frame feature, attention) -> DiagGaussian over latents.

    The attention value enters as one extra input coordinate.
    """

    def __init__(self, store: ParamStore, d: int, hidden: int, latent_dim: int, rng=None):
        self.store = store
        self.d = d
        self.latent_dim = latent_dim
        if rng is not None:
            store.add("enc.w1", _init_weight(rng, d + 1, hidden))
            store.add("enc.b1", np.zeros(hidden))
            store.add("enc.wm", _init_weight(rng, hidden, latent_dim))
            store.add("enc.bm", np.zeros(latent_dim))
            store.add("enc.wv", _init_weight(rng, hidden, latent_dim))
            store.add("enc.bv", np.zeros(latent_dim))

    def forward(self, features: np.ndarray, lam: np.ndarray):
        x = np.asarray(features, dtype=np.float64)
        lam = np.asarray(lam, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.d or lam.shape != (x.shape[0],):
            raise ShapeError(f"encoder input shapes {x.shape}, {lam.shape} are inconsistent")
        inp = np.concatenate([x, lam[:, None]], axis=1)
        h = tanh_forward(affine_forward(inp, self.store.value("enc.w1"), self.store.value("enc.b1")))
        mu = affine_forward(h, self.store.value("enc.wm"), self.store.value("enc.bm"))
        logvar = affine_forward(h, self.store.value("enc.wv"), self.store.value("enc.bv"))
        return mu, logvar, (inp, h)

    def backward(self, dmu: np.ndarray, dlogvar: np.ndarray, cache) -> None:
        inp, h = cache
        dh_m, dwm, dbm = affine_backward(dmu, h, self.store.value("enc.wm"))
        dh_v, dwv, dbv = affine_backward(dlogvar, h, self.store.value("enc.wv"))
        dpre = tanh_backward(dh_m + dh_v, h)
        _, dw1, db1 = affine_backward(dpre, inp, self.store.value("enc.w1"))
        self.store.accumulate("enc.wm", dwm)
        self.store.accumulate("enc.bm", dbm)
        self.store.accumulate("enc.wv", dwv)
        self.store.accumulate("enc.bv", dbv)
        self.store.accumulate("enc.w1", dw1)
        self.store.accumulate("enc.b1", db1)


class CvaeDecoder:
    """Reconstruction mean: (attention, latent) -> feature space."""

    def __init__(self, store: ParamStore, d: int, hidden: int, latent_dim: int, rng=None):
        self.store = store
        self.d = d
        self.latent_dim = latent_dim
        if rng is not None:
            store.add("dec.w1", _init_weight(rng, latent_dim + 1, hidden))
            store.add("dec.b1", np.zeros(hidden))
            store.add("dec.w2", _init_weight(rng, hidden, d))
            store.add("dec.b2", np.zeros(d))

    def forward(self, lam: np.ndarray, z: np.ndarray):
        lam = np.asarray(lam, dtype=np.float64)
        z = np.asarray(z, dtype=np.float64)
        if z.ndim != 2 or z.shape[1] != self.latent_dim or lam.shape != (z.shape[0],):
            raise ShapeError(f"decoder input shapes {lam.shape}, {z.shape} are inconsistent")
        inp = np.concatenate([lam[:, None], z], axis=1)
        h = tanh_forward(affine_forward(inp, self.store.value("dec.w1"), self.store.value("dec.b1")))
        xhat = affine_forward(h, self.store.value("dec.w2"), self.store.value("dec.b2"))
        return xhat, (inp, h)

    def backward(self, dxhat: np.ndarray, cache, update_params: bool = True):
        """Returns (dlam, dz); accumulates decoder gradients unless frozen."""
        inp, h = cache
        dh, dw2, db2 = affine_backward(dxhat, h, self.store.value("dec.w2"))
        dpre = tanh_backward(dh, h)
        dinp, dw1, db1 = affine_backward(dpre, inp, self.store.value("dec.w1"))
        if update_params:
            self.store.accumulate("dec.w2", dw2)
            self.store.accumulate("dec.b2", db2)
            self.store.accumulate("dec.w1", dw1)
            self.store.accumulate("dec.b1", db1)
        return dinp[:, 0], dinp[:, 1:]


@dataclass(frozen=True)
class LatentPrior:
    """Attention-conditioned latent prior N(r * lam * 1, I).

    r >= 0 sets how far apart the priors for lam=0 and lam=1 sit; r = 0 makes
    the prior independent of attention.
    """

    r: float
    latent_dim: int

    def __post_init__(self):
        if self.r < 0:
            raise ValueError("prior discrepancy r must be >= 0")

    def mean_rows(self, lam: np.ndarray) -> np.ndarray:
        lam = np.asarray(lam, dtype=np.float64)
        return np.repeat((self.r * lam)[:, None], self.latent_dim, axis=1)

    def of(self, lam_t: float) -> DiagGaussian:
        mean = np.full(self.latent_dim, self.r * float(lam_t))
        return DiagGaussian(mean, np.zeros(self.latent_dim))


def prior_of(lam_t: float, prior: LatentPrior) -> DiagGaussian:
    return prior.of(lam_t)


def cvae_encode(encoder: CvaeEncoder, x_t: np.ndarray, lam_t: float) -> DiagGaussian:
    """Single-frame posterior q(z | x_t, lam_t)."""
    mu, logvar, _ = encoder.forward(np.asarray(x_t)[None, :], np.array([lam_t]))
    return DiagGaussian(mu[0], logvar[0])


def cvae_decode(decoder: CvaeDecoder, lam_t: float, z_t: np.ndarray) -> np.ndarray:
    """Single-frame reconstruction mean f(lam_t, z_t)."""
    xhat, _ = decoder.forward(np.array([lam_t]), np.asarray(z_t)[None, :])
    return xhat[0]


class ModelBundle:
    """All parameters of one model plus the hyper-parameters that shape them."""

    def __init__(self, d: int, num_classes: int, config: ModelConfig, rng=None):
        self.d = d
        self.num_classes = num_classes
        self.config = config
        self.store = ParamStore()
        init = rng if rng is not None else np.random.default_rng(0)
        self.attention = AttentionNet(self.store, d, config.attention_hidden, init)
        self.classifier = Classifier(self.store, d, num_classes, init)
        self.encoder = CvaeEncoder(self.store, d, config.cvae_hidden, config.latent_dim, init)
        self.decoder = CvaeDecoder(self.store, d, config.cvae_hidden, config.latent_dim, init)
        self.prior = LatentPrior(config.prior_r, config.latent_dim)

    LOCALIZATION_PARAMS = ("att.w1", "att.b1", "att.w2", "att.b2", "cls.w", "cls.b")
    GENERATIVE_PARAMS = (
        "enc.w1", "enc.b1", "enc.wm", "enc.bm", "enc.wv", "enc.bv",
        "dec.w1", "dec.b1", "dec.w2", "dec.b2",
    )


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------


def save_checkpoint(bundle: ModelBundle, path, epoch: int = 0, config_echo: str = "") -> None:
    """Versioned binary of hyper-parameters, parameter tensors, and Adam state."""
    out = bytearray()
    out += CHECKPOINT_MAGIC
    out += struct.pack("<I", CHECKPOINT_VERSION)
    cfg = bundle.config
    out += struct.pack(
        "<IIIII", bundle.d, bundle.num_classes,
        cfg.latent_dim, cfg.attention_hidden, cfg.cvae_hidden,
    )
    out += struct.pack("<dd", cfg.prior_r, cfg.obs_sigma)
    out += struct.pack("<I", epoch)
    echo = config_echo.encode("utf-8")
    out += struct.pack("<I", len(echo)) + echo

    names = bundle.store.names()
    out += struct.pack("<I", len(names))
    for name in names:
        slot = bundle.store._slots[name]
        ident = name.encode("utf-8")
        out += struct.pack("<I", len(ident)) + ident
        out += struct.pack("<I", slot.value.ndim)
        out += struct.pack(f"<{slot.value.ndim}I", *slot.value.shape)
        out += struct.pack("<Q", slot.step)
        for arr in (slot.value, slot.m, slot.v):
            out += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path):
    """Returns (bundle, epoch, config_echo); rejects shape mismatches by tensor name."""
    data = Path(path).read_bytes()
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"truncated checkpoint reading {what} at offset {pos}")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    if take(len(CHECKPOINT_MAGIC), "magic") != CHECKPOINT_MAGIC:
        raise CheckpointError("bad checkpoint magic at offset 0")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    d, num_classes, latent_dim, att_hidden, cvae_hidden = struct.unpack(
        "<IIIII", take(20, "dims")
    )
    prior_r, obs_sigma = struct.unpack("<dd", take(16, "prior"))
    (epoch,) = struct.unpack("<I", take(4, "epoch"))
    (echo_len,) = struct.unpack("<I", take(4, "echo length"))
    config_echo = take(echo_len, "config echo").decode("utf-8")

    config = ModelConfig(
        attention_hidden=att_hidden,
        cvae_hidden=cvae_hidden,
        latent_dim=latent_dim,
        prior_r=prior_r,
        obs_sigma=obs_sigma,
    )
    bundle = ModelBundle(d, num_classes, config, rng=np.random.default_rng(0))

    (count,) = struct.unpack("<I", take(4, "tensor count"))
    expected = set(bundle.store.names())
    seen = set()
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        name = take(name_len, "tensor name").decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4, "ndim"))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim, "shape"))
        (step,) = struct.unpack("<Q", take(8, "step"))
        if name not in expected:
            raise CheckpointError(f"unknown tensor {name!r} in checkpoint")
        slot = bundle.store._slots[name]
        if tuple(slot.value.shape) != shape:
            raise CheckpointError(
                f"tensor {name!r}: checkpoint shape {shape} != model shape "
                f"{tuple(slot.value.shape)}"
            )
        n = int(np.prod(shape)) if shape else 1
        for arr in (slot.value, slot.m, slot.v):
            arr[...] = np.frombuffer(take(8 * n, name), dtype="<f8").reshape(shape)
        slot.step = step
        seen.add(name)
    missing = expected - seen
    if missing:
        raise CheckpointError(f"checkpoint missing tensors: {sorted(missing)}")
    if pos != len(data):
        raise CheckpointError(f"trailing bytes at offset {pos}")
    return bundle, epoch, config_echo
