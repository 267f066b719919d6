"""Shared test utilities: finite-difference gradients and tiny model factories."""

import numpy as np
import pytest

from wsal.model import ModelBundle, ModelConfig

FD_STEP = 1e-5


def finite_diff(loss_fn, array, step=FD_STEP):
    """Central finite differences of loss_fn() wrt the entries of `array`.

    `array` is perturbed in place (loss_fn must read it on every call) and
    restored afterwards.
    """
    flat = array.ravel()
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = loss_fn()
        flat[i] = orig - step
        down = loss_fn()
        flat[i] = orig
        grad[i] = (up - down) / (2.0 * step)
    return grad.reshape(array.shape)


def assert_grad_close(analytic, numeric, rtol=1e-4, atol=1e-7, label=""):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    assert analytic.shape == numeric.shape
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    bad = np.abs(analytic - numeric) > rtol * scale + atol
    assert not bad.any(), (
        f"{label}: {bad.sum()} of {bad.size} gradient entries off; "
        f"worst |a-n|={np.abs(analytic - numeric).max():.3e}"
    )


def tiny_bundle(d=4, num_classes=2, hidden=5, latent=3, r=1.0, sigma=1.0, seed=0):
    """A small randomly initialized model for gradient checking."""
    config = ModelConfig(
        attention_hidden=hidden, cvae_hidden=hidden, latent_dim=latent,
        prior_r=r, obs_sigma=sigma,
    )
    return ModelBundle(d, num_classes, config, np.random.default_rng(seed))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
