"""
Volume Rendering

Alpha compositing of sampled colors and densities, its analytic backward
pass, the photometric MSE loss, the Adam update and PSNR.
"""
import logging
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .errors import RenderError
from .radiance_field import ParamStore

logger = logging.getLogger(__name__)

PSNR_CAP = 99.0


@dataclass(frozen=True, eq=False)
class RenderResult:
    """Composited color with per-sample transmittance and opacity."""
    rgb: np.ndarray
    transmittance: np.ndarray
    alpha: np.ndarray
    final_transmittance: np.ndarray

    @property
    def weights(self) -> np.ndarray:
        return self.transmittance * self.alpha


def _validate(rgb: np.ndarray, sigma: np.ndarray, delta: np.ndarray):
    if sigma.shape[-1] == 0:
        raise RenderError("cannot composite an empty sample list")
    if rgb.shape != sigma.shape + (3,) or delta.shape != sigma.shape:
        raise RenderError(f"sample shapes disagree: rgb {rgb.shape}, sigma {sigma.shape}, delta {delta.shape}")
    if np.any(sigma < 0.0):
        raise RenderError("densities must be non-negative")
    if np.any(delta <= 0.0):
        raise RenderError("sample spacings must be positive")


def composite(rgb, sigma, delta) -> RenderResult:
    """
    Front-to-back compositing along the last sample axis.

    Args:
        rgb: (..., S, 3) colors in [0, 1]
        sigma: (..., S) densities
        delta: (..., S) spacings

    Returns:
        RenderResult with rgb of shape (..., 3)
    """
    rgb = np.asarray(rgb, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    _validate(rgb, sigma, delta)
    optical = sigma * delta
    cumulative = np.cumsum(optical, axis=-1)
    transmittance = np.exp(-(cumulative - optical))
    alpha = -np.expm1(-optical)
    color = np.clip(np.einsum("...s,...sc->...c", transmittance * alpha, rgb), 0.0, 1.0)
    return RenderResult(color, transmittance, alpha, np.exp(-cumulative[..., -1]))


def composite_backward(rgb, sigma, delta, upstream, result: RenderResult = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Gradients of upstream . C_hat with respect to colors and densities.

    d/dc_i = g T_i alpha_i
    d/dsigma_i = delta_i (T_{i+1} g.c_i - sum_{k>i} w_k g.c_k)

    Returns:
        d_rgb: (..., S, 3), d_sigma: (..., S)
    """
    rgb = np.asarray(rgb, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    if result is None:
        result = composite(rgb, sigma, delta)
    upstream = np.asarray(upstream, dtype=np.float64)
    weights = result.weights
    d_rgb = weights[..., None] * upstream[..., None, :]
    gc = np.einsum("...sc,...c->...s", rgb, upstream)
    weighted = weights * gc
    # suffix sums over k > i
    after = np.cumsum(weighted[..., ::-1], axis=-1)[..., ::-1] - weighted
    t_next = result.transmittance * (1.0 - result.alpha)
    d_sigma = delta * (t_next * gc - after)
    return d_rgb, d_sigma


def loss_mse(rendered, truth) -> Tuple[float, np.ndarray]:
    """Mean over rays of the squared color error, and its gradient (2/V)(C_hat - C)."""
    rendered = np.asarray(rendered, dtype=np.float64).reshape(-1, 3)
    truth = np.asarray(truth, dtype=np.float64).reshape(-1, 3)
    if rendered.shape != truth.shape:
        raise RenderError(f"{len(rendered)} rendered colors vs {len(truth)} ground-truth colors")
    if not len(rendered):
        raise RenderError("loss needs at least one ray")
    diff = rendered - truth
    V = len(rendered)
    return float(np.sum(diff * diff) / V), (2.0 / V) * diff


def adam_step(store: ParamStore, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """Bias-corrected Adam update from the accumulated gradient; zeroes the accumulator."""
    store.step += 1
    g = store.grad
    store.m *= beta1
    store.m += (1.0 - beta1) * g
    store.v *= beta2
    store.v += (1.0 - beta2) * (g * g)
    bc1 = 1.0 - beta1 ** store.step
    bc2 = 1.0 - beta2 ** store.step
    store.params -= (lr / bc1) * store.m / (np.sqrt(store.v / bc2) + eps)
    store.zero_grad()


def psnr(img, ref) -> float:
    """Peak signal-to-noise ratio for images in [0, 1], capped at 99 dB."""
    img = np.asarray(img, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if img.shape != ref.shape:
        raise RenderError(f"image shapes differ: {img.shape} vs {ref.shape}")
    mse = float(np.mean((img - ref) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))
