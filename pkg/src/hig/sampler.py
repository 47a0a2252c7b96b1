"""Deterministic ODE sampler with auto-guidance.

Integrates dx = ((x - D(x; sigma, c)) / sigma) dsigma from sigma_max down to
zero with Heun's method (plain Euler into the terminal zero). The guided
denoiser extrapolates the conditional primary model away from the
unconditional guide: D_guide + w * (D_primary - D_guide).

Models enter as callables so oracle denoisers test the integrator against
closed-form solutions; `model_denoisers` adapts a trained DenoiserModel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph import HeteroImageGraph


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 32
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    rho: float = 7.0
    guidance: float = 1.8
    seed: int = 0

    def __post_init__(self):
        if self.steps < 2:
            raise ValueError("need at least two steps")
        if not 0 < self.sigma_min < self.sigma_max:
            raise ValueError("need 0 < sigma_min < sigma_max")
        if self.guidance < 1.0:
            raise ValueError("guidance weight must be >= 1")


def sigma_steps(cfg: SamplerConfig) -> np.ndarray:
    """Descending noise levels sigma_0..sigma_{N-1} plus a terminal zero."""
    n = cfg.steps
    i = np.arange(n, dtype=np.float64)
    inv_rho = 1.0 / cfg.rho
    sig = (
        cfg.sigma_max**inv_rho
        + i / (n - 1) * (cfg.sigma_min**inv_rho - cfg.sigma_max**inv_rho)
    ) ** cfg.rho
    return np.concatenate([sig, [0.0]])


def autoguided_denoise(primary, guide, x, sigma, graph, w: float) -> np.ndarray:
    """D_guide(x) + w * (D_primary(x; graph) - D_guide(x))."""
    d_p = primary(x, sigma, graph)
    d_g = guide(x, sigma)
    if d_p.shape != d_g.shape:
        raise ValueError("primary and guide outputs disagree in shape")
    return d_g + w * (d_p - d_g)


def sample(
    primary,
    guide,
    graph: HeteroImageGraph | None,
    cfg: SamplerConfig,
    shape: tuple,
) -> np.ndarray:
    """Draw one batch of images deterministically from the config seed.

    `primary(x, sigma, graph)` and `guide(x, sigma)` return denoised arrays
    of the same shape as x; `shape` is the full (B, C, H, W) output shape.
    """
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x5A]))
    sig = sigma_steps(cfg)
    x = sig[0] * rng.standard_normal(shape)

    for i in range(cfg.steps):
        s_cur, s_next = sig[i], sig[i + 1]
        d_hat = autoguided_denoise(primary, guide, x, s_cur, graph, cfg.guidance)
        slope = (x - d_hat) / s_cur
        x_next = x + (s_next - s_cur) * slope
        if s_next > 0:
            d_hat2 = autoguided_denoise(
                primary, guide, x_next, s_next, graph, cfg.guidance
            )
            slope2 = (x_next - d_hat2) / s_next
            x_next = x + (s_next - s_cur) * 0.5 * (slope + slope2)
        x = x_next
        if not np.all(np.isfinite(x)):
            raise RuntimeError(f"non-finite sampler state at step {i}")
    return x


def model_denoisers(primary_model, guide_model):
    """Adapt trained models to the sampler's callables. The guide runs the
    base model unconditionally; the primary consumes the graph."""

    def primary(x, sigma, graph):
        return primary_model.denoise(x, sigma, graph=graph).values

    def guide(x, sigma):
        return guide_model.denoise(x, sigma).values

    return primary, guide


# ----------------------------------------------------------------------------
# Image emission: 8-bit PNG plus a float64 dump for bit-exact comparison.


def save_float_dump(path, arr: np.ndarray):
    np.save(path, np.asarray(arr, dtype=np.float64))


def load_float_dump(path) -> np.ndarray:
    return np.load(path)


def save_png(path, rgb_chw: np.ndarray):
    """Write a (3, H, W) array of [0, 1] floats as an 8-bit PNG."""
    from PIL import Image

    arr = np.asarray(rgb_chw)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ValueError("expected a (3, H, W) image")
    u8 = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(u8.transpose(1, 2, 0)).save(path, format="PNG")


def load_png(path) -> np.ndarray:
    from PIL import Image

    arr = np.asarray(Image.open(path), dtype=np.float64) / 255.0
    return arr.transpose(2, 0, 1)


def contact_sheet(images: list[np.ndarray], cols: int = 8) -> np.ndarray:
    """Tile (3, H, W) images into one grid image, row-major."""
    if not images:
        raise ValueError("no images to tile")
    c, h, w = images[0].shape
    cols = min(cols, len(images))
    rows = (len(images) + cols - 1) // cols
    sheet = np.zeros((c, rows * h, cols * w))
    for k, img in enumerate(images):
        r, cc = divmod(k, cols)
        sheet[:, r * h : (r + 1) * h, cc * w : (cc + 1) * w] = img
    return sheet
