"""Diffusion noise schedule and the closed-form v-parameterization.

Timesteps are 1-indexed (``t in 1..T``); ``alpha_bars[t - 1]`` holds
alpha-bar at step ``t``. Every function accepts a scalar ``t`` or an integer
array with one timestep per leading batch item.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    betas: np.ndarray
    alpha_bars: np.ndarray

    def __post_init__(self):
        self.betas.flags.writeable = False
        self.alpha_bars.flags.writeable = False

    def alpha_bar(self, t) -> np.ndarray:
        """alpha-bar at 1-indexed ``t``; ``t = 0`` maps to 1 (clean signal)."""
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t > self.T):
            raise ValueError(f"timestep out of range 1..{self.T}: {t}")
        padded = np.concatenate([[1.0], self.alpha_bars])
        return padded[t]


def make_schedule(T: int = 1000, beta_start: float = 0.00085, beta_end: float = 0.012, kind: str = "scaled_linear") -> NoiseSchedule:
    """Build beta / alpha-bar tables in float64.

    ``scaled_linear`` interpolates linearly in sqrt(beta) space;
    ``linear`` interpolates beta directly.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    if kind == "linear":
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    elif kind == "scaled_linear":
        betas = np.linspace(math.sqrt(beta_start), math.sqrt(beta_end), T, dtype=np.float64) ** 2
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    alpha_bars = np.cumprod(1.0 - betas)
    return NoiseSchedule(T=T, betas=betas, alpha_bars=alpha_bars)


def _coef(s: NoiseSchedule, t, like) -> tuple:
    t_arr = np.asarray(t)
    if t_arr.dtype.kind not in "iu":
        raise TypeError("timesteps must be integers")
    if np.any(t_arr < 1) or np.any(t_arr > s.T):
        raise ValueError(f"timestep out of range 1..{s.T}")
    ab = s.alpha_bars[t_arr - 1]
    dtype = like.dtype
    ndim = like.ndim
    if ab.ndim:
        ab = ab.reshape(ab.shape + (1,) * (ndim - ab.ndim))
    a = np.sqrt(ab).astype(dtype)
    b = np.sqrt(1.0 - ab).astype(dtype)
    return a, b


def _combine(a, x, b, y):
    # Works for numpy arrays and Tensors (Tensor overloads * and +/-).
    return a * x + b * y


def forward_diffuse(z0, t, eps, s: NoiseSchedule):
    """``sqrt(ab_t) * z0 + sqrt(1 - ab_t) * eps``."""
    _same_shape(z0, eps)
    a, b = _coef(s, t, z0)
    return _combine(a, z0, b, eps)


def v_target(z0, eps, t, s: NoiseSchedule):
    """``sqrt(ab_t) * eps - sqrt(1 - ab_t) * z0``."""
    _same_shape(z0, eps)
    a, b = _coef(s, t, z0)
    return _combine(a, eps, -b, z0)


def recover_z0(z_t, v, t, s: NoiseSchedule):
    """Clean-latent estimate ``sqrt(ab_t) * z_t - sqrt(1 - ab_t) * v``."""
    _same_shape(z_t, v)
    a, b = _coef(s, t, z_t)
    return _combine(a, z_t, -b, v)


def recover_eps(z_t, v, t, s: NoiseSchedule):
    """Noise estimate ``sqrt(1 - ab_t) * z_t + sqrt(ab_t) * v``."""
    _same_shape(z_t, v)
    a, b = _coef(s, t, z_t)
    return _combine(b, z_t, a, v)


def _same_shape(x, y) -> None:
    if tuple(x.shape) != tuple(y.shape):
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")


# ---------------------------------------------------------------------------
# noise fields
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NoiseSpec:
    """How starting / training noise is drawn.

    ``pyramid_levels=None`` means ``floor(log2(min(H, W)))``.
    """

    kind: str = "gaussian"
    pyramid_levels: int | None = None
    level_decay: float = 0.5

    def __post_init__(self):
        if self.kind not in ("gaussian", "multi_resolution", "zero"):
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if not 0 < self.level_decay < 1:
            raise ValueError("level_decay must lie in (0, 1)")
        if self.pyramid_levels is not None and self.pyramid_levels < 1:
            raise ValueError("pyramid_levels must be >= 1")


def sample_noise(spec: NoiseSpec, shape, seed, dtype=np.float32) -> np.ndarray:
    """Draw a noise field of ``shape`` (spatial axes last) from ``seed``.

    Multi-resolution noise sums nearest-upsampled standard-normal fields at
    resolutions H/2^l, weighted by ``level_decay**l``, and divides by the
    root of the summed squared weights so every pixel has unit variance.
    """
    shape = tuple(int(n) for n in shape)
    if spec.kind == "zero":
        return np.zeros(shape, dtype=dtype)
    rng = np.random.default_rng(seed)
    field = rng.standard_normal(shape)
    if spec.kind == "gaussian":
        return field.astype(dtype)
    h, w = shape[-2:]
    levels = spec.pyramid_levels
    if levels is None:
        levels = max(1, int(math.floor(math.log2(min(h, w)))))
    if min(h, w) < 2 ** (levels - 1):
        raise ValueError(f"spatial size {h}x{w} too small for {levels} pyramid levels")
    total_w2 = 1.0
    for lvl in range(1, levels):
        f = 2**lvl
        hl, wl = -(-h // f), -(-w // f)
        coarse = rng.standard_normal(shape[:-2] + (hl, wl))
        up = np.repeat(np.repeat(coarse, f, axis=-2), f, axis=-1)[..., :h, :w]
        weight = spec.level_decay**lvl
        field += weight * up
        total_w2 += weight * weight
    field /= math.sqrt(total_w2)
    return field.astype(dtype)
