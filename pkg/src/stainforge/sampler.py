"""Inference: deterministic DDIM, single-step prediction, test-time ensembles.

All paths share one loop over a decreasing timestep list. Single-step is
that loop with the list ``[T]`` and a zero start, which is also exactly what
stage-2 fine-tuning optimises. Outputs are single-channel images clamped to
[0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as tf
from .codec import Codec, average_channels, decode, encode, to_image_range, to_model_range
from .denoiser import DenoiserParams, MarkerCondition, MarkerPanel, forward
from .schedule import NoiseSchedule, NoiseSpec, make_schedule, recover_eps, recover_z0, sample_noise

# (x, z_t, t, markers) -> v, all numpy, batched on the leading axis
Denoiser = Callable[[np.ndarray, np.ndarray, np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class SamplerConfig:
    mode: str = "ddim"
    ddim_steps: int = 50
    ensemble: int = 1
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    seed: int = 0
    T: int = 1000

    def __post_init__(self):
        if self.mode not in ("ddim", "single_step"):
            raise ValueError(f"unknown sampling mode {self.mode!r}")
        if self.ensemble < 1:
            raise ValueError("ensemble must be >= 1")
        if not 1 <= self.ddim_steps <= self.T:
            raise ValueError(f"ddim_steps must lie in 1..{self.T}")
        if self.mode == "single_step" and (self.ddim_steps != 1 or self.noise.kind != "zero" or self.ensemble != 1):
            object.__setattr__(self, "ddim_steps", 1)
            object.__setattr__(self, "ensemble", 1)
            object.__setattr__(self, "noise", NoiseSpec("zero"))

    @classmethod
    def single_step(cls, T: int = 1000) -> "SamplerConfig":
        return cls(mode="single_step", ddim_steps=1, noise=NoiseSpec("zero"), T=T)


def ddim_timesteps(T: int, steps: int) -> np.ndarray:
    """Evenly spaced decreasing timesteps that start at ``T``."""
    if not 1 <= steps <= T:
        raise ValueError(f"step count must lie in 1..{T}, got {steps}")
    ts = np.round(np.arange(T, 0, -T / steps)).astype(np.int64)[:steps]
    if len(np.unique(ts)) != steps or ts[-1] < 1:
        raise ValueError(f"cannot place {steps} distinct steps in 1..{T}")
    return ts


def network_denoiser(params: DenoiserParams, T: int) -> Denoiser:
    def fn(x, z_t, t, markers):
        return forward(params, x, z_t, t, markers, T=T).data

    return fn


def ddim_loop(denoise: Denoiser, x: np.ndarray, z_start: np.ndarray, markers, timesteps, schedule: NoiseSchedule) -> np.ndarray:
    """Run eta = 0 DDIM from ``z_start`` and return the final clean-latent estimate."""
    z = np.asarray(z_start)
    n = len(z)
    z0_hat = z
    for i, t in enumerate(timesteps):
        t_vec = np.full(n, int(t))
        v = np.asarray(denoise(x, z, t_vec, markers), dtype=z.dtype)
        z0_hat = recover_z0(z, v, t_vec, schedule)
        if i == len(timesteps) - 1:
            break
        eps_hat = recover_eps(z, v, t_vec, schedule)
        ab_prev = schedule.alpha_bars[int(timesteps[i + 1]) - 1]
        z = (np.sqrt(ab_prev) * z0_hat + np.sqrt(1.0 - ab_prev) * eps_hat).astype(z.dtype)
    return z0_hat


def _to_pixels(codec: Codec, z0_hat: np.ndarray) -> np.ndarray:
    img = average_channels(to_image_range(decode(codec, z0_hat)))
    return np.clip(img, 0.0, 1.0)


def _source_latents(codec: Codec, sources: np.ndarray, dtype) -> np.ndarray:
    sources = np.asarray(sources, dtype=dtype)
    if sources.ndim != 4 or sources.shape[1] != 3:
        raise ValueError(f"expected sources [N, 3, H, W], got {sources.shape}")
    return np.asarray(encode(codec, to_model_range(sources)), dtype=dtype)


def sample_batch(params: DenoiserParams | None, codec: Codec, sources, markers, cfg: SamplerConfig, seeds=None,
                 denoiser: Denoiser | None = None) -> np.ndarray:
    """Sample one image per (source, marker) row; returns [N, 1, H, W].

    ``seeds`` gives the start-noise seed of every row (default ``cfg.seed``).
    ``denoiser`` replaces the network, e.g. with an analytic oracle.
    """
    dtype = params["in.w"].dtype if params is not None else tf.default_dtype()
    schedule = make_schedule(cfg.T)
    denoise = denoiser or network_denoiser(params, cfg.T)
    markers = np.asarray([m.marker_index if isinstance(m, MarkerCondition) else int(m) for m in np.atleast_1d(markers)])
    with tf.no_grad():
        x = _source_latents(codec, sources, dtype)
        if len(markers) != len(x):
            raise ValueError("need one marker per source row")
        seeds = np.full(len(x), cfg.seed) if seeds is None else np.asarray(seeds)
        z_start = np.stack([sample_noise(cfg.noise, x.shape[1:], int(s), dtype) for s in seeds])
        z0_hat = ddim_loop(denoise, x, z_start, markers, ddim_timesteps(cfg.T, cfg.ddim_steps), schedule)
        return _to_pixels(codec, z0_hat)


def _single(source) -> np.ndarray:
    src = np.asarray(source)
    if src.ndim != 3 or src.shape[0] != 3:
        raise ValueError(f"expected a source image [3, H, W], got {src.shape}")
    return src[None]


def ddim_sample(params, codec: Codec, source_image, c: MarkerCondition | int, cfg: SamplerConfig, denoiser: Denoiser | None = None) -> np.ndarray:
    """One DDIM sample [1, H, W] started from ``cfg.noise`` drawn with ``cfg.seed``."""
    return sample_batch(params, codec, _single(source_image), [c], cfg, denoiser=denoiser)[0]


def single_step_sample(params, codec: Codec, source_image, c: MarkerCondition | int, T: int = 1000) -> np.ndarray:
    """One pass at t = T from the zero field. Draws no random numbers."""
    return sample_batch(params, codec, _single(source_image), [c], SamplerConfig.single_step(T))[0]


def ensemble_sample(params, codec: Codec, source_image, c: MarkerCondition | int, cfg: SamplerConfig,
                    return_members: bool = False, denoiser: Denoiser | None = None):
    """Pixel-wise mean of ``cfg.ensemble`` DDIM samples seeded ``seed .. seed + k - 1``."""
    k = cfg.ensemble
    if k < 1:
        raise ValueError("ensemble must be >= 1")
    src = np.repeat(_single(source_image), k, axis=0)
    members = sample_batch(params, codec, src, [c] * k, cfg, seeds=cfg.seed + np.arange(k), denoiser=denoiser)
    mean = members.mean(axis=0, dtype=np.float64).astype(members.dtype) if k > 1 else members[0]
    return (mean, members) if return_members else mean


def check_panel(params: DenoiserParams, panel: MarkerPanel | tuple) -> MarkerPanel:
    panel = panel if isinstance(panel, MarkerPanel) else MarkerPanel(panel)
    if params.panel is not None and params.panel.names != panel.names:
        raise ValueError(f"panel {panel.names} does not match the model's panel {params.panel.names}")
    return panel


def predict(params: DenoiserParams, codec: Codec, sources, panel, cfg: SamplerConfig | None = None, markers=None,
            chunk: int = 32) -> np.ndarray:
    """Images for every (source, marker) pair: [N, K, 1, H, W].

    ``markers`` selects panel indices (default: all, in panel order). Ensembles
    use the member seeds of :func:`ensemble_sample` (``cfg.seed + i``).
    """
    panel = check_panel(params, panel)
    cfg = cfg or SamplerConfig.single_step()
    sources = np.asarray(sources)
    sel = np.arange(panel.M) if markers is None else np.asarray(markers)
    n, K, k = len(sources), len(sel), cfg.ensemble
    rows_src = np.repeat(np.arange(n), K * k)
    rows_mk = np.tile(np.repeat(sel, k), n)
    rows_seed = np.tile(cfg.seed + np.arange(k), n * K)
    out = []
    for i in range(0, len(rows_src), chunk):
        s = slice(i, i + chunk)
        out.append(sample_batch(params, codec, sources[rows_src[s]], rows_mk[s], cfg, seeds=rows_seed[s]))
    imgs = np.concatenate(out).reshape((n, K, k) + out[0].shape[1:])
    if k == 1:
        return imgs[:, :, 0]
    return imgs.mean(axis=2, dtype=np.float64).astype(imgs.dtype)


def generate_panel(params: DenoiserParams, codec: Codec, source_image, panel, cfg: SamplerConfig | None = None) -> list[np.ndarray]:
    """One [1, H, W] image per panel marker, in panel order (single-step by default)."""
    imgs = predict(params, codec, _single(source_image), panel, cfg)
    return [imgs[0, m] for m in range(imgs.shape[1])]
