"""Two-stage training: latent v-prediction, then single-step pixel fine-tuning.

Stage 1 pairs every source latent with all M marker latents, so one step
updates the network on every marker. Stage 2 runs the single-step path
(zero target input at t = T) through the frozen decoder and fits pixels with
a blend of absolute and squared error.

Every random draw of step ``k`` comes from ``SeedSequence([seed, stage, k])``,
so a run resumed at step ``k`` matches an uninterrupted run bit for bit.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tf
from .codec import Codec, average_channels, decode, encode, replicate_channels, to_image_range, to_model_range
from .data import PatchRecord
from .denoiser import DenoiserParams, MarkerPanel, forward
from .optim import OptimConfig, OptimizerState, adam_step
from .schedule import NoiseSchedule, NoiseSpec, forward_diffuse, make_schedule, recover_z0, sample_noise, v_target
from .tensor import NumericError, Tensor

log = logging.getLogger(__name__)


@dataclass
class Stage1Config:
    steps: int = 4000
    batch_size: int = 2
    T: int = 1000
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    optim: OptimConfig = field(default_factory=OptimConfig)
    seed: int = 0
    augment: bool = True

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")


@dataclass
class Stage2Config:
    steps: int = 1000
    batch_size: int = 2
    lam: float = 0.5
    marker_rate: float = 1.0
    z_input: str = "zero"  # or "signal": sqrt(ab_T) * z0, kept for comparison
    T: int = 1000
    optim: OptimConfig = field(default_factory=OptimConfig)
    seed: int = 0
    augment: bool = True

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")
        if not 0.0 < self.marker_rate <= 1.0:
            raise ValueError("marker_rate must lie in (0, 1]")
        if self.z_input not in ("zero", "signal"):
            raise ValueError(f"unknown z_input {self.z_input!r}")
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")


@dataclass
class TrainLog:
    records: list[dict] = field(default_factory=list)
    checkpoints: list[str] = field(default_factory=list)
    optimizer: OptimizerState | None = None
    path: Path | None = None

    def append(self, record: dict) -> None:
        self.records.append(record)
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(record) + "\n")

    def losses(self) -> np.ndarray:
        return np.array([r["loss"] for r in self.records])

    @staticmethod
    def read(path) -> list[dict]:
        return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


# ---------------------------------------------------------------------------
# data preparation
# ---------------------------------------------------------------------------


@dataclass
class LatentSet:
    """Encoded training pairs.

    ``x``: source latents [N, C, h, w]; ``z0``: marker latents [N, M, C, h, w];
    ``pixels``: marker images in [0, 1], [N, M, 1, H, W].
    """

    x: np.ndarray
    z0: np.ndarray
    pixels: np.ndarray
    panel: MarkerPanel

    def __len__(self) -> int:
        return len(self.x)


def _encode_all(codec: Codec, images: np.ndarray, chunk: int = 64) -> np.ndarray:
    with tf.no_grad():
        return np.concatenate([np.asarray(encode(codec, images[i : i + chunk])) for i in range(0, len(images), chunk)])


def prepare_latents(records: list[PatchRecord], codec: Codec, panel: MarkerPanel) -> LatentSet:
    """Encode sources and (channel-replicated) markers once, up front."""
    if not records:
        raise ValueError("empty dataset")
    for r in records:
        missing = [m for m in panel.names if m not in r.markers]
        if missing:
            raise KeyError(f"record {r.id} lacks marker channels {missing}")
    dtype = tf.default_dtype()
    src = np.stack([r.source for r in records]).astype(dtype)
    pix = np.stack([np.stack([r.markers[m] for m in panel.names]) for r in records]).astype(dtype)
    n, M = pix.shape[:2]
    x = _encode_all(codec, to_model_range(src))
    marker_rgb = replicate_channels(to_model_range(pix.reshape((n * M,) + pix.shape[2:])))
    z0 = _encode_all(codec, marker_rgb).reshape((n, M) + x.shape[1:])
    return LatentSet(x.astype(dtype), z0.astype(dtype), pix, panel)


def _dihedral(a: np.ndarray, k: int) -> np.ndarray:
    """One of the 8 flips/rotations of the last two axes."""
    if k >= 4:
        a = a[..., ::-1]
    return np.rot90(a, k % 4, axes=(-2, -1))


def step_rng(seed: int, stage: int, step: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, stage, step]))


def _draw_items(rng: np.random.Generator, data: LatentSet, batch_size: int, augment: bool):
    idx = rng.choice(len(data), size=min(batch_size, len(data)), replace=False)
    ks = rng.integers(0, 8, size=len(idx)) if augment else np.zeros(len(idx), dtype=int)
    x = np.stack([_dihedral(data.x[i], k) for i, k in zip(idx, ks)])
    z0 = np.stack([_dihedral(data.z0[i], k) for i, k in zip(idx, ks)])
    pix = np.stack([_dihedral(data.pixels[i], k) for i, k in zip(idx, ks)])
    return idx, np.ascontiguousarray(x), np.ascontiguousarray(z0), np.ascontiguousarray(pix)


# ---------------------------------------------------------------------------
# stage 1
# ---------------------------------------------------------------------------


def stage1_loss(params: DenoiserParams, batch: dict, t, eps, panel: MarkerPanel, schedule: NoiseSchedule | None = None,
                model=None):
    """Mean over markers of the per-marker v-prediction MSE.

    ``batch["x"]`` is [B, C, h, w], ``batch["z0"]`` is [B, M, C, h, w];
    ``t`` is [B, M] and ``eps`` matches ``z0``. ``model(x, z_t, t, markers)``
    replaces the network when given. Returns the loss Tensor and the
    per-marker values as a numpy array.
    """
    schedule = schedule or make_schedule()
    x, z0 = np.asarray(batch["x"]), np.asarray(batch["z0"])
    B, M = z0.shape[:2]
    if M != panel.M:
        raise KeyError(f"batch has {M} marker channels, panel has {panel.M}")
    t = np.asarray(t)
    if t.shape != (B, M):
        raise ValueError(f"need one timestep per (item, marker): expected {(B, M)}, got {t.shape}")
    flat = (B * M,) + z0.shape[2:]
    t_flat = t.reshape(-1)
    z0_f = z0.reshape(flat)
    eps_f = np.asarray(eps).reshape(flat)
    x_rep = np.repeat(x, M, axis=0)
    markers = np.tile(np.arange(M), B)
    z_t = forward_diffuse(z0_f, t_flat, eps_f, schedule)
    target = v_target(z0_f, eps_f, t_flat, schedule)
    if model is None:
        v_hat = forward(params, x_rep, z_t, t_flat, markers, T=schedule.T)
    else:
        v_hat = model(x_rep, z_t, t_flat, markers)
    err = tf.square(v_hat - Tensor(target.astype(v_hat.dtype)))
    per_item = tf.reduce("mean", err, axes=(1, 2, 3))  # [B*M]
    per_marker = tf.reduce("mean", tf.reshape(per_item, (B, M)), axes=0)
    return tf.reduce("mean", per_marker), per_marker.data.copy()


def _require_frozen(codec: Codec) -> None:
    if not codec.frozen or any(p.requires_grad for p in codec.params.values()):
        raise ValueError("codec must be frozen before training the denoiser")


def _as_latents(dataset, codec: Codec, panel: MarkerPanel) -> LatentSet:
    if isinstance(dataset, LatentSet):
        if dataset.panel.names != panel.names:
            raise ValueError(f"dataset panel {dataset.panel.names} differs from {panel.names}")
        return dataset
    return prepare_latents(list(dataset), codec, panel)


def _start(params: DenoiserParams, optim: OptimConfig, resume: OptimizerState | None):
    params = params.copy().requires_grad_(True)
    if resume is None:
        return params, OptimizerState.create(params.tensors, optim)
    state = OptimizerState(resume.config, resume.step, {k: v.copy() for k, v in resume.m.items()}, {k: v.copy() for k, v in resume.v.items()})
    return params, state


def _finish_step(params: DenoiserParams, state: OptimizerState, loss: Tensor, per_marker, names, stage: int) -> float:
    if not np.isfinite(loss.item()):
        detail = ", ".join(f"{n}={v:.4g}" for n, v in zip(names, per_marker))
        raise NumericError(f"stage {stage} step {state.step + 1}: non-finite loss ({detail})")
    params.zero_grad()
    tf.backward(loss)
    return adam_step(params.tensors, state)


def stage1_train(cfg: Stage1Config, dataset, codec: Codec, params: DenoiserParams, panel: MarkerPanel | None = None,
                 resume: OptimizerState | None = None, log_path=None, on_step=None) -> tuple[DenoiserParams, TrainLog]:
    """Run stage-1 steps ``resume.step + 1 .. cfg.steps`` and return new params.

    ``on_step(step, params, state)`` is called after every update (used for
    periodic checkpoints). The input ``params`` are not modified.
    """
    _require_frozen(codec)
    panel = panel or params.panel
    if panel is None:
        raise ValueError("a marker panel is required")
    data = _as_latents(dataset, codec, panel)
    schedule = make_schedule(cfg.T)
    params, state = _start(params, cfg.optim, resume)
    trace = TrainLog(path=Path(log_path) if log_path else None, optimizer=state)
    while state.step < cfg.steps:
        step = state.step + 1
        tic = time.perf_counter()
        rng = step_rng(cfg.seed, 1, step)
        _, x, z0, _ = _draw_items(rng, data, cfg.batch_size, cfg.augment)
        B, M = z0.shape[:2]
        t = rng.integers(1, cfg.T + 1, size=(B, M))
        eps = sample_noise(cfg.noise, z0.shape, rng.integers(2**63), dtype=z0.dtype)
        loss, per_marker = stage1_loss(params, {"x": x, "z0": z0}, t, eps, panel, schedule)
        lr = _finish_step(params, state, loss, per_marker, panel.names, 1)
        trace.append({"stage": 1, "step": step, "loss": loss.item(), "markers": dict(zip(panel.names, map(float, per_marker))),
                      "lr": lr, "seconds": time.perf_counter() - tic})
        if on_step is not None:
            ref = on_step(step, params, state)
            if ref:
                trace.checkpoints.append(str(ref))
    params.requires_grad_(False)
    return params, trace


# ---------------------------------------------------------------------------
# stage 2
# ---------------------------------------------------------------------------


def single_step_image(params: DenoiserParams, codec: Codec, x, markers, schedule: NoiseSchedule, z_in=None) -> Tensor:
    """Pixel prediction in [0, 1] (unclamped) from one pass at t = T.

    ``x`` is [N, C, h, w]; ``z_in`` defaults to the zero field. Returns
    [N, 1, H, W].
    """
    x = np.asarray(x)
    n = len(x)
    z = np.zeros_like(x) if z_in is None else np.asarray(z_in, dtype=x.dtype)
    t = np.full(n, schedule.T)
    v_hat = forward(params, x, z, t, markers, T=schedule.T)
    z0_hat = recover_z0(Tensor(z), v_hat, t, schedule)
    return average_channels(to_image_range(decode(codec, z0_hat)))


def pixel_loss(pred: Tensor, target, lam: float) -> Tensor:
    """Per-item ``(1 - lam) * mean|e| + lam * mean(e^2)`` with ``e = pred - target``."""
    diff = pred - Tensor(np.asarray(target, dtype=pred.dtype))
    terms = []
    if lam < 1.0:
        terms.append(tf.scale_shift(tf.absolute(diff), 1.0 - lam, 0.0))
    if lam > 0.0:
        terms.append(tf.scale_shift(tf.square(diff), lam, 0.0))
    per_pixel = terms[0] if len(terms) == 1 else terms[0] + terms[1]
    return tf.reduce("mean", per_pixel, axes=tuple(range(1, pred.ndim)))


def stage2_loss(params: DenoiserParams, codec: Codec, batch: dict, lam: float, panel: MarkerPanel,
                markers=None, schedule: NoiseSchedule | None = None, z_input: str = "zero"):
    """``mean_m [(1 - lam) * MAE_m + lam * MSE_m]`` in pixel space.

    ``batch["x"]``: [B, C, h, w]; ``batch["pixels"]``: [B, M, 1, H, W] in
    [0, 1]; ``batch["z0"]`` is needed only for ``z_input="signal"``.
    ``markers`` selects a subset of panel indices (default: all).
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    _require_frozen(codec)
    schedule = schedule or make_schedule()
    x, pix = np.asarray(batch["x"]), np.asarray(batch["pixels"])
    B, M = pix.shape[:2]
    if M != panel.M:
        raise KeyError(f"batch has {M} marker channels, panel has {panel.M}")
    sel = np.arange(M) if markers is None else np.asarray(markers)
    K = len(sel)
    x_rep = np.repeat(x, K, axis=0)
    marker_ids = np.tile(sel, B)
    target = pix[:, sel].reshape((B * K,) + pix.shape[2:])
    z_in = None
    if z_input == "signal":
        a = np.sqrt(schedule.alpha_bars[-1]).astype(x.dtype)
        z_in = a * np.asarray(batch["z0"])[:, sel].reshape(x_rep.shape)
    elif z_input != "zero":
        raise ValueError(f"unknown z_input {z_input!r}")
    pred = single_step_image(params, codec, x_rep, marker_ids, schedule, z_in)
    per_item = pixel_loss(pred, target, lam)
    per_marker = tf.reduce("mean", tf.reshape(per_item, (B, K)), axes=0)
    return tf.reduce("mean", per_marker), per_marker.data.copy()


def stage2_finetune(cfg: Stage2Config, dataset, codec: Codec, params: DenoiserParams, panel: MarkerPanel | None = None,
                    resume: OptimizerState | None = None, log_path=None, on_step=None) -> tuple[DenoiserParams, TrainLog]:
    """Fine-tune stage-1 params for single-step inference through the frozen decoder."""
    _require_frozen(codec)
    panel = panel or params.panel
    if panel is None:
        raise ValueError("a marker panel is required")
    data = _as_latents(dataset, codec, panel)
    schedule = make_schedule(cfg.T)
    params, state = _start(params, cfg.optim, resume)
    trace = TrainLog(path=Path(log_path) if log_path else None, optimizer=state)
    M = panel.M
    k = max(1, int(round(cfg.marker_rate * M)))
    while state.step < cfg.steps:
        step = state.step + 1
        tic = time.perf_counter()
        rng = step_rng(cfg.seed, 2, step)
        _, x, z0, pix = _draw_items(rng, data, cfg.batch_size, cfg.augment)
        sel = np.arange(M) if k == M else np.sort(rng.choice(M, size=k, replace=False))
        loss, per_marker = stage2_loss(params, codec, {"x": x, "z0": z0, "pixels": pix}, cfg.lam, panel, sel, schedule, cfg.z_input)
        lr = _finish_step(params, state, loss, per_marker, [panel.names[i] for i in sel], 2)
        trace.append({"stage": 2, "step": step, "loss": loss.item(), "markers": {panel.names[i]: float(v) for i, v in zip(sel, per_marker)},
                      "lr": lr, "seconds": time.perf_counter() - tic})
        if on_step is not None:
            ref = on_step(step, params, state)
            if ref:
                trace.checkpoints.append(str(ref))
    params.requires_grad_(False)
    return params, trace
