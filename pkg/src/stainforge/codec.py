"""Frozen image <-> latent codec standing in for a pretrained VAE.

``identity`` keeps diffusion in pixel space. ``tiny_ae`` is a small
convolutional autoencoder with 4x spatial downsampling and 4 latent
channels, pretrained once and then frozen. Both expect model-range images in
[-1, 1]; :func:`to_model_range` / :func:`to_image_range` convert from and to
the [0, 1] file convention.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tf
from .optim import OptimConfig, OptimizerState, adam_step
from .tensor import NumericError, Tensor

log = logging.getLogger(__name__)


@dataclass
class Codec:
    kind: str = "identity"
    latent_channels: int = 3
    spatial_factor: int = 1
    frozen: bool = True
    params: dict[str, Tensor] = field(default_factory=dict)
    latent_scale: float = 1.0
    usable: bool = True
    flags: list[str] = field(default_factory=list)
    history: list[float] = field(default_factory=list)

    def freeze(self) -> "Codec":
        for t in self.params.values():
            t.requires_grad = False
            t.grad = None
        self.frozen = True
        return self


def identity_codec() -> Codec:
    return Codec()


def to_model_range(img):
    return img * 2.0 - 1.0 if not isinstance(img, Tensor) else tf.scale_shift(img, 2.0, -1.0)


def to_image_range(img):
    return (img + 1.0) * 0.5 if not isinstance(img, Tensor) else tf.scale_shift(img, 0.5, 0.5)


def replicate_channels(img):
    """[1, H, W] -> [3, H, W] (leading batch axes allowed)."""
    arr = img.data if isinstance(img, Tensor) else np.asarray(img)
    if arr.ndim < 3 or arr.shape[-3] != 1:
        raise ValueError(f"expected a single-channel image [..., 1, H, W], got {arr.shape}")
    if isinstance(img, Tensor):
        return tf.concat([img, img, img], axis=img.ndim - 3)
    return np.repeat(arr, 3, axis=-3)


def average_channels(img):
    """[3, H, W] -> [1, H, W] per-pixel mean (leading batch axes allowed)."""
    arr = img.data if isinstance(img, Tensor) else np.asarray(img)
    if arr.ndim < 3 or arr.shape[-3] != 3:
        raise ValueError(f"expected a three-channel image [..., 3, H, W], got {arr.shape}")
    if isinstance(img, Tensor):
        return tf.reduce("mean", img, axes=img.ndim - 3, keepdims=True)
    return arr.mean(axis=-3, keepdims=True, dtype=arr.dtype)


# ---------------------------------------------------------------------------
# tiny autoencoder
# ---------------------------------------------------------------------------

_ENC = [  # name, cin, cout, stride
    ("enc0", 3, 32, 1),
    ("enc1", 32, 32, 2),
    ("enc2", 32, 32, 1),
    ("enc3", 32, 64, 2),
    ("enc4", 64, 4, 1),
]
_DEC = [  # name, cin, cout, upsample-before
    ("dec0", 4, 64, False),
    ("dec1", 64, 32, True),
    ("dec2", 32, 32, False),
    ("dec3", 32, 32, True),
    ("dec4", 32, 3, False),
]


def tiny_ae(seed: int = 0) -> Codec:
    """Randomly initialised (untrained, unusable) tiny autoencoder."""
    rng = np.random.default_rng(seed)
    dtype = tf.default_dtype()
    params = {}
    for name, cin, cout, _ in _ENC + _DEC:
        w = rng.standard_normal((cout, cin, 3, 3)) * math.sqrt(2.0 / (cin * 9))
        params[f"{name}.w"] = Tensor(w.astype(dtype))
        params[f"{name}.b"] = Tensor(np.zeros(cout, dtype=dtype))
    return Codec(kind="tiny_ae", latent_channels=4, spatial_factor=4, frozen=True, params=params, usable=False, flags=["untrained"])


def _batched(x):
    t = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=tf.default_dtype()))
    single = t.ndim == 3
    return (tf.reshape(t, (1,) + t.shape) if single else t), single


def _unbatch(t: Tensor, single: bool, as_numpy: bool):
    if single:
        t = tf.reshape(t, t.shape[1:])
    return t.data if as_numpy else t


def _ae_encode(c: Codec, x: Tensor) -> Tensor:
    h = x
    for i, (name, _, _, stride) in enumerate(_ENC):
        h = tf.conv2d(h, c.params[f"{name}.w"], c.params[f"{name}.b"], stride=stride, padding=1)
        if i < len(_ENC) - 1:
            h = tf.silu(h)
    return h


def _ae_decode(c: Codec, z: Tensor) -> Tensor:
    h = z
    for i, (name, _, _, up) in enumerate(_DEC):
        if up:
            h = tf.upsample_nearest(h)
        h = tf.conv2d(h, c.params[f"{name}.w"], c.params[f"{name}.b"])
        if i < len(_DEC) - 1:
            h = tf.silu(h)
    return h


def encode(c: Codec, image):
    """Model-range image(s) [.., 3, H, W] -> latent(s)."""
    as_numpy = not isinstance(image, Tensor)
    shape = image.shape
    if shape[-3] != 3:
        raise ValueError(f"encode expects 3 channels, got {shape}")
    if shape[-1] % c.spatial_factor or shape[-2] % c.spatial_factor:
        raise ValueError(f"spatial size {shape[-2:]} not divisible by {c.spatial_factor}")
    if c.kind == "identity":
        return image
    x, single = _batched(image)
    z = _ae_encode(c, x)
    if c.latent_scale != 1.0:
        z = z * c.latent_scale
    return _unbatch(z, single, as_numpy)


def decode(c: Codec, latent):
    """Latent(s) -> model-range image(s); differentiable w.r.t. the latent."""
    as_numpy = not isinstance(latent, Tensor)
    if latent.shape[-3] != c.latent_channels:
        raise ValueError(f"latent has {latent.shape[-3]} channels, codec expects {c.latent_channels}")
    if c.kind == "identity":
        return latent
    z, single = _batched(latent)
    if c.latent_scale != 1.0:
        z = z * (1.0 / c.latent_scale)
    return _unbatch(_ae_decode(c, z), single, as_numpy)


def pretrain_tiny_ae(images: np.ndarray, epochs: int, seed: int, batch_size: int = 16, lr: float = 2e-3) -> Codec:
    """Fit a tiny autoencoder on model-range images [N, 3, H, W], then freeze it.

    Latents are rescaled to unit variance over ``images``. The returned codec
    is flagged (``flags``) if the per-epoch mean loss ever went up, and is
    marked unusable after zero epochs.
    """
    images = np.asarray(images, dtype=np.float32)
    if images.ndim != 4 or len(images) == 0:
        raise ValueError("need a non-empty [N, 3, H, W] image array")
    codec = tiny_ae(seed)
    if epochs <= 0:
        return codec
    for t in codec.params.values():
        t.requires_grad = True
        t.grad = np.zeros_like(t.data)
    codec.frozen = False
    state = OptimizerState.create(codec.params, OptimConfig(lr=lr, warmup=20, horizon=max(1, epochs * math.ceil(len(images) / batch_size))))
    rng = np.random.default_rng(seed)
    history = []
    for epoch in range(epochs):
        order = rng.permutation(len(images))
        losses = []
        for start in range(0, len(images), batch_size):
            batch = Tensor(images[order[start : start + batch_size]])
            for t in codec.params.values():
                t.zero_grad()
            recon = _ae_decode(codec, _ae_encode(codec, batch))
            loss = tf.reduce("mean", tf.square(recon - batch))
            if not np.isfinite(loss.item()):
                raise NumericError("autoencoder pretraining diverged")
            tf.backward(loss)
            adam_step(codec.params, state)
            losses.append(loss.item())
        history.append(float(np.mean(losses)))
        log.debug("tiny_ae epoch %d loss %.5f", epoch, history[-1])
    codec.flags = []
    if any(b > a for a, b in zip(history, history[1:])):
        codec.flags.append("non_monotone_loss")
    codec.freeze()
    with tf.no_grad():
        z = np.concatenate([_ae_encode(codec, Tensor(images[i : i + 64])).data for i in range(0, len(images), 64)])
    codec.latent_scale = float(1.0 / max(z.std(), 1e-8))
    codec.usable = True
    codec.history = history
    return codec
