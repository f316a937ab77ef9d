"""Marker-conditioned U-Net that predicts v from a (source, noisy target) pair.

Topology (``w`` = base width, ``d`` = embedding dim, ``C`` = latent channels)::

    in:    conv3x3  2C -> w
    enc0:  res(w, w), res(w, w)                  -> skip0
    down0: conv3x3/2  w -> w
    enc1:  res(w, 2w), res(2w, 2w)               -> skip1
    down1: conv3x3/2  2w -> 2w
    mid:   res(2w, 4w), res(4w, 4w)
    up1:   nearest x2, conv3x3 4w -> 2w, concat skip1
    dec1:  res(4w, 2w), res(2w, 2w)
    up0:   nearest x2, conv3x3 2w -> w, concat skip0
    dec0:  res(2w, w), res(w, w)
    out:   groupnorm, silu, conv3x3 w -> C  (zero initialised)

Each ``res(a, b)`` block is GN-SiLU-conv, plus a per-sample projection of the
conditioning vector, then GN-SiLU-conv, with a 1x1 skip conv when a != b.
Parameter count::

    res(a, b) = 2a + (9ab + b) + (db + b) + 2b + (9b^2 + b) + [a != b](ab + b)
    total     = 3(d^2 + d)                      # time MLP (2 layers), marker projection
              + (18Cw + w)                      # input conv
              + sum of res(a, b) over the ten blocks
              + (9w^2 + w) + (36w^2 + 2w)       # down0, down1
              + (72w^2 + 2w) + (18w^2 + w)      # up1, up0
              + 2w + (9wC + C)                  # output norm and conv

``param_count`` evaluates this from the same shape table ``init_params`` uses.

Conditioning is ``time_mlp(sinusoid(t)) + marker_proj(sinusoid(m))``; the
marker index enters only through that sum.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tf
from .tensor import Tensor

__all__ = [
    "MarkerPanel",
    "MarkerCondition",
    "DenoiserParams",
    "time_embedding",
    "marker_embedding",
    "adapt_input_channels",
    "init_params",
    "param_count",
    "forward",
]


@dataclass(frozen=True)
class MarkerPanel:
    names: tuple[str, ...]

    def __init__(self, names):
        names = tuple(str(n) for n in names)
        if not names:
            raise ValueError("a marker panel needs at least one marker")
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate marker names in panel: {names}")
        object.__setattr__(self, "names", names)

    @property
    def M(self) -> int:
        return len(self.names)

    def __len__(self) -> int:
        return len(self.names)

    def __iter__(self):
        return iter(self.names)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"unknown marker {name!r}; panel is {list(self.names)}") from None

    def condition(self, marker: str | int) -> "MarkerCondition":
        idx = self.index(marker) if isinstance(marker, str) else int(marker)
        return MarkerCondition.of(idx, self.M)


@dataclass(frozen=True)
class MarkerCondition:
    one_hot: np.ndarray
    marker_index: int

    def __post_init__(self):
        oh = np.asarray(self.one_hot, dtype=np.float64)
        if oh.ndim != 1 or not 0 <= self.marker_index < oh.size:
            raise ValueError("marker index outside the one-hot vector")
        if oh.sum() != 1.0 or oh[self.marker_index] != 1.0 or np.count_nonzero(oh) != 1:
            raise ValueError("one_hot must contain exactly one 1.0 at marker_index")

    @classmethod
    def of(cls, index: int, M: int) -> "MarkerCondition":
        # numpy would accept negative indices silently
        if not 0 <= index < M:
            raise ValueError(f"marker index {index} outside panel of {M}")
        oh = np.zeros(M)
        oh[index] = 1.0
        return cls(one_hot=oh, marker_index=int(index))


@dataclass
class DenoiserParams:
    tensors: dict[str, Tensor]
    c_lat: int
    width: int
    emb_dim: int
    groups: int = 8
    panel: MarkerPanel | None = None

    def __getitem__(self, key: str) -> Tensor:
        return self.tensors[key]

    def count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def requires_grad_(self, flag: bool = True) -> "DenoiserParams":
        for t in self.tensors.values():
            t.requires_grad = flag
            t.grad = np.zeros_like(t.data) if flag else None
        return self

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def copy(self) -> "DenoiserParams":
        tensors = {k: Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in self.tensors.items()}
        return DenoiserParams(tensors, self.c_lat, self.width, self.emb_dim, self.groups, self.panel)

    def astype(self, dtype) -> "DenoiserParams":
        tensors = {k: Tensor(v.data.astype(dtype), requires_grad=v.requires_grad) for k, v in self.tensors.items()}
        return DenoiserParams(tensors, self.c_lat, self.width, self.emb_dim, self.groups, self.panel)

    def arch(self) -> dict:
        return {"c_lat": self.c_lat, "width": self.width, "emb_dim": self.emb_dim, "groups": self.groups}


# ---------------------------------------------------------------------------
# embeddings
# ---------------------------------------------------------------------------


def _sinusoid(pos: np.ndarray, dim: int) -> np.ndarray:
    if dim % 2:
        raise ValueError(f"embedding dim must be even, got {dim}")
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = np.asarray(pos, dtype=np.float64)[..., None] * freqs
    out = np.empty(ang.shape[:-1] + (dim,))
    out[..., 0::2] = np.sin(ang)
    out[..., 1::2] = np.cos(ang)
    return out


def time_embedding(t, dim: int) -> np.ndarray:
    """Interleaved sin/cos of ``t`` over geometric frequencies."""
    return _sinusoid(np.asarray(t), dim)


def marker_embedding(c: MarkerCondition | int, dim: int, params: DenoiserParams | None = None):
    """Sinusoidal encoding of the marker index.

    With ``params`` the encoding is passed through the learned marker
    projection, giving the vector that is added to the time embedding.
    """
    idx = c.marker_index if isinstance(c, MarkerCondition) else int(c)
    enc = _sinusoid(np.asarray(idx), dim)
    if params is None:
        return enc
    if dim != params.emb_dim:
        raise ValueError(f"embedding dim {dim} does not match the network's {params.emb_dim}")
    w, b = params["marker.w"].data, params["marker.b"].data
    return (enc.astype(w.dtype) @ w.T + b)


def adapt_input_channels(weight) -> np.ndarray:
    """Double the input channels of a conv weight: concat(w/2, w/2)."""
    w = weight.data if isinstance(weight, Tensor) else np.asarray(weight)
    if w.ndim != 4:
        raise ValueError("expected a conv weight [Cout, Cin, kh, kw]")
    half = w / 2
    return np.concatenate([half, half], axis=1)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


def _blocks(width: int) -> list[tuple[str, int, int]]:
    w = width
    return [
        ("enc0_0", w, w),
        ("enc0_1", w, w),
        ("enc1_0", w, 2 * w),
        ("enc1_1", 2 * w, 2 * w),
        ("mid_0", 2 * w, 4 * w),
        ("mid_1", 4 * w, 4 * w),
        ("dec1_0", 4 * w, 2 * w),
        ("dec1_1", 2 * w, 2 * w),
        ("dec0_0", 2 * w, w),
        ("dec0_1", w, w),
    ]


def _shapes(c_lat: int, width: int, dim: int) -> dict[str, tuple[int, ...]]:
    w = width
    s: dict[str, tuple[int, ...]] = {
        "time.fc1.w": (dim, dim),
        "time.fc1.b": (dim,),
        "time.fc2.w": (dim, dim),
        "time.fc2.b": (dim,),
        "marker.w": (dim, dim),
        "marker.b": (dim,),
        "in.w": (w, 2 * c_lat, 3, 3),
        "in.b": (w,),
    }
    for name, a, b in _blocks(w):
        s[f"{name}.n1.g"] = (a,)
        s[f"{name}.n1.b"] = (a,)
        s[f"{name}.c1.w"] = (b, a, 3, 3)
        s[f"{name}.c1.b"] = (b,)
        s[f"{name}.emb.w"] = (b, dim)
        s[f"{name}.emb.b"] = (b,)
        s[f"{name}.n2.g"] = (b,)
        s[f"{name}.n2.b"] = (b,)
        s[f"{name}.c2.w"] = (b, b, 3, 3)
        s[f"{name}.c2.b"] = (b,)
        if a != b:
            s[f"{name}.skip.w"] = (b, a, 1, 1)
            s[f"{name}.skip.b"] = (b,)
    s["down0.w"] = (w, w, 3, 3)
    s["down0.b"] = (w,)
    s["down1.w"] = (2 * w, 2 * w, 3, 3)
    s["down1.b"] = (2 * w,)
    s["up1.w"] = (2 * w, 4 * w, 3, 3)
    s["up1.b"] = (2 * w,)
    s["up0.w"] = (w, 2 * w, 3, 3)
    s["up0.b"] = (w,)
    s["out.n.g"] = (w,)
    s["out.n.b"] = (w,)
    s["out.w"] = (c_lat, w, 3, 3)
    s["out.b"] = (c_lat,)
    return s


def param_count(c_lat: int, width: int, dim: int) -> int:
    return sum(int(np.prod(shape)) for shape in _shapes(c_lat, width, dim).values())


def init_params(c_lat: int, width: int, dim: int, seed: int, groups: int = 8, panel: MarkerPanel | None = None) -> DenoiserParams:
    """Kaiming fan-in initialisation; norm gains 1, biases 0, output conv 0.

    The input conv is drawn for ``c_lat`` channels and then widened with
    :func:`adapt_input_channels`, as when starting from a single-input net.
    """
    if width < 8 or width % groups:
        raise ValueError(f"width must be >= 8 and divisible by {groups} groups, got {width}")
    if dim % 2:
        raise ValueError("embedding dim must be even")
    rng = np.random.default_rng(seed)
    dtype = tf.default_dtype()
    tensors: dict[str, Tensor] = {}
    for name, shape in _shapes(c_lat, width, dim).items():
        if name == "in.w":
            fan_in = c_lat * 9
            base = rng.standard_normal((width, c_lat, 3, 3)) * math.sqrt(2.0 / fan_in)
            data = adapt_input_channels(base)
        elif name.startswith("out.") and not name.startswith("out.n"):
            data = np.zeros(shape)
        elif name.endswith(".g"):
            data = np.ones(shape)
        elif len(shape) == 1:
            data = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            data = rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)
        tensors[name] = Tensor(data.astype(dtype), requires_grad=True)
    return DenoiserParams(tensors, c_lat, width, dim, groups, panel)


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------


def _marker_indices(c, n: int) -> np.ndarray:
    if isinstance(c, MarkerCondition):
        return np.full(n, c.marker_index)
    if isinstance(c, (list, tuple)) and c and isinstance(c[0], MarkerCondition):
        return np.array([m.marker_index for m in c])
    idx = np.asarray(c).reshape(-1)
    return np.broadcast_to(idx, (n,)) if idx.size == 1 else idx


def _gn_silu(h: Tensor, p: DenoiserParams, key: str) -> Tensor:
    return tf.silu(tf.group_norm(h, p.groups, p[f"{key}.g"], p[f"{key}.b"]))


def _res(h: Tensor, cond: Tensor, p: DenoiserParams, name: str) -> Tensor:
    n = h.shape[0]
    y = tf.conv2d(_gn_silu(h, p, f"{name}.n1"), p[f"{name}.c1.w"], p[f"{name}.c1.b"])
    e = tf.linear(cond, p[f"{name}.emb.w"], p[f"{name}.emb.b"])
    y = y + tf.reshape(e, (n, e.shape[1], 1, 1))
    y = tf.conv2d(_gn_silu(y, p, f"{name}.n2"), p[f"{name}.c2.w"], p[f"{name}.c2.b"])
    skip = h
    if f"{name}.skip.w" in p.tensors:
        skip = tf.conv2d(h, p[f"{name}.skip.w"], p[f"{name}.skip.b"], padding=0)
    return skip + y


def conditioning(p: DenoiserParams, t, markers) -> Tensor:
    """``time_mlp(sinusoid(t)) + marker_proj(sinusoid(m))`` for a batch."""
    dtype = p["in.w"].dtype
    temb = Tensor(time_embedding(t, p.emb_dim).astype(dtype))
    h = tf.linear(tf.silu(tf.linear(temb, p["time.fc1.w"], p["time.fc1.b"])), p["time.fc2.w"], p["time.fc2.b"])
    menc = Tensor(_sinusoid(markers, p.emb_dim).astype(dtype))
    return h + tf.linear(menc, p["marker.w"], p["marker.b"])


def forward(p: DenoiserParams, x, z_t, t, c, T: int | None = None) -> Tensor:
    """Predict v for latents ``z_t`` given source latents ``x``.

    ``x`` and ``z_t`` are [C, h, w] or batched [N, C, h, w] (numpy or
    Tensor); ``t`` is an int or one timestep per item; ``c`` is a
    MarkerCondition, a list of them, or marker indices.
    """
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=p["in.w"].dtype))
    z_t = z_t if isinstance(z_t, Tensor) else Tensor(np.asarray(z_t, dtype=p["in.w"].dtype))
    if x.shape != z_t.shape:
        raise ValueError(f"source and target latents differ in shape: {x.shape} vs {z_t.shape}")
    single = x.ndim == 3
    if single:
        x = tf.reshape(x, (1,) + x.shape)
        z_t = tf.reshape(z_t, (1,) + z_t.shape)
    n, c_lat, h, w = x.shape
    if c_lat != p.c_lat:
        raise ValueError(f"latents have {c_lat} channels, network expects {p.c_lat}")
    if h % 4 or w % 4:
        raise ValueError(f"latent size {h}x{w} must be divisible by 4")
    t_arr = np.broadcast_to(np.asarray(t), (n,))
    if np.asarray(t).dtype.kind not in "iu" or np.any(t_arr < 1) or (T is not None and np.any(t_arr > T)):
        raise ValueError(f"invalid timestep {t}")
    markers = _marker_indices(c, n)
    cond = tf.silu(conditioning(p, t_arr, markers))

    hcur = tf.conv2d(tf.concat([x, z_t], axis=1), p["in.w"], p["in.b"])
    hcur = _res(hcur, cond, p, "enc0_0")
    skip0 = hcur = _res(hcur, cond, p, "enc0_1")
    hcur = tf.conv2d(hcur, p["down0.w"], p["down0.b"], stride=2)
    hcur = _res(hcur, cond, p, "enc1_0")
    skip1 = hcur = _res(hcur, cond, p, "enc1_1")
    hcur = tf.conv2d(hcur, p["down1.w"], p["down1.b"], stride=2)
    hcur = _res(hcur, cond, p, "mid_0")
    hcur = _res(hcur, cond, p, "mid_1")
    hcur = tf.conv2d(tf.upsample_nearest(hcur), p["up1.w"], p["up1.b"])
    hcur = _res(tf.concat([hcur, skip1], axis=1), cond, p, "dec1_0")
    hcur = _res(hcur, cond, p, "dec1_1")
    hcur = tf.conv2d(tf.upsample_nearest(hcur), p["up0.w"], p["up0.b"])
    hcur = _res(tf.concat([hcur, skip0], axis=1), cond, p, "dec0_0")
    hcur = _res(hcur, cond, p, "dec0_1")
    out = tf.conv2d(_gn_silu(hcur, p, "out.n"), p["out.w"], p["out.b"])
    if single:
        out = tf.reshape(out, out.shape[1:])
    return out
