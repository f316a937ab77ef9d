"""Single-file checkpoint archive.

Layout::

    b"STNFCKPT"  | u64 little-endian header length | UTF-8 JSON header | payload

The header lists every blob as ``{name, group, shape, dtype, offset, nbytes}``
with offsets relative to the payload start. Blobs are little-endian float32,
contiguous, in header order. Groups are ``param``, ``adam_m``, ``adam_v`` and
``codec``. The header also carries the marker panel, the architecture, the
stage tag, a config hash and the optimizer step.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .codec import Codec, identity_codec, tiny_ae
from .denoiser import DenoiserParams, MarkerPanel, _shapes
from .optim import OptimConfig, OptimizerState
from .tensor import Tensor

MAGIC = b"STNFCKPT"
FORMAT_VERSION = 1
_F32 = np.dtype("<f4")


class CheckpointError(ValueError):
    """Unreadable archive, or one that does not match the runtime model."""


class PanelMismatch(CheckpointError):
    pass


@dataclass
class Checkpoint:
    params: DenoiserParams
    stage: int
    optimizer: OptimizerState | None
    codec: Codec
    config_hash: str
    header: dict

    @property
    def panel(self) -> MarkerPanel:
        return self.params.panel


def config_hash(config: dict | None) -> str:
    if config is None:
        return ""
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str).encode()
    return hashlib.sha256(blob).hexdigest()


def _blobs(params: DenoiserParams, optimizer: OptimizerState | None, codec: Codec):
    for name, t in params.tensors.items():
        yield name, "param", t.data
    if optimizer is not None:
        for name in params.tensors:
            yield name, "adam_m", optimizer.m[name]
        for name in params.tensors:
            yield name, "adam_v", optimizer.v[name]
    for name, t in codec.params.items():
        yield name, "codec", t.data


def save_checkpoint(path, params: DenoiserParams, stage: int, optimizer: OptimizerState | None = None,
                    codec: Codec | None = None, config: dict | None = None) -> Path:
    if params.panel is None:
        raise CheckpointError("params carry no marker panel")
    codec = codec or identity_codec()
    entries, chunks, offset = [], [], 0
    for name, group, arr in _blobs(params, optimizer, codec):
        data = np.ascontiguousarray(arr, dtype=_F32)
        if arr.dtype != np.float32 and not np.array_equal(data, arr):
            raise CheckpointError(f"{group}/{name} is {arr.dtype} and does not fit float32 exactly")
        entries.append({"name": name, "group": group, "shape": list(arr.shape), "dtype": "float32", "offset": offset, "nbytes": data.nbytes})
        chunks.append(data.tobytes())
        offset += data.nbytes
    header = {
        "format": FORMAT_VERSION,
        "stage": int(stage),
        "panel": list(params.panel.names),
        "arch": params.arch(),
        "config_hash": config_hash(config),
        "optimizer": None if optimizer is None else {"step": optimizer.step, "config": asdict(optimizer.config)},
        "codec": {"kind": codec.kind, "latent_channels": codec.latent_channels, "spatial_factor": codec.spatial_factor,
                  "latent_scale": codec.latent_scale, "usable": codec.usable, "flags": list(codec.flags)},
        "tensors": entries,
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        for c in chunks:
            fh.write(c)
    tmp.replace(path)
    return path


def read_header(path) -> tuple[dict, int]:
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint archive")
        (n,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(n))
    if header.get("format") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format {header.get('format')}")
    return header, len(MAGIC) + 8 + n


def load_checkpoint(path, panel=None, arch: dict | None = None) -> Checkpoint:
    """Read an archive; verify panel and tensor shapes before returning it.

    ``panel`` / ``arch`` describe the runtime expectation; a differing panel
    raises :class:`PanelMismatch`.
    """
    header, start = read_header(path)
    ck_panel = MarkerPanel(header["panel"])
    if panel is not None:
        want = panel if isinstance(panel, MarkerPanel) else MarkerPanel(panel)
        if want.names != ck_panel.names:
            raise PanelMismatch(f"checkpoint panel {ck_panel.names} differs from runtime panel {want.names}")
    ck_arch = header["arch"]
    if arch is not None:
        diff = {k: (ck_arch.get(k), v) for k, v in arch.items() if ck_arch.get(k) != v}
        if diff:
            raise CheckpointError(f"architecture mismatch (checkpoint, runtime): {diff}")
    raw = np.memmap(path, dtype=np.uint8, mode="r", offset=start)
    groups: dict[str, dict[str, np.ndarray]] = {"param": {}, "adam_m": {}, "adam_v": {}, "codec": {}}
    for e in header["tensors"]:
        buf = raw[e["offset"] : e["offset"] + e["nbytes"]]
        if buf.size != e["nbytes"]:
            raise CheckpointError(f"truncated archive at {e['group']}/{e['name']}")
        groups[e["group"]][e["name"]] = np.frombuffer(buf.tobytes(), dtype=_F32).reshape(e["shape"]).astype(np.float32)
    del raw
    expected = _shapes(ck_arch["c_lat"], ck_arch["width"], ck_arch["emb_dim"])
    got = {k: v.shape for k, v in groups["param"].items()}
    if set(got) != set(expected) or any(tuple(got[k]) != tuple(expected[k]) for k in expected):
        bad = sorted(k for k in set(got) | set(expected) if tuple(got.get(k, ())) != tuple(expected.get(k, ())))
        raise CheckpointError(f"tensor shapes do not match the architecture: {bad[:5]}")
    params = DenoiserParams({k: Tensor(groups["param"][k]) for k in expected}, ck_arch["c_lat"], ck_arch["width"],
                            ck_arch["emb_dim"], ck_arch.get("groups", 8), ck_panel)
    optimizer = None
    if header["optimizer"] is not None:
        optimizer = OptimizerState(OptimConfig(**header["optimizer"]["config"]), header["optimizer"]["step"],
                                   groups["adam_m"], groups["adam_v"])
    cinfo = header["codec"]
    if cinfo["kind"] == "identity":
        codec = identity_codec()
    elif cinfo["kind"] == "tiny_ae":
        codec = tiny_ae(0)
        for k, v in groups["codec"].items():
            if k not in codec.params or codec.params[k].shape != v.shape:
                raise CheckpointError(f"codec tensor {k} does not fit the tiny autoencoder")
            codec.params[k] = Tensor(v)
        codec.latent_scale = cinfo["latent_scale"]
        codec.usable = cinfo["usable"]
        codec.flags = list(cinfo["flags"])
        codec.freeze()
    else:
        raise CheckpointError(f"unknown codec kind {cinfo['kind']!r}")
    return Checkpoint(params, header["stage"], optimizer, codec, header["config_hash"], header)
