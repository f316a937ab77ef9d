"""Paired source/marker patches: synthetic corpus, directory I/O, curation.

Synthetic scenes are sets of elliptical cells of four kinds. The source image
is an H&E-like rendering in which every cell kind has its own cytoplasm tint
and nucleus appearance, so each marker channel is a deterministic, learnable
function of the source. Marker rules:

========================  =========  ==============================================
rule                      analog     renders
========================  =========  ==============================================
``nuclei``                DAPI       every nucleus, plus a faint uniform floor
``membrane:epithelial``   panCK      outline of epithelial cells, weak inner fill
``cell:lymphocyte``       CD3        whole lymphocytes
``cytoplasm:macrophage``  CD68       macrophage cytoplasm (nucleus excluded)
``nuclei:proliferating``  Ki67       nuclei of proliferating cells
``cell:stromal``          SMA        elongated stromal cells
========================  =========  ==============================================

A share of patches is background-dominant (few or no cells), reproducing the
dark-background bias of real multiplex data.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .metrics import ssim

log = logging.getLogger(__name__)


class DataError(Exception):
    """Missing, malformed or inconsistent input data."""


RULES: dict[str, str] = {
    "nuclei": "DAPI",
    "membrane:epithelial": "panCK",
    "cell:lymphocyte": "CD3",
    "cytoplasm:macrophage": "CD68",
    "nuclei:proliferating": "Ki67",
    "cell:stromal": "SMA",
}
DEFAULT_PANEL = tuple(RULES.values())

CELL_KINDS = ("epithelial", "lymphocyte", "macrophage", "stromal")
_CYTO_RGB = {
    "epithelial": (0.86, 0.52, 0.70),
    "lymphocyte": (0.74, 0.56, 0.80),
    "macrophage": (0.80, 0.66, 0.92),
    "stromal": (0.93, 0.44, 0.52),
}
_NUC_RGB = (0.45, 0.30, 0.62)
_NUC_PROLIF_RGB = (0.24, 0.13, 0.46)
_STROMA_RGB = (0.94, 0.76, 0.85)
_BLANK_RGB = (0.96, 0.94, 0.96)


@dataclass
class PatchRecord:
    id: str
    source: np.ndarray  # [3, H, W] in [0, 1]
    markers: dict[str, np.ndarray]  # name -> [1, H, W] in [0, 1]
    mask: np.ndarray | None = None  # [1, H, W] binary
    split: str = "train"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.split not in ("train", "val", "test"):
            raise DataError(f"invalid split {self.split!r}")
        h, w = self.source.shape[-2:]
        for name, img in self.markers.items():
            if img.shape != (1, h, w):
                raise DataError(f"{self.id}: marker {name} has shape {img.shape}, expected (1, {h}, {w})")


@dataclass(frozen=True)
class SynthSpec:
    size: int = 48
    M: int = 4
    cells: tuple[int, int] = (14, 26)
    rules: tuple[str, ...] | None = None
    seed: int = 0
    background_fraction: float = 0.15
    bit_depth: int = 8

    def rule_list(self) -> tuple[str, ...]:
        rules = self.rules if self.rules is not None else tuple(RULES)[: self.M]
        if len(rules) != self.M:
            raise ValueError(f"{len(rules)} rules given for M={self.M}")
        if self.M > len(RULES):
            raise ValueError(f"M={self.M} exceeds the {len(RULES)} available marker rules")
        unknown = [r for r in rules if r not in RULES]
        if unknown:
            raise ValueError(f"unknown marker rules {unknown}")
        if len(set(rules)) != len(rules):
            raise ValueError("marker rules must be distinct")
        return tuple(rules)

    def panel(self) -> tuple[str, ...]:
        return tuple(RULES[r] for r in self.rule_list())


@dataclass(frozen=True)
class FilterRules:
    min_cell_coverage: float = 0.0
    empty_ssim_threshold: float = 0.8
    zero_ratio: bool = True
    fallback_marker: str | None = None
    fallback_threshold: float = 0.1

    def __post_init__(self):
        for v in (self.min_cell_coverage, self.empty_ssim_threshold, self.fallback_threshold):
            if not 0.0 <= v <= 1.0:
                raise ValueError("filter thresholds must lie in [0, 1]")


def quantize(img: np.ndarray, bit_depth: int = 8) -> np.ndarray:
    """Round [0, 1] floats to the nearest level of the stored bit depth."""
    levels = (1 << bit_depth) - 1
    return (np.round(np.clip(img, 0.0, 1.0) * levels) / levels).astype(np.float32)


# ---------------------------------------------------------------------------
# synthetic scenes
# ---------------------------------------------------------------------------


@dataclass
class _Cell:
    kind: str
    cy: float
    cx: float
    a: float
    b: float
    angle: float
    nuc: float
    nuc_dy: float
    nuc_dx: float
    proliferating: bool


def _ellipse_sd(yy, xx, cy, cx, a, b, angle):
    c, s = math.cos(angle), math.sin(angle)
    dy, dx = yy - cy, xx - cx
    u = dx * c + dy * s
    v = -dx * s + dy * c
    rho = np.sqrt((u / a) ** 2 + (v / b) ** 2)
    return (rho - 1.0) * math.sqrt(a * b)


def _coverage(sd):
    return np.clip(0.5 - sd, 0.0, 1.0)


def _sample_cells(rng: np.random.Generator, size: int, n: int) -> list[_Cell]:
    probs = rng.dirichlet(np.full(len(CELL_KINDS), 4.0))
    cells: list[_Cell] = []
    tries = 0
    while len(cells) < n and tries < 400:
        tries += 1
        kind = CELL_KINDS[rng.choice(len(CELL_KINDS), p=probs)]
        if kind == "epithelial":
            a, b, nuc = rng.uniform(4.5, 6.5), rng.uniform(4.0, 5.5), 0.45
        elif kind == "lymphocyte":
            r = rng.uniform(2.8, 3.6)
            a, b, nuc = r, r * rng.uniform(0.9, 1.0), 0.72
        elif kind == "macrophage":
            a, b, nuc = rng.uniform(5.5, 7.5), rng.uniform(4.5, 6.0), 0.32
        else:
            a, b, nuc = rng.uniform(7.0, 10.0), rng.uniform(2.0, 2.8), 0.5
        cy, cx = rng.uniform(-2, size + 2, size=2)
        if any(math.hypot(cy - o.cy, cx - o.cx) < 0.8 * (max(a, b) + max(o.a, o.b)) for o in cells):
            continue
        prolif = kind in ("epithelial", "lymphocyte") and rng.random() < 0.35
        off = 0.35 * a if kind == "macrophage" else 0.0
        ang = rng.uniform(0, math.pi)
        cells.append(_Cell(kind, cy, cx, a, b, ang, nuc * (1.15 if prolif else 1.0), off * math.sin(ang), off * math.cos(ang), prolif))
    return cells


def _render(rng: np.random.Generator, spec: SynthSpec, rules: tuple[str, ...], background: bool):
    size = spec.size
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    if background:
        n = int(rng.integers(0, 3))
        # a thin strip of tissue along one edge
        edge = rng.uniform(0.05, 0.25) * size
        tissue = _coverage((yy - edge) * 1.0) if rng.random() < 0.5 else _coverage((xx - edge) * 1.0)
    else:
        n = int(rng.integers(spec.cells[0], spec.cells[1] + 1))
        tissue = np.ones((size, size))
        if rng.random() < 0.3:  # lumen / empty region
            cy, cx = rng.uniform(0, size, size=2)
            tissue = 1.0 - _coverage(_ellipse_sd(yy, xx, cy, cx, rng.uniform(6, 14), rng.uniform(6, 14), rng.uniform(0, math.pi)))
    cells = _sample_cells(rng, size, n)
    if background:
        # keep the few cells inside the tissue strip
        cells = [c for c in cells if tissue[int(np.clip(c.cy, 0, size - 1)), int(np.clip(c.cx, 0, size - 1))] > 0.5]

    rgb = np.empty((3, size, size))
    for ch in range(3):
        rgb[ch] = _BLANK_RGB[ch] + (_STROMA_RGB[ch] - _BLANK_RGB[ch]) * tissue
    markers = {r: np.zeros((size, size)) for r in rules}
    mask = np.zeros((size, size))
    for cell in cells:
        sd = _ellipse_sd(yy, xx, cell.cy, cell.cx, cell.a, cell.b, cell.angle)
        body = _coverage(sd)
        nsd = _ellipse_sd(yy, xx, cell.cy + cell.nuc_dy, cell.cx + cell.nuc_dx, cell.a * cell.nuc, cell.b * cell.nuc, cell.angle)
        nucleus = _coverage(nsd)
        cyto = np.clip(body - nucleus, 0.0, 1.0)
        ring = np.clip(1.0 - np.abs(sd) / 1.2, 0.0, 1.0)
        color = _CYTO_RGB[cell.kind]
        ncolor = _NUC_PROLIF_RGB if cell.proliferating else _NUC_RGB
        for ch in range(3):
            rgb[ch] += (color[ch] - rgb[ch]) * body
            rgb[ch] += (ncolor[ch] - rgb[ch]) * nucleus
        mask = np.maximum(mask, body > 0.5)
        for r in rules:
            if r == "nuclei":
                val = 0.85 * nucleus
            elif r == "membrane:epithelial":
                val = np.maximum(0.9 * ring, 0.3 * body) if cell.kind == "epithelial" else None
            elif r == "cell:lymphocyte":
                val = 0.75 * body if cell.kind == "lymphocyte" else None
            elif r == "cytoplasm:macrophage":
                val = 0.6 * cyto if cell.kind == "macrophage" else None
            elif r == "nuclei:proliferating":
                val = 0.9 * nucleus if cell.proliferating else None
            else:  # cell:stromal
                val = 0.7 * body if cell.kind == "stromal" else None
            if val is not None:
                np.maximum(markers[r], val, out=markers[r])
    if "nuclei" in markers:
        markers["nuclei"] = np.maximum(markers["nuclei"], 0.03)
    rgb += rng.normal(0.0, 0.012, size=rgb.shape)
    return rgb, markers, mask[None].astype(np.float32), cells


def generate_synthetic(spec: SynthSpec, n: int, offset: int = 0, split: str = "train") -> list[PatchRecord]:
    """Render ``n`` records with indices ``offset .. offset + n - 1``.

    Record ``i`` depends only on ``(spec.seed, i)``, so disjoint index ranges
    give independent splits and generation can be partitioned freely.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rules = spec.rule_list()
    names = spec.panel()
    records = []
    for i in range(offset, offset + n):
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, i]))
        background = rng.random() < spec.background_fraction
        rgb, markers, mask, cells = _render(rng, spec, rules, background)
        records.append(
            PatchRecord(
                id=f"syn{i:05d}",
                source=quantize(rgb, spec.bit_depth),
                markers={name: quantize(markers[r][None], spec.bit_depth) for name, r in zip(names, rules)},
                mask=mask,
                split=split,
                meta={"n_cells": len(cells), "background": bool(background), "kinds": sorted({c.kind for c in cells})},
            )
        )
    return records


# ---------------------------------------------------------------------------
# curation
# ---------------------------------------------------------------------------


def zero_ratio(image: np.ndarray, bit_depth: int = 8) -> float:
    """Fraction of pixels that are zero after quantisation to ``bit_depth``."""
    q = np.round(np.clip(np.asarray(image, dtype=np.float64), 0, 1) * ((1 << bit_depth) - 1))
    return float(np.mean(q == 0))


def cell_coverage(rec: PatchRecord, rules: FilterRules) -> float:
    if rec.mask is not None:
        return float(np.mean(rec.mask > 0))
    if rules.fallback_marker is None or rules.fallback_marker not in rec.markers:
        raise DataError(f"{rec.id}: no mask and no fallback channel to derive one")
    return float(np.mean(rec.markers[rules.fallback_marker] > rules.fallback_threshold))


def filter_by_coverage(records: list[PatchRecord], rules: FilterRules) -> list[PatchRecord]:
    """Keep records whose cell-mask fraction is at least ``min_cell_coverage``."""
    if rules.min_cell_coverage <= 0:
        return list(records)
    return [r for r in records if cell_coverage(r, rules) >= rules.min_cell_coverage]


def is_empty(image: np.ndarray, threshold: float = 0.8) -> bool:
    """True when ``image`` has SSIM above ``threshold`` against all zeros."""
    img = np.asarray(image, dtype=np.float64).reshape(image.shape[-2:])
    return ssim(img, np.zeros_like(img), data_range=1.0) > threshold


def filter_empty_by_ssim(records: list[PatchRecord], marker: str, threshold: float = 0.8) -> tuple[list[PatchRecord], int]:
    """Drop records whose ``marker`` channel is near-empty; return (kept, n_excluded)."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("threshold must lie in [0, 1]")
    kept = []
    for r in records:
        if marker not in r.markers:
            raise KeyError(f"unknown marker {marker!r} in record {r.id}")
        if not is_empty(r.markers[marker], threshold):
            kept.append(r)
    return kept, len(records) - len(kept)


def deoverlap(records: list[PatchRecord], min_center_distance: float) -> list[PatchRecord]:
    """Greedy removal of tiles whose centres lie closer than ``min_center_distance``
    to an already kept tile of the same parent image."""
    kept: list[PatchRecord] = []
    centers: dict[str, list[tuple[float, float]]] = {}
    for r in records:
        parent = r.meta.get("parent", r.id)
        y, x = r.meta.get("origin", (0, 0))
        h, w = r.source.shape[-2:]
        c = (y + h / 2, x + w / 2)
        if any(math.hypot(c[0] - o[0], c[1] - o[1]) < min_center_distance for o in centers.get(parent, [])):
            continue
        centers.setdefault(parent, []).append(c)
        kept.append(r)
    return kept


# ---------------------------------------------------------------------------
# directory layout
# ---------------------------------------------------------------------------

_EXTS = (".png", ".tif", ".tiff")


def tile_starts(length: int, patch: int, overlap: float) -> list[int]:
    """Tile origins along one axis; the last tile is snapped to the far edge."""
    if length < patch:
        raise DataError(f"image dimension {length} is smaller than the patch size {patch}")
    if not 0.0 <= overlap < 1.0:
        raise ValueError("overlap must lie in [0, 1)")
    stride = max(1, int(round(patch * (1.0 - overlap))))
    starts = list(range(0, length - patch + 1, stride))
    if starts[-1] + patch < length:
        starts.append(length - patch)
    return starts


def read_image(path: Path) -> np.ndarray:
    """Load an 8/16-bit PNG or TIFF as float32 in [0, 1], channels first."""
    with Image.open(path) as im:
        arr = np.asarray(im)
        mode = im.mode
    if arr.dtype == np.uint8 or mode in ("L", "RGB", "RGBA", "P"):
        scale = 255.0
    elif arr.dtype in (np.uint16, np.int32) or mode.startswith("I;16") or mode == "I":
        scale = 65535.0
    elif arr.dtype == bool:
        scale = 1.0
    else:
        raise DataError(f"{path}: unsupported pixel type {arr.dtype} / mode {mode}")
    arr = arr.astype(np.float32) / np.float32(scale)
    if arr.ndim == 2:
        return arr[None]
    return np.ascontiguousarray(arr[..., :3].transpose(2, 0, 1))


def write_image(path: Path, img: np.ndarray, bit_depth: int = 8) -> None:
    levels = (1 << bit_depth) - 1
    q = np.round(np.clip(img, 0, 1) * levels)
    if img.shape[0] == 3:
        if bit_depth != 8:
            raise ValueError("RGB images are written as 8-bit")
        Image.fromarray(q.transpose(1, 2, 0).astype(np.uint8), mode="RGB").save(path)
    elif bit_depth == 8:
        Image.fromarray(q[0].astype(np.uint8), mode="L").save(path)
    else:
        Image.fromarray(q[0].astype(np.uint16)).save(path)


def _find(dirpath: Path, ident: str) -> Path | None:
    for ext in _EXTS:
        p = dirpath / f"{ident}{ext}"
        if p.exists():
            return p
    return None


def record_stats(rec: PatchRecord, rules: FilterRules | None = None, bit_depth: int = 8) -> dict:
    rules = rules or FilterRules()
    entry = {"id": rec.id, "split": rec.split, "markers": {}}
    if rec.mask is not None:
        entry["coverage"] = float(np.mean(rec.mask > 0))
    for name, img in rec.markers.items():
        stats = {"mean": float(img.mean())}
        if rules.zero_ratio:
            stats["zero_ratio"] = zero_ratio(img, bit_depth)
        stats["empty"] = bool(is_empty(img, rules.empty_ssim_threshold))
        entry["markers"][name] = stats
    if rec.meta:
        entry["meta"] = rec.meta
    return entry


def write_manifest(root: Path, records: list[PatchRecord], panel, rules: FilterRules | None = None, bit_depth: int = 8, extra: dict | None = None) -> dict:
    manifest = {
        "panel": list(panel),
        "bit_depth": bit_depth,
        "count": len(records),
        "splits": {s: sum(r.split == s for r in records) for s in ("train", "val", "test")},
        "records": [record_stats(r, rules, bit_depth) for r in records],
    }
    if extra:
        manifest.update(extra)
    (Path(root) / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return manifest


def write_directory(records: list[PatchRecord], root, panel, bit_depth: int = 8, rules: FilterRules | None = None) -> dict:
    """Write ``source/``, ``markers/<name>/``, ``masks/`` and ``manifest.json``."""
    root = Path(root)
    (root / "source").mkdir(parents=True, exist_ok=True)
    for name in panel:
        (root / "markers" / name).mkdir(parents=True, exist_ok=True)
    if any(r.mask is not None for r in records):
        (root / "masks").mkdir(exist_ok=True)
    for r in records:
        write_image(root / "source" / f"{r.id}.png", r.source, 8)
        for name in panel:
            write_image(root / "markers" / name / f"{r.id}.png", r.markers[name], bit_depth)
        if r.mask is not None:
            write_image(root / "masks" / f"{r.id}.png", r.mask.astype(np.float32), 8)
    return write_manifest(root, records, panel, rules, bit_depth)


def ingest_directory(root, panel, patch_size: int | None = None, overlap: float = 0.0) -> list[PatchRecord]:
    """Load a ``source/`` + ``markers/<name>/`` tree and tile it into patches.

    With ``patch_size=None`` every image becomes one record with its original
    id. Splits come from ``manifest.json`` when present (default ``train``).
    """
    root = Path(root)
    src_dir = root / "source"
    if not src_dir.is_dir():
        raise DataError(f"{root} has no source/ directory")
    for name in panel:
        if not (root / "markers" / name).is_dir():
            raise DataError(f"{root} has no markers/{name}/ directory")
    splits = {}
    manifest_path = root / "manifest.json"
    if manifest_path.exists():
        splits = {e["id"]: e.get("split", "train") for e in json.loads(manifest_path.read_text()).get("records", [])}
    ids = sorted(p.stem for p in src_dir.iterdir() if p.suffix.lower() in _EXTS)
    if not ids:
        raise DataError(f"no source images under {src_dir}")
    records = []
    for ident in ids:
        source = read_image(_find(src_dir, ident))
        if source.shape[0] == 1:
            source = np.repeat(source, 3, axis=0)
        h, w = source.shape[-2:]
        markers = {}
        for name in panel:
            path = _find(root / "markers" / name, ident)
            if path is None:
                raise DataError(f"missing marker {name} for id {ident}")
            img = read_image(path)
            if img.shape[0] != 1:
                img = img.mean(axis=0, keepdims=True)
            if img.shape[-2:] != (h, w):
                raise DataError(f"{ident}: marker {name} is {img.shape[-2:]}, source is {(h, w)}")
            markers[name] = img
        mask_path = _find(root / "masks", ident) if (root / "masks").is_dir() else None
        mask = (read_image(mask_path)[:1] > 0).astype(np.float32) if mask_path else None
        split = splits.get(ident, "train")
        if patch_size is None:
            records.append(PatchRecord(ident, source, markers, mask, split, {"parent": ident, "origin": (0, 0)}))
            continue
        ys, xs = tile_starts(h, patch_size, overlap), tile_starts(w, patch_size, overlap)
        single = len(ys) == 1 and len(xs) == 1 and h == patch_size and w == patch_size
        for y in ys:
            for x in xs:
                sl = (slice(None), slice(y, y + patch_size), slice(x, x + patch_size))
                pid = ident if single else f"{ident}_y{y}_x{x}"
                records.append(
                    PatchRecord(
                        pid,
                        np.ascontiguousarray(source[sl]),
                        {k: np.ascontiguousarray(v[sl]) for k, v in markers.items()},
                        None if mask is None else np.ascontiguousarray(mask[sl]),
                        split,
                        {"parent": ident, "origin": (y, x)},
                    )
                )
    log.info("ingested %d patches from %d images under %s", len(records), len(ids), root)
    return records
