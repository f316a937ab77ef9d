"""Image-quality metrics (SSIM, Pearson R, PSNR) and per-marker reports.

All metrics run in float64 on single-channel images. SSIM uses a Gaussian
window and only positions where the window fits inside the image.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


@dataclass(frozen=True)
class SSIMConfig:
    window: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03

    def __post_init__(self):
        if self.window < 1 or self.window % 2 == 0:
            raise ValueError("window must be a positive odd integer")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    """Normalised 1-D Gaussian taps; the 2-D window is their outer product."""
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _as_2d(img, name: str) -> np.ndarray:
    a = np.asarray(img, dtype=np.float64)
    if a.ndim == 3 and a.shape[0] == 1:
        a = a[0]
    if a.ndim != 2:
        raise ValueError(f"{name} must be a single-channel image, got shape {a.shape}")
    return a


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a, b = _as_2d(a, "a"), _as_2d(b, "b")
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def _blur_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    rows = sliding_window_view(img, g.size, axis=0) @ g
    return sliding_window_view(rows, g.size, axis=1) @ g


def ssim_map(a, b, data_range: float = 1.0, config: SSIMConfig = SSIMConfig()) -> np.ndarray:
    a, b = _pair(a, b)
    if data_range <= 0:
        raise ValueError("data_range must be positive")
    if min(a.shape) < config.window:
        raise ValueError(f"image {a.shape} smaller than the {config.window}x{config.window} window")
    g = gaussian_window(config.window, config.sigma)
    c1 = (config.k1 * data_range) ** 2
    c2 = (config.k2 * data_range) ** 2
    mu_a, mu_b = _blur_valid(a, g), _blur_valid(b, g)
    var_a = _blur_valid(a * a, g) - mu_a * mu_a
    var_b = _blur_valid(b * b, g) - mu_b * mu_b
    cov = _blur_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a, b, data_range: float = 1.0, config: SSIMConfig = SSIMConfig()) -> float:
    """Mean local structural similarity over all valid window positions."""
    return float(np.mean(ssim_map(a, b, data_range, config)))


def pearson_r(a, b) -> float:
    """Sample correlation of the flattened pixels; 0 if either side is constant."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"size mismatch: {a.size} vs {b.size}")
    if a.size < 2:
        raise ValueError("need at least 2 pixels")
    # test constancy exactly: subtracting a float mean can leave ~1e-17 residue
    if np.all(a == a[0]) or np.all(b == b[0]):
        return 0.0
    da, db = a - a.mean(), b - b.mean()
    sa, sb = math.sqrt(float(da @ da)), math.sqrt(float(db @ db))
    if sa == 0.0 or sb == 0.0:
        return 0.0
    return float(np.clip((da @ db) / (sa * sb), -1.0, 1.0))


def psnr_from_mse(mse: float, data_range: float = 1.0) -> float:
    if data_range <= 0:
        raise ValueError("data_range must be positive")
    if mse < 0:
        raise ValueError("mse must be non-negative")
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(data_range * data_range / mse)


def psnr(a, b, data_range: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for identical images."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return psnr_from_mse(float(np.mean((a - b) ** 2)), data_range)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


@dataclass
class MarkerScores:
    ssim: float
    r: float
    psnr: float
    count: int
    excluded: int = 0


@dataclass
class MetricReport:
    markers: dict[str, MarkerScores] = field(default_factory=dict)
    omitted: list[str] = field(default_factory=list)
    excluded: dict[str, int] = field(default_factory=dict)

    def average(self, metric: str) -> float:
        vals = [getattr(s, metric) for s in self.markers.values()]
        return float(np.mean(vals)) if vals else math.nan

    @property
    def averages(self) -> dict[str, float]:
        return {m: self.average(m) for m in ("ssim", "r", "psnr")}

    def to_dict(self) -> dict:
        def num(x):
            return "inf" if x == math.inf else x

        return {
            "markers": {
                k: {"ssim": s.ssim, "r": s.r, "psnr": num(s.psnr), "count": s.count, "excluded": s.excluded}
                for k, s in self.markers.items()
            },
            "average": {k: num(v) for k, v in self.averages.items()},
            "omitted": self.omitted,
            "excluded": self.excluded,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    def to_text(self) -> str:
        names = list(self.markers)
        cols = names + ["Avg."]
        width = max([8] + [len(c) + 2 for c in cols])
        lines = ["metric".ljust(10) + "".join(c.rjust(width) for c in cols)]
        for metric, label, fmt in (("ssim", "SSIM", "{:.3f}"), ("r", "R", "{:.3f}"), ("psnr", "PSNR(dB)", "{:.2f}")):
            vals = [getattr(self.markers[n], metric) for n in names] + [self.average(metric)]
            lines.append(label.ljust(10) + "".join(fmt.format(v).rjust(width) for v in vals))
        lines.append("patches".ljust(10) + "".join(str(self.markers[n].count).rjust(width) for n in names) + "".rjust(width))
        lines.append("excluded".ljust(10) + "".join(str(self.markers[n].excluded).rjust(width) for n in names) + "".rjust(width))
        if self.omitted:
            lines.append("omitted (no patches left): " + ", ".join(self.omitted))
        return "\n".join(lines)


def evaluate(predictions: dict, ground_truth: dict, panel, empty_ssim_threshold: float | None = 0.8, data_range: float = 1.0) -> MetricReport:
    """Score predictions against ground truth per marker.

    Both inputs map ``patch id -> {marker -> image}``. A patch is dropped for
    a marker when its ground truth has SSIM above ``empty_ssim_threshold``
    against an all-zero image (``None`` disables the rule). Markers left with
    no patches are listed in ``omitted`` rather than scored.
    """
    panel = list(panel)
    missing_ids = sorted(set(predictions) - set(ground_truth))
    if missing_ids:
        raise KeyError(f"predicted patches without ground truth: {missing_ids[:5]}")
    report = MetricReport()
    for marker in panel:
        s_vals, r_vals, p_vals, excluded = [], [], [], 0
        for pid, pred in predictions.items():
            if marker not in pred:
                continue
            if marker not in ground_truth[pid]:
                raise KeyError(f"marker {marker!r} predicted for {pid} but absent from ground truth")
            gt = _as_2d(ground_truth[pid][marker], "ground truth")
            pr = _as_2d(pred[marker], "prediction")
            if empty_ssim_threshold is not None and ssim(gt, np.zeros_like(gt), data_range) > empty_ssim_threshold:
                excluded += 1
                continue
            s_vals.append(ssim(pr, gt, data_range))
            r_vals.append(pearson_r(pr, gt))
            p_vals.append(psnr(pr, gt, data_range))
        report.excluded[marker] = excluded
        if not s_vals:
            report.omitted.append(marker)
            continue
        report.markers[marker] = MarkerScores(float(np.mean(s_vals)), float(np.mean(r_vals)), float(np.mean(p_vals)), len(s_vals), excluded)
    return report
