"""Image-quality metrics, segmentation overlap, and diagnostic statistics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage, stats

from .grids import GridError, ImageGrid, UNIT_NORMALIZED


def mse(a: ImageGrid, b: ImageGrid) -> float:
    """Mean squared difference between two grids of the same unit."""
    if a.values.shape != b.values.shape:
        raise GridError(f"shape mismatch {a.values.shape} vs {b.values.shape}")
    if a.unit_tag != b.unit_tag:
        raise GridError(f"unit mismatch {a.unit_tag} vs {b.unit_tag}")
    diff = a.values.astype(np.float64) - b.values.astype(np.float64)
    return float(np.mean(diff * diff))


@dataclass(frozen=True)
class SsimConfig:
    """Gaussian-weighted local statistics, Wang-style constants."""

    window_size: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: float = 1.0

    def __post_init__(self):
        if self.k1 <= 0 or self.k2 <= 0:
            raise ValueError("K1 and K2 must be positive")
        if self.window_size % 2 != 1 or self.window_size < 3:
            raise ValueError("window_size must be odd and >= 3")

    def window(self) -> np.ndarray:
        half = self.window_size // 2
        g = np.exp(-np.arange(-half, half + 1) ** 2 / (2.0 * self.sigma ** 2))
        return g / g.sum()


def _filter_valid(x: np.ndarray, taps: np.ndarray) -> np.ndarray:
    half = len(taps) // 2
    out = ndimage.correlate1d(x, taps, axis=0)
    out = ndimage.correlate1d(out, taps, axis=1)
    return out[half:-half, half:-half]


def ssim(a: ImageGrid, b: ImageGrid, cfg: SsimConfig = SsimConfig()) -> float:
    """Mean structural similarity over the valid (unpadded) window region.

    Luminance/contrast/structure in the standard combined form with
    C1 = (K1 L)^2, C2 = (K2 L)^2; local statistics are Gaussian-weighted.
    """
    if a.values.shape != b.values.shape:
        raise GridError(f"shape mismatch {a.values.shape} vs {b.values.shape}")
    if a.unit_tag != UNIT_NORMALIZED or b.unit_tag != UNIT_NORMALIZED:
        raise GridError("ssim expects normalized images")
    if a.width < cfg.window_size:
        raise GridError(f"image {a.width} smaller than window {cfg.window_size}")
    x = a.values.astype(np.float64)
    y = b.values.astype(np.float64)
    taps = cfg.window()
    mu_x = _filter_valid(x, taps)
    mu_y = _filter_valid(y, taps)
    s_xx = _filter_valid(x * x, taps) - mu_x * mu_x
    s_yy = _filter_valid(y * y, taps) - mu_y * mu_y
    s_xy = _filter_valid(x * y, taps) - mu_x * mu_y
    c1 = (cfg.k1 * cfg.dynamic_range) ** 2
    c2 = (cfg.k2 * cfg.dynamic_range) ** 2
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * s_xy + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (s_xx + s_yy + c2)
    return float(np.mean(num / den))


def dice(mask_a: np.ndarray, mask_b: np.ndarray) -> float:
    """Dice similarity 2|A∩B| / (|A|+|B|); zero when either mask is empty
    or the masks do not overlap."""
    mask_a = np.asarray(mask_a, dtype=bool)
    mask_b = np.asarray(mask_b, dtype=bool)
    if mask_a.shape != mask_b.shape:
        raise GridError(f"mask shape mismatch {mask_a.shape} vs {mask_b.shape}")
    na, nb = int(mask_a.sum()), int(mask_b.sum())
    if na == 0 or nb == 0:
        return 0.0
    overlap = int(np.logical_and(mask_a, mask_b).sum())
    return 2.0 * overlap / (na + nb)


def classify_annotation(reader_mask: np.ndarray, truth) -> str:
    """Case outcome for one reader segmentation against the ground truth.

    Diseased slice: any overlap with the truth mask is a TP; an empty or
    non-overlapping segmentation is an FN (a nodule marked in the wrong
    place still means the real one was missed). Healthy slice: an empty
    mask is a TN, any marked region an FP.
    """
    mask = np.asarray(getattr(reader_mask, "mask", reader_mask), dtype=bool)
    truth_mask = np.asarray(truth.nodule_mask, dtype=bool)
    if mask.shape != truth_mask.shape:
        raise GridError(f"mask shape {mask.shape} != truth {truth_mask.shape}")
    diseased = bool(truth_mask.any())
    marked = bool(mask.any())
    if diseased:
        overlap = bool(np.logical_and(mask, truth_mask).any())
        return "TP" if overlap else "FN"
    return "FP" if marked else "TN"


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def add(self, outcome: str) -> "ConfusionCounts":
        kw = {"TP": "tp", "FP": "fp", "TN": "tn", "FN": "fn"}[outcome]
        return ConfusionCounts(**{**self.__dict__, kw: getattr(self, kw) + 1})


def diagnostic_stats(c: ConfusionCounts) -> dict:
    """Sensitivity, specificity, F1, NPV. Undefined ratios (zero
    denominator) come back as None, never as a silent 0."""

    def ratio(num, den):
        return num / den if den > 0 else None

    return {
        "sensitivity": ratio(c.tp, c.tp + c.fn),
        "specificity": ratio(c.tn, c.tn + c.fp),
        "f1": ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn),
        "npv": ratio(c.tn, c.tn + c.fn),
    }


def mean_ci(values, level: float = 0.95) -> tuple[float, float, float]:
    """Sample mean with a Student-t confidence interval (NaN bounds for
    n < 2 or zero spread degenerate cases keep their exact mean)."""
    arr = np.asarray(list(values), dtype=np.float64)
    if arr.size == 0:
        raise ValueError("mean_ci of an empty sample")
    m = float(arr.mean())
    if arr.size < 2:
        return m, float("nan"), float("nan")
    sem = arr.std(ddof=1) / np.sqrt(arr.size)
    half = float(stats.t.ppf(0.5 + level / 2.0, arr.size - 1) * sem)
    return m, m - half, m + half


def write_metric_report(path, rows: list[dict]) -> None:
    """CSV rows (views, variant, metric, mean, ci_low, ci_high)."""
    lines = ["views,variant,metric,mean,ci_low,ci_high"]
    for r in rows:
        lines.append(f"{r['views']},{r['variant']},{r['metric']},"
                     f"{r['mean']:.8g},{r['ci_low']:.8g},{r['ci_high']:.8g}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
