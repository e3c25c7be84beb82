"""Evaluation metrics: SSIM, RMSE, and the Wilcoxon signed-rank test."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .errors import MetricsError
from .formats import dump_json
from .raster import to_gray

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_L = 255.0
WILCOXON_EXACT_MAX = 12


@dataclass
class MetricsReport:
    pair_ssim: list[float]
    mean_ssim: float
    rmse_vs_reference: float | None = None
    ssim_vs_reference: float | None = None
    wilcoxon: tuple[float, float, int] | None = None  # (W, p two-sided, n)

    def to_dict(self) -> dict:
        doc = {
            "pair_ssim": self.pair_ssim,
            "mean_ssim": self.mean_ssim,
            "rmse_vs_reference": self.rmse_vs_reference,
            "ssim_vs_reference": self.ssim_vs_reference,
        }
        if self.wilcoxon is not None:
            doc["wilcoxon"] = {
                "W": self.wilcoxon[0],
                "p_two_sided": self.wilcoxon[1],
                "n": self.wilcoxon[2],
            }
        else:
            doc["wilcoxon"] = None
        return doc

    def write(self, path) -> None:
        dump_json(path, self.to_dict())


def _ssim_kernel() -> np.ndarray:
    half = SSIM_WINDOW // 2
    xs = np.arange(SSIM_WINDOW, dtype=np.float64) - half
    g = np.exp(-(xs ** 2) / (2.0 * SSIM_SIGMA ** 2))
    return g / g.sum()


def _window_mean(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    # full separable correlation, then crop to the valid interior so the
    # boundary mode never reaches the output
    half = SSIM_WINDOW // 2
    t = correlate1d(img, g, axis=0, mode="nearest")
    t = correlate1d(t, g, axis=1, mode="nearest")
    return t[half:-half, half:-half]


def _as_gray_f64(img: np.ndarray) -> np.ndarray:
    if img.ndim == 3:
        img = to_gray(img)
    return np.asarray(img, dtype=np.float64)


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean local SSIM over an 11x11 Gaussian window (sigma 1.5, L = 255)."""
    a = _as_gray_f64(a)
    b = _as_gray_f64(b)
    if a.shape != b.shape:
        raise MetricsError(f"ssim shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim != 2 or min(a.shape) < SSIM_WINDOW:
        raise MetricsError(f"ssim needs >= {SSIM_WINDOW}x{SSIM_WINDOW}, got {a.shape}")
    g = _ssim_kernel()
    mu_a = _window_mean(a, g)
    mu_b = _window_mean(b, g)
    var_a = _window_mean(a * a, g) - mu_a ** 2
    var_b = _window_mean(b * b, g) - mu_b ** 2
    cov = _window_mean(a * b, g) - mu_a * mu_b
    c1 = (SSIM_K1 * SSIM_L) ** 2
    c2 = (SSIM_K2 * SSIM_L) ** 2
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    value = float(np.mean(num / den))
    return min(1.0, max(-1.0, value))


def rmse(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricsError(f"rmse shape mismatch: {a.shape} vs {b.shape}")
    return float(np.sqrt(np.mean((a - b) ** 2)))


def pair_band_ssim(frame_a: np.ndarray, frame_b: np.ndarray,
                   dy: float, dx: float) -> float:
    """SSIM of the overlap band implied by one offset record.

    Frame a's bottom band against frame b's top band after rolling b left by
    the rounded dx.  Band height is the frame height minus the rounded dy,
    clamped to at least the SSIM window.
    """
    h = frame_a.shape[0]
    if h < SSIM_WINDOW:
        raise MetricsError(f"frames of height {h} have no usable overlap band")
    band = h - int(np.floor(dy + 0.5))
    band = max(SSIM_WINDOW, min(h, band))
    shifted = np.roll(frame_b, -int(np.floor(dx + 0.5)), axis=1)
    return ssim(frame_a[h - band:], shifted[:band])


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """Ranks 1..n with ties sharing the average of their positions."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def wilcoxon_signed_rank(x, y) -> tuple[float, float, int]:
    """Two-sided Wilcoxon signed-rank test on paired samples.

    Returns (W, p, n) with W = min(W+, W-).  Zero differences are dropped;
    ties in |x - y| share average ranks.  For n <= 12 the p-value is exact
    (enumeration of all 2^n sign patterns); above that a normal
    approximation with continuity correction is used, whose variance
    sum(rank^2)/4 already absorbs the tie correction.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise MetricsError("wilcoxon needs two equal-length 1-D samples")
    d = x - y
    d = d[d != 0.0]
    n = len(d)
    if n < 5:
        raise MetricsError(f"fewer than 5 nonzero differences (got {n})")
    ranks = _average_ranks(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    w = min(w_plus, w_minus)
    total = float(ranks.sum())

    if n <= WILCOXON_EXACT_MAX:
        count_low = 0
        count_high = 0
        for pattern in range(1 << n):
            s = 0.0
            for i in range(n):
                if pattern & (1 << i):
                    s += ranks[i]
            if s <= w + 1e-9:
                count_low += 1
            if s >= total - w - 1e-9:
                count_high += 1
        p = (count_low + count_high) / float(1 << n)
    else:
        mean = total / 2.0
        sigma = math.sqrt(float(np.sum(ranks ** 2)) / 4.0)
        z = (w - mean + 0.5) / sigma
        p = math.erfc(-z / math.sqrt(2.0))
    return w, min(1.0, p), n
