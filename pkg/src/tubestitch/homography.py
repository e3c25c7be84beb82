"""Planar homography estimation and spatial density weighting.

``dlt_homography`` solves the normalized direct linear transform;
``msac_homography`` wraps it in an MSAC consensus loop (truncated quadratic
cost) with adaptive iteration count and a final refit on the inliers.
``density_weights`` assigns each point a weight inversely proportional to how
crowded its column is, so a cluster of matches cannot dominate downstream
offset decisions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .config import MsacConfig
from .errors import EstimationError

#: Relative singular-value floor below which the DLT system is rank-deficient.
DEGENERACY_RTOL = 1e-9
#: Minimum doubled triangle area for a usable 3-point subset.
MIN_TRIANGLE_AREA = 1e-6
#: Sample attempts allowed per configured iteration before giving up.
SKIP_FACTOR = 10


@dataclass
class HomographyEstimate:
    H: np.ndarray                     # 3x3, H[2,2] == 1
    inlier_mask: np.ndarray           # bool, one per input pair
    confidence: float                 # inlier fraction
    per_point_weights: np.ndarray | None = field(default=None)
    provider: str = ""

    @property
    def vertical_shift(self) -> float:
        """Translation along y (rows), the element used for stitching."""
        return float(self.H[1, 2])

    @property
    def horizontal_shift(self) -> float:
        return float(self.H[0, 2])


def _normalization(points: np.ndarray) -> np.ndarray:
    """Similarity transform taking the centroid to 0 and mean radius to sqrt(2)."""
    centroid = points.mean(axis=0)
    spread = np.sqrt(((points - centroid) ** 2).sum(axis=1)).mean()
    if spread < 1e-12:
        raise EstimationError("degenerate configuration: points are coincident")
    s = math.sqrt(2.0) / spread
    return np.array([
        [s, 0.0, -s * centroid[0]],
        [0.0, s, -s * centroid[1]],
        [0.0, 0.0, 1.0],
    ])


def dlt_homography(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Least-squares homography mapping src -> dst (normalized DLT).

    Requires n >= 4 pairs.  Raises EstimationError when the design matrix is
    rank-deficient (collinear input) or the solution has a zero scale term.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 2:
        raise EstimationError(f"point arrays must both be (n, 2); got {src.shape} vs {dst.shape}")
    n = src.shape[0]
    if n < 4:
        raise EstimationError(f"need at least 4 correspondences, got {n}")
    Ts = _normalization(src)
    Td = _normalization(dst)
    sh = (Ts @ np.column_stack([src, np.ones(n)]).T).T
    dh = (Td @ np.column_stack([dst, np.ones(n)]).T).T
    A = np.zeros((2 * n, 9))
    A[0::2, 0:2] = -sh[:, 0:2]
    A[0::2, 2] = -1.0
    A[0::2, 6:8] = sh[:, 0:2] * dh[:, 0:1]
    A[0::2, 8] = dh[:, 0]
    A[1::2, 3:5] = -sh[:, 0:2]
    A[1::2, 5] = -1.0
    A[1::2, 6:8] = sh[:, 0:2] * dh[:, 1:2]
    A[1::2, 8] = dh[:, 1]
    _, s, vt = np.linalg.svd(A)
    if s[-2] <= DEGENERACY_RTOL * s[0]:
        raise EstimationError("degenerate configuration: DLT system is rank-deficient")
    Hn = vt[-1].reshape(3, 3)
    H = np.linalg.inv(Td) @ Hn @ Ts
    if abs(H[2, 2]) < 1e-12:
        raise EstimationError("degenerate homography: zero scale term")
    return H / H[2, 2]


def symmetric_transfer_error(H: np.ndarray, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Squared forward plus squared backward transfer error per pair.

    A model that cannot be inverted maps everything to infinite error, so
    it loses every consensus comparison instead of raising mid-search.
    """
    try:
        Hinv = np.linalg.inv(H)
    except np.linalg.LinAlgError:
        return np.full(len(src), np.inf)
    def apply(M, pts):
        ph = np.column_stack([pts, np.ones(len(pts))]) @ M.T
        zs = ph[:, 2]
        bad = np.abs(zs) < 1e-12
        zs = np.where(bad, 1.0, zs)
        out = ph[:, :2] / zs[:, None]
        out[bad] = np.inf
        return out
    fwd = apply(H, src) - dst
    bwd = apply(Hinv, dst) - src
    err = (fwd ** 2).sum(axis=1) + (bwd ** 2).sum(axis=1)
    return np.where(np.isfinite(err), err, np.inf)


def _degenerate_sample(pts: np.ndarray) -> bool:
    """True when any 3 of the 4 sampled points are (nearly) collinear."""
    for skip in range(4):
        tri = np.delete(pts, skip, axis=0)
        area2 = abs(
            (tri[1, 0] - tri[0, 0]) * (tri[2, 1] - tri[0, 1])
            - (tri[2, 0] - tri[0, 0]) * (tri[1, 1] - tri[0, 1])
        )
        if area2 < MIN_TRIANGLE_AREA:
            return True
    return False


def msac_homography(
    src: np.ndarray,
    dst: np.ndarray,
    cfg: MsacConfig,
    seed: int | np.random.Generator = 0,
    provider: str = "",
) -> HomographyEstimate:
    """Robust homography via MSAC with DLT refit on the inlier set.

    Per-point cost is ``min(transfer_error^2, threshold^2)``, so outliers pay
    a constant penalty instead of a hard vote.  Degenerate 4-point samples
    (three collinear source points) are re-drawn without consuming an
    iteration, up to a hard attempt cap.  The iteration budget shrinks as
    better consensus sets appear, using the standard coupon argument on the
    inlier ratio.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    n = len(src)
    need = max(4, cfg.min_inliers)
    if n < need:
        raise EstimationError(f"need at least {need} correspondences, got {n}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    thr2 = cfg.inlier_threshold ** 2
    best_cost = math.inf
    best_H: np.ndarray | None = None
    best_mask: np.ndarray | None = None
    iterations_needed = cfg.max_iterations
    completed = 0
    attempts = 0
    max_attempts = SKIP_FACTOR * cfg.max_iterations
    while completed < iterations_needed and attempts < max_attempts:
        attempts += 1
        pick = rng.choice(n, size=4, replace=False)
        if _degenerate_sample(src[pick]):
            continue
        try:
            H = dlt_homography(src[pick], dst[pick])
        except EstimationError:
            continue
        completed += 1
        err2 = symmetric_transfer_error(H, src, dst)
        cost = float(np.minimum(err2, thr2).sum())
        if cost < best_cost:
            best_cost = cost
            best_H = H
            best_mask = err2 <= thr2
            ratio = best_mask.mean()
            if 0.0 < ratio < 1.0:
                est = math.log(1.0 - cfg.confidence_target) / math.log(1.0 - ratio ** 4)
                iterations_needed = min(cfg.max_iterations, max(1, math.ceil(est)))
            elif ratio >= 1.0:
                iterations_needed = completed  # cannot do better
    if best_H is None or best_mask is None:
        raise EstimationError("no non-degenerate consensus model found")
    if int(best_mask.sum()) < cfg.min_inliers:
        raise EstimationError(
            f"no consensus: best model has {int(best_mask.sum())} inliers, "
            f"need {cfg.min_inliers}"
        )
    refit_mask = best_mask
    H_final = best_H
    try:
        refit = dlt_homography(src[best_mask], dst[best_mask])
        err2 = symmetric_transfer_error(refit, src, dst)
        mask = err2 <= thr2
        if int(mask.sum()) >= cfg.min_inliers:
            H_final = refit
            refit_mask = mask
    except EstimationError:
        pass  # keep the search model when the refit degenerates
    if abs(np.linalg.det(H_final[:2, :2])) < 1e-12:
        raise EstimationError("estimated homography collapses the plane")
    return HomographyEstimate(
        H=H_final,
        inlier_mask=refit_mask,
        confidence=float(refit_mask.mean()),
        provider=provider,
    )


def density_weights(xs: np.ndarray, bins: int, frame_width: float) -> np.ndarray:
    """Inverse-crowding weights from a fixed-bin histogram of x positions.

    Each point's raw weight is 1/count(its bin); the set is then scaled to
    mean 1 so downstream weighted sums stay comparable across pairs.  All
    positions must lie inside [0, frame_width).
    """
    xs = np.asarray(xs, dtype=np.float64)
    if xs.ndim != 1 or len(xs) == 0:
        raise EstimationError("density_weights needs a non-empty 1-D position array")
    if bins < 1:
        raise EstimationError("density_weights needs bins >= 1")
    if np.any(xs < 0) or np.any(xs >= frame_width):
        raise EstimationError("positions outside [0, frame_width)")
    idx = np.minimum((xs / frame_width * bins).astype(np.intp), bins - 1)
    counts = np.bincount(idx, minlength=bins)
    w = 1.0 / counts[idx]
    return w * (len(w) / w.sum())
