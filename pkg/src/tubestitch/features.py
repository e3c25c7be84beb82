"""Feature detection, description, and matching on unfolded frames.

Two built-in providers:

* ``orb``  - FAST-9 corners ranked by Harris response, oriented by intensity
  centroid, described by a 256-bit rotated binary test pattern.
* ``dog``  - difference-of-Gaussians blobs over three octaves with subpixel
  refinement, described by an 8x8 grid of gradient magnitudes (64 floats,
  L2-normalized).

Matches between consecutive frames pass a mutual nearest-neighbor cross-check
and a ratio test before they are kept.  External providers exchange matches
through one-JSON-object-per-line files (see ``import_matches``).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import FormatError, MatchingError

# Detector constants (see also FeatureConfig for the tunable subset).
FAST_RADIUS_OFFSETS = [
    (0, -3), (1, -3), (2, -2), (3, -1), (3, 0), (3, 1), (2, 2), (1, 3),
    (0, 3), (-1, 3), (-2, 2), (-3, 1), (-3, 0), (-3, -1), (-2, -2), (-1, -3),
]
FAST_ARC = 9                      # contiguous circle pixels for a corner
HARRIS_K = 0.04
HARRIS_SIGMA = 1.5
ORIENTATION_RADIUS = 15           # intensity-centroid patch radius
BRIEF_BITS = 256
BRIEF_SIGMA = 2.0                 # pre-smoothing before intensity tests
DOG_SIGMA_NARROW = 1.6
DOG_SIGMA_WIDE = 2.2627           # 1.6 * sqrt(2)
DOG_OCTAVES = 3
DOG_CONTRAST = 4.0                # gray levels on the response
DOG_BORDER = 3                    # rows/cols ignored at each octave edge
DOG_GRID = 8                      # descriptor grid is DOG_GRID x DOG_GRID
DOG_SPACING = 1.5                 # descriptor sample spacing, octave pixels
BINARY_MAX_DISTANCE = float(BRIEF_BITS)
FLOAT_MAX_DISTANCE = 2.0          # two unit vectors are at most this far apart

_POPCOUNT = np.array([bin(v).count("1") for v in range(256)], dtype=np.uint8)


@dataclass
class Keypoint:
    x: float
    y: float
    response: float
    orientation: float            # radians
    descriptor: np.ndarray        # uint8[32] packed bits, or float32[64]

    @property
    def is_binary(self) -> bool:
        return self.descriptor.dtype == np.uint8


@dataclass
class RawMatch:
    frame_a: int
    frame_b: int
    xa: float
    ya: float
    xb: float
    yb: float
    score: float
    provider: str


def _brief_pattern() -> np.ndarray:
    """256 deterministic point-pair offsets inside the orientation patch."""
    rng = np.random.default_rng(0)
    pts = rng.normal(0.0, ORIENTATION_RADIUS / 2.5, size=(BRIEF_BITS, 4))
    return np.clip(pts, -ORIENTATION_RADIUS, ORIENTATION_RADIUS)


_PATTERN = _brief_pattern()


def _disc_offsets(radius: int) -> tuple[np.ndarray, np.ndarray]:
    dy, dx = np.mgrid[-radius:radius + 1, -radius:radius + 1]
    keep = dx * dx + dy * dy <= radius * radius
    return dx[keep].ravel(), dy[keep].ravel()


_DISC_DX, _DISC_DY = _disc_offsets(ORIENTATION_RADIUS)


def _fast_corners(gray: np.ndarray, threshold: int) -> np.ndarray:
    """Boolean corner map via the 16-pixel segment test (9 contiguous)."""
    g = gray.astype(np.int16)
    h, w = g.shape
    if h < 7 or w < 7:
        return np.zeros((h, w), dtype=bool)
    center = g[3:h - 3, 3:w - 3]
    bright = np.zeros(center.shape, dtype=np.uint32)
    dark = np.zeros(center.shape, dtype=np.uint32)
    for bit, (dx, dy) in enumerate(FAST_RADIUS_OFFSETS):
        ring = g[3 + dy:h - 3 + dy, 3 + dx:w - 3 + dx]
        bright |= (ring > center + threshold).astype(np.uint32) << bit
        dark |= (ring < center - threshold).astype(np.uint32) << bit
    corner = np.zeros(center.shape, dtype=bool)
    window = np.uint32((1 << FAST_ARC) - 1)
    for mask in (bright, dark):
        doubled = mask | (mask << np.uint32(16))
        hit = np.zeros(center.shape, dtype=bool)
        for shift in range(16):
            hit |= ((doubled >> np.uint32(shift)) & window) == window
        corner |= hit
    out = np.zeros((h, w), dtype=bool)
    out[3:h - 3, 3:w - 3] = corner
    return out


def _harris_response(gray: np.ndarray) -> np.ndarray:
    g = gray.astype(np.float64)
    gx = ndimage.sobel(g, axis=1, mode="nearest") / 8.0
    gy = ndimage.sobel(g, axis=0, mode="nearest") / 8.0
    sxx = ndimage.gaussian_filter(gx * gx, HARRIS_SIGMA, mode="nearest")
    syy = ndimage.gaussian_filter(gy * gy, HARRIS_SIGMA, mode="nearest")
    sxy = ndimage.gaussian_filter(gx * gy, HARRIS_SIGMA, mode="nearest")
    det = sxx * syy - sxy * sxy
    trace = sxx + syy
    return det - HARRIS_K * trace * trace


def _nms(xs: np.ndarray, ys: np.ndarray, scores: np.ndarray, radius: float, cap: int):
    """Greedy suppression: strongest first, drop anything within ``radius``."""
    order = np.argsort(-scores, kind="stable")
    keep: list[int] = []
    r2 = radius * radius
    kx: list[float] = []
    ky: list[float] = []
    for idx in order:
        x, y = float(xs[idx]), float(ys[idx])
        ok = True
        for qx, qy in zip(kx, ky):
            if (x - qx) ** 2 + (y - qy) ** 2 <= r2:
                ok = False
                break
        if ok:
            keep.append(int(idx))
            kx.append(x)
            ky.append(y)
            if len(keep) >= cap:
                break
    return keep


def _intensity_orientation(gray_f: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Angle of the intensity centroid of the disc patch around each point."""
    h, w = gray_f.shape
    px = np.clip(xs[:, None] + _DISC_DX[None, :], 0, w - 1).astype(np.intp)
    py = np.clip(ys[:, None] + _DISC_DY[None, :], 0, h - 1).astype(np.intp)
    patch = gray_f[py, px]
    m10 = (patch * _DISC_DX[None, :]).sum(axis=1)
    m01 = (patch * _DISC_DY[None, :]).sum(axis=1)
    return np.arctan2(m01, m10)


def _brief_descriptors(gray: np.ndarray, xs, ys, angles) -> np.ndarray:
    """Rotated binary test pattern, packed to 32 bytes per keypoint."""
    smooth = ndimage.gaussian_filter(gray.astype(np.float64), BRIEF_SIGMA, mode="nearest")
    h, w = smooth.shape
    cos = np.cos(angles)[:, None]
    sin = np.sin(angles)[:, None]
    p = _PATTERN
    ax = xs[:, None] + p[None, :, 0] * cos - p[None, :, 1] * sin
    ay = ys[:, None] + p[None, :, 0] * sin + p[None, :, 1] * cos
    bx = xs[:, None] + p[None, :, 2] * cos - p[None, :, 3] * sin
    by = ys[:, None] + p[None, :, 2] * sin + p[None, :, 3] * cos
    def at(px, py):
        ix = np.clip(np.rint(px), 0, w - 1).astype(np.intp)
        iy = np.clip(np.rint(py), 0, h - 1).astype(np.intp)
        return smooth[iy, ix]
    bits = at(ax, ay) < at(bx, by)
    return np.packbits(bits.astype(np.uint8), axis=1)


def detect_orb(gray: np.ndarray, max_keypoints: int = 500,
               fast_threshold: int = 20, nms_radius: float = 4.0) -> list[Keypoint]:
    """Corner keypoints with orientation and 256-bit binary descriptors."""
    corner = _fast_corners(gray, fast_threshold)
    ys, xs = np.nonzero(corner)
    if len(xs) == 0:
        return []
    harris = _harris_response(gray)
    scores = harris[ys, xs]
    keep = _nms(xs, ys, scores, nms_radius, max_keypoints)
    kx = xs[keep].astype(np.float64)
    ky = ys[keep].astype(np.float64)
    for i, idx in enumerate(keep):
        ox, oy = _refine_peak(harris, int(ys[idx]), int(xs[idx]))
        kx[i] += ox
        ky[i] += oy
    ks = scores[keep]
    angles = _intensity_orientation(gray.astype(np.float64), kx, ky)
    descs = _brief_descriptors(gray, kx, ky, angles)
    return [
        Keypoint(float(x), float(y), float(s), float(a), descs[i])
        for i, (x, y, s, a) in enumerate(zip(kx, ky, ks, angles))
    ]


def _refine_peak(d: np.ndarray, y: int, x: int) -> tuple[float, float]:
    """Subpixel offset from a 2-D quadratic fit on the 3x3 neighborhood."""
    gx = 0.5 * (d[y, x + 1] - d[y, x - 1])
    gy = 0.5 * (d[y + 1, x] - d[y - 1, x])
    hxx = d[y, x + 1] - 2.0 * d[y, x] + d[y, x - 1]
    hyy = d[y + 1, x] - 2.0 * d[y, x] + d[y - 1, x]
    hxy = 0.25 * (d[y + 1, x + 1] - d[y + 1, x - 1] - d[y - 1, x + 1] + d[y - 1, x - 1])
    det = hxx * hyy - hxy * hxy
    if abs(det) < 1e-12:
        return 0.0, 0.0
    ox = -(hyy * gx - hxy * gy) / det
    oy = -(hxx * gy - hxy * gx) / det
    return float(np.clip(ox, -0.5, 0.5)), float(np.clip(oy, -0.5, 0.5))


def _dog_descriptor(mag: np.ndarray, x: float, y: float) -> np.ndarray | None:
    """8x8 bilinear samples of gradient magnitude, L2-normalized."""
    h, w = mag.shape
    half = (DOG_GRID - 1) / 2.0
    grid = (np.arange(DOG_GRID) - half) * DOG_SPACING
    gx = np.clip(x + grid[None, :], 0, w - 1)
    gy = np.clip(y + grid[:, None], 0, h - 1)
    x0 = np.floor(gx).astype(np.intp)
    y0 = np.floor(gy).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = gx - x0
    fy = gy - y0
    vals = (
        mag[y0, x0] * (1 - fx) * (1 - fy)
        + mag[y0, x1] * fx * (1 - fy)
        + mag[y1, x0] * (1 - fx) * fy
        + mag[y1, x1] * fx * fy
    ).ravel()
    norm = float(np.linalg.norm(vals))
    if norm < 1e-9:
        return None
    return (vals / norm).astype(np.float32)


def detect_dog(gray: np.ndarray, max_keypoints: int = 500,
               nms_radius: float = 4.0) -> list[Keypoint]:
    """Blob keypoints from difference-of-Gaussians extrema over 3 octaves."""
    base = gray.astype(np.float64)
    found: list[tuple[float, float, float, np.ndarray | None]] = []
    for octave in range(DOG_OCTAVES):
        if min(base.shape) < 16:
            break
        narrow = ndimage.gaussian_filter(base, DOG_SIGMA_NARROW, mode="nearest")
        wide = ndimage.gaussian_filter(base, DOG_SIGMA_WIDE, mode="nearest")
        d = wide - narrow
        maxima = (d == ndimage.maximum_filter(d, size=3, mode="nearest")) & (d >= DOG_CONTRAST)
        minima = (d == ndimage.minimum_filter(d, size=3, mode="nearest")) & (d <= -DOG_CONTRAST)
        ext = maxima | minima
        # Peaks hugging an edge sit on truncated filter support, which skews
        # the quadratic refinement toward the interior; drop them instead.
        ext[:DOG_BORDER, :] = ext[-DOG_BORDER:, :] = False
        ext[:, :DOG_BORDER] = ext[:, -DOG_BORDER:] = False
        gmx = ndimage.sobel(narrow, axis=1, mode="nearest") / 8.0
        gmy = ndimage.sobel(narrow, axis=0, mode="nearest") / 8.0
        mag = np.hypot(gmx, gmy)
        scale = float(2 ** octave)
        for y, x in zip(*np.nonzero(ext)):
            ox, oy = _refine_peak(d, int(y), int(x))
            desc = _dog_descriptor(mag, float(x) + ox, float(y) + oy)
            if desc is None:
                continue
            found.append((
                (float(x) + ox) * scale,
                (float(y) + oy) * scale,
                float(d[y, x]),
                desc,
            ))
        base = ndimage.gaussian_filter(base, DOG_SIGMA_NARROW, mode="nearest")[::2, ::2]
    if not found:
        return []
    xs = np.array([f[0] for f in found])
    ys = np.array([f[1] for f in found])
    scores = np.abs(np.array([f[2] for f in found]))
    keep = _nms(xs, ys, scores, nms_radius, max_keypoints)
    h, w = gray.shape
    out = []
    for idx in keep:
        x, y, resp, desc = found[idx]
        out.append(Keypoint(
            x=float(np.clip(x, 0, w - 1)),
            y=float(np.clip(y, 0, h - 1)),
            response=float(resp),
            orientation=0.0,
            descriptor=desc,
        ))
    return out


def _distance_matrix(ka: list[Keypoint], kb: list[Keypoint]) -> tuple[np.ndarray, float]:
    """All-pairs descriptor distances; Hamming for binary, L2 for float."""
    if ka[0].is_binary != kb[0].is_binary:
        raise MatchingError("cannot match binary descriptors against float descriptors")
    if ka[0].is_binary:
        da = np.stack([k.descriptor for k in ka])
        db = np.stack([k.descriptor for k in kb])
        xor = da[:, None, :] ^ db[None, :, :]
        return _POPCOUNT[xor].sum(axis=2).astype(np.float64), BINARY_MAX_DISTANCE
    da = np.stack([k.descriptor for k in ka]).astype(np.float64)
    db = np.stack([k.descriptor for k in kb]).astype(np.float64)
    sq = (
        (da * da).sum(axis=1)[:, None]
        + (db * db).sum(axis=1)[None, :]
        - 2.0 * (da @ db.T)
    )
    return np.sqrt(np.maximum(sq, 0.0)), FLOAT_MAX_DISTANCE


def _ratio_ok(dists: np.ndarray, ratio: float) -> np.ndarray:
    """Per-row ratio test; a row with a single candidate passes by definition."""
    n_rows, n_cols = dists.shape
    if n_cols == 1:
        return np.ones(n_rows, dtype=bool)
    part = np.partition(dists, 1, axis=1)
    d1 = part[:, 0]
    d2 = part[:, 1]
    return d1 < ratio * d2


def match_descriptors(
    ka: list[Keypoint],
    kb: list[Keypoint],
    frame_a: int,
    provider: str,
    ratio: float = 0.8,
) -> list[RawMatch]:
    """Mutual nearest neighbors that pass the ratio test on both sides.

    score = 1 - distance/max_distance, so identical descriptors score 1.0.
    Applying the ratio test symmetrically keeps the result invariant under
    swapping the two keypoint sets.
    """
    if not ka or not kb:
        return []
    dists, max_d = _distance_matrix(ka, kb)
    fwd = np.argmin(dists, axis=1)
    bwd = np.argmin(dists, axis=0)
    row_ok = _ratio_ok(dists, ratio)
    col_ok = _ratio_ok(dists.T, ratio)
    out: list[RawMatch] = []
    for i, j in enumerate(fwd):
        if bwd[j] != i or not row_ok[i] or not col_ok[j]:
            continue
        d = float(dists[i, j])
        out.append(RawMatch(
            frame_a=frame_a,
            frame_b=frame_a + 1,
            xa=ka[i].x, ya=ka[i].y,
            xb=kb[j].x, yb=kb[j].y,
            score=1.0 - d / max_d,
            provider=provider,
        ))
    return out


# ---------------------------------------------------------------------------
# Match file interchange (one JSON object per line)

_MATCH_KEYS = {"a": int, "b": int, "xa": float, "ya": float,
               "xb": float, "yb": float, "score": float, "provider": str}


def write_matches(path, matches: list[RawMatch]) -> None:
    lines = []
    for m in matches:
        lines.append(json.dumps({
            "a": m.frame_a, "b": m.frame_b,
            "xa": m.xa, "ya": m.ya, "xb": m.xb, "yb": m.yb,
            "score": m.score, "provider": m.provider,
        }, sort_keys=True))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="ascii")


def import_matches(
    path, frame_a: int, width: int, height: int, provider: str | None = None
) -> tuple[list[RawMatch], int]:
    """Read matches for the pair (frame_a, frame_a+1) from a .jsonl file.

    A file may hold several pairs; lines for other pairs are skipped.  A line
    whose pair starts at frame_a but ends elsewhere is an error.  Lines with
    out-of-bounds coordinates are dropped and counted in the returned warning
    tally.  Malformed JSON raises FormatError naming the line.
    """
    path = Path(path)
    matches: list[RawMatch] = []
    warnings = 0
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}: line {lineno}: invalid JSON ({exc})") from exc
            if not isinstance(obj, dict) or set(obj) != set(_MATCH_KEYS):
                raise FormatError(
                    f"{path}: line {lineno}: expected keys {sorted(_MATCH_KEYS)}"
                )
            try:
                vals = {k: cast(obj[k]) for k, cast in _MATCH_KEYS.items()}
            except (TypeError, ValueError) as exc:
                raise FormatError(f"{path}: line {lineno}: bad value types") from exc
            if vals["a"] != frame_a:
                continue
            if vals["b"] != frame_a + 1:
                raise FormatError(
                    f"{path}: line {lineno}: pair ({vals['a']},{vals['b']}) "
                    f"does not follow frame {frame_a}"
                )
            if not (0 <= vals["xa"] < width and 0 <= vals["ya"] < height
                    and 0 <= vals["xb"] < width and 0 <= vals["yb"] < height):
                warnings += 1
                continue
            matches.append(RawMatch(
                frame_a=vals["a"], frame_b=vals["b"],
                xa=vals["xa"], ya=vals["ya"], xb=vals["xb"], yb=vals["yb"],
                score=vals["score"],
                provider=provider if provider is not None else vals["provider"],
            ))
    return matches, warnings
