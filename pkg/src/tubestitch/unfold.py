"""Depth-centered unwrapping of annular frames onto a rectangular grid.

The interior of a tube appears in each frame as an annulus around the deepest
visible point.  This module finds that point (the depth center), smooths its
trajectory over the sequence, and resamples the annulus between ``r_inner``
and a per-frame ``r_outer`` onto a rectangle: column = angle, row = radius,
with row 0 at the outer radius.

Angle convention: theta = 2*pi*u/out_w, measured from the +x axis and growing
counter-clockwise in image coordinates, i.e. a sample at angle theta sits at
``(cx + r*cos(theta), cy + r*sin(theta))`` with y pointing down.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import GeometryError
from .frames import Frame, FrameSequence
from .raster import bilinear_sample, round_u8

#: Gaussian sigma used on luminance when no depth raster is available.
FALLBACK_BLUR_SIGMA = 5.0
#: Exponential smoothing factor for the center trajectory.
TRAJECTORY_ALPHA = 0.5
#: Per-step jump clamp, as a fraction of the frame width.
MAX_JUMP_FRACTION = 0.1


@dataclass
class DepthTrack:
    """Per-frame center estimates and unwrap radii for one sequence."""

    centers_raw: list[tuple[int, int]]
    centers_smoothed: list[tuple[float, float]]
    r_outer: list[int]
    r_inner: int
    sources: list[str] = field(default_factory=list)  # "depth" or "luminance"

    @property
    def used_fallback(self) -> bool:
        return any(s == "luminance" for s in self.sources)

    def to_dict(self) -> dict:
        return {
            "r_inner": self.r_inner,
            "frames": [
                {
                    "raw": [int(rx), int(ry)],
                    "smoothed": [float(sx), float(sy)],
                    "r_outer": int(ro),
                    "source": src,
                }
                for (rx, ry), (sx, sy), ro, src in zip(
                    self.centers_raw, self.centers_smoothed, self.r_outer, self.sources
                )
            ],
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "DepthTrack":
        frames = payload["frames"]
        return cls(
            centers_raw=[(int(f["raw"][0]), int(f["raw"][1])) for f in frames],
            centers_smoothed=[(float(f["smoothed"][0]), float(f["smoothed"][1])) for f in frames],
            r_outer=[int(f["r_outer"]) for f in frames],
            r_inner=int(payload["r_inner"]),
            sources=[str(f["source"]) for f in frames],
        )


@dataclass
class UnfoldedFrame:
    index: int
    raster: np.ndarray               # uint8 [out_h, out_w, 3]
    center: tuple[float, float]
    r_inner: int
    r_outer: int

    @property
    def width(self) -> int:
        return self.raster.shape[1]

    @property
    def height(self) -> int:
        return self.raster.shape[0]


def depth_proxy(frame: Frame) -> np.ndarray:
    """Closeness stand-in when no depth raster exists: blurred luminance.

    The tube's far interior is dark, so low blurred luminance marks the
    deepest direction, matching the convention that smaller values are
    farther away.
    """
    return ndimage.gaussian_filter(
        frame.gray.astype(np.float64), sigma=FALLBACK_BLUR_SIGMA, mode="nearest"
    )


def locate_depth_center(
    frame: Frame, margin: int, allow_fallback: bool = True
) -> tuple[int, int]:
    """Pixel (cx, cy) of minimum depth value inside the margin-bounded interior.

    The depth raster is median-filtered 3x3 first so a single corrupt pixel
    cannot claim the minimum.  Ties resolve to the smallest row, then the
    smallest column.  Without a depth raster the blurred-luminance proxy is
    used when ``allow_fallback`` is set; otherwise GeometryError.
    """
    h, w = frame.height, frame.width
    if w - 2 * margin < 1 or h - 2 * margin < 1:
        raise GeometryError(f"margin {margin} leaves no interior in a {w}x{h} frame")
    if frame.depth is not None:
        field_ = ndimage.median_filter(frame.depth.astype(np.float64), size=3, mode="nearest")
    elif allow_fallback:
        field_ = depth_proxy(frame)
    else:
        raise GeometryError(f"frame {frame.index} has no depth raster and fallback is disabled")
    interior = field_[margin:h - margin, margin:w - margin]
    flat = int(np.argmin(interior))          # C order: smallest row, then column
    iy, ix = divmod(flat, interior.shape[1])
    return ix + margin, iy + margin


def smooth_trajectory(
    raw_centers: list[tuple[float, float]], frame_width: int
) -> list[tuple[float, float]]:
    """Exponential smoothing of the center track with a per-step jump clamp.

    s_1 = raw_1; s_k = alpha*raw_k + (1-alpha)*s_{k-1}.  If the smoothed step
    exceeds 10 % of the frame width it is shortened to that bound along the
    same direction, which keeps a single wild estimate from dragging the
    unwrap center across the frame.
    """
    if not raw_centers:
        return []
    limit = MAX_JUMP_FRACTION * frame_width
    out = [(float(raw_centers[0][0]), float(raw_centers[0][1]))]
    for raw in raw_centers[1:]:
        px, py = out[-1]
        ex = TRAJECTORY_ALPHA * raw[0] + (1.0 - TRAJECTORY_ALPHA) * px
        ey = TRAJECTORY_ALPHA * raw[1] + (1.0 - TRAJECTORY_ALPHA) * py
        jx, jy = ex - px, ey - py
        norm = math.hypot(jx, jy)
        if norm > limit:
            scale = limit / norm
            ex, ey = px + jx * scale, py + jy * scale
        out.append((ex, ey))
    return out


def r_outer_for(center: tuple[float, float], width: int, height: int) -> int:
    """Largest integer radius around ``center`` that stays inside the raster."""
    cx, cy = center
    return int(math.floor(min(cx, cy, width - 1 - cx, height - 1 - cy)))


def build_depth_track(
    seq: FrameSequence, r_inner: int, margin: int, allow_fallback: bool = True
) -> DepthTrack:
    """Locate, smooth, and bound the unwrap geometry for a whole sequence."""
    raw: list[tuple[int, int]] = []
    sources: list[str] = []
    for frame in seq:
        raw.append(locate_depth_center(frame, margin, allow_fallback=allow_fallback))
        sources.append("depth" if frame.depth is not None else "luminance")
    smoothed = smooth_trajectory([(float(x), float(y)) for x, y in raw], seq.width)
    radii = []
    for k, center in enumerate(smoothed):
        ro = r_outer_for(center, seq.width, seq.height)
        if r_inner >= ro:
            raise GeometryError(
                f"frame {seq[k].index}: r_inner {r_inner} >= r_outer {ro} "
                f"(center too close to the frame edge?)"
            )
        radii.append(ro)
    return DepthTrack(
        centers_raw=raw,
        centers_smoothed=smoothed,
        r_outer=radii,
        r_inner=int(r_inner),
        sources=sources,
    )


def unwrap_annulus(
    frame: Frame,
    center: tuple[float, float],
    r_inner: int,
    r_outer: int,
    out_w: int,
    out_h: int,
) -> UnfoldedFrame:
    """Resample the annulus onto a rectangle (column = angle, row = radius).

    Output row v samples radius ``r_outer - (r_outer - r_inner) * v/(out_h-1)``
    so row 0 is the outer rim and the last row the inner rim.  Sampling is
    bilinear with edge clamping.
    """
    if r_inner >= r_outer:
        raise GeometryError(f"r_inner {r_inner} must be smaller than r_outer {r_outer}")
    if out_w < 1 or out_h < 2:
        raise GeometryError(f"unwrap size {out_w}x{out_h} is degenerate")
    cx, cy = float(center[0]), float(center[1])
    theta = 2.0 * np.pi * np.arange(out_w, dtype=np.float64) / out_w
    radius = r_outer - (r_outer - r_inner) * np.arange(out_h, dtype=np.float64) / (out_h - 1)
    xs = cx + radius[:, None] * np.cos(theta)[None, :]
    ys = cy + radius[:, None] * np.sin(theta)[None, :]
    raster = round_u8(bilinear_sample(frame.color, xs, ys))
    return UnfoldedFrame(
        index=frame.index,
        raster=raster,
        center=(cx, cy),
        r_inner=int(r_inner),
        r_outer=int(r_outer),
    )


def midpoint_circle(cx: int, cy: int, r: int) -> list[tuple[int, int]]:
    """Integer pixel set of the canonical midpoint circle of radius ``r``."""
    if r < 0:
        raise ValueError("radius must be non-negative")
    if r == 0:
        return [(cx, cy)]
    pts = set()
    x, y = 0, r
    d = 1 - r
    while x <= y:
        for px, py in (
            (x, y), (y, x), (y, -x), (x, -y),
            (-x, -y), (-y, -x), (-y, x), (-x, y),
        ):
            pts.add((cx + px, cy + py))
        if d < 0:
            d += 2 * x + 3
        else:
            d += 2 * (x - y) + 5
            y -= 1
        x += 1
    return sorted(pts)


def annotate_original(
    frame: Frame, center: tuple[float, float], r_inner: int, r_outer: int
) -> np.ndarray:
    """Copy of the frame with the unwrap circles drawn 1 px wide.

    Outer circle pure red, inner circle pure green; center and radii are
    rounded to integers for rasterization.  Pixels outside the raster are
    skipped.
    """
    out = frame.color.copy()
    h, w = out.shape[:2]
    cx = int(math.floor(center[0] + 0.5))
    cy = int(math.floor(center[1] + 0.5))
    for radius, color in ((int(round(r_outer)), (255, 0, 0)), (int(round(r_inner)), (0, 255, 0))):
        for px, py in midpoint_circle(cx, cy, radius):
            if 0 <= px < w and 0 <= py < h:
                out[py, px] = color
    return out


def annulus_only(frame: Frame, center: tuple[float, float], r_inner: int, r_outer: int) -> np.ndarray:
    """The original frame masked to the unwrapped annulus (elsewhere black)."""
    h, w = frame.height, frame.width
    ys, xs = np.mgrid[0:h, 0:w]
    rr = np.hypot(xs - center[0], ys - center[1])
    mask = (rr >= r_inner) & (rr <= r_outer)
    out = np.zeros_like(frame.color)
    out[mask] = frame.color[mask]
    return out
