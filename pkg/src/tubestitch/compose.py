"""Cylindrical projection and panorama compositing.

Unfolded frames are warped onto a cylinder, then stacked into one long strip
using the per-pair offsets: each frame lands ``sum(dy)`` rows below the first
and is circularly shifted left by ``sum(dx)`` columns (the unfolded x-axis is
angular, so horizontal shifts wrap).  Overlapping rows are feathered with a
tent profile so seams cross-fade linearly.  Horizontal drift beyond the
configured threshold is reined in by scaling every later dx contribution.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import GeometryError
from .formats import dump_json, load_json
from .raster import bilinear_sample, round_u8


@dataclass
class Placement:
    frame: int       # 1-based frame ordinal
    y: int           # top row of this frame in the panorama
    x_shift: int     # columns the frame was rolled left by
    factor: float    # horizontal compression factor in force when placed


@dataclass
class Panorama:
    raster: np.ndarray                 # uint8 [h, w, 3]
    placements: list[Placement] = field(default_factory=list)
    post_scale: float = 1.0            # column resample factor from post_stitch_adjust

    @property
    def height(self) -> int:
        return self.raster.shape[0]

    @property
    def width(self) -> int:
        return self.raster.shape[1]

    def provenance(self) -> dict:
        return {
            "height": self.height,
            "width": self.width,
            "post_scale": self.post_scale,
            "placements": [
                {"frame": p.frame, "y": p.y, "x_shift": p.x_shift, "factor": p.factor}
                for p in self.placements
            ],
        }

    def write_provenance(self, path) -> None:
        dump_json(path, self.provenance())


def read_placements(path) -> list[Placement]:
    doc = load_json(path)
    return [
        Placement(frame=int(p["frame"]), y=int(p["y"]),
                  x_shift=int(p["x_shift"]), factor=float(p["factor"]))
        for p in doc["placements"]
    ]


def cylindrical_project(image: np.ndarray, focal_length: float) -> tuple[np.ndarray, np.ndarray]:
    """Warp an image onto a cylinder of the given focal length.

    Returns (projected, valid) where valid marks destination pixels whose
    source sample fell inside the raster.  The principal point is the image
    center; destination (x', y') samples the source at

        x = cx + f*tan((x' - cx)/f),   y = cy + (y' - cy)*sqrt((x-cx)^2 + f^2)/f

    which leaves the center column untouched and stretches rows toward the
    sides.  Larger focal lengths approach the identity.
    """
    if focal_length <= 0:
        raise GeometryError(f"focal length must be positive, got {focal_length}")
    h, w = image.shape[:2]
    cx = (w - 1) / 2.0
    cy = (h - 1) / 2.0
    xs = np.arange(w, dtype=np.float64)
    ys = np.arange(h, dtype=np.float64)
    theta = (xs - cx) / focal_length
    in_domain = np.abs(theta) < (np.pi / 2.0)
    sx = np.where(in_domain, cx + focal_length * np.tan(np.where(in_domain, theta, 0.0)), -1.0)
    stretch = np.sqrt((sx - cx) ** 2 + focal_length ** 2) / focal_length
    sy = cy + (ys[:, None] - cy) * stretch[None, :]
    sx_full = np.broadcast_to(sx[None, :], (h, w))
    valid = (
        in_domain[None, :]
        & (sx_full >= 0.0) & (sx_full <= w - 1.0)
        & (sy >= 0.0) & (sy <= h - 1.0)
    )
    out = bilinear_sample(image, sx_full, sy)
    out[~valid] = 0.0
    return round_u8(out), valid


def _rasterize(frames: list[np.ndarray], placements: list[Placement],
               masks: list[np.ndarray] | None = None) -> np.ndarray:
    """Accumulate frames at fixed integer placements with tent-profile rows.

    Shared by composite() and replay_placements() so a stored provenance
    reproduces the raster bit for bit.
    """
    h, w = frames[0].shape[:2]
    height = max(p.y for p in placements) + h
    acc = np.zeros((height, w, 3), dtype=np.float64)
    wsum = np.zeros((height, w), dtype=np.float64)
    row_profile = np.minimum(np.arange(h) + 1.0, float(h) - np.arange(h))
    for k, (frame, place) in enumerate(zip(frames, placements)):
        if place.y < 0:
            raise GeometryError(f"frame {place.frame}: negative placement row {place.y}")
        rolled = np.roll(frame, -place.x_shift, axis=1).astype(np.float64)
        weight = np.broadcast_to(row_profile[:, None], (h, w)).copy()
        if masks is not None:
            weight *= np.roll(masks[k], -place.x_shift, axis=1)
        acc[place.y:place.y + h] += rolled * weight[:, :, None]
        wsum[place.y:place.y + h] += weight
    filled = wsum > 0
    out = np.zeros_like(acc)
    out[filled] = acc[filled] / wsum[filled][:, None]
    return round_u8(out)


def composite(frames: list[np.ndarray], params, horizontal_threshold: float,
              masks: list[np.ndarray] | None = None, first_frame: int = 1) -> Panorama:
    """Stack frames into a panorama using per-pair offsets.

    ``params`` is a StitchParams or any iterable of records with .dy and .dx.
    Placements are rounded from the float cumulative offsets, so fractional
    residue carries forward instead of drifting.  Once |cumulative dx|
    exceeds horizontal_threshold, later dx contributions are scaled by
    threshold/|cumulative| and the factor is recorded per placement.
    """
    records = list(params)
    if not frames:
        raise GeometryError("no frames to composite")
    if len(records) != len(frames) - 1:
        raise GeometryError(
            f"{len(frames)} frames need {len(frames) - 1} offset records, got {len(records)}"
        )
    shape = frames[0].shape
    for k, f in enumerate(frames):
        if f.shape != shape:
            raise GeometryError(f"frame {first_frame + k}: shape {f.shape} != {shape}")
    w = shape[1]

    placements = [Placement(frame=first_frame, y=0, x_shift=0, factor=1.0)]
    cum_dy = 0.0
    cum_dx = 0.0
    factor = 1.0
    for k, rec in enumerate(records):
        if rec.dy < 0:
            raise GeometryError(f"record {k}: negative dy {rec.dy} (clamp upstream)")
        cum_dy += rec.dy
        cum_dx += rec.dx * factor
        placements.append(Placement(
            frame=first_frame + k + 1,
            y=int(np.floor(cum_dy + 0.5)),
            x_shift=int(np.floor(cum_dx + 0.5)) % w,
            factor=factor,
        ))
        if abs(cum_dx) > horizontal_threshold:
            factor *= horizontal_threshold / abs(cum_dx)
    raster = _rasterize(frames, placements, masks)
    return Panorama(raster=raster, placements=placements)


def replay_placements(frames: list[np.ndarray], placements: list[Placement],
                      masks: list[np.ndarray] | None = None) -> Panorama:
    """Re-apply stored placements verbatim; the audit path for provenance."""
    if len(frames) != len(placements):
        raise GeometryError(
            f"{len(frames)} frames vs {len(placements)} placement records"
        )
    raster = _rasterize(frames, placements, masks)
    return Panorama(raster=raster, placements=list(placements))


def post_stitch_adjust(pan: Panorama, max_width: int) -> Panorama:
    """Compress the panorama columns to max_width by area averaging.

    Width within bounds is the identity (byte-identical raster).  Otherwise
    output column j averages the source span [j*r, (j+1)*r), r = width /
    max_width, computed exactly through a cumulative integral.
    """
    if max_width < 1:
        raise GeometryError(f"max_width must be >= 1, got {max_width}")
    if pan.width <= max_width:
        return Panorama(raster=pan.raster.copy(), placements=list(pan.placements),
                        post_scale=pan.post_scale)
    ratio = pan.width / max_width
    img = pan.raster.astype(np.float64)
    # cumulative integral along x: F[k] = sum of columns < k, F piecewise linear
    cs = np.zeros((pan.height, pan.width + 1, 3), dtype=np.float64)
    np.cumsum(img, axis=1, out=cs[:, 1:])
    edges = np.arange(max_width + 1, dtype=np.float64) * ratio
    lo = np.clip(np.floor(edges).astype(int), 0, pan.width)
    frac = edges - lo
    # F evaluated at fractional column positions
    f_at = cs[:, lo] + np.where(lo < pan.width, frac[None, :, None] * img[:, np.minimum(lo, pan.width - 1)], 0.0)
    out = (f_at[:, 1:] - f_at[:, :-1]) / ratio
    return Panorama(raster=round_u8(out), placements=list(pan.placements),
                    post_scale=pan.post_scale * (max_width / pan.width))
