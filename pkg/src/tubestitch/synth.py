"""Synthetic tube scenes with exact ground truth.

A camera travels down the axis of a textured cylinder, looking forward.  Each
frame is rendered by casting a ray through every pixel and intersecting it
with the cylinder wall; the texture is indexed by (angle, axial position),
one texel per world unit axially, wrapped in both directions.  Because the
geometry is closed-form, the renderer also emits exact per-frame centers,
exact per-pair unfolded-pixel motion, and analytically unfolded rasters —
the oracles the rest of the test suite leans on.

Depth conventions: the per-frame depth raster stores *closeness* R/(R + t)
(t = axial distance to the wall), so deeper pixels have smaller values and
the darkest point of the lumen is the map's minimum — matching what
monocular-depth exports look like.  ``render_axis_depth`` exposes the metric
axial distance itself for geometry checks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .compose import Panorama, composite, cylindrical_project
from .errors import GeometryError
from .formats import dump_json, load_json, write_dmap
from .frames import Frame, FrameSequence
from .offsetopt import OffsetRecord, StitchParams
from .raster import round_u8, write_image

# Rays whose wall hit lies beyond MISS_FACTOR * focal * radius are treated as
# looking down the open lumen: painted black, closeness 0.  The factor is
# chosen so only the few pixels within ~1.25 px of the vanishing point miss,
# which keeps the depth minimum a single pixel after median filtering.
MISS_FACTOR = 0.8

# Default focal * radius product relative to r_inner^2.  The axial texture
# rate of a rendered frame is (focal * radius) / rho^2 texels per pixel,
# largest at the inner unwrap radius; keeping it just under one there means
# the frames never undersample the texture anywhere in the annulus.
SAMPLING_FACTOR = 0.95

FIDUCIAL_PERIOD = 32
FIDUCIAL_WIDTH = 2
FIDUCIAL_DEPTH = 55.0


@dataclass
class CameraPose:
    z: float          # axial position, world units (1 unit = 1 texel row)
    twist: float      # roll about the tube axis, radians
    ox: float = 0.0   # lateral offset, world units
    oy: float = 0.0


@dataclass
class GroundTruth:
    centers: list[tuple[float, float]]    # per-frame true depth center (x, y)
    dy_star: list[float]                  # per-pair vertical motion, unfolded px
    dx_star: list[float]                  # per-pair horizontal motion, unfolded px
    r_outer: int
    r_inner: int
    unwrap_w: int
    unwrap_h: int

    def to_dict(self) -> dict:
        return {
            "centers": [[float(cx), float(cy)] for cx, cy in self.centers],
            "dy_star": [float(v) for v in self.dy_star],
            "dx_star": [float(v) for v in self.dx_star],
            "r_outer": self.r_outer,
            "r_inner": self.r_inner,
            "unwrap_w": self.unwrap_w,
            "unwrap_h": self.unwrap_h,
        }

    def write(self, path) -> None:
        dump_json(path, self.to_dict())

    @classmethod
    def read(cls, path) -> "GroundTruth":
        doc = load_json(path)
        return cls(
            centers=[(float(c[0]), float(c[1])) for c in doc["centers"]],
            dy_star=[float(v) for v in doc["dy_star"]],
            dx_star=[float(v) for v in doc["dx_star"]],
            r_outer=int(doc["r_outer"]),
            r_inner=int(doc["r_inner"]),
            unwrap_w=int(doc["unwrap_w"]),
            unwrap_h=int(doc["unwrap_h"]),
        )

    def stitch_params(self) -> StitchParams:
        records = [
            OffsetRecord(frame=i + 1, dy=dy, dx=dx, provider="truth", score=0.0)
            for i, (dy, dx) in enumerate(zip(self.dy_star, self.dx_star))
        ]
        return StitchParams(records=records)


@dataclass
class SynthScene:
    texture: np.ndarray                # uint8 [Ht, Wt, 3]; x = angle, y = axial
    cylinder_radius: float
    camera_path: list[CameraPose]
    frame_size: int                    # odd, so the axis lands on one pixel
    noise_sigma: float
    focal_px: float
    r_inner: int
    unwrap_w: int = 1024
    unwrap_h: int = 64

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        th, tw = self.texture.shape[:2]
        if tw < 256 or th < 64:
            raise GeometryError(f"texture {tw}x{th} below minimum 256x64")
        if self.frame_size % 2 == 0 or self.frame_size < 65:
            raise GeometryError(f"frame_size must be odd and >= 65, got {self.frame_size}")
        if self.focal_px <= 0 or self.cylinder_radius <= 0:
            raise GeometryError("focal_px and cylinder_radius must be positive")
        if not self.camera_path:
            raise GeometryError("camera path is empty")
        zs = [p.z for p in self.camera_path]
        if any(b <= a for a, b in zip(zs, zs[1:])):
            raise GeometryError("camera axial positions must be strictly increasing")
        half_r = self.cylinder_radius / 2.0
        for k, p in enumerate(self.camera_path):
            if math.hypot(p.ox, p.oy) >= half_r:
                raise GeometryError(
                    f"pose {k}: lateral offset {math.hypot(p.ox, p.oy):.3f} "
                    f"leaves the safe interior (< {half_r:.3f})"
                )
        if not (0 < self.r_inner < self.r_outer):
            raise GeometryError(f"r_inner {self.r_inner} outside (0, {self.r_outer})")
        if self.noise_sigma < 0:
            raise GeometryError("noise_sigma must be >= 0")
        if self.unwrap_w < 8 or self.unwrap_h < 8:
            raise GeometryError("unwrap dimensions must be >= 8")

    @property
    def n_frames(self) -> int:
        return len(self.camera_path)

    @property
    def center(self) -> float:
        return (self.frame_size - 1) / 2.0

    @property
    def r_outer(self) -> int:
        return (self.frame_size - 1) // 2

    @property
    def t_miss(self) -> float:
        return MISS_FACTOR * self.focal_px * self.cylinder_radius


def _value_noise(h: int, w: int, period: int, rng) -> np.ndarray:
    """Bilinear lattice noise in [-1, 1], seamless along x."""
    gw = w // period
    gh = h // period + 1
    grid = rng.uniform(-1.0, 1.0, size=(gh + 1, gw))
    xs = np.arange(w, dtype=np.float64) / period
    ys = np.arange(h, dtype=np.float64) / period
    x0 = np.floor(xs).astype(int)
    y0 = np.floor(ys).astype(int)
    fx = xs - x0
    fy = ys - y0
    x0 %= gw
    x1 = (x0 + 1) % gw
    y1 = np.minimum(y0 + 1, gh)
    top = grid[np.ix_(y0, x0)] * (1 - fx) + grid[np.ix_(y0, x1)] * fx
    bot = grid[np.ix_(y1, x0)] * (1 - fx) + grid[np.ix_(y1, x1)] * fx
    return top * (1 - fy[:, None]) + bot * fy[:, None]


def make_texture(width: int = 1024, height: int = 512, seed: int = 7) -> np.ndarray:
    """Procedural wall texture: layered value noise plus a fiducial grid.

    Periods divide the width so the angular seam is invisible; the grid
    crossings give corner detectors something unambiguous every 32 texels.
    """
    if width % 64 or height < 64:
        raise GeometryError("texture width must be a multiple of 64, height >= 64")
    rng = np.random.default_rng(seed)
    lum = np.full((height, width), 128.0)
    # Fine-period noise stays faint on purpose: smooth random extrema have no
    # true landmark position, so blob detectors that pick them up localize
    # them inconsistently between frames.  The dot field below carries the
    # trackable detail instead.
    for period, amp in ((64, 50.0), (16, 12.0), (4, 5.0)):
        lum += amp * _value_noise(height, width, period, rng)
    tint_r = 22.0 * _value_noise(height, width, 128, rng)
    tint_b = 22.0 * _value_noise(height, width, 128, rng)
    # Dot field: small discs localize equally well in both axes, so corner
    # and blob detectors get anchors away from the grid lines.
    n_dots = (width * height) // 512
    dot_x = rng.uniform(0.0, width, size=n_dots)
    dot_y = rng.uniform(0.0, height, size=n_dots)
    dot_r = rng.uniform(1.5, 3.0, size=n_dots)
    dot_a = rng.uniform(40.0, 70.0, size=n_dots) * rng.choice((-1.0, 1.0), size=n_dots)
    for cx, cy, radius, amp in zip(dot_x, dot_y, dot_r, dot_a):
        half = int(math.ceil(radius)) + 1
        wx = np.arange(int(math.floor(cx)) - half, int(math.floor(cx)) + half + 1)
        wy = np.arange(int(math.floor(cy)) - half, int(math.floor(cy)) + half + 1)
        rr2 = (wy - cy)[:, None] ** 2 + (wx - cx)[None, :] ** 2
        bump = amp * np.clip(1.0 - rr2 / (radius * radius), 0.0, None)
        lum[np.ix_(wy % height, wx % width)] += bump
    xs = np.arange(width)
    ys = np.arange(height)
    lines = ((xs % FIDUCIAL_PERIOD) < FIDUCIAL_WIDTH)[None, :] | \
            ((ys % FIDUCIAL_PERIOD) < FIDUCIAL_WIDTH)[:, None]
    lum = np.where(lines, lum - FIDUCIAL_DEPTH, lum)
    rgb = np.stack([lum + tint_r, lum, lum + tint_b], axis=-1)
    return round_u8(rgb)


def _sample_texture(tex: np.ndarray, tx: np.ndarray, ty: np.ndarray) -> np.ndarray:
    """Bilinear texture fetch, wrapped on both axes."""
    h, w = tex.shape[:2]
    x0 = np.floor(tx)
    y0 = np.floor(ty)
    fx = (tx - x0)[..., None]
    fy = (ty - y0)[..., None]
    x0 = x0.astype(np.int64) % w
    y0 = y0.astype(np.int64) % h
    x1 = (x0 + 1) % w
    y1 = (y0 + 1) % h
    t = tex.astype(np.float64)
    top = t[y0, x0] * (1 - fx) + t[y0, x1] * fx
    bot = t[y1, x0] * (1 - fx) + t[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def _cast(scene: SynthScene, pose: CameraPose, dx: np.ndarray, dy: np.ndarray):
    """Intersect pixel rays with the wall.

    dx, dy are image-plane direction components ((px-c)/f, (py-c)/f).  The
    twist rotates image directions back into world directions.  Returns
    (t, phi, z, miss): axial hit distance, wall angle, axial hit position,
    and the lumen mask.
    """
    cosp = math.cos(pose.twist)
    sinp = math.sin(pose.twist)
    wx = dx * cosp + dy * sinp
    wy = -dx * sinp + dy * cosp
    a = wx * wx + wy * wy
    b = 2.0 * (pose.ox * wx + pose.oy * wy)
    c0 = pose.ox ** 2 + pose.oy ** 2 - scene.cylinder_radius ** 2
    disc = b * b - 4.0 * a * c0
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (-b + np.sqrt(disc)) / (2.0 * a)
    miss = ~np.isfinite(t) | (t > scene.t_miss) | (t <= 0)
    t = np.where(miss, scene.t_miss, t)
    hx = pose.ox + t * wx
    hy = pose.oy + t * wy
    phi = np.arctan2(hy, hx)
    return t, phi, pose.z + t, miss


def _frame_ray_grid(scene: SynthScene):
    c = scene.center
    px = np.arange(scene.frame_size, dtype=np.float64)
    dx = (px - c) / scene.focal_px
    return np.broadcast_to(dx[None, :], (scene.frame_size,) * 2), \
        np.broadcast_to(dx[:, None], (scene.frame_size,) * 2)


def _render_clean(scene: SynthScene, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Noise-free RGB (float64) and closeness map (float32) for pose k."""
    pose = scene.camera_path[k]
    dx, dy = _frame_ray_grid(scene)
    t, phi, z_hit, miss = _cast(scene, pose, dx, dy)
    tw = scene.texture.shape[1]
    tx = phi / (2.0 * math.pi) * tw
    rgb = _sample_texture(scene.texture, tx, z_hit)
    rgb[miss] = 0.0
    closeness = scene.cylinder_radius / (scene.cylinder_radius + t)
    closeness = np.where(miss, 0.0, closeness).astype(np.float32)
    return rgb, closeness


def render_axis_depth(scene: SynthScene, frame_index: int) -> np.ndarray:
    """Axial distance to the wall per pixel; lumen pixels carry the miss cap."""
    pose = scene.camera_path[_check_index(scene, frame_index)]
    dx, dy = _frame_ray_grid(scene)
    t, _, _, miss = _cast(scene, pose, dx, dy)
    return np.where(miss, scene.t_miss, t).astype(np.float32)


def _check_index(scene: SynthScene, frame_index: int) -> int:
    if not 1 <= frame_index <= scene.n_frames:
        raise GeometryError(
            f"frame index {frame_index} outside 1..{scene.n_frames}"
        )
    return frame_index - 1


def _motion_truth(scene: SynthScene) -> tuple[list[float], list[float]]:
    p = scene.focal_px * scene.cylinder_radius
    r_o = float(scene.r_outer)
    ky = (scene.unwrap_h - 1) / (r_o - scene.r_inner)
    u_o = p / r_o
    dy_star = []
    dx_star = []
    for a, b in zip(scene.camera_path, scene.camera_path[1:]):
        s = b.z - a.z
        dy_star.append(ky * (r_o - p / (u_o + s)))
        dx_star.append((b.twist - a.twist) * scene.unwrap_w / (2.0 * math.pi))
    return dy_star, dx_star


def render_sequence(scene: SynthScene, seed: int = 0) -> tuple[FrameSequence, GroundTruth]:
    """Render every pose to a frame (RGB + closeness depth) plus ground truth.

    Image noise is seeded and added after the clean render; depth maps stay
    exact.  Same scene and seed give byte-identical output.
    """
    rng = np.random.default_rng(seed)
    frames = []
    for k in range(scene.n_frames):
        rgb, closeness = _render_clean(scene, k)
        if scene.noise_sigma > 0:
            rgb = rgb + rng.normal(0.0, scene.noise_sigma, size=rgb.shape)
        frames.append(Frame(index=k + 1, color=round_u8(rgb), depth=closeness))
    dy_star, dx_star = _motion_truth(scene)
    c = scene.center
    truth = GroundTruth(
        centers=[(c, c)] * scene.n_frames,
        dy_star=dy_star,
        dx_star=dx_star,
        r_outer=scene.r_outer,
        r_inner=scene.r_inner,
        unwrap_w=scene.unwrap_w,
        unwrap_h=scene.unwrap_h,
    )
    return FrameSequence(frames), truth


def ground_truth_unfold(scene: SynthScene, frame_index: int) -> np.ndarray:
    """The analytically exact unfolded raster for one frame.

    Texture is fetched straight through the ray geometry on the unfold grid —
    no intermediate image raster, no noise.
    """
    k = _check_index(scene, frame_index)
    pose = scene.camera_path[k]
    r_o = float(scene.r_outer)
    theta = 2.0 * math.pi * np.arange(scene.unwrap_w, dtype=np.float64) / scene.unwrap_w
    rho = r_o - (r_o - scene.r_inner) * np.arange(scene.unwrap_h, dtype=np.float64) / (scene.unwrap_h - 1)
    dx = rho[:, None] * np.cos(theta)[None, :] / scene.focal_px
    dy = rho[:, None] * np.sin(theta)[None, :] / scene.focal_px
    _, phi, z_hit, miss = _cast(scene, pose, dx, dy)
    tw = scene.texture.shape[1]
    rgb = _sample_texture(scene.texture, phi / (2.0 * math.pi) * tw, z_hit)
    rgb[miss] = 0.0
    return round_u8(rgb)


def ground_truth_strip(scene: SynthScene, truth: GroundTruth,
                       horizontal_threshold: float = 1e9,
                       focal_length: float | None = None) -> Panorama:
    """Composite the exact unfolds with the exact motion.

    Passing the pipeline's focal_length applies the same cylindrical warp the
    pipeline uses, so the strip is comparable pixel-for-pixel with its
    panorama output.
    """
    frames = [ground_truth_unfold(scene, i) for i in range(1, scene.n_frames + 1)]
    masks = None
    if focal_length is not None:
        projected = [cylindrical_project(f, focal_length) for f in frames]
        frames = [p[0] for p in projected]
        masks = [p[1] for p in projected]
    return composite(frames, truth.stitch_params(), horizontal_threshold, masks=masks)


def step_for_dy(scene_like, dy_star: float) -> float:
    """Invert the vertical-motion formula: the axial step giving dy_star."""
    p = scene_like.focal_px * scene_like.cylinder_radius
    r_o = float(scene_like.r_outer)
    ky = (scene_like.unwrap_h - 1) / (r_o - scene_like.r_inner)
    target_rho = r_o - dy_star / ky
    if target_rho <= 0:
        raise GeometryError(f"dy_star {dy_star} outside the representable range")
    return p / target_rho - p / r_o


@dataclass
class _GeometryStub:
    # duck-typed carrier for step_for_dy before the scene object exists
    focal_px: float
    cylinder_radius: float
    r_outer: int
    r_inner: int
    unwrap_h: int


def make_scene(
    dy_steps,
    twists=None,
    frame_size: int = 721,
    r_inner: int = 300,
    focal_px: float = 1500.0,
    cylinder_radius: float | None = None,
    unwrap_w: int = 1024,
    unwrap_h: int = 64,
    noise_sigma: float = 0.0,
    offsets=None,
    texture: np.ndarray | None = None,
    texture_seed: int = 7,
) -> SynthScene:
    """Build a scene whose per-pair vertical motion is exactly dy_steps.

    dy_steps: target dy* per pair (length N-1), in unfolded pixels.
    twists: target dx* per pair in unfolded pixels (defaults to zero).
    offsets: optional per-frame (ox, oy) lateral offsets, world units.
    """
    dy_steps = [float(v) for v in np.atleast_1d(dy_steps)]
    n = len(dy_steps) + 1
    r_outer = (frame_size - 1) // 2
    if cylinder_radius is None:
        cylinder_radius = SAMPLING_FACTOR * r_inner * r_inner / focal_px
    stub = _GeometryStub(focal_px, cylinder_radius, r_outer, r_inner, unwrap_h)
    if twists is None:
        dx_steps = [0.0] * (n - 1)
    else:
        dx_steps = [float(v) for v in np.atleast_1d(twists)]
        if len(dx_steps) == 1 and n > 2:
            dx_steps = dx_steps * (n - 1)
    if len(dx_steps) != n - 1:
        raise GeometryError(f"need {n - 1} twist steps, got {len(dx_steps)}")
    if offsets is None:
        offsets = [(0.0, 0.0)] * n
    if len(offsets) != n:
        raise GeometryError(f"need {n} lateral offsets, got {len(offsets)}")

    z = 0.0
    twist = 0.0
    path = [CameraPose(z=z, twist=twist, ox=offsets[0][0], oy=offsets[0][1])]
    for k in range(n - 1):
        z += step_for_dy(stub, dy_steps[k])
        twist += dx_steps[k] * 2.0 * math.pi / unwrap_w
        path.append(CameraPose(z=z, twist=twist, ox=offsets[k + 1][0], oy=offsets[k + 1][1]))
    if texture is None:
        texture = make_texture(seed=texture_seed)
    return SynthScene(
        texture=texture,
        cylinder_radius=cylinder_radius,
        camera_path=path,
        frame_size=frame_size,
        noise_sigma=noise_sigma,
        focal_px=focal_px,
        r_inner=r_inner,
        unwrap_w=unwrap_w,
        unwrap_h=unwrap_h,
    )


def write_outputs(out_dir, scene: SynthScene, seq: FrameSequence,
                  truth: GroundTruth, focal_length: float | None = None,
                  horizontal_threshold: float = 1e9) -> None:
    """Emit frames, depth maps, ground truth, and the reference strip.

    focal_length / horizontal_threshold should mirror the pipeline settings
    the frames will be stitched with, so the written strip composites the
    exact unfolds the same way the pipeline composites its estimates.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for frame in seq:
        write_image(out_dir / f"frame_{frame.index:06d}.png", frame.color)
        write_dmap(out_dir / f"frame_{frame.index:06d}.dmap", frame.depth)
    truth.write(out_dir / "groundtruth.json")
    strip = ground_truth_strip(scene, truth, horizontal_threshold, focal_length)
    write_image(out_dir / "groundtruth_strip.png", strip.raster)
