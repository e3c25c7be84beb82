"""Binary/JSON interchange formats: depth rasters and stitch offset files.

Depth rasters (``.dmap``) are an ASCII header ``DMAP1\\n<width> <height>\\n``
followed by ``width*height`` little-endian float32 values, row-major.  Stitch
offset files (``.stitch.json``) are a JSON array of
``{"frame": int, "dy": float, "dx": float}`` objects, one per frame pair.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import FormatError

DMAP_MAGIC = b"DMAP1\n"


def write_dmap(path, depth: np.ndarray) -> None:
    depth = np.asarray(depth)
    if depth.ndim != 2:
        raise ValueError(f"depth raster must be 2-D, got shape {depth.shape}")
    h, w = depth.shape
    header = DMAP_MAGIC + f"{w} {h}\n".encode("ascii")
    Path(path).write_bytes(header + np.ascontiguousarray(depth, dtype="<f4").tobytes())


def read_dmap(path) -> np.ndarray:
    """Read a .dmap file; strict about header, payload size, and NaN values."""
    path = Path(path)
    raw = path.read_bytes()
    if not raw.startswith(DMAP_MAGIC):
        raise FormatError(f"{path}: missing DMAP1 header")
    dims_end = raw.find(b"\n", len(DMAP_MAGIC))
    if dims_end < 0:
        raise FormatError(f"{path}: truncated dimension line")
    dims = raw[len(DMAP_MAGIC):dims_end].split()
    if len(dims) != 2:
        raise FormatError(f"{path}: dimension line must hold '<width> <height>'")
    try:
        w, h = int(dims[0]), int(dims[1])
    except ValueError as exc:
        raise FormatError(f"{path}: non-integer dimensions {dims}") from exc
    if w <= 0 or h <= 0:
        raise FormatError(f"{path}: non-positive dimensions {w}x{h}")
    payload = raw[dims_end + 1:]
    expected = w * h * 4
    if len(payload) != expected:
        raise FormatError(
            f"{path}: payload holds {len(payload)} bytes, expected {expected} "
            f"for {w}x{h} float32"
        )
    depth = np.frombuffer(payload, dtype="<f4").reshape(h, w)
    if np.isnan(depth).any():
        raise FormatError(f"{path}: depth raster contains NaN")
    return depth.astype(np.float32)


def dump_json(path, payload) -> None:
    """Serialize with a stable layout so repeated runs are byte-identical."""
    text = json.dumps(payload, indent=2, sort_keys=True)
    Path(path).write_text(text + "\n", encoding="ascii")


def load_json(path):
    path = Path(path)
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc


def write_stitch_file(path, records) -> None:
    """records: iterable of (frame, dy, dx) triples."""
    payload = [
        {"frame": int(frame), "dy": float(dy), "dx": float(dx)}
        for frame, dy, dx in records
    ]
    dump_json(path, payload)


def read_stitch_file(path) -> list[tuple[int, float, float]]:
    payload = load_json(path)
    if not isinstance(payload, list):
        raise FormatError(f"{path}: stitch file must hold a JSON array")
    records = []
    for k, entry in enumerate(payload):
        if not isinstance(entry, dict) or set(entry) != {"frame", "dy", "dx"}:
            raise FormatError(f"{path}: entry {k} must be an object with frame/dy/dx")
        try:
            records.append((int(entry["frame"]), float(entry["dy"]), float(entry["dx"])))
        except (TypeError, ValueError) as exc:
            raise FormatError(f"{path}: entry {k} holds non-numeric values") from exc
    return records
