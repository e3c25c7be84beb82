"""Frame containers and the on-disk sequence loader.

A sequence directory holds ``frame_000001.png`` (or ``.ppm``) upward, with an
optional ``frame_000001.dmap`` depth raster per frame.  Indices must be
contiguous starting at 1; all frames must share one raster size.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError
from .formats import read_dmap
from .raster import read_image, to_gray

_FRAME_RE = re.compile(r"^frame_(\d{6})\.(png|ppm)$")


@dataclass
class Frame:
    index: int                       # 1-based position in the sequence
    color: np.ndarray                # uint8 [h, w, 3]
    depth: np.ndarray | None = None  # float32 [h, w]; larger = closer
    _gray: np.ndarray | None = field(default=None, repr=False)

    @property
    def gray(self) -> np.ndarray:
        if self._gray is None:
            self._gray = to_gray(self.color)
        return self._gray

    @property
    def width(self) -> int:
        return self.color.shape[1]

    @property
    def height(self) -> int:
        return self.color.shape[0]


@dataclass
class FrameSequence:
    frames: list[Frame]

    def __len__(self) -> int:
        return len(self.frames)

    def __iter__(self):
        return iter(self.frames)

    def __getitem__(self, k) -> Frame:
        return self.frames[k]

    @property
    def width(self) -> int:
        return self.frames[0].width

    @property
    def height(self) -> int:
        return self.frames[0].height


def load_sequence(dir_path, config=None) -> FrameSequence:
    """Load a frame directory into memory, validating format and layout.

    Raises FormatError naming the offending file for unreadable images,
    mismatched raster sizes, bad depth payloads, or gaps in the numbering.
    ``config`` is optional; when given, its margin is checked against the
    frame size so later stages cannot run on an empty interior.
    """
    dir_path = Path(dir_path)
    if not dir_path.is_dir():
        raise FormatError(f"not a directory: {dir_path}")
    matches = {}
    for entry in sorted(dir_path.iterdir()):
        m = _FRAME_RE.match(entry.name)
        if m:
            idx = int(m.group(1))
            if idx in matches:
                raise FormatError(f"duplicate frame index {idx}: {entry.name}")
            matches[idx] = entry
    if not matches:
        raise FormatError(f"no frame_NNNNNN.png/.ppm files in {dir_path}")
    indices = sorted(matches)
    for pos, idx in enumerate(indices, start=1):
        if idx != pos:
            raise FormatError(f"frame numbering gap: missing frame_{pos:06d}")

    frames: list[Frame] = []
    size = None
    for idx in indices:
        img_path = matches[idx]
        color = read_image(img_path)
        if size is None:
            size = color.shape[:2]
        elif color.shape[:2] != size:
            raise FormatError(
                f"{img_path.name}: raster is {color.shape[1]}x{color.shape[0]}, "
                f"expected {size[1]}x{size[0]}"
            )
        depth = None
        dmap_path = img_path.with_suffix(".dmap")
        if dmap_path.exists():
            depth = read_dmap(dmap_path)
            if depth.shape != size:
                raise FormatError(
                    f"{dmap_path.name}: depth is {depth.shape[1]}x{depth.shape[0]}, "
                    f"expected {size[1]}x{size[0]}"
                )
        frames.append(Frame(index=idx, color=color, depth=depth))

    if config is not None:
        h, w = size
        if w - 2 * config.margin < 1 or h - 2 * config.margin < 1:
            raise FormatError(
                f"margin {config.margin} leaves no interior in {w}x{h} frames"
            )
    return FrameSequence(frames)
