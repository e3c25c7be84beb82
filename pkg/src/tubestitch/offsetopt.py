"""Per-pair stitch offset selection with density-weighted scoring.

For every consecutive frame pair the pipeline produces several homography
candidates (one per feature provider plus one for the pooled match set).
Each candidate offers its vertical translation ``h_y``; this module picks one
per pair by scoring ``w * |h_y - target| + |D|`` where the target grows with
the candidate's inlier confidence and D is the density-weighted mean of the
pooled horizontal displacements.  D is shared by all candidates of a pair, so
it rides along in the score without changing the winner; it becomes the
pair's horizontal offset.

A note on counting: a sequence of N frames yields N-1 offset records, one per
adjacent pair, indexed by the earlier frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import EstimationError
from .formats import read_stitch_file, write_stitch_file
from .homography import density_weights
from .matchpool import PooledMatchSet


@dataclass
class DisplacementEstimate:
    """Weighted mean horizontal displacement D = sum(d*w)/sum(w)."""

    D: float
    d: np.ndarray
    w: np.ndarray

    @property
    def n(self) -> int:
        return len(self.d)


@dataclass
class OffsetCandidate:
    provider: str
    h_y: float                    # vertical translation of the homography
    confidence: float             # inlier fraction, 0..1
    weight: float                 # aggregate density weight of its inliers


@dataclass
class OffsetRecord:
    frame: int                    # index of the earlier frame in the pair
    dy: float
    dx: float
    provider: str
    score: float
    bridged: bool = False
    clamped: bool = False


@dataclass
class StitchParams:
    records: list[OffsetRecord] = field(default_factory=list)

    def __iter__(self):
        return iter(self.records)

    def __len__(self):
        return len(self.records)

    def write(self, path) -> None:
        write_stitch_file(path, [(r.frame, r.dy, r.dx) for r in self.records])

    @classmethod
    def read(cls, path) -> "StitchParams":
        return cls(records=[
            OffsetRecord(frame=f, dy=dy, dx=dx, provider="", score=0.0)
            for f, dy, dx in read_stitch_file(path)
        ])


def horizontal_displacement(d, w) -> DisplacementEstimate:
    """D as the weighted mean of per-match column shifts.

    Summation runs left to right in index order so that recomputing from the
    stored arrays reproduces the value bit for bit.
    """
    d = np.asarray(d, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if d.shape != w.shape or d.ndim != 1 or len(d) == 0:
        raise EstimationError("displacement needs equal-length non-empty d and w")
    if np.any(w <= 0) or not np.all(np.isfinite(d)) or not np.all(np.isfinite(w)):
        raise EstimationError("weights must be positive and all values finite")
    num = 0.0
    den = 0.0
    for di, wi in zip(d.tolist(), w.tolist()):
        num += di * wi
        den += wi
    return DisplacementEstimate(D=num / den, d=d, w=w)


def offset_target(confidence: float, epsilon: float, gain: float) -> float:
    """Expected vertical drift for a candidate of given confidence.

    A fully trusted candidate (c = 1) is expected to sit at epsilon; lower
    confidence pushes the target below it: t = eps * (1 - gain*(1 - c)).
    """
    return epsilon * (1.0 - gain * (1.0 - confidence))


def optimal_offset(
    candidates: list[OffsetCandidate],
    epsilon: float,
    displacement: float,
    gain: float = 3.0,
) -> tuple[OffsetCandidate, float]:
    """Pick the candidate minimizing w*|h_y - target| + |D|.

    Ties prefer the pooled candidate, then the lexicographically smallest
    provider tag.  Returns the winner and its score.
    """
    if not candidates:
        raise EstimationError("empty candidate set")
    for c in candidates:
        if not math.isfinite(c.h_y):
            raise EstimationError(f"candidate '{c.provider}' has non-finite vertical shift")
    scored = []
    for c in candidates:
        t = offset_target(c.confidence, epsilon, gain)
        score = c.weight * abs(c.h_y - t) + abs(displacement)
        scored.append((score, 0 if c.provider == "pooled" else 1, c.provider, c))
    scored.sort(key=lambda item: item[:3])
    best = scored[0]
    return best[3], float(best[0])


def select_offsets(
    candidate_sets: list[list[OffsetCandidate]],
    pooled_sets: list[PooledMatchSet | None],
    epsilon: float,
    frame_width: float,
    density_bins: int = 16,
    gain: float = 3.0,
    first_frame: int = 1,
) -> tuple[StitchParams, dict]:
    """One offset record per pair, bridging pairs that produced no candidate.

    A pair is usable when it has a pooled match set (which supplies the
    displacement D) and at least one candidate.  An unusable pair duplicates
    the previous record and is flagged ``bridged``; an unusable *first* pair
    is an error since there is nothing to duplicate.  Negative vertical
    offsets are clamped to zero and flagged (they indicate backward motion
    the compositor does not model).  Returns the records plus a report dict.
    """
    if len(candidate_sets) != len(pooled_sets):
        raise EstimationError("candidate and pooled set counts differ")
    records: list[OffsetRecord] = []
    details = []
    clamp_count = 0
    bridge_count = 0
    for k, (cands, pooled) in enumerate(zip(candidate_sets, pooled_sets)):
        frame = first_frame + k
        if pooled is None or not pooled.matches or not cands:
            if not records:
                raise EstimationError(
                    f"pair {frame}: no valid candidate and no previous pair to bridge from"
                )
            prev = records[-1]
            records.append(OffsetRecord(
                frame=frame, dy=prev.dy, dx=prev.dx,
                provider=prev.provider, score=prev.score,
                bridged=True, clamped=prev.clamped,
            ))
            bridge_count += 1
            details.append({"frame": frame, "bridged": True})
            continue
        xs = np.array([m.xa for m in pooled.matches], dtype=np.float64)
        shifts = np.array([m.dx for m in pooled.matches], dtype=np.float64)
        weights = density_weights(xs, density_bins, frame_width)
        disp = horizontal_displacement(shifts, weights)
        winner, score = optimal_offset(cands, epsilon, disp.D, gain=gain)
        dy = winner.h_y
        clamped = False
        if dy < 0.0:
            dy = 0.0
            clamped = True
            clamp_count += 1
        records.append(OffsetRecord(
            frame=frame, dy=float(dy), dx=float(disp.D),
            provider=winner.provider, score=score, clamped=clamped,
        ))
        details.append({
            "frame": frame,
            "provider": winner.provider,
            "score": score,
            "displacement": disp.D,
            "candidates": [
                {"provider": c.provider, "h_y": c.h_y,
                 "confidence": c.confidence, "weight": c.weight}
                for c in cands
            ],
            "clamped": clamped,
            "bridged": False,
        })
    report = {
        "pairs": len(records),
        "bridged": bridge_count,
        "clamped": clamp_count,
        "details": details,
    }
    return StitchParams(records=records), report
