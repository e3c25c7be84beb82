"""Cross-provider match pooling and horizontal-consistency filtering.

Different feature providers report slightly different coordinates for the
same physical correspondence.  Pooling merges matches from *different*
providers whose endpoints colocate within a small radius, averaging their
coordinates; duplicates within one provider are left untouched.  The pooled
set is then filtered by horizontal displacement: matches whose column shift
strays from the median by more than a threshold tied to the depth-center
offset are dropped as inconsistent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .config import PoolConfig
from .errors import MatchingError
from .features import RawMatch


@dataclass
class PooledMatch:
    xa: float
    ya: float
    xb: float
    yb: float
    weight_seed: float            # mean score of the merged group
    providers: tuple[str, ...]    # sorted provider tags in the group

    @property
    def dx(self) -> float:
        return self.xb - self.xa


@dataclass
class PooledMatchSet:
    frame_a: int
    matches: list[PooledMatch]
    center_offset: float
    threshold_used: float

    def endpoints(self) -> tuple[np.ndarray, np.ndarray]:
        """(source, destination) coordinate arrays, shape (n, 2) each."""
        pa = np.array([[m.xa, m.ya] for m in self.matches], dtype=np.float64)
        pb = np.array([[m.xb, m.yb] for m in self.matches], dtype=np.float64)
        return pa, pb


def _median_lower(values: np.ndarray) -> float:
    """Median with the lower-middle element for even counts."""
    ordered = np.sort(np.asarray(values, dtype=np.float64))
    return float(ordered[(len(ordered) - 1) // 2])


def pool_matches(
    provider_matches: list[list[RawMatch]], cfg: PoolConfig
) -> list[PooledMatch]:
    """Greedy agglomeration of colocated matches across providers.

    Matches are visited in descending score order; each unclaimed match seeds
    a group and pulls in the best unclaimed match of every *other* provider
    whose endpoints both lie within ``colocate_radius`` of the seed's.
    Merged coordinates are plain arithmetic means.
    """
    flat: list[RawMatch] = [m for lst in provider_matches for m in lst]
    if not flat:
        return []
    pair = (flat[0].frame_a, flat[0].frame_b)
    for m in flat:
        if (m.frame_a, m.frame_b) != pair:
            raise MatchingError(
                f"pooling got mixed frame pairs {(m.frame_a, m.frame_b)} and {pair}"
            )
    order = sorted(
        range(len(flat)),
        key=lambda i: (-flat[i].score, flat[i].provider,
                       flat[i].xa, flat[i].ya, flat[i].xb, flat[i].yb),
    )
    claimed = [False] * len(flat)
    r2 = cfg.colocate_radius ** 2
    out: list[PooledMatch] = []
    for pos, i in enumerate(order):
        if claimed[i]:
            continue
        seed = flat[i]
        claimed[i] = True
        group = [seed]
        used = {seed.provider}
        for j in order[pos + 1:]:
            if claimed[j]:
                continue
            cand = flat[j]
            if cand.provider in used:
                continue
            if ((cand.xa - seed.xa) ** 2 + (cand.ya - seed.ya) ** 2 <= r2
                    and (cand.xb - seed.xb) ** 2 + (cand.yb - seed.yb) ** 2 <= r2):
                claimed[j] = True
                group.append(cand)
                used.add(cand.provider)
        out.append(PooledMatch(
            xa=float(np.mean([g.xa for g in group])),
            ya=float(np.mean([g.ya for g in group])),
            xb=float(np.mean([g.xb for g in group])),
            yb=float(np.mean([g.yb for g in group])),
            weight_seed=float(np.mean([g.score for g in group])),
            providers=tuple(sorted(used)),
        ))
    return out


def filter_by_center_offset(
    pooled: list[PooledMatch],
    frame_a: int,
    center_offset: float,
    cfg: PoolConfig,
) -> PooledMatchSet:
    """Keep matches whose column shift sits near the median shift.

    The tolerance is ``max(tau_min, k_offset * center_offset)``: when the
    depth center moved a lot between the frames, larger shift spread is
    expected and allowed.  The median is computed once on the input set, so
    relaxing the threshold can only grow the surviving set.
    """
    if not pooled:
        raise MatchingError(f"pair {frame_a}: no pooled matches to filter")
    if center_offset < 0 or not math.isfinite(center_offset):
        raise MatchingError(f"pair {frame_a}: invalid center offset {center_offset}")
    tau = max(cfg.tau_min, cfg.k_offset * center_offset)
    shifts = np.array([m.dx for m in pooled], dtype=np.float64)
    med = _median_lower(shifts)
    keep = [m for m, s in zip(pooled, shifts) if abs(s - med) <= tau]
    if not keep:
        raise MatchingError(f"pair {frame_a}: insufficient consistent matches")
    return PooledMatchSet(
        frame_a=frame_a,
        matches=keep,
        center_offset=float(center_offset),
        threshold_used=float(tau),
    )
