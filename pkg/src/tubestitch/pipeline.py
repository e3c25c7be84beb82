"""End-to-end orchestration: frames -> unfolded strips -> offsets -> panorama.

Two layers live here.  The in-memory layer (`unfold_sequence`, `match_pairs`,
`pool_pairs`, `estimate_offsets`, `compose_panorama`, `run_pipeline`) passes
numpy arrays and dataclasses between stages.  The file layer (`stage_*`)
wraps those functions with the directory layout the CLI subcommands use, so
running the stages separately or chained through `stage_full` touches the
same code in the same order and produces byte-identical outputs: every
intermediate is either a uint8 raster or JSON whose float repr round-trips.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .compose import Panorama, composite, cylindrical_project, post_stitch_adjust
from .config import PipelineConfig
from .errors import EstimationError, FormatError, MatchingError, MetricsError, StageError, StitchError
from .features import RawMatch, detect_dog, detect_orb, import_matches, match_descriptors, write_matches
from .formats import dump_json, load_json
from .frames import FrameSequence, load_sequence
from .homography import density_weights, msac_homography
from .matchpool import PooledMatch, PooledMatchSet, filter_by_center_offset, pool_matches
from .metrics import MetricsReport, pair_band_ssim, rmse, ssim
from .offsetopt import OffsetCandidate, StitchParams, select_offsets
from .raster import read_image, to_gray, write_image
from .unfold import (DepthTrack, UnfoldedFrame, annotate_original, annulus_only,
                     build_depth_track, unwrap_annulus)

#: Providers that detect features on the unfolded strips themselves.
DETECTOR_PROVIDERS = ("orb", "dog")


@dataclass
class PairMatches:
    """Raw matches for one consecutive frame pair, one list per provider tag."""

    frame_a: int
    by_provider: list[list[RawMatch]] = field(default_factory=list)
    import_warnings: int = 0


def provider_slugs(tags: list[str]) -> list[str]:
    """Filesystem-safe, collision-free names for provider tags.

    Used in per-provider match filenames; a tag like ``import:/some/dir``
    must not put path separators into the name.
    """
    slugs: list[str] = []
    for tag in tags:
        base = re.sub(r"[^A-Za-z0-9_.-]+", "_", tag).strip("_") or "provider"
        slug, k = base, 2
        while slug in slugs:
            slug = f"{base}~{k}"
            k += 1
        slugs.append(slug)
    return slugs


# ---------------------------------------------------------------------------
# In-memory stages


def unfold_sequence(seq: FrameSequence,
                    config: PipelineConfig) -> tuple[list[UnfoldedFrame], DepthTrack]:
    """Locate the depth-center trajectory and unwrap every frame along it."""
    if len(seq) < 2:
        raise StitchError("need at least 2 frames")
    track = build_depth_track(seq, config.r_inner, config.margin)
    unfolded: list[UnfoldedFrame] = []
    for k, frame in enumerate(seq):
        try:
            unfolded.append(unwrap_annulus(
                frame, track.centers_smoothed[k], config.r_inner,
                track.r_outer[k], config.unwrap_width, config.unwrap_height,
            ))
        except StitchError:
            raise
        except Exception as exc:
            raise StageError("unfold", frame.index, exc) from exc
    return unfolded, track


def _unfold_point(x: float, y: float, center: tuple[float, float],
                  r_inner: int, r_outer: int, out_w: int, out_h: int):
    """Map an original-frame point into unfolded coordinates, or None.

    Points outside the unwrapped annulus have no unfolded image and are
    dropped by the caller.
    """
    dx, dy = x - center[0], y - center[1]
    rho = math.hypot(dx, dy)
    if rho < r_inner or rho > r_outer:
        return None
    u = (math.atan2(dy, dx) % (2.0 * math.pi)) / (2.0 * math.pi) * out_w
    if u >= out_w:
        u -= out_w
    v = (r_outer - rho) * (out_h - 1) / (r_outer - r_inner)
    return u, v


def _map_frame_matches(matches: list[RawMatch], uf_a: UnfoldedFrame,
                       uf_b: UnfoldedFrame, config: PipelineConfig) -> list[RawMatch]:
    out: list[RawMatch] = []
    for m in matches:
        pa = _unfold_point(m.xa, m.ya, uf_a.center, uf_a.r_inner, uf_a.r_outer,
                           config.unwrap_width, config.unwrap_height)
        pb = _unfold_point(m.xb, m.yb, uf_b.center, uf_b.r_inner, uf_b.r_outer,
                           config.unwrap_width, config.unwrap_height)
        if pa is None or pb is None:
            continue
        out.append(RawMatch(frame_a=m.frame_a, frame_b=m.frame_b,
                            xa=pa[0], ya=pa[1], xb=pb[0], yb=pb[1],
                            score=m.score, provider=m.provider))
    return out


def _detect(base: str, gray: np.ndarray, config: PipelineConfig):
    fc = config.features
    if base == "orb":
        return detect_orb(gray, fc.max_keypoints, fc.fast_threshold, fc.nms_radius)
    return detect_dog(gray, fc.max_keypoints, fc.nms_radius)


def match_pairs(unfolded: list[UnfoldedFrame],
                config: PipelineConfig) -> list[PairMatches]:
    """Raw matches for every consecutive pair, one list per provider tag.

    ``orb`` / ``dog`` detect on the unfolded strips; ``import:<dir>`` reads
    ``pair_NNNNNN.matches.jsonl`` files already in unfolded coordinates;
    ``importframe:<dir>`` reads the same layout in original-frame coordinates
    and maps them through each frame's unwrap geometry.  A missing import
    file yields an empty list, not an error, so sparse external matchers can
    cover only the pairs they are confident about.
    """
    grays = [to_gray(uf.raster) for uf in unfolded]
    keypoints: dict[str, list] = {}
    for tag in config.providers:
        base = tag.split(":", 1)[0]
        if base in DETECTOR_PROVIDERS and base not in keypoints:
            keypoints[base] = [_detect(base, g, config) for g in grays]

    pairs: list[PairMatches] = []
    for k in range(len(unfolded) - 1):
        frame_a = unfolded[k].index
        by_provider: list[list[RawMatch]] = []
        warnings = 0
        for tag in config.providers:
            base, _, arg = tag.partition(":")
            try:
                if base in DETECTOR_PROVIDERS:
                    ms = match_descriptors(keypoints[base][k], keypoints[base][k + 1],
                                           frame_a, base, config.features.ratio_test)
                else:
                    path = Path(arg) / f"pair_{frame_a:06d}.matches.jsonl"
                    if not path.exists():
                        ms = []
                    elif base == "import":
                        ms, w = import_matches(path, frame_a,
                                               config.unwrap_width, config.unwrap_height)
                        warnings += w
                    else:  # importframe: bounds are enforced by the annulus test
                        ms, w = import_matches(path, frame_a, 1 << 31, 1 << 31)
                        warnings += w
                        ms = _map_frame_matches(ms, unfolded[k], unfolded[k + 1], config)
            except StitchError:
                raise
            except Exception as exc:
                raise StageError("match", frame_a, exc) from exc
            by_provider.append(ms)
        pairs.append(PairMatches(frame_a=frame_a, by_provider=by_provider,
                                 import_warnings=warnings))
    return pairs


def pool_pairs(pair_matches: list[PairMatches], track: DepthTrack,
               config: PipelineConfig) -> list[PooledMatchSet | None]:
    """Pool each pair's matches across providers and filter by column shift.

    A pair whose pooling fails outright (no matches at all) yields None; the
    offset selection bridges such pairs from their predecessor.
    """
    pooled_sets: list[PooledMatchSet | None] = []
    for k, pm in enumerate(pair_matches):
        ca = track.centers_smoothed[k]
        cb = track.centers_smoothed[k + 1]
        offset = math.hypot(cb[0] - ca[0], cb[1] - ca[1])
        try:
            merged = pool_matches(pm.by_provider, config.pool)
            pooled = filter_by_center_offset(merged, pm.frame_a, offset, config.pool)
        except MatchingError:
            pooled = None
        pooled_sets.append(pooled)
    return pooled_sets


def pair_candidates(pm: PairMatches, pooled: PooledMatchSet | None,
                    config: PipelineConfig) -> tuple[list[OffsetCandidate], list[dict]]:
    """Per-provider and pooled homography estimates for one pair.

    All estimates for a pair share one generator seeded from the run seed and
    the pair's frame number, consumed in provider order, so results do not
    depend on how the surrounding stages were invoked.  A provider with too
    few matches is skipped; an estimation failure drops that candidate only.
    """
    rng = np.random.default_rng(config.seed ^ pm.frame_a)
    entries: list[tuple[str, np.ndarray, np.ndarray]] = []
    for tag, ms in zip(config.providers, pm.by_provider):
        if len(ms) < config.msac.min_inliers:
            continue
        pa = np.array([[m.xa, m.ya] for m in ms], dtype=np.float64)
        pb = np.array([[m.xb, m.yb] for m in ms], dtype=np.float64)
        entries.append((tag, pa, pb))
    if pooled is not None and len(pooled.matches) >= config.msac.min_inliers:
        pa, pb = pooled.endpoints()
        entries.append(("pooled", pa, pb))

    candidates: list[OffsetCandidate] = []
    rows: list[dict] = []
    for name, pa, pb in entries:
        try:
            # The homography maps the later frame onto the earlier one, so
            # H[1,2] is the forward (downward) motion in unfolded rows.
            est = msac_homography(pb, pa, config.msac, seed=rng, provider=name)
        except EstimationError:
            continue
        if abs(est.vertical_shift) > config.unwrap_height:
            # A shift beyond one frame height leaves no overlap to support
            # it; such estimates come from degenerate match geometry.
            continue
        weights = density_weights(pa[:, 0], config.density_bins, float(config.unwrap_width))
        weight = float(np.mean(weights[est.inlier_mask]))
        candidates.append(OffsetCandidate(provider=name, h_y=est.vertical_shift,
                                          confidence=est.confidence, weight=weight))
        rows.append({
            "frame": pm.frame_a,
            "provider": name,
            "H": [[float(v) for v in row] for row in est.H],
            "confidence": est.confidence,
            "matches": int(len(pa)),
            "inliers": int(np.count_nonzero(est.inlier_mask)),
        })
    return candidates, rows


def estimate_offsets(pair_matches: list[PairMatches],
                     pooled_sets: list[PooledMatchSet | None],
                     config: PipelineConfig) -> tuple[StitchParams, dict, list[dict]]:
    """Candidate homographies plus the per-pair offset selection."""
    candidate_sets: list[list[OffsetCandidate]] = []
    homography_rows: list[dict] = []
    for pm, pooled in zip(pair_matches, pooled_sets):
        cands, rows = pair_candidates(pm, pooled, config)
        candidate_sets.append(cands)
        homography_rows.extend(rows)
    first = pair_matches[0].frame_a if pair_matches else 1
    params, report = select_offsets(candidate_sets, pooled_sets, config.epsilon,
                                    float(config.unwrap_width), config.density_bins,
                                    config.dwho_gain, first_frame=first)
    return params, report, homography_rows


def compose_panorama(unfolded: list[UnfoldedFrame], params: StitchParams,
                     config: PipelineConfig) -> Panorama:
    """Cylindrically warp each strip, stack them, and bound the width."""
    rasters: list[np.ndarray] = []
    masks: list[np.ndarray] = []
    for uf in unfolded:
        raster, mask = cylindrical_project(uf.raster, config.focal_length)
        rasters.append(raster)
        masks.append(mask)
    pan = composite(rasters, params, config.horizontal_threshold, masks=masks,
                    first_frame=unfolded[0].index)
    return post_stitch_adjust(pan, config.unwrap_width)


def evaluate_pairs(grays: list[np.ndarray], params: StitchParams) -> MetricsReport:
    """Similarity of each pair's overlap band under its chosen offsets."""
    records = list(params)
    if len(records) != len(grays) - 1:
        raise MetricsError(
            f"{len(records)} offset records for {len(grays)} frames"
        )
    values = [
        pair_band_ssim(grays[k], grays[k + 1], rec.dy, rec.dx)
        for k, rec in enumerate(records)
    ]
    return MetricsReport(pair_ssim=values, mean_ssim=float(np.mean(values)))


def run_pipeline(seq: FrameSequence,
                 config: PipelineConfig | None = None) -> tuple[Panorama, MetricsReport]:
    """Frames in, panorama and overlap metrics out (no files touched)."""
    config = config if config is not None else PipelineConfig()
    config.validate()
    unfolded, track = unfold_sequence(seq, config)
    pair_matches = match_pairs(unfolded, config)
    pooled_sets = pool_pairs(pair_matches, track, config)
    params, _, _ = estimate_offsets(pair_matches, pooled_sets, config)
    panorama = compose_panorama(unfolded, params, config)
    grays = [to_gray(uf.raster) for uf in unfolded]
    return panorama, evaluate_pairs(grays, params)


# ---------------------------------------------------------------------------
# File layer (one function per CLI subcommand)


def stage_unfold(frames_dir, out_dir,
                 config: PipelineConfig) -> tuple[list[UnfoldedFrame], DepthTrack]:
    """unfold: frames_dir -> unfolded/annotated/annular PNGs + depthtrack.json."""
    seq = load_sequence(frames_dir, config)
    unfolded, track = unfold_sequence(seq, config)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for uf, frame in zip(unfolded, seq):
        write_image(out_dir / f"unfolded_{uf.index:06d}.png", uf.raster)
        write_image(out_dir / f"annotated_{uf.index:06d}.png",
                    annotate_original(frame, uf.center, uf.r_inner, uf.r_outer))
        write_image(out_dir / f"annular_{uf.index:06d}.png",
                    annulus_only(frame, uf.center, uf.r_inner, uf.r_outer))
    dump_json(out_dir / "depthtrack.json", track.to_dict())
    return unfolded, track


def load_unfolded(unfold_dir) -> tuple[list[UnfoldedFrame], DepthTrack]:
    """Read back what stage_unfold wrote."""
    unfold_dir = Path(unfold_dir)
    track_path = unfold_dir / "depthtrack.json"
    if not track_path.exists():
        raise FormatError(f"missing {track_path} (run the unfold stage first)")
    track = DepthTrack.from_dict(load_json(track_path))
    unfolded: list[UnfoldedFrame] = []
    for k in range(len(track.r_outer)):
        index = k + 1
        path = unfold_dir / f"unfolded_{index:06d}.png"
        if not path.exists():
            raise FormatError(f"missing {path.name} in {unfold_dir}")
        unfolded.append(UnfoldedFrame(
            index=index, raster=read_image(path),
            center=track.centers_smoothed[k],
            r_inner=track.r_inner, r_outer=track.r_outer[k],
        ))
    return unfolded, track


def _write_pooled(path, pooled: PooledMatchSet | None) -> None:
    lines = []
    if pooled is not None:
        for m in pooled.matches:
            lines.append(json.dumps({
                "a": pooled.frame_a, "b": pooled.frame_a + 1,
                "xa": m.xa, "ya": m.ya, "xb": m.xb, "yb": m.yb,
                "weight": m.weight_seed, "providers": list(m.providers),
            }, sort_keys=True))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="ascii")


def _read_pooled(path, row: dict) -> PooledMatchSet | None:
    if row.get("pool_failed"):
        return None
    matches: list[PooledMatch] = []
    for lineno, line in enumerate(Path(path).read_text(encoding="ascii").splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        try:
            obj = json.loads(line)
            matches.append(PooledMatch(
                xa=float(obj["xa"]), ya=float(obj["ya"]),
                xb=float(obj["xb"]), yb=float(obj["yb"]),
                weight_seed=float(obj["weight"]),
                providers=tuple(str(p) for p in obj["providers"]),
            ))
        except (ValueError, KeyError, TypeError) as exc:
            raise FormatError(f"{path}:{lineno}: bad pooled match line: {exc}") from exc
    return PooledMatchSet(frame_a=int(row["frame"]), matches=matches,
                          center_offset=float(row["center_offset"]),
                          threshold_used=float(row["threshold"]))


def stage_match(unfold_dir, out_dir, config: PipelineConfig,
                ) -> tuple[list[PairMatches], list[PooledMatchSet | None]]:
    """match: unfold dir -> per-provider + pooled .matches.jsonl + pool_report.json."""
    unfolded, track = load_unfolded(unfold_dir)
    pair_matches = match_pairs(unfolded, config)
    pooled_sets = pool_pairs(pair_matches, track, config)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    slugs = provider_slugs(config.providers)
    report_rows = []
    for pm, pooled in zip(pair_matches, pooled_sets):
        for slug, ms in zip(slugs, pm.by_provider):
            write_matches(out_dir / f"matches_{pm.frame_a:06d}_{slug}.matches.jsonl", ms)
        _write_pooled(out_dir / f"pooled_{pm.frame_a:06d}.matches.jsonl", pooled)
        report_rows.append({
            "frame": pm.frame_a,
            "counts": {slug: len(ms) for slug, ms in zip(slugs, pm.by_provider)},
            "import_warnings": pm.import_warnings,
            "pool_failed": pooled is None,
            "pooled": 0 if pooled is None else len(pooled.matches),
            "center_offset": None if pooled is None else pooled.center_offset,
            "threshold": None if pooled is None else pooled.threshold_used,
        })
    dump_json(out_dir / "pool_report.json", {"pairs": report_rows})
    return pair_matches, pooled_sets


def stage_stitch(unfold_dir, match_dir, out_dir, config: PipelineConfig,
                 ) -> tuple[StitchParams, Panorama, dict]:
    """stitch: unfold + match dirs -> offsets, reports, panorama, provenance."""
    unfolded, _ = load_unfolded(unfold_dir)
    match_dir = Path(match_dir)
    report_path = match_dir / "pool_report.json"
    if not report_path.exists():
        raise FormatError(f"missing {report_path} (run the match stage first)")
    rows = load_json(report_path)["pairs"]
    if len(rows) != len(unfolded) - 1:
        raise FormatError(
            f"pool report covers {len(rows)} pairs but the unfold stage "
            f"has {len(unfolded)} frames"
        )
    slugs = provider_slugs(config.providers)
    pair_matches: list[PairMatches] = []
    pooled_sets: list[PooledMatchSet | None] = []
    for k, row in enumerate(rows):
        frame_a = unfolded[k].index
        by_provider: list[list[RawMatch]] = []
        for slug in slugs:
            path = match_dir / f"matches_{frame_a:06d}_{slug}.matches.jsonl"
            if path.exists():
                ms, _ = import_matches(path, frame_a,
                                       config.unwrap_width, config.unwrap_height)
            else:
                ms = []
            by_provider.append(ms)
        pair_matches.append(PairMatches(frame_a=frame_a, by_provider=by_provider))
        pooled_sets.append(_read_pooled(
            match_dir / f"pooled_{frame_a:06d}.matches.jsonl", row))

    params, report, homography_rows = estimate_offsets(pair_matches, pooled_sets, config)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    params.write(out_dir / "params.stitch.json")
    dump_json(out_dir / "dwho_report.json", report)
    dump_json(out_dir / "homographies.json", {"pairs": homography_rows})
    panorama = compose_panorama(unfolded, params, config)
    write_image(out_dir / "panorama.png", panorama.raster)
    panorama.write_provenance(out_dir / "provenance.json")
    return params, panorama, report


def stage_eval(unfold_dir, pairs_from, out_dir,
               panorama=None, reference=None) -> MetricsReport:
    """eval: unfold dir + offset file -> metrics.json.

    With both ``panorama`` and ``reference`` image paths the report also
    carries RMSE/SSIM between them over their common top-left extent.
    """
    if (panorama is None) != (reference is None):
        raise MetricsError("panorama and reference must be given together")
    unfolded, _ = load_unfolded(unfold_dir)
    grays = [to_gray(uf.raster) for uf in unfolded]
    params = StitchParams.read(pairs_from)
    report = evaluate_pairs(grays, params)
    if panorama is not None:
        pan_img = read_image(panorama)
        ref_img = read_image(reference)
        h = min(pan_img.shape[0], ref_img.shape[0])
        w = min(pan_img.shape[1], ref_img.shape[1])
        if h < 11 or w < 11:
            raise MetricsError("panorama and reference share no comparable area")
        report.rmse_vs_reference = rmse(pan_img[:h, :w], ref_img[:h, :w])
        report.ssim_vs_reference = ssim(pan_img[:h, :w], ref_img[:h, :w])
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report.write(out_dir / "metrics.json")
    return report


def stage_full(frames_dir, out_dir, config: PipelineConfig,
               reference=None) -> MetricsReport:
    """full: chain unfold/match/stitch/eval under out_dir subdirectories."""
    out_dir = Path(out_dir)
    stage_unfold(frames_dir, out_dir / "unfold", config)
    stage_match(out_dir / "unfold", out_dir / "match", config)
    stage_stitch(out_dir / "unfold", out_dir / "match", out_dir / "stitch", config)
    return stage_eval(
        out_dir / "unfold", out_dir / "stitch" / "params.stitch.json",
        out_dir / "eval",
        panorama=(out_dir / "stitch" / "panorama.png") if reference is not None else None,
        reference=reference,
    )
