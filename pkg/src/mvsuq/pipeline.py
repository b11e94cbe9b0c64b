"""End-to-end orchestration: match, fuse, merge, evaluate, fit-uq, annotate, report.

Every stage is split into independent units (one per pair or per image) run on
a thread pool; results are gathered in a fixed order, so outputs do not depend
on the worker count. Pair depth maps are rounded to float32 as soon as they
are computed, so a staged run (files on disk) and an in-memory run agree
bit for bit.
"""

import hashlib
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import evaluate as ev
from . import fusion, io, uq
from .config import PipelineConfig
from .errors import InsufficientViews, MvsUqError, StageError

log = logging.getLogger(__name__)

PAIR_DIR = "pairs"
FUSED_DIR = "fused"
REPORT_DIR = "reports"


def _pmap(fn, items, threads):
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _stage(name, unit, fn, *args):
    try:
        return fn(*args)
    except MvsUqError as exc:
        if isinstance(exc, StageError):
            raise
        raise StageError(name, unit, exc) from exc


def pair_path(root, base_id, nb_id):
    return Path(root) / PAIR_DIR / f"depth_{base_id:04d}_{nb_id:04d}.dmap"


def fused_path(root, base_id):
    return Path(root) / FUSED_DIR / f"fused_{base_id:04d}.dmap"


# --------------------------------------------------------------------------- stages


@dataclass
class MatchResult:
    neighbors: dict                               # base id -> NeighborSet
    pair_maps: dict                               # (base, neighbor) -> DepthMap
    rejections: list = field(default_factory=list)


def match_stage(views, config, threads=1):
    """Neighbour selection and pairwise depth maps for every view."""
    if len(views) < 2:
        raise InsufficientViews(f"need at least 2 views, got {len(views)}")
    by_id = {v.image_id: v for v in views}
    neighbors = {}
    for v in views:
        neighbors[v.image_id] = _stage(
            "match", f"image {v.image_id}", fusion.select_neighbors, views, v.image_id,
            config.n_neighbors, config.k_consistency, config.neighbor_rays, config.seed)
    pairs = [(b, n) for b in sorted(neighbors) for n in neighbors[b].neighbor_ids]
    settings = config.stereo_settings()

    def work(pair):
        b, n = pair
        try:
            dm = _stage("match", f"pair {b}-{n}", fusion.pair_depth_map, by_id[b], by_id[n], settings)
            return io.quantize_depth_map(dm), None
        except StageError as exc:
            if isinstance(exc.cause, (fusion.geom.ExcessiveConvergence, fusion.geom.CoincidentCenters)):
                log.warning("pair %d-%d rejected: %s", b, n, exc.cause)
                return None, fusion.PairRejection(b, n, str(exc.cause))
            raise

    results = _pmap(work, pairs, threads)
    pair_maps, rejections = {}, []
    for pair, (dm, rej) in zip(pairs, results):
        if dm is not None:
            pair_maps[pair] = dm
        else:
            rejections.append(rej)
    return MatchResult(neighbors, pair_maps, rejections)


def fuse_stage(views, neighbors, pair_maps, config, threads=1):
    """Fuse each base image's pair maps and merge the per-image clouds.

    Returns ``(fused maps by image id, merged cloud)``.
    """
    by_id = {v.image_id: v for v in views}
    centers = {v.image_id: v.center for v in views}

    def work(base_id):
        nb = list(neighbors[base_id].neighbor_ids)[: config.n_neighbors]
        maps = [pair_maps[(base_id, n)] for n in nb if (base_id, n) in pair_maps]
        return _stage("fuse", f"image {base_id}", fusion.fuse_image, by_id[base_id], maps,
                      config.k_consistency, config.eps_rel, centers)

    ids = sorted(neighbors)
    results = _pmap(work, ids, threads)
    fused = {i: r[0] for i, r in zip(ids, results)}
    cloud = fusion.merge_clouds([r[1] for r in results])
    log.info("fused %d points from %d images", len(cloud), len(ids))
    return fused, cloud


def evaluation_region(cloud, reference):
    """Points whose XY lies inside the reference cloud's XY bounding box."""
    lo, hi = reference.bounding_box
    p = cloud.positions
    return (p[:, 0] >= lo[0]) & (p[:, 0] <= hi[0]) & (p[:, 1] >= lo[1]) & (p[:, 1] <= hi[1])


@dataclass
class Evaluation:
    transform: ev.RigidTransform
    icp_rms: float | None
    mae: float | None
    std: float | None
    evaluated: int

    def to_dict(self):
        return {"transform": self.transform.to_dict(), "icp_rms_m": self.icp_rms, "mae_m": self.mae,
                "std_m": self.std, "evaluated_points": self.evaluated,
                "std_convention": "population"}


def _spread(index, limit):
    """At most ``limit`` evenly spaced entries of ``index``."""
    if len(index) <= limit:
        return index
    return index[np.linspace(0, len(index) - 1, limit).astype(np.int64)]


def registration_subset(cloud, region, config):
    """Indices used for ICP: multi-ray points inside the evaluation region, thinned.

    Falls back to the whole region when too few multi-ray points exist.
    """
    sel = region.copy()
    if cloud.num_rays is not None:
        multi = region & (cloud.num_rays >= config.icp_min_rays)
        if multi.sum() >= 3:
            sel = multi
    return _spread(np.nonzero(sel)[0], config.icp_max_points)


def evaluate_stage(cloud, reference, config, threads=1):
    """Register (optionally) and attach per-point ``error_m`` (NaN outside the reference area).

    Registration uses only multi-ray points so that unreliable geometry does
    not drag the alignment; errors are then computed for every point.

    Returns ``(cloud with error_m, Evaluation)``.
    """
    region = evaluation_region(cloud, reference)
    sub = cloud.positions[region]
    T, rms = ev.RigidTransform.identity(), None
    if config.icp and len(sub):
        reg = cloud.positions[registration_subset(cloud, region, config)]
        T, rms = _stage("evaluate", "icp", ev.icp_register, reg, reference, config.icp_max_iters,
                        config.icp_conv_tol, config.icp_trim, None, threads)
    err = np.full(len(cloud), np.nan)
    if len(sub):
        err[region] = ev.per_point_error(T.apply(sub), reference, workers=threads)
    out = cloud.subset(slice(None))
    out.extra["error_m"] = err
    mae, std = ev.error_summary(err[region])
    return out, Evaluation(T, rms, mae, std, int(region.sum()))


def uq_stage(cloud, views, pair_maps, config):
    """Pseudo ground truth, reprojection samples and the Gamma table.

    Returns ``(UqTable, ReprojectionSamples)``.
    """
    by_id = {v.image_id: v for v in views}
    idx = uq.select_pseudo_gt(cloud, by_id, config.min_rays, config.self_gate_px)
    samples = uq.collect_samples(cloud, idx, by_id, pair_maps)
    table = _stage("fit-uq", "table", uq.build_uq_table, samples.energy, samples.error_px,
                   config.uq_bin_size, config.uq_min_samples)
    return table, samples


# --------------------------------------------------------------------------- reports


def stereo_points_by_class(views, pair_maps, config):
    """Per-pair stereo points and per-point angles grouped by pair composition."""
    by_id = {v.image_id: v for v in views}
    points = {c: [] for c in ev.COMPOSITIONS}
    angles = {c: [] for c in ev.COMPOSITIONS}
    pair_angles = {c: [] for c in ev.COMPOSITIONS}
    for (b, n) in sorted(pair_maps):
        base, nb = by_id[b], by_id[n]
        label = ev.pair_label(base, nb, config.tilt_threshold_deg)
        pts = ev.pair_points(base, pair_maps[(b, n)])
        pts = pts[_spread(np.arange(len(pts)), config.report_max_pair_points)]
        if len(pts) == 0:
            continue
        points[label].append(pts)
        angles[label].append(fusion.geom.intersection_angles(pts, base.center, nb.center))
        depth = float(np.mean(base.to_camera(pts)[:, 2]))
        pair_angles[label].append(ev.pair_angle(base, nb, depth))
    return points, angles, pair_angles


def write_reports(root, cloud, views, pair_maps, config, table=None, reference=None, evaluation=None,
                  threads=1):
    """Emit the figure-analog CSV files under ``root/reports``. Returns written paths."""
    rdir = Path(root) / REPORT_DIR
    written = []
    points, angles, pair_angles = stereo_points_by_class(views, pair_maps, config)

    rows = []
    for label in ev.COMPOSITIONS:
        a = np.concatenate(angles[label]) if angles[label] else np.zeros(0)
        edges, counts = ev.intersection_angle_histogram(a)
        _, pcounts = ev.intersection_angle_histogram(np.asarray(pair_angles[label]))
        for i, lo in enumerate(edges):
            hi = edges[i + 1] if i + 1 < len(edges) else float("inf")
            rows.append((label, "point", lo, hi, int(counts[i])))
            rows.append((label, "pair", lo, hi, int(pcounts[i])))
    path = rdir / "fig6_angles.csv"
    io.write_csv(path, ["composition", "level", "bin_lo_deg", "bin_hi_deg", "count"], rows)
    written.append(path)

    if len(cloud):
        comp = ev.pair_composition_stats(points, cloud, reference,
                                         None if evaluation is None else evaluation.transform, threads)
        rows = []
        for label in ev.COMPOSITIONS:
            r = comp[label]
            rows.append((label, None, None, None, None, 0) if r is None else
                        (label, r.mean_vs_mvs, r.std_vs_mvs, r.mean_vs_reference, r.std_vs_reference, r.count))
        path = rdir / "table3.csv"
        io.write_csv(path, ["composition", "mean_vs_mvs_m", "std_vs_mvs_m", "mean_vs_reference_m",
                            "std_vs_reference_m", "count"], rows, [io.STD_NOTE])
        written.append(path)

    if "error_m" in cloud.extra:
        err = cloud.extra["error_m"]
        ok = np.isfinite(err)
        sub = cloud.subset(np.nonzero(ok)[0])
        e = err[ok]
        st = ev.bin_by_metric(sub.num_rays, e, config.ray_edges, "num_rays")
        path = rdir / "fig3_rays.csv"
        io.write_binned_csv(path, [st])
        written.append(path)
        st = ev.bin_by_metric(sub.median_angle, e, config.angle_edges, "median_angle_deg")
        path = rdir / "fig3_angles.csv"
        io.write_binned_csv(path, [st])
        written.append(path)

        split = ev.split_by_error(e, sub.num_rays, sub.median_angle, config.error_threshold_m)
        rows = []
        for group in ("low", "high"):
            for metric, edges, hist in (("num_rays", split.ray_edges, split.ray_hist),
                                        ("median_angle_deg", split.angle_edges, split.angle_hist)):
                for i, lo in enumerate(edges):
                    hi = edges[i + 1] if i + 1 < len(edges) else float("inf")
                    rows.append((group, metric, lo, hi, int(hist[group][i])))
        path = rdir / "fig4_hist.csv"
        io.write_csv(path, ["group", "metric", "bin_lo", "bin_hi", "count"], rows,
                     [f"threshold_m {io.fmt(split.threshold)}; low is error < threshold"])
        written.append(path)

        edges = ev.fixed_width_edges(sub.energy, config.energy_bin_size)
        st = ev.bin_by_metric(sub.energy, e, edges, "dim_energy")
        means = ev.energy_bin_means(sub.energy, edges)
        keep = st.count > 0
        note = "fit unavailable"
        if keep.sum() >= 3:
            slope, intercept, r2 = ev.ols_fit(means[keep], st.mae[keep])
            note = f"ols slope {io.fmt(slope)} intercept {io.fmt(intercept)} r2 {io.fmt(r2)}"
        rows = [(st.metric_name, lo, hi, m, mae, std, c, p)
                for (lo, hi, mae, std, c, p), m in zip(st.rows(), means)]
        path = rdir / "fig7_energy.csv"
        io.write_csv(path, ["metric", "bin_lo", "bin_hi", "energy_mean", "MAE_m", "std_m", "count", "proportion"],
                     rows, [io.STD_NOTE, note])
        written.append(path)

    if table is not None:
        rows = [(m.e_lo, m.e_hi, m.shape, m.scale, m.mean, m.std, m.sample_count, m.merged)
                for m in table.models]
        path = rdir / "fig8.csv"
        io.write_csv(path, ["e_lo", "e_hi", "shape", "scale", "mean_px", "std_px", "count", "merged"], rows)
        written.append(path)
    return written


# --------------------------------------------------------------------------- whole run


@dataclass
class RunResult:
    out_dir: Path
    cloud: object
    annotated: object
    table: object
    evaluation: Evaluation | None
    match: MatchResult
    hashes: dict


def write_match_outputs(root, views, match):
    root = Path(root)
    io.save_manifest(root / "manifest.json", views)
    io.write_json(root / "neighbors.json", {
        str(b): {"neighbors": list(ns.neighbor_ids), "scores": list(ns.scores)}
        for b, ns in sorted(match.neighbors.items())
    })
    io.write_json(root / "rejections.json", [
        {"base": r.base_id, "neighbor": r.neighbor_id, "reason": r.reason} for r in match.rejections
    ])
    for (b, n), dm in sorted(match.pair_maps.items()):
        io.write_depth_map(pair_path(root, b, n), dm)


def load_match_outputs(root, n_neighbors=None):
    """Views (geometry only), neighbour sets and pair maps of a match directory."""
    root = Path(root)
    views = io.load_manifest(root / "manifest.json", load_images=False)
    data = io.read_json(root / "neighbors.json")
    neighbors, pair_maps = {}, {}
    for key, entry in data.items():
        b = int(key)
        ids = tuple(int(v) for v in entry["neighbors"])[:n_neighbors]
        scores = tuple(float(v) for v in entry["scores"])[: len(ids)]
        neighbors[b] = fusion.NeighborSet(b, ids, scores)
        for n in ids:
            p = pair_path(root, b, n)
            if p.exists():
                pair_maps[(b, n)] = io.read_depth_map(p, b, n)
    return views, neighbors, pair_maps


def write_run_manifest(root, config):
    """``run.json`` with the config hash and the SHA-256 of every output file."""
    root = Path(root)
    files = [f for f in io.file_listing(root) if f != "run.json"]
    hashes = {f: io.sha256_file(root / f) for f in files}
    io.write_json(root / "run.json", {
        "config_sha256": hashlib.sha256(config.to_json().encode()).hexdigest(),
        "outputs": hashes,
    })
    return hashes


def run_pipeline(config, views, out_dir, reference=None, threads=1):
    """Run every stage and write all artifacts under ``out_dir``.

    Args:
        config: PipelineConfig.
        views: CameraViews with rasters.
        out_dir: Output directory (created).
        reference: Optional reference PointCloud; without it the evaluate
            stage and the error-based reports are skipped.
        threads: Worker threads.
    """
    config = config or PipelineConfig()
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    io.write_text(root / "config.json", config.to_json())

    t0 = time.perf_counter()
    match = match_stage(views, config, threads)
    log.info("match: %d pair maps in %.1f s", len(match.pair_maps), time.perf_counter() - t0)
    write_match_outputs(root, views, match)

    fused, cloud = fuse_stage(views, match.neighbors, match.pair_maps, config, threads)
    for i, fm in sorted(fused.items()):
        io.write_depth_map(fused_path(root, i), fm)

    evaluation = None
    if reference is not None:
        cloud, evaluation = evaluate_stage(cloud, reference, config, threads)
        io.write_json(root / "evaluation.json", evaluation.to_dict())
    io.write_ply(root / "cloud.ply", cloud)

    table = annotated = None
    try:
        table, _ = uq_stage(cloud, views, match.pair_maps, config)
    except StageError as exc:
        log.warning("UQ table not built: %s", exc)
    if table is not None:
        io.save_uq_table(root / "uq.json", table)
        annotated = uq.annotate_cloud(cloud, table, match.pair_maps)
        io.write_ply(root / "cloud_annotated.ply", annotated)

    write_reports(root, annotated if annotated is not None else cloud, views, match.pair_maps, config,
                  table, reference, evaluation, threads)
    hashes = write_run_manifest(root, config)
    return RunResult(root, cloud, annotated, table, evaluation, match, hashes)
