"""Command-line interface: ``mvsuq <command> [options]``.

Exit codes: 0 success, 2 invalid input, 3 stage failure.
"""

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import evaluate as ev
from . import io, pipeline, synth, uq
from .config import PipelineConfig
from .errors import InputError, MvsUqError

log = logging.getLogger("mvsuq")


def _config(args, **overrides):
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    changes = {k: v for k, v in overrides.items() if v is not None}
    return cfg.replace(**changes) if changes else cfg


def _suffixed(path, suffix):
    p = Path(path)
    return p.with_name(p.stem + suffix + p.suffix)


# --------------------------------------------------------------------------- commands


def cmd_match(args):
    cfg = _config(args, n_neighbors=args.n, seed=args.seed)
    views = io.load_manifest(args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    io.write_text(out / "config.json", cfg.to_json())
    match = pipeline.match_stage(views, cfg, args.threads)
    pipeline.write_match_outputs(out, views, match)
    print(f"matched {len(match.pair_maps)} pairs ({len(match.rejections)} rejected) -> {out}")


def cmd_fuse(args):
    cfg = _config(args, k_consistency=args.k, n_neighbors=args.n, eps_rel=args.eps)
    root = Path(args.indir)
    views, neighbors, pair_maps = pipeline.load_match_outputs(root, cfg.n_neighbors)
    fused, cloud = pipeline.fuse_stage(views, neighbors, pair_maps, cfg, args.threads)
    for i, fm in sorted(fused.items()):
        io.write_depth_map(pipeline.fused_path(root, i), fm)
    io.write_ply(root / "cloud.ply", cloud)
    print(f"fused {len(cloud)} points -> {root / 'cloud.ply'}")


def cmd_evaluate(args):
    cfg = _config(args, icp=args.icp)
    cloud = io.read_ply(args.cloud)
    reference = io.read_ply(args.reference)
    cloud, evaluation = pipeline.evaluate_stage(cloud, reference, cfg, args.threads)
    out = Path(args.out) if args.out else _suffixed(args.cloud, "_evaluated")
    io.write_ply(out, cloud)
    io.write_json(out.with_suffix(".json"), evaluation.to_dict())
    mae = "n/a" if evaluation.mae is None else f"{evaluation.mae:.6g}"
    std = "n/a" if evaluation.std is None else f"{evaluation.std:.6g}"
    print(f"MAE {mae} m, std {std} m over {evaluation.evaluated} points -> {out}")


def cmd_fit_uq(args):
    cfg = _config(args, uq_bin_size=args.bin_size, min_rays=args.min_rays, uq_min_samples=args.min_samples)
    root = Path(args.indir)
    views, _, pair_maps = pipeline.load_match_outputs(root)
    cloud = io.read_ply(root / "cloud.ply")
    table, samples = pipeline.uq_stage(cloud, views, pair_maps, cfg)
    io.save_uq_table(root / "uq.json", table)
    print(f"fitted {len(table)} bins from {len(samples)} samples -> {root / 'uq.json'}")


def cmd_infer(args):
    cloud = io.read_ply(args.cloud)
    table = io.load_uq_table(args.table)
    pair_maps = None
    if args.indir:
        _, _, pair_maps = pipeline.load_match_outputs(args.indir)
    out_cloud = uq.annotate_cloud(cloud, table, pair_maps)
    out = Path(args.out) if args.out else _suffixed(args.cloud, "_annotated")
    io.write_ply(out, out_cloud)
    flagged = int(np.sum(out_cloud.extra["uq_flag"] > 0))
    print(f"annotated {len(out_cloud)} points ({flagged} without energy) -> {out}")


def cmd_synth(args):
    try:
        n_nadir, n_oblique = (int(v) for v in args.views.split(","))
    except ValueError as exc:
        raise InputError(f"--views expects N,O counts, got {args.views!r}") from exc
    spec = synth.SceneSpec(surface=args.spec, n_nadir=n_nadir, n_oblique=n_oblique,
                           textureless_fraction=args.textureless)
    scene = synth.generate_scene(args.seed, spec)
    views, _ = synth.render_scene(scene)
    out = Path(args.out)
    named = []
    for v in views:
        rel = f"images/view_{v.image_id:04d}.png"
        io.write_image(out / rel, v.raster)
        named.append(io.view_from_dict({**io.view_to_dict(v), "image_path": rel}))
    io.save_manifest(out / "manifest.json", named)
    io.write_json(out / "scene.json", {"seed": args.seed, "spec": spec.to_dict()})
    io.write_ply(out / "reference.ply", scene.reference_cloud())
    print(f"wrote {len(views)} views and a reference cloud -> {out}")


def cmd_run(args):
    cfg = _config(args)
    views = io.load_manifest(args.manifest)
    reference = io.read_ply(args.reference) if args.reference else None
    res = pipeline.run_pipeline(cfg, views, args.out, reference, args.threads)
    print(f"{len(res.cloud)} points; outputs in {res.out_dir}")


def cmd_report(args):
    cfg = _config(args)
    root = Path(args.indir)
    views, _, pair_maps = pipeline.load_match_outputs(root)
    name = "cloud_annotated.ply" if (root / "cloud_annotated.ply").exists() else "cloud.ply"
    cloud = io.read_ply(root / name)
    table = io.load_uq_table(root / "uq.json") if (root / "uq.json").exists() else None
    reference = evaluation = None
    if args.reference:
        reference = io.read_ply(args.reference)
        if "error_m" not in cloud.extra:
            cloud, evaluation = pipeline.evaluate_stage(cloud, reference, cfg, args.threads)
    written = pipeline.write_reports(root, cloud, views, pair_maps, cfg, table, reference, evaluation,
                                     args.threads)
    for p in written:
        print(p)


# --------------------------------------------------------------------------- parser


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="PipelineConfig JSON file")
    common.add_argument("--threads", type=int, default=1, help="worker threads (default 1)")
    common.add_argument("--verbose", "-v", action="count", default=0, help="more logging (repeatable)")

    p = argparse.ArgumentParser(prog="mvsuq", description=__doc__, parents=[common])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("match", parents=[common], help="neighbour selection and pairwise depth maps")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, help="neighbours per image")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_match)

    s = sub.add_parser("fuse", parents=[common], help="k-of-n fusion of a match directory")
    s.add_argument("--in", dest="indir", required=True)
    s.add_argument("--k", type=int)
    s.add_argument("--n", type=int)
    s.add_argument("--eps", type=float, help="relative depth tolerance")
    s.set_defaults(func=cmd_fuse)

    s = sub.add_parser("evaluate", parents=[common], help="per-point errors against a reference cloud")
    s.add_argument("--cloud", required=True)
    s.add_argument("--reference", required=True)
    s.add_argument("--icp", action=argparse.BooleanOptionalAction, default=None)
    s.add_argument("--out")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("fit-uq", parents=[common], help="fit the energy-binned Gamma table")
    s.add_argument("--in", dest="indir", required=True)
    s.add_argument("--bin-size", type=float)
    s.add_argument("--min-rays", type=int)
    s.add_argument("--min-samples", type=int)
    s.set_defaults(func=cmd_fit_uq)

    s = sub.add_parser("infer", parents=[common], help="predict per-point errors from a UQ table")
    s.add_argument("--cloud", required=True)
    s.add_argument("--table", required=True)
    s.add_argument("--in", dest="indir", help="match directory for per-pair energies")
    s.add_argument("--out")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("synth", parents=[common], help="render a synthetic scene")
    s.add_argument("--seed", type=int, default=7)
    s.add_argument("--spec", choices=("plane", "hills"), default="hills")
    s.add_argument("--views", default="5,6", help="nadir,oblique counts")
    s.add_argument("--textureless", type=float, default=0.0, help="textureless area fraction")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("run", parents=[common], help="full pipeline on a manifest")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--reference")
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("report", parents=[common], help="figure-analog CSV reports")
    s.add_argument("--in", dest="indir", required=True)
    s.add_argument("--reference")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        parser.error("--threads must be >= 1")
    try:
        args.func(args)
    except MvsUqError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return getattr(exc, "exit_code", 3)
    except (FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
