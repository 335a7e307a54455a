"""Command-line driver: synth / build / eval / disambiguate / export."""

from __future__ import annotations

import argparse
import json
import shutil
import sys
from pathlib import Path

from .config import PipelineConfig
from .disambiguation import ArgmaxClient, HttpClient, MockClient, disambiguate_all
from .evaluation import EvalConfig, evaluate
from .export import export_entropy_layer, export_instance_map, export_semantic_map
from .frames import DatasetError, load_frame, load_ground_truth, load_manifest
from .fusion import Pipeline
from .synthetic import generate_synthetic, load_scene_spec
from .uncertainty import declare_categories, geometric_entropy_map, semantic_entropy_map
from .voxelmap import MapState


def _load_config(path: str | None) -> PipelineConfig:
    return PipelineConfig.from_file(path) if path else PipelineConfig()


def _cmd_build(args: argparse.Namespace) -> int:
    config = _load_config(args.config)
    dataset = Path(args.dataset)
    out_dir = Path(args.out)
    created = not out_dir.exists()
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        records = load_manifest(dataset / "manifest.jsonl")
        state = MapState(voxel_size=config.voxel_size, occupancy=config.occupancy_params())
        pipeline = Pipeline(
            state,
            clustering=config.clustering_params(),
            association=config.association_config(),
            max_range=config.max_range,
            carve=config.carve_free_space,
            carve_stride=config.carve_stride,
            view_store=(out_dir / "views") if config.archive_views else None,
        )
        for record in records:
            pipeline.process_frame(load_frame(record))
        declare_categories(state, config.entropy_threshold)
        state.save_snapshot(out_dir / "map.json")
        export_entropy_layer(state, geometric_entropy_map(state), out_dir / "geom_entropy.ply")
        export_entropy_layer(state, semantic_entropy_map(state), out_dir / "sem_entropy.ply")
        export_instance_map(state, out_dir / "instances.ply")
        export_semantic_map(state, out_dir / "semantics.ply")
        timing = pipeline.timer.report()
        (out_dir / "timing.json").write_text(json.dumps(timing, sort_keys=True), encoding="utf-8")
        for stage, entry in timing["stages"].items():
            print(f"{stage}: {entry['mean_ms']:.2f} ms over {entry['runs']} runs")
        print(f"Frame-rate: {timing['frame_rate_hz']:.2f} Hz over {timing['frames']} frames")
        return 0
    except Exception as exc:
        _cleanup(out_dir, created)
        print(f"error: {exc}", file=sys.stderr)
        return 1


def _cleanup(out_dir: Path, created_by_us: bool) -> None:
    if created_by_us and out_dir.exists():
        shutil.rmtree(out_dir, ignore_errors=True)


def _cmd_eval(args: argparse.Namespace) -> int:
    config = _load_config(args.config)
    try:
        state = MapState.load_snapshot(args.snapshot)
        gt = load_ground_truth(args.gt)
        eval_config = EvalConfig(iou_threshold=config.iou_threshold, classes=config.eval_classes)
        timing = None
        timing_path = Path(args.snapshot).parent / "timing.json"
        if timing_path.is_file():
            timing = json.loads(timing_path.read_text(encoding="utf-8"))
        report = evaluate(state, gt, eval_config, timing=timing)
        report.save(args.out)
        for category in sorted(report.per_class_ap):
            print(f"AP[{category}] = {report.per_class_ap[category]:.4f}")
        print(f"mAP = {report.map_score:.4f}")
        return 0
    except (DatasetError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def _cmd_synth(args: argparse.Namespace) -> int:
    out_dir = Path(args.out)
    created = not out_dir.exists()
    try:
        scene = load_scene_spec(args.spec)
        generate_synthetic(scene, seed=args.seed, out_dir=out_dir)
        print(f"dataset written to {out_dir}")
        return 0
    except Exception as exc:
        _cleanup(out_dir, created)
        print(f"error: {exc}", file=sys.stderr)
        return 1


def _cmd_disambiguate(args: argparse.Namespace) -> int:
    config = _load_config(args.config)
    try:
        state = MapState.load_snapshot(args.snapshot)
        if args.client == "mock":
            if args.fixtures:
                client = MockClient.from_fixture_file(args.fixtures)
            else:
                client = ArgmaxClient()
        else:
            if not config.endpoint:
                raise ValueError("http client requires 'endpoint' in the config file")
            client = HttpClient(
                endpoint=config.endpoint,
                api_key_env=config.api_key_env,
                model=config.model,
                timeout_s=config.timeout_s,
            )
        report = disambiguate_all(
            state, client, min_prob=config.min_prob, views_per_candidate=config.views_per_candidate
        )
        out = args.out or args.snapshot
        state.save_snapshot(out)
        summary = {
            "decisions": [
                {"instance_id": d.instance_id, "chosen_category": d.chosen_category}
                for d in report.decisions
            ],
            "parse_failures": [list(item) for item in report.parse_failures],
            "client_failures": [list(item) for item in report.client_failures],
        }
        print(json.dumps(summary, sort_keys=True))
        return 0
    except (DatasetError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def _cmd_export(args: argparse.Namespace) -> int:
    try:
        state = MapState.load_snapshot(args.snapshot)
        if args.layer == "instances":
            export_instance_map(state, args.out)
        elif args.layer == "semantics":
            export_semantic_map(state, args.out)
        elif args.layer == "geom-entropy":
            export_entropy_layer(state, geometric_entropy_map(state), args.out)
        elif args.layer == "sem-entropy":
            export_entropy_layer(state, semantic_entropy_map(state), args.out)
        print(f"wrote {args.out}")
        return 0
    except (DatasetError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="voxeland", description="Instance-aware semantic voxel mapping"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_build = sub.add_parser("build", help="map a dataset into a snapshot + layer exports")
    p_build.add_argument("--dataset", required=True)
    p_build.add_argument("--config", default=None)
    p_build.add_argument("--out", required=True)
    p_build.set_defaults(func=_cmd_build)

    p_eval = sub.add_parser("eval", help="evaluate a snapshot against ground truth")
    p_eval.add_argument("--snapshot", required=True)
    p_eval.add_argument("--gt", required=True)
    p_eval.add_argument("--out", required=True)
    p_eval.add_argument("--config", default=None)
    p_eval.set_defaults(func=_cmd_eval)

    p_synth = sub.add_parser("synth", help="generate a synthetic dataset")
    p_synth.add_argument("--spec", required=True)
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.add_argument("--out", required=True)
    p_synth.set_defaults(func=_cmd_synth)

    p_dis = sub.add_parser("disambiguate", help="resolve flagged instances via a client")
    p_dis.add_argument("--snapshot", required=True)
    p_dis.add_argument("--client", choices=["mock", "http"], required=True)
    p_dis.add_argument("--fixtures", default=None)
    p_dis.add_argument("--config", default=None)
    p_dis.add_argument("--out", default=None)
    p_dis.set_defaults(func=_cmd_disambiguate)

    p_export = sub.add_parser("export", help="export a snapshot layer as PLY")
    p_export.add_argument("--snapshot", required=True)
    p_export.add_argument(
        "--layer",
        choices=["instances", "semantics", "geom-entropy", "sem-entropy"],
        required=True,
    )
    p_export.add_argument("--out", required=True)
    p_export.set_defaults(func=_cmd_export)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
