"""Command-line entry point: simulate, track, harvest-patches, train,
evaluate, and render subcommands sharing one configuration schema.

Any flag of the form ``--section.key=value`` overrides the matching
configuration entry; ``--dump-config`` prints the effective configuration.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

from . import __version__, classifier, evaluation, generator, manager
from .config import ConfigError, PipelineConfig, dump_config, load_config
from .engine import SNAP_META
from .events import read_event_array, write_events
from .patch import PATCH_SIZE, write_patch_csv


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="blobtrack",
        description="Asynchronous event-blob detection, validation, and tracking toolchain",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--config", help="JSON configuration file")
    parser.add_argument("--seed", type=int, help="override the configured seed")
    parser.add_argument(
        "--dump-config", action="store_true", help="print the effective configuration and exit"
    )
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("simulate", help="generate a labelled synthetic scene")
    p.add_argument("scene", help="scene description JSON")
    p.add_argument("out_prefix", help="writes <prefix>.events.<ext> and <prefix>.gt.csv")
    p.add_argument("--format", choices=["csv", "binary"], default="csv")

    p = sub.add_parser("track", help="run the tracking pipeline over a stream")
    p.add_argument("events", help="event stream file")
    p.add_argument("out_prefix", help="writes <prefix>.tracks.csv and <prefix>.summary.json")
    p.add_argument("--model", help="trained classifier model file")
    p.add_argument(
        "--no-classifier", action="store_true",
        help="validate candidates with state thresholds instead of the classifier",
    )

    p = sub.add_parser("harvest-patches", help="harvest labelled patches from candidate tracks")
    p.add_argument("events", help="labelled event stream")
    p.add_argument("out_dir", help="dataset directory (pos/ and neg/ subdirs)")
    p.add_argument("--purity-pos", type=float, default=0.8)
    p.add_argument("--purity-neg", type=float, default=0.2)
    p.add_argument("--max-per-class", type=int, default=0, help="0 = unlimited")
    p.add_argument(
        "--skip-first", type=int, default=0,
        help="drop each track's first N snapshots (early patches are sparse)",
    )

    p = sub.add_parser("train", help="train the patch classifier")
    p.add_argument("dataset", help="patch dataset directory")
    p.add_argument("out_model", help="model output path")
    p.add_argument("--report", help="training report CSV path")

    p = sub.add_parser("evaluate", help="score a track output against labelled events")
    p.add_argument("tracks", help="track output CSV")
    p.add_argument("events", help="labelled event stream")
    p.add_argument("out_prefix", help="writes <prefix>.metrics.csv and <prefix>.metrics.json")

    p = sub.add_parser("render", help="render frames with track overlays")
    p.add_argument("events", help="event stream file")
    p.add_argument("tracks", help="track output CSV")
    p.add_argument("out_dir")
    p.add_argument("--frame-period-us", type=int, default=10000)

    return parser


def _split_overrides(argv):
    """Pull --section.key=value overrides out of the raw argument list."""
    plain, overrides = [], {}
    for a in argv:
        if a.startswith("--") and "." in a.split("=")[0] and "=" in a:
            key, val = a[2:].split("=", 1)
            overrides[key] = val
        else:
            plain.append(a)
    return plain, overrides


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    plain, overrides = _split_overrides(argv)
    parser = _build_parser()
    args = parser.parse_args(plain)

    try:
        cfg = load_config(args.config, overrides)
        if args.seed is not None:
            cfg["seed"] = args.seed
        if args.dump_config:
            print(dump_config(cfg))
            return 0
        if args.command is None:
            parser.print_help()
            return 2
        return _dispatch(args, cfg)
    except (ConfigError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def _dispatch(args, cfg) -> int:
    pipeline = PipelineConfig.from_dict(cfg)
    if args.command == "simulate":
        return cmd_simulate(args, cfg)
    if args.command == "track":
        return cmd_track(args, pipeline)
    if args.command == "harvest-patches":
        return cmd_harvest_patches(args, pipeline)
    if args.command == "train":
        return cmd_train(args, pipeline)
    if args.command == "evaluate":
        return cmd_evaluate(args, pipeline)
    if args.command == "render":
        return cmd_render(args)
    raise ValueError(f"unknown command {args.command}")


def cmd_simulate(args, cfg) -> int:
    with open(args.scene) as f:
        scene_dict = json.load(f)
    scene = generator.scene_from_dict(scene_dict)
    events, gt = generator.generate_scene(scene)
    ext = "csv" if args.format == "csv" else "aevt"
    write_events(f"{args.out_prefix}.events.{ext}", events, args.format)
    generator.write_ground_truth(f"{args.out_prefix}.gt.csv", gt)
    print(f"{len(events)} events, {len(scene.objects)} objects -> {args.out_prefix}.events.{ext}")
    return 0


def cmd_track(args, pipeline: PipelineConfig) -> int:
    if args.model is None and not args.no_classifier:
        raise ValueError("either --model or --no-classifier is required")
    model = classifier.load(args.model) if args.model else None
    events = read_event_array(args.events)
    t0 = time.perf_counter()
    records, summary, _pool = manager.run(
        events, pipeline, model, use_classifier=not args.no_classifier
    )
    summary["wall_seconds"] = time.perf_counter() - t0
    manager.write_track_csv(f"{args.out_prefix}.tracks.csv", records)
    manager.write_summary(f"{args.out_prefix}.summary.json", summary)
    print(
        f"{summary['events']} events, {summary['tracks_spawned']} spawned, "
        f"{summary['tracks_promoted']} promoted -> {args.out_prefix}.tracks.csv"
    )
    return 0


def cmd_harvest_patches(args, pipeline: PipelineConfig) -> int:
    events = read_event_array(args.events)
    if events.label is None:
        raise ValueError("harvesting requires a labelled event stream")
    pool = manager.TrackerPool(
        events.width, events.height, pipeline, model=None,
        use_classifier=False, harvest=True,
        max_label=int(events.label.max(initial=0)),
    )
    pool.process(events)
    snaps = manager.skip_early_snapshots(pool.snapshots(), args.skip_first)

    out_dir = Path(args.out_dir)
    counts = {"pos": 0, "neg": 0}
    for sub in counts:
        (out_dir / sub).mkdir(parents=True, exist_ok=True)
    for row in snaps:
        purity = row[3]
        if purity >= args.purity_pos and row[2] >= 1:
            sub = "pos"
        elif purity <= args.purity_neg:
            sub = "neg"
        else:
            continue
        if args.max_per_class and counts[sub] >= args.max_per_class:
            continue
        cells = row[SNAP_META:].reshape(PATCH_SIZE, PATCH_SIZE)
        write_patch_csv(out_dir / sub / f"patch_{counts[sub]:06d}.csv", cells)
        counts[sub] += 1
    print(f"harvested {counts['pos']} positive, {counts['neg']} negative patches -> {out_dir}")
    return 0


def cmd_train(args, pipeline: PipelineConfig) -> int:
    x, y = classifier.load_patch_dataset(args.dataset)
    model, report = classifier.train(x, y, pipeline.train_config)
    classifier.save(model, args.out_model)
    report_path = args.report or str(Path(args.out_model).with_suffix(".report.csv"))
    report.write_csv(report_path)
    print(
        f"trained on {len(x)} patches in {report.wall_seconds:.1f}s, "
        f"final val accuracy {report.val_accuracy[-1]:.3f} -> {args.out_model}"
    )
    return 0


def cmd_evaluate(args, pipeline: PipelineConfig) -> int:
    records = manager.read_track_csv(args.tracks)
    events = read_event_array(args.events)
    ev = pipeline.raw["evaluation"]
    report = evaluation.score(
        records, events,
        match_radius=float(ev["match_radius"]),
        cadence_us=int(ev["cadence_us"]),
    )
    report.write_csv(f"{args.out_prefix}.metrics.csv")
    report.write_json(f"{args.out_prefix}.metrics.json")
    print(
        f"precision {report.aggregates['precision_mean']:.3f} "
        f"(std {report.aggregates['precision_std']:.3f}), "
        f"recall {report.aggregates['recall_mean']:.3f} "
        f"(std {report.aggregates['recall_std']:.3f})"
    )
    return 0


def cmd_render(args) -> int:
    events = read_event_array(args.events)
    records = manager.read_track_csv(args.tracks)
    paths = evaluation.render(events, records, args.out_dir, args.frame_period_us)
    print(f"{len(paths)} frames -> {args.out_dir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
