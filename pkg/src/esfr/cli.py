"""Command line interface: eval, trace, lid, synth, calibrate."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .adaptation import STOP_POST, STOP_PRE, TAP_MIDDLE, TAP_OUTPUT, EsfrConfig
from .harness import (
    ADAPT_MODES,
    DESK_PRESET,
    METHODS,
    EpisodeSpec,
    SynthSpec,
    calibrate_generator,
    dataset_lid,
    evaluate,
    generate_synthetic,
    load_embeddings,
    run_trace,
    save_embeddings,
)


def _episode_spec(args) -> EpisodeSpec:
    if args.query_profile:
        profile = tuple(int(q) for q in args.query_profile.split(","))
    else:
        profile = (args.query,) * args.n_way
    return EpisodeSpec(
        n_way=args.n_way,
        k_shot=args.k_shot,
        query_profile=profile,
        task_count=args.tasks,
        master_seed=args.seed,
    )


def _esfr_config(args) -> EsfrConfig:
    stop = STOP_POST if args.stop_weights == "post" else STOP_PRE
    tap = TAP_OUTPUT if getattr(args, "tap", "output") == "output" else TAP_MIDDLE
    return EsfrConfig(
        ensemble_size=args.ensemble,
        max_iterations=args.max_iter,
        dropout_rate=args.dropout,
        lid_m=args.m,
        lambda_=getattr(args, "lambda_", 0.0),
        stop_weights=stop,
        embedding_tap=tap,
    )


def _add_episode_flags(p: argparse.ArgumentParser, tasks_default: int) -> None:
    p.add_argument("--n-way", type=int, default=5)
    p.add_argument("--k-shot", type=int, default=1, choices=(1, 5))
    p.add_argument("--query", type=int, default=15, help="query samples per class")
    p.add_argument("--query-profile", default="", help="comma-separated per-class query counts")
    p.add_argument("--tasks", type=int, default=tasks_default)
    p.add_argument("--seed", type=int, default=0)


def _add_esfr_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--ensemble", type=int, default=5)
    p.add_argument("--dropout", type=float, default=0.5)
    p.add_argument("--max-iter", type=int, default=200)
    p.add_argument("--m", type=int, default=20)
    p.add_argument("--stop-weights", choices=("post", "pre"), default="post")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="esfr", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("eval", help="episodic benchmark with a JSON report")
    p.add_argument("--data", required=True)
    p.add_argument("--method", choices=METHODS, default="nn")
    p.add_argument("--adapt", choices=ADAPT_MODES, default="none")
    _add_episode_flags(p, tasks_default=2000)
    p.add_argument("--lambda", dest="lambda_", type=float, default=0.0)
    _add_esfr_flags(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("trace", help="training-dynamics CSV for one episode")
    p.add_argument("--data", required=True)
    p.add_argument("--task-index", type=int, default=0)
    _add_episode_flags(p, tasks_default=1)
    _add_esfr_flags(p)
    p.add_argument("--probe-every", type=int, default=1)
    p.add_argument("--tap", choices=("output", "hidden"), default="output")
    p.add_argument("--out", required=True)

    p = sub.add_parser("lid", help="per-point LID of a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--m", type=int, default=20)

    p = sub.add_parser("synth", help="generate a synthetic embedding dataset")
    p.add_argument("--classes", type=int, default=DESK_PRESET.class_count)
    p.add_argument("--signal-dims", type=int, default=DESK_PRESET.signal_dim)
    p.add_argument("--noise-dims", type=int, default=DESK_PRESET.noise_dim)
    p.add_argument("--per-class", type=int, default=DESK_PRESET.samples_per_class)
    p.add_argument("--spread", type=float, default=DESK_PRESET.cluster_spread)
    p.add_argument("--noise-scale", type=float, default=DESK_PRESET.noise_scale)
    p.add_argument("--seed", type=int, default=DESK_PRESET.seed)
    p.add_argument("--out", required=True)

    p = sub.add_parser("calibrate", help="sweep the generator toward the target baseline band")
    p.add_argument("--tasks", type=int, default=60)
    p.add_argument("--out", required=True)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)

    if args.command == "eval":
        dataset = load_embeddings(args.data)
        spec = _episode_spec(args)
        report = evaluate(
            dataset,
            spec,
            method=args.method,
            adapt_mode=args.adapt,
            esfr_cfg=_esfr_config(args),
            data_path=args.data,
        )
        report.write(args.out)
        print(
            f"{args.method}+{args.adapt}: {report.mean_acc:.2f}% +- {report.ci95:.2f} "
            f"({report.task_count} tasks, {report.failures} member failures) -> {args.out}"
        )
        return 0

    if args.command == "trace":
        dataset = load_embeddings(args.data)
        spec = _episode_spec(args)
        written = run_trace(
            dataset,
            spec,
            _esfr_config(args),
            args.out,
            task_index=args.task_index,
            probe_every=args.probe_every,
        )
        for path in written:
            print(f"wrote {path}")
        return 0

    if args.command == "lid":
        dataset = load_embeddings(args.data)
        summary = dataset_lid(dataset, m=args.m)
        print(f"points: {summary.point_count}  skipped: {summary.skipped}")
        print(f"lid mean: {summary.lid_mean:.6f}")
        print(f"lid sum:  {summary.lid_sum:.6f}")
        return 0

    if args.command == "synth":
        spec = SynthSpec(
            class_count=args.classes,
            samples_per_class=args.per_class,
            signal_dim=args.signal_dims,
            noise_dim=args.noise_dims,
            cluster_spread=args.spread,
            noise_scale=args.noise_scale,
            seed=args.seed,
        )
        save_embeddings(args.out, generate_synthetic(spec))
        print(f"wrote {args.out} ({spec.class_count} classes x {spec.samples_per_class}, dim {spec.dim})")
        return 0

    if args.command == "calibrate":
        preset = calibrate_generator(tasks=args.tasks)
        Path(args.out).write_text(json.dumps(preset, sort_keys=True, indent=2) + "\n", encoding="utf-8")
        print(f"baseline {preset['baseline_nn_1shot_acc']:.1f}% at noise {preset['noise_scale']} -> {args.out}")
        return 0

    return 1


if __name__ == "__main__":
    sys.exit(main())
