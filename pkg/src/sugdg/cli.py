"""Command-line entry point: ``sugdg <command> ...``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from collections import Counter
from pathlib import Path
from typing import List, Optional, Sequence

from .config import TrainConfig, bundled_config, load_config, save_config
from .dataset import DatasetManifest, load_manifest, read_split, save_manifest, write_split
from .errors import ConfigError, NumericError, SugdgError
from .experiment import ARMS, SweepSummary, emit_report, resample, run_seeds
from .net import load_checkpoint, save_checkpoint
from .splitter import METHODS, METRICS, split_dataset
from .synth import bundled_spec, generate_synthetic, load_synth_spec, save_synth_spec
from .training import evaluate, train_two_step, write_log

logger = logging.getLogger("sugdg")

MANIFEST_NAME = "manifest.txt"


def _thread_cap() -> Optional[int]:
    env = os.environ.get("SUGDG_THREADS")
    if env is None:
        return None
    if not env.isdigit() or int(env) < 1:
        raise ConfigError(f"SUGDG_THREADS must be a positive integer, got {env!r}")
    return int(env)


def _seed_list(text: str) -> List[int]:
    """``"5"`` means seeds 0..4; ``"3,7,11"`` lists them explicitly."""
    try:
        if "," in text:
            return [int(s) for s in text.split(",") if s.strip()]
        n = int(text)
    except ValueError as exc:
        raise ConfigError(f"bad --seeds value {text!r}") from exc
    if n < 1:
        raise ConfigError("--seeds must be at least 1")
    return list(range(n))


def _uniform_size(manifest: DatasetManifest, n_points: Optional[int] = None, seed=0) -> DatasetManifest:
    if n_points is None:
        sizes = Counter(c.n for c in manifest.clouds)
        if len(sizes) == 1:
            return manifest
        n_points = sizes.most_common(1)[0][0]
        logger.warning("%s: clouds have unequal sizes; resampling to %d points", manifest.name or "manifest", n_points)
    return resample(manifest, n_points, seed)


# ------------------------------------------------------------------- commands


def cmd_gen_synth(args) -> None:
    spec = bundled_spec() if args.spec == "bundled" else load_synth_spec(args.spec)
    if args.seed is not None:
        spec = spec.with_seed(args.seed)
    source, targets = generate_synthetic(spec)
    out = Path(args.out)
    for manifest in [source, *targets]:
        save_manifest(manifest, out / manifest.name / MANIFEST_NAME)
    save_synth_spec(spec, out / "spec.cfg")
    names = ", ".join(t.name for t in targets)
    print(f"wrote source ({len(source)} samples) and targets {names} under {out}")


def cmd_split(args) -> None:
    manifest = load_manifest(args.manifest)
    model = None
    if args.method in ("entropy", "feature"):
        if args.checkpoint is None:
            raise ConfigError(f"--method {args.method} needs --checkpoint")
        model, _ = load_checkpoint(args.checkpoint)
        manifest = _uniform_size(manifest)
    result = split_dataset(manifest, args.method, args.k, args.seed, args.metric, model)
    write_split(result.assignment, args.out)
    sizes = result.counts.sum(axis=1).tolist()
    print(f"{args.method} split into K={args.k} sub-domains of sizes {sizes} -> {args.out}")


def _config(path: str) -> TrainConfig:
    return bundled_config() if path == "bundled" else load_config(path)


def cmd_train(args) -> None:
    config = _config(args.config)
    manifest = _uniform_size(load_manifest(args.manifest), config.n_points, config.stream("generation", 1))
    split = read_split(args.split, len(manifest)) if args.split else None
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    try:
        result = train_two_step(config, manifest, split)
    except NumericError as exc:
        partial = getattr(exc, "partial", None)
        if partial is not None:
            save_checkpoint(partial.params, partial.state, out)
            raise NumericError(f"{exc}; last good checkpoint kept at {out}") from exc
        raise
    save_checkpoint(result.params, result.state, out)
    log_path = Path(args.log) if args.log else out.with_name(out.name + ".log.csv")
    write_log(result.log, log_path)
    print(f"trained {len(result.log)} steps ({result.step2_epochs_run} alignment epochs) -> {out}, log {log_path}")


def cmd_eval(args) -> None:
    params, _ = load_checkpoint(args.checkpoint)
    paths = [p for p in args.targets.split(",") if p]
    if not paths:
        raise ConfigError("--targets needs at least one manifest")
    targets = [_uniform_size(load_manifest(p)) for p in paths]
    names = [t.name or Path(p).parent.name for t, p in zip(targets, paths)]
    report = evaluate(params, targets, names, seed=args.seed, arm=args.arm)
    emit_report([report], args.out)
    cells = "  ".join(f"{t.name} {t.accuracy:.2f}" for t in report.targets)
    print(f"{cells}  Avg {report.avg:.2f} -> {args.out}")


def cmd_run(args) -> None:
    config = _config(args.config)
    spec = bundled_spec() if args.spec == "bundled" else load_synth_spec(args.spec)
    seeds = _seed_list(args.seeds)
    results = run_seeds(config, spec, seeds)
    summary = SweepSummary.from_results(results)
    out = Path(args.out)
    reports = [rep for r in results for rep in r.reports]
    emit_report(reports, out / "report.csv", summary)
    print(
        f"{ARMS[0]} {summary.source_only_mean:.2f}  {ARMS[1]} {summary.sug_mean:.2f}  "
        f"gain {summary.gain_mean:+.2f} +/- {summary.gain_std:.2f}  wins {summary.wins}/{len(seeds)} -> {out}"
    )


def cmd_default_config(args) -> None:
    save_config(bundled_config() if args.bundled else TrainConfig(), args.out)
    print(f"wrote default config -> {args.out}")


# --------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sugdg", description="Single-dataset domain generalisation for point clouds.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="generate the synthetic source and target domains")
    p.add_argument("--spec", required=True, help="SUGDG-SYNTH file, or 'bundled'")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None, help="override the spec's generation seed")
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("split", help="split a manifest class-wise into K sub-domains")
    p.add_argument("--manifest", required=True)
    p.add_argument("--method", required=True, choices=METHODS)
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--metric", choices=METRICS, default="icp")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--checkpoint", help="trained model for the entropy and feature methods")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="two-step training on one source manifest")
    p.add_argument("--config", required=True, help="SUGDG-CONFIG file, or 'bundled'")
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", help="split file; default splits as configured after step 1")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="training log CSV (default <out>.log.csv)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="zero-shot accuracy of a checkpoint on target manifests")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--targets", required=True, help="comma-separated manifest paths")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None, help="seed recorded in the report")
    p.add_argument("--arm", default="", help="label recorded in the report's arm column")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("run", help="source-only vs SUG over several seeds")
    p.add_argument("--config", required=True, help="SUGDG-CONFIG file, or 'bundled'")
    p.add_argument("--spec", required=True, help="SUGDG-SYNTH file, or 'bundled'")
    p.add_argument("--seeds", default="5", help="count (0..N-1) or comma-separated list")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("default-config", help="write a config file holding the defaults")
    p.add_argument("--out", required=True)
    p.add_argument("--bundled", action="store_true", help="write the bundled benchmark settings instead")
    p.set_defaults(func=cmd_default_config)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cap = _thread_cap()
        if cap is None:
            args.func(args)
        else:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(cap):
                args.func(args)
    except (SugdgError, OSError, ValueError) as exc:
        message = " ".join(str(exc).split()) or type(exc).__name__
        print(f"sugdg: error: {message}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
