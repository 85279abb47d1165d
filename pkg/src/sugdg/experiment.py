"""Source-only vs SUG experiments over seeds, and report emission."""

from __future__ import annotations

import csv
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np

from .config import TrainConfig
from .dataset import DatasetManifest
from .geometry import format_float
from .synth import SynthSpec, generate_synthetic
from .training import EvalReport, evaluate, train_two_step

logger = logging.getLogger(__name__)

ARMS = ("source-only", "SUG")


@dataclass(frozen=True)
class ExperimentResult:
    seed: int
    source_only: EvalReport
    sug: EvalReport

    @property
    def gain(self) -> float:
        return self.sug.avg - self.source_only.avg

    @property
    def reports(self) -> tuple:
        return (self.source_only, self.sug)


def resample(manifest: DatasetManifest, n_points: int, seed) -> DatasetManifest:
    """Give every cloud exactly ``n_points`` points by seeded subsampling (or resampling with replacement)."""
    if all(c.n == n_points for c in manifest.clouds):
        return manifest
    rng = np.random.default_rng(seed)
    clouds = []
    for c in manifest.clouds:
        if c.n == n_points:
            clouds.append(c)
            continue
        idx = rng.choice(c.n, size=n_points, replace=c.n < n_points)
        clouds.append(c.with_points(c.points[np.sort(idx)]))
    return DatasetManifest(manifest.class_names, clouds, manifest.name)


def source_only_config(config: TrainConfig) -> TrainConfig:
    """Classification-only training with the same total epoch budget."""
    return config.with_(step1_epochs=config.step1_epochs + config.step2_epochs, step2_epochs=0)


def generation_seed(config: TrainConfig, spec: SynthSpec) -> int:
    """Data seed for one run: depends on the spec's own seed and the master seed."""
    return int(np.random.SeedSequence([spec.seed, *config.stream("generation").entropy]).generate_state(1)[0])


def run_experiment(config: TrainConfig, spec: SynthSpec) -> ExperimentResult:
    """Generate data, train both arms on the identical source set, evaluate on every target."""
    gen_spec = spec.with_seed(generation_seed(config, spec))
    source, targets = generate_synthetic(gen_spec)
    source = resample(source, config.n_points, config.stream("generation", 1))
    targets = [resample(t, config.n_points, config.stream("generation", 2 + i)) for i, t in enumerate(targets)]
    digest = config.digest()

    baseline = train_two_step(source_only_config(config), source)
    sug = train_two_step(config, source)
    return ExperimentResult(
        config.seed,
        evaluate(baseline.params, targets, seed=config.seed, config_hash=digest, arm=ARMS[0]),
        evaluate(sug.params, targets, seed=config.seed, config_hash=digest, arm=ARMS[1]),
    )


def _run_one(args):
    from threadpoolctl import threadpool_limits

    config, spec = args
    with threadpool_limits(1):
        return run_experiment(config, spec)


def worker_count(jobs: int) -> int:
    env = os.environ.get("SUGDG_THREADS")
    cap = int(env) if env and env.isdigit() and int(env) > 0 else (os.cpu_count() or 1)
    return max(1, min(jobs, cap))


def run_seeds(config: TrainConfig, spec: SynthSpec, seeds: Sequence[int]) -> List[ExperimentResult]:
    """One experiment per master seed. Independent seeds may run in separate processes."""
    jobs = [(config.with_(seed=int(s)), spec) for s in seeds]
    workers = worker_count(len(jobs))
    if workers == 1:
        return [_run_one(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_one, jobs))


@dataclass(frozen=True)
class SweepSummary:
    seeds: tuple
    source_only_mean: float
    sug_mean: float
    gain_mean: float
    gain_std: float
    wins: int

    @classmethod
    def from_results(cls, results: Sequence[ExperimentResult]) -> "SweepSummary":
        gains = np.array([r.gain for r in results])
        return cls(
            tuple(r.seed for r in results),
            float(np.mean([r.source_only.avg for r in results])),
            float(np.mean([r.sug.avg for r in results])),
            float(gains.mean()),
            float(gains.std(ddof=1)) if len(gains) > 1 else 0.0,
            int(np.sum(gains >= 0)),
        )


# ---------------------------------------------------------------------- reports


def _fmt(x: float) -> str:
    return "nan" if math.isnan(x) else format_float(round(x, 6))


def report_rows(reports: Sequence[EvalReport]) -> List[List[str]]:
    """One row per report: arm, seed, config hash, one column per target, Avg."""
    names = [t.name for t in reports[0].targets]
    rows = [["arm", "seed", "config_hash", *names, "Avg"]]
    for r in reports:
        if [t.name for t in r.targets] != names:
            raise ValueError("all reports must cover the same targets")
        rows.append([r.arm, "" if r.seed is None else str(r.seed), r.config_hash,
                     *(_fmt(t.accuracy) for t in r.targets), _fmt(r.avg)])
    return rows


def emit_report(reports: Sequence[EvalReport], path: Union[str, Path], summary: Optional[SweepSummary] = None) -> List[Path]:
    """Write ``<path>`` (CSV), a per-class CSV and a human-readable text table next to it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = report_rows(reports)
    with open(path, "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)

    per_class = path.with_name(path.stem + "_per_class.csv")
    with open(per_class, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["arm", "seed", "target", "class", "accuracy", "correct", "total"])
        for r in reports:
            for t in r.targets:
                for c, name in enumerate(r.class_names):
                    writer.writerow([r.arm, "" if r.seed is None else r.seed, t.name, name,
                                     _fmt(t.per_class[c]), t.correct[c], t.total[c]])

    table = path.with_suffix(".txt")
    header = rows[0]
    widths = [max(len(row[i]) for row in rows) for i in range(len(header))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    if summary is not None:
        lines += [
            "",
            f"seeds: {','.join(str(s) for s in summary.seeds)}",
            f"mean Avg  source-only {summary.source_only_mean:.2f}   SUG {summary.sug_mean:.2f}",
            f"SUG - source-only: {summary.gain_mean:+.2f} +/- {summary.gain_std:.2f} (std over seeds); "
            f"SUG >= source-only in {summary.wins}/{len(summary.seeds)} seeds",
        ]
    table.write_text("\n".join(lines) + "\n")
    return [path, per_class, table]
