"""Two-step training (classification, then sub-domain alignment) and zero-shot evaluation."""

from __future__ import annotations

import csv
import functools
import hashlib
import itertools
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np

from .alignment import (
    LossBreakdown,
    mmd2,
    _check_breakdown,
    alignment_terms,
    class_weights,
    sda_weights,
    total_loss,
    weighted_ce,
)
from .config import TrainConfig
from .dataset import Batch, DatasetManifest, class_counts, make_batches, plain_batches
from .errors import EvaluationError, NumericError
from .geometry import rotation_z
from .net import AdamState, ModelParams, adam_step, backward, forward, init_params
from .splitter import SplitResult, split_dataset

logger = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "L_cls", "L_ALI_geo", "L_ALI_sem", "L_total")


@dataclass
class TrainResult:
    params: ModelParams
    state: AdamState
    log: List[tuple] = field(default_factory=list)  # rows of LOG_COLUMNS
    split: Optional[SplitResult] = None
    step2_epochs_run: int = 0
    epoch_ali: List[float] = field(default_factory=list)

    def epoch_cls(self, steps_per_epoch: int) -> np.ndarray:
        cls = np.array([row[1] for row in self.log])
        usable = len(cls) - len(cls) % steps_per_epoch
        return cls[:usable].reshape(-1, steps_per_epoch).mean(axis=1)


def write_log(rows: Sequence[tuple], path: Union[str, Path]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_COLUMNS)
        for step, *losses in rows:
            writer.writerow([step, *(repr(float(v)) for v in losses)])


def augment_batch(points: np.ndarray, rng: np.random.Generator, jitter: float, rotation: float) -> np.ndarray:
    """Per-cloud rotation about z plus clipped jitter, drawn from one batch RNG."""
    out = points
    if rotation > 0:
        angles = rng.uniform(-rotation, rotation, len(points))
        rots = np.stack([rotation_z(a) for a in angles])
        out = np.einsum("bnj,bij->bni", out, rots)
    if jitter > 0:
        out = out + np.clip(rng.normal(0.0, jitter, out.shape), -5 * jitter, 5 * jitter)
    return out


class _Trainer:
    def __init__(self, config: TrainConfig, manifest: DatasetManifest):
        self.config = config
        self.manifest = manifest
        self.alpha = class_weights(class_counts(manifest), config.q).alpha
        self.params = init_params(
            manifest.num_classes,
            config.stream("init"),
            config.embed_widths,
            config.cls_hidden,
            class_names=manifest.class_names,
        )
        self.state = AdamState.create(self.params.size, lr=config.lr, weight_decay=config.weight_decay)
        self.discrepancy = functools.partial(mmd2, cross_only=config.sda_mode == "cross")
        self.result = TrainResult(self.params, self.state)
        self.step = 0

    def _augmented(self, batch: Batch, epoch: int, index: int) -> np.ndarray:
        rng = np.random.default_rng(self.config.stream("augment", epoch, index))
        return augment_batch(batch.points, rng, self.config.aug_jitter, self.config.aug_rotation)

    def _record(self, loss: LossBreakdown) -> None:
        self.step += 1
        self.result.log.append((self.step, loss.cls, loss.ali_geo, loss.ali_sem, loss.total))

    def classification_epoch(self, epoch: int) -> None:
        cfg = self.config
        for b, batch in enumerate(plain_batches(self.manifest, cfg.batch_size, self.config.stream("shuffle", epoch))):
            trace = forward(self.params, self._augmented(batch, epoch, b))
            l_cls, g_logits = weighted_ce(trace, batch.labels, self.alpha)
            loss = LossBreakdown(l_cls, 0.0, 0.0, 0.0, l_cls, 0.0)
            _check_breakdown(loss)
            adam_step(self.state, self.params, backward(self.params, trace, g_logits))
            self._record(loss)

    def alignment_epoch(self, epoch: int, split_manifest: DatasetManifest, K: int) -> float:
        cfg = self.config
        ali_values = []
        seed = self.config.stream("shuffle", epoch)
        for b, batch in enumerate(make_batches(split_manifest, cfg.batch_size, seed)):
            pts = self._augmented(batch, epoch, b)
            parts = [np.flatnonzero(batch.subdomains == k) for k in range(K)]
            if K == 2:
                loss, grad = self._pair_loss(pts, batch.labels, parts[0], parts[1])
            else:
                loss, grad = self._multi_loss(pts, batch.labels, parts)
            adam_step(self.state, self.params, grad)
            self._record(loss)
            ali_values.append(loss.ali)
        return float(np.mean(ali_values)) if ali_values else 0.0

    def _sda(self, pts, trace_s, trace_t, rows_s, rows_t):
        if not self.config.sda:
            return None
        return sda_weights(
            pts[rows_s], pts[rows_t], trace_s.softmax, trace_t.softmax, self.config.sda_eps, self.config.js_eps
        )

    def _pair_loss(self, pts, labels, rows_s, rows_t):
        cfg = self.config
        trace_s = forward(self.params, pts[rows_s])
        trace_t = forward(self.params, pts[rows_t])
        return total_loss(
            self.params, trace_s, trace_t, labels[rows_s], labels[rows_t], self.alpha,
            kernel=None, sda=self._sda(pts, trace_s, trace_t, rows_s, rows_t), lam=cfg.lam,
            soft_scale=cfg.soft_scale, multipliers=cfg.kernel_multipliers, discrepancy=self.discrepancy,
        )

    def _multi_loss(self, pts, labels, parts):
        """K > 2: classification on the whole batch, alignment averaged over sub-domain pairs."""
        cfg = self.config
        traces = [forward(self.params, pts[rows]) for rows in parts]
        logits = np.concatenate([t.logits for t in traces])
        all_labels = np.concatenate([labels[rows] for rows in parts])
        l_cls, g_logits = weighted_ce(logits, all_labels, self.alpha)
        offsets = np.cumsum([0] + [len(r) for r in parts])
        g_fl = [np.zeros_like(t.f_l) for t in traces]
        g_fh = [np.zeros_like(t.f_h) for t in traces]
        pairs = list(itertools.combinations(range(len(parts)), 2))
        geo = sem = 0.0
        for a, b in pairs:
            terms = alignment_terms(
                traces[a], traces[b], labels[parts[a]], labels[parts[b]], self.params.num_classes, None,
                self._sda(pts, traces[a], traces[b], parts[a], parts[b]), cfg.soft_scale, cfg.kernel_multipliers,
                self.discrepancy,
            )
            w = cfg.lam / len(pairs)
            geo += terms.geo / len(pairs)
            sem += terms.sem / len(pairs)
            g_fl[a] += w * terms.grad_fl_s
            g_fl[b] += w * terms.grad_fl_t
            g_fh[a] += w * terms.grad_fh_s
            g_fh[b] += w * terms.grad_fh_t
        grad = np.zeros(self.params.size)
        for k, t in enumerate(traces):
            grad += backward(self.params, t, g_logits[offsets[k] : offsets[k + 1]], g_fl[k], g_fh[k])
        loss = LossBreakdown(l_cls, geo, sem, geo + sem, l_cls + cfg.lam * (geo + sem), cfg.lam)
        _check_breakdown(loss)
        return loss, grad


def plateaued(values: Sequence[float], window: int, threshold: float) -> bool:
    """True once the mean of the last ``window`` values moved by < threshold (relative) from the window before."""
    if len(values) < 2 * window:
        return False
    cur = float(np.mean(values[-window:]))
    prev = float(np.mean(values[-2 * window : -window]))
    return abs(cur - prev) < threshold * max(abs(prev), 1e-12)


def train_two_step(
    config: TrainConfig,
    manifest: DatasetManifest,
    split: Optional[Union[SplitResult, Sequence[int]]] = None,
) -> TrainResult:
    """Step 1: weighted classification on the whole dataset. Step 2: split into
    sub-domains and train with classification plus weighted alignment until the
    alignment loss plateaus or ``step2_epochs`` is reached.

    With ``lam == 0`` the split plays no role, so step 2 continues on the
    plain loader and reproduces classification-only training exactly.

    A non-finite loss raises :class:`NumericError` whose ``partial`` attribute
    holds the result so far; its parameters are the last finite update.
    """
    trainer = _Trainer(config, manifest)
    try:
        return _run_steps(trainer, config, manifest, split)
    except NumericError as exc:
        exc.partial = trainer.result
        raise


def _run_steps(trainer: _Trainer, config: TrainConfig, manifest: DatasetManifest, split) -> TrainResult:
    for epoch in range(config.step1_epochs):
        trainer.classification_epoch(epoch)
    trainer.params.trained = True
    result = trainer.result
    if config.step2_epochs == 0:
        return result

    if split is None:
        split = split_dataset(
            manifest, config.split_method, config.K, config.stream("split"), config.split_metric, trainer.params
        )
    assignment = split.assignment if isinstance(split, SplitResult) else np.asarray(split)
    result.split = split if isinstance(split, SplitResult) else None
    split_manifest = manifest.with_subdomains(assignment)
    K = split_manifest.check_subdomains()

    for e in range(config.step2_epochs):
        epoch = config.step1_epochs + e
        if config.lam == 0.0:
            trainer.classification_epoch(epoch)
            result.epoch_ali.append(0.0)
        else:
            result.epoch_ali.append(trainer.alignment_epoch(epoch, split_manifest, K))
        result.step2_epochs_run = e + 1
        if config.lam != 0.0 and plateaued(result.epoch_ali, config.plateau_window, config.plateau_threshold):
            logger.info("alignment loss plateaued after %d step-2 epochs", e + 1)
            break
    return result


# -------------------------------------------------------------------- evaluation


@dataclass(frozen=True)
class TargetResult:
    name: str
    accuracy: float
    per_class: tuple
    correct: tuple
    total: tuple


@dataclass(frozen=True)
class EvalReport:
    targets: tuple
    class_names: tuple
    seed: Optional[int] = None
    config_hash: str = ""
    arm: str = ""

    @property
    def avg(self) -> float:
        return float(np.mean([t.accuracy for t in self.targets]))


def predict(params: ModelParams, points: np.ndarray, chunk: int = 128) -> np.ndarray:
    preds = [np.argmax(forward(params, points[i : i + chunk]).logits, axis=1) for i in range(0, len(points), chunk)]
    return np.concatenate(preds)


def params_digest(params: ModelParams) -> str:
    return hashlib.sha256(params.theta.tobytes()).hexdigest()


def evaluate(
    params: ModelParams,
    targets: Sequence[DatasetManifest],
    names: Optional[Sequence[str]] = None,
    seed: Optional[int] = None,
    config_hash: str = "",
    arm: str = "",
) -> EvalReport:
    """Argmax accuracy (in percent) per target and per class. Parameters are never modified."""
    results = []
    C = params.num_classes
    for i, target in enumerate(targets):
        if target.num_classes != C or (params.class_names and tuple(params.class_names) != target.class_names):
            raise EvaluationError(f"target {target.name or i} has a different label space than the model")
        pred = predict(params, target.points)
        labels = target.labels
        correct = np.bincount(labels[pred == labels], minlength=C)
        total = np.bincount(labels, minlength=C)
        per_class = tuple(
            float(100.0 * c / t) if t else float("nan") for c, t in zip(correct.tolist(), total.tolist())
        )
        name = names[i] if names is not None else (target.name or f"target{i}")
        acc = 100.0 * float(correct.sum()) / float(total.sum())
        results.append(TargetResult(name, acc, per_class, tuple(correct.tolist()), tuple(total.tolist())))
    return EvalReport(tuple(results), tuple(targets[0].class_names) if targets else (), seed, config_hash, arm)
