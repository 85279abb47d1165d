"""Dataset manifests, class counting and sub-domain aware batch sampling."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Iterator, Optional, Sequence, Union

import numpy as np

from .errors import ConfigError, LoadError
from .geometry import PointCloud, normalize, read_points, write_cloud

logger = logging.getLogger(__name__)

MANIFEST_HEADER = "SUGDG-MANIFEST v1"
SPLIT_HEADER = "SUGDG-SPLIT v1"


@dataclass(frozen=True, eq=False)
class DatasetManifest:
    """An indexed, immutable collection of labelled point clouds.

    A cloud's ``source_tag`` carries its sub-domain index once the dataset
    has been split.
    """

    class_names: tuple
    clouds: tuple
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "class_names", tuple(str(c) for c in self.class_names))
        object.__setattr__(self, "clouds", tuple(self.clouds))
        C = len(self.class_names)
        for i, cloud in enumerate(self.clouds):
            if not 0 <= cloud.label < C:
                raise LoadError(f"sample {i}: label {cloud.label} outside [0, {C})")

    def __len__(self) -> int:
        return len(self.clouds)

    def __eq__(self, other):
        if not isinstance(other, DatasetManifest):
            return NotImplemented
        return self.class_names == other.class_names and self.clouds == other.clouds

    __hash__ = None

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @cached_property
    def labels(self) -> np.ndarray:
        return np.array([c.label for c in self.clouds], dtype=np.int64)

    @cached_property
    def subdomains(self) -> Optional[np.ndarray]:
        tags = [c.source_tag for c in self.clouds]
        if any(t is None for t in tags):
            return None
        return np.array(tags, dtype=np.int64)

    @cached_property
    def points(self) -> np.ndarray:
        """All clouds stacked into an (N, n, 3) array; requires a common point count."""
        counts = {c.n for c in self.clouds}
        if len(counts) != 1:
            raise ConfigError(f"clouds have differing point counts {sorted(counts)}")
        return np.stack([c.points for c in self.clouds])

    @property
    def num_subdomains(self) -> int:
        sub = self.subdomains
        return 0 if sub is None else int(sub.max()) + 1

    def with_subdomains(self, assignment: Sequence[int]) -> "DatasetManifest":
        assignment = list(assignment)
        if len(assignment) != len(self.clouds):
            raise ConfigError("assignment length does not match the number of samples")
        clouds = [c.with_tag(int(a)) for c, a in zip(self.clouds, assignment)]
        return DatasetManifest(self.class_names, clouds, self.name)

    def subset(self, indices: Sequence[int]) -> "DatasetManifest":
        return DatasetManifest(self.class_names, [self.clouds[i] for i in indices], self.name)

    def check_subdomains(self) -> int:
        """Validate sub-domain tags and return K."""
        sub = self.subdomains
        if sub is None:
            raise ConfigError("manifest has samples without a sub-domain")
        K = int(sub.max()) + 1
        present = set(sub.tolist())
        if present != set(range(K)):
            raise ConfigError(f"sub-domain indices {sorted(present)} are not contiguous from 0")
        for k in range(K):
            missing = set(range(self.num_classes)) - set(self.labels[sub == k].tolist())
            if missing:
                names = [self.class_names[c] for c in sorted(missing)]
                raise ConfigError(f"sub-domain {k} lacks classes {names}")
        return K


def class_counts(manifest: DatasetManifest) -> np.ndarray:
    return np.bincount(manifest.labels, minlength=manifest.num_classes).astype(np.int64)


# ---------------------------------------------------------------------- file IO


def save_manifest(manifest: DatasetManifest, path: Union[str, Path], cloud_dir: str = "clouds") -> None:
    """Write the manifest and one point-cloud file per sample next to it."""
    path = Path(path)
    (path.parent / cloud_dir).mkdir(parents=True, exist_ok=True)
    width = max(4, len(str(len(manifest))))
    samples = []
    for i, cloud in enumerate(manifest.clouds):
        rel = f"{cloud_dir}/{i:0{width}d}.txt"
        write_cloud(cloud, path.parent / rel)
        entry = {"path": rel, "label": cloud.label}
        if cloud.source_tag is not None:
            entry["subdomain"] = cloud.source_tag
        samples.append(entry)
    body = {"name": manifest.name, "class_names": list(manifest.class_names), "samples": samples}
    path.write_text(MANIFEST_HEADER + "\n" + json.dumps(body, indent=1) + "\n")


def load_manifest(path: Union[str, Path]) -> DatasetManifest:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise LoadError(f"cannot read manifest {path}: {exc}") from exc
    header, _, body = text.partition("\n")
    if header.strip() != MANIFEST_HEADER:
        raise LoadError(f"{path}: missing '{MANIFEST_HEADER}' header")
    try:
        doc = json.loads(body)
        class_names = [str(c) for c in doc["class_names"]]
        entries = doc["samples"]
    except (ValueError, KeyError, TypeError) as exc:
        raise LoadError(f"{path}: malformed manifest body: {exc}") from exc
    C = len(class_names)
    clouds = []
    for i, entry in enumerate(entries):
        try:
            label = int(entry["label"])
            rel = entry["path"]
        except (KeyError, TypeError, ValueError) as exc:
            raise LoadError(f"{path}: sample {i}: malformed entry") from exc
        if not 0 <= label < C:
            raise LoadError(f"{path}: sample {i}: label {label} outside [0, {C})")
        sub = entry.get("subdomain")
        try:
            pts = read_points(path.parent / rel)
        except LoadError as exc:
            raise LoadError(f"{path}: sample {i}: {exc}") from exc
        clouds.append(normalize(PointCloud(pts, label, None if sub is None else int(sub))))
    return DatasetManifest(class_names, clouds, doc.get("name", ""))


def write_split(assignment: Sequence[int], path: Union[str, Path]) -> None:
    lines = [SPLIT_HEADER] + [f"{i} {int(k)}" for i, k in enumerate(assignment)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_split(path: Union[str, Path], num_samples: Optional[int] = None) -> np.ndarray:
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise LoadError(f"cannot read split file {path}: {exc}") from exc
    if not lines or lines[0].strip() != SPLIT_HEADER:
        raise LoadError(f"{path}: missing '{SPLIT_HEADER}' header")
    pairs = {}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            idx, sub = (int(v) for v in line.split())
        except ValueError as exc:
            raise LoadError(f"{path}:{lineno}: expected 'sample_index subdomain_index'") from exc
        if idx in pairs:
            raise LoadError(f"{path}:{lineno}: sample {idx} assigned twice")
        pairs[idx] = sub
    n = num_samples if num_samples is not None else len(pairs)
    if set(pairs) != set(range(n)):
        raise LoadError(f"{path}: split does not cover samples 0..{n - 1} exactly once")
    return np.array([pairs[i] for i in range(n)], dtype=np.int64)


# --------------------------------------------------------------------- batching


@dataclass(frozen=True)
class Batch:
    """A mini-batch; rows are grouped by sub-domain in ascending order."""

    points: np.ndarray
    labels: np.ndarray
    subdomains: np.ndarray
    indices: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    def part(self, subdomain: int) -> "Batch":
        mask = self.subdomains == subdomain
        return Batch(self.points[mask], self.labels[mask], self.subdomains[mask], self.indices[mask])


def _make_batch(manifest: DatasetManifest, idx: np.ndarray, subdomains: np.ndarray) -> Batch:
    return Batch(manifest.points[idx], manifest.labels[idx], subdomains, idx)


class _CyclingLoader:
    """Endless stream of a sub-domain's samples, reshuffled after each full pass."""

    def __init__(self, indices: np.ndarray, rng: np.random.Generator):
        self.indices = indices
        self.rng = rng
        self.buffer = np.empty(0, dtype=np.int64)

    def take(self, count: int) -> np.ndarray:
        while self.buffer.size < count:
            self.buffer = np.concatenate([self.buffer, self.rng.permutation(self.indices)])
        out, self.buffer = self.buffer[:count], self.buffer[count:]
        return out


def make_batches(manifest: DatasetManifest, batch_size: int, epoch_seed) -> Iterator[Batch]:
    """One epoch of sub-domain balanced batches.

    Each batch holds ``batch_size // K`` samples from every sub-domain. The
    epoch length is set by the largest sub-domain, whose partial tail is
    dropped; smaller sub-domains reshuffle and restart as needed.
    """
    K = manifest.check_subdomains()
    if K < 2:
        raise ConfigError("sub-domain batching needs K >= 2")
    if batch_size % K:
        raise ConfigError(f"batch size {batch_size} is not divisible by K={K}")
    per = batch_size // K
    sub = manifest.subdomains
    members = [np.flatnonzero(sub == k) for k in range(K)]
    root = epoch_seed if isinstance(epoch_seed, np.random.SeedSequence) else np.random.SeedSequence(epoch_seed)
    rngs = [np.random.default_rng(s) for s in root.spawn(K)]
    longest = max(len(m) for m in members)
    n_batches = longest // per
    if longest % per:
        logger.info("dropping partial tail of %d samples per epoch", longest % per)
    if n_batches == 0:
        logger.warning("every sub-domain is smaller than %d; epoch is empty", per)
    loaders = []
    for m, rng in zip(members, rngs):
        if len(m) == longest:
            loaders.append(rng.permutation(m)[: n_batches * per])
        else:
            loaders.append(_CyclingLoader(m, rng))
    tags = np.repeat(np.arange(K), per)
    for b in range(n_batches):
        parts = []
        for loader in loaders:
            if isinstance(loader, _CyclingLoader):
                parts.append(loader.take(per))
            else:
                parts.append(loader[b * per : (b + 1) * per])
        yield _make_batch(manifest, np.concatenate(parts), tags)


def plain_batches(manifest: DatasetManifest, batch_size: int, epoch_seed, drop_last: bool = True) -> Iterator[Batch]:
    """Ordinary shuffled batches ignoring sub-domains."""
    rng = np.random.default_rng(epoch_seed)
    order = rng.permutation(len(manifest))
    stop = len(order) - len(order) % batch_size if drop_last else len(order)
    if stop == 0:
        stop = len(order)
    sub = manifest.subdomains
    for start in range(0, stop, batch_size):
        idx = order[start : start + batch_size]
        tags = sub[idx] if sub is not None else np.full(len(idx), -1)
        yield _make_batch(manifest, idx, tags)
