"""Parametric multi-domain synthetic point-cloud datasets.

Every class is a family of procedurally sampled shapes. A *profile*
describes how a domain corrupts clean samples: non-uniform density,
half-space occlusion, anisotropic scaling, rotation about z and jitter. The
source dataset mixes several profiles per class; each target dataset uses
one held-out profile.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np

from .dataset import DatasetManifest
from .errors import ConfigError, LoadError
from .geometry import PointCloud, normalize, rotation_z

SYNTH_HEADER = "SUGDG-SYNTH v1"


# ------------------------------------------------------------- surface samplers


def _box_surface(rng, count, size, center=(0.0, 0.0, 0.0)):
    sx, sy, sz = size
    areas = np.array([sy * sz, sy * sz, sx * sz, sx * sz, sx * sy, sx * sy])
    face = rng.choice(6, size=count, p=areas / areas.sum())
    uv = rng.uniform(-0.5, 0.5, size=(count, 2))
    pts = np.empty((count, 3))
    axis = face // 2
    sign = np.where(face % 2 == 0, -0.5, 0.5)
    for a in range(3):
        rows = axis == a
        others = [i for i in range(3) if i != a]
        pts[rows, a] = sign[rows] * size[a]
        pts[rows, others[0]] = uv[rows, 0] * size[others[0]]
        pts[rows, others[1]] = uv[rows, 1] * size[others[1]]
    return pts + np.asarray(center)


def _cylinder_surface(rng, count, radius, height, center=(0.0, 0.0, 0.0), caps=True):
    side = 2 * np.pi * radius * height
    cap = np.pi * radius**2 if caps else 0.0
    probs = np.array([side, cap, cap]) / (side + 2 * cap)
    part = rng.choice(3, size=count, p=probs)
    theta = rng.uniform(0, 2 * np.pi, count)
    r = np.where(part == 0, radius, radius * np.sqrt(rng.uniform(0, 1, count)))
    z = np.where(part == 0, rng.uniform(-height / 2, height / 2, count), np.where(part == 1, -height / 2, height / 2))
    pts = np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)
    return pts + np.asarray(center)


def _cone_surface(rng, count, radius, height, center=(0.0, 0.0, 0.0)):
    # inverse-CDF sampling of the slant height keeps the lateral density uniform
    t = np.sqrt(rng.uniform(0, 1, count))
    theta = rng.uniform(0, 2 * np.pi, count)
    pts = np.stack([t * radius * np.cos(theta), t * radius * np.sin(theta), height / 2 - t * height], axis=1)
    return pts + np.asarray(center)


def _sphere_surface(rng, count, radius, center=(0.0, 0.0, 0.0)):
    v = rng.normal(size=(count, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v * radius + np.asarray(center)


def _compose(rng, count, parts):
    """Sample ``count`` points from weighted part samplers ``(weight, fn)``."""
    w = np.array([p[0] for p in parts], dtype=float)
    alloc = rng.multinomial(count, w / w.sum())
    return np.concatenate([fn(rng, k) for (_, fn), k in zip(parts, alloc) if k > 0])


def shape_box(rng, count):
    size = rng.uniform([0.6, 0.6, 0.6], [1.4, 1.4, 1.4])
    return _box_surface(rng, count, size)


def shape_cylinder(rng, count):
    return _cylinder_surface(rng, count, rng.uniform(0.3, 0.5), rng.uniform(1.2, 2.0))


def shape_table(rng, count):
    w, d = rng.uniform(1.2, 1.8), rng.uniform(0.8, 1.2)
    h, th, leg = rng.uniform(0.7, 1.0), 0.06, rng.uniform(0.05, 0.09)
    parts = [(w * d * 2, lambda r, k: _box_surface(r, k, (w, d, th), (0, 0, h)))]
    for sx in (-1, 1):
        for sy in (-1, 1):
            c = (sx * (w / 2 - leg), sy * (d / 2 - leg), h / 2)
            parts.append((leg * h * 4, lambda r, k, c=c: _box_surface(r, k, (leg, leg, h), c)))
    return _compose(rng, count, parts)


def shape_lamp(rng, count):
    base_r, pole_h = rng.uniform(0.25, 0.4), rng.uniform(1.0, 1.6)
    shade_r, shade_h = rng.uniform(0.3, 0.5), rng.uniform(0.3, 0.5)
    parts = [
        (np.pi * base_r**2, lambda r, k: _cylinder_surface(r, k, base_r, 0.05, (0, 0, 0))),
        (2 * np.pi * 0.03 * pole_h, lambda r, k: _cylinder_surface(r, k, 0.03, pole_h, (0, 0, pole_h / 2), caps=False)),
        (np.pi * shade_r * shade_h * 1.5, lambda r, k: _cone_surface(r, k, shade_r, shade_h, (0, 0, pole_h))),
    ]
    return _compose(rng, count, parts)


def shape_chair(rng, count):
    w, h = rng.uniform(0.8, 1.1), rng.uniform(0.8, 1.0)
    back = rng.uniform(0.8, 1.2)
    leg = 0.07
    parts = [
        (w * w * 2, lambda r, k: _box_surface(r, k, (w, w, 0.06), (0, 0, h))),
        (w * back * 2, lambda r, k: _box_surface(r, k, (w, 0.06, back), (0, -w / 2, h + back / 2))),
    ]
    for sx in (-1, 1):
        for sy in (-1, 1):
            c = (sx * (w / 2 - leg), sy * (w / 2 - leg), h / 2)
            parts.append((leg * h * 4, lambda r, k, c=c: _box_surface(r, k, (leg, leg, h), c)))
    return _compose(rng, count, parts)


def shape_sphere(rng, count):
    return _sphere_surface(rng, count, rng.uniform(0.6, 1.0))


def shape_cone(rng, count):
    return _cone_surface(rng, count, rng.uniform(0.4, 0.7), rng.uniform(1.0, 1.8))


TEMPLATES: Dict[str, Callable] = {
    "box": shape_box,
    "cylinder": shape_cylinder,
    "table": shape_table,
    "lamp": shape_lamp,
    "chair": shape_chair,
    "sphere": shape_sphere,
    "cone": shape_cone,
}


# ---------------------------------------------------------------------- profiles


@dataclass(frozen=True)
class Profile:
    """How one domain perturbs clean shapes.

    density: strength of the exponential sampling bias along a random direction (0 = uniform).
    jitter: standard deviation of Gaussian point noise, relative to unit size.
    occlusion: fraction of surface points removed from one half-space.
    anisotropy: per-axis scale factors drawn from ``[1 - a, 1 + a]``.
    rotation: half-width (radians) of the uniform rotation about z.
    """

    name: str
    density: float = 0.0
    jitter: float = 0.0
    occlusion: float = 0.0
    anisotropy: float = 0.0
    rotation: float = 0.0

    def __post_init__(self):
        if self.density < 0 or self.jitter < 0 or self.anisotropy < 0 or self.rotation < 0:
            raise ConfigError(f"profile {self.name!r}: parameters must be non-negative")
        if not 0.0 <= self.occlusion < 1.0:
            raise ConfigError(f"profile {self.name!r}: occlusion must lie in [0, 1)")
        if self.anisotropy >= 1.0:
            raise ConfigError(f"profile {self.name!r}: anisotropy must be < 1")


@dataclass(frozen=True)
class TargetSpec:
    profile: Profile
    samples_per_class: Optional[List[int]] = None  # None: same counts as the source


@dataclass(frozen=True)
class SynthSpec:
    classes: List[str]
    samples_per_class: List[int]
    source_profiles: List[Profile]
    targets: List[TargetSpec]
    n_points: int = 256
    seed: int = 0
    # per class, relative frequency of each source profile; None alternates profiles evenly
    source_mix: Optional[List[List[float]]] = None

    def __post_init__(self):
        C = len(self.classes)
        if C < 3:
            raise ConfigError("a synthetic spec needs at least 3 classes")
        for c in self.classes:
            if c not in TEMPLATES:
                raise ConfigError(f"unknown class template {c!r}; choose from {sorted(TEMPLATES)}")
        if len(self.samples_per_class) != C:
            raise ConfigError("samples_per_class must list one count per class")
        if any(int(m) <= 0 for m in self.samples_per_class):
            raise ConfigError("every class needs at least one sample")
        if not self.source_profiles:
            raise ConfigError("at least one source profile is required")
        if len(self.targets) < 2:
            raise ConfigError("at least two target profiles are required")
        for t in self.targets:
            if t.samples_per_class is not None:
                if len(t.samples_per_class) != C or any(int(m) <= 0 for m in t.samples_per_class):
                    raise ConfigError(f"target {t.profile.name!r}: bad samples_per_class")
        if self.n_points < 8:
            raise ConfigError("n_points must be at least 8")
        if self.source_mix is not None:
            P = len(self.source_profiles)
            if len(self.source_mix) != C or any(len(row) != P for row in self.source_mix):
                raise ConfigError(f"source_mix must be a {C} x {P} table (classes x source profiles)")
            if any(w < 0 for row in self.source_mix for w in row) or any(sum(row) <= 0 for row in self.source_mix):
                raise ConfigError("source_mix rows must be non-negative with a positive sum")

    # serialisation ----------------------------------------------------------
    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        try:
            return cls(
                classes=list(d["classes"]),
                samples_per_class=[int(m) for m in d["samples_per_class"]],
                source_profiles=[Profile(**p) for p in d["source_profiles"]],
                targets=[
                    TargetSpec(Profile(**t["profile"]), t.get("samples_per_class"))
                    for t in d["targets"]
                ],
                n_points=int(d.get("n_points", 256)),
                seed=int(d.get("seed", 0)),
                source_mix=d.get("source_mix"),
            )
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed synthetic spec: {exc}") from exc

    def with_seed(self, seed: int) -> "SynthSpec":
        d = self.to_dict()
        d["seed"] = int(seed)
        return SynthSpec.from_dict(d)


def save_synth_spec(spec: SynthSpec, path: Union[str, Path]) -> None:
    Path(path).write_text(SYNTH_HEADER + "\n" + json.dumps(spec.to_dict(), indent=1) + "\n")


def load_synth_spec(path: Union[str, Path]) -> SynthSpec:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise LoadError(f"cannot read synthetic spec {path}: {exc}") from exc
    header, _, body = text.partition("\n")
    if header.strip() != SYNTH_HEADER:
        raise LoadError(f"{path}: missing '{SYNTH_HEADER}' header")
    try:
        doc = json.loads(body)
    except ValueError as exc:
        raise LoadError(f"{path}: {exc}") from exc
    return SynthSpec.from_dict(doc)


def bundled_spec(seed: int = 0) -> SynthSpec:
    """The 4-class, 2-target benchmark used by the acceptance suite.

    The source mixes clean CAD-like shapes with a mildly scanned mode; the
    two targets are stronger, unseen corruptions of the scan kind.
    """
    return SynthSpec(
        classes=["box", "cylinder", "table", "lamp"],
        samples_per_class=[40, 40, 40, 40],
        source_profiles=[
            Profile("cad"),
            Profile("scan", density=1.0, jitter=0.01, occlusion=0.2, rotation=0.3),
        ],
        targets=[
            TargetSpec(Profile("occluded", density=1.5, jitter=0.015, occlusion=0.5, rotation=0.6)),
            TargetSpec(Profile("noisy", density=2.0, jitter=0.04, occlusion=0.3, anisotropy=0.3, rotation=0.6)),
        ],
        n_points=128,
        seed=seed,
    )


# -------------------------------------------------------------------- generation


def _random_direction(rng) -> np.ndarray:
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def perturb(rng: np.random.Generator, template: Callable, profile: Profile, n_points: int) -> np.ndarray:
    """Draw one corrupted, normalised instance of ``template``."""
    pool = template(rng, 6 * n_points)
    pool = pool - pool.mean(axis=0)
    pool /= np.max(np.linalg.norm(pool, axis=1))
    keep = np.ones(len(pool), dtype=bool)
    if profile.occlusion > 0:
        proj = pool @ _random_direction(rng)
        cut = np.quantile(proj, 1.0 - profile.occlusion)
        keep &= proj <= cut
    candidates = pool[keep]
    if profile.density > 0:
        proj = candidates @ _random_direction(rng)
        w = np.exp(profile.density * proj)
    else:
        w = np.ones(len(candidates))
    replace = len(candidates) < n_points
    idx = rng.choice(len(candidates), size=n_points, replace=replace, p=w / w.sum())
    pts = candidates[idx]
    if profile.anisotropy > 0:
        pts = pts * rng.uniform(1 - profile.anisotropy, 1 + profile.anisotropy, size=3)
    if profile.rotation > 0:
        pts = pts @ rotation_z(rng.uniform(-profile.rotation, profile.rotation)).T
    if profile.jitter > 0:
        pts = pts + rng.normal(0.0, profile.jitter, size=pts.shape)
    return pts


def profile_plan(count: int, weights: Sequence[float]) -> np.ndarray:
    """Profile index for each of ``count`` samples, proportional to ``weights``.

    Counts use largest-remainder rounding; profiles are interleaved so any
    prefix of the class keeps roughly the requested proportions.
    """
    w = np.asarray(weights, dtype=np.float64)
    exact = count * w / w.sum()
    n = np.floor(exact).astype(int)
    for k in np.argsort(-(exact - n), kind="stable")[: count - n.sum()]:
        n[k] += 1
    # interleave by the fractional position of each sample within its profile
    keys = np.concatenate([(np.arange(c) + 0.5) / c for c in n if c > 0])
    idx = np.concatenate([np.full(c, k) for k, c in enumerate(n) if c > 0])
    return idx[np.argsort(keys, kind="stable")]


def _generate_domain(rng, spec: SynthSpec, profiles: List[Profile], counts, name: str, mix=None) -> DatasetManifest:
    clouds = []
    for label, cls in enumerate(spec.classes):
        template = TEMPLATES[cls]
        weights = mix[label] if mix is not None else np.ones(len(profiles))
        for p in profile_plan(int(counts[label]), weights):
            pts = perturb(rng, template, profiles[p], spec.n_points)
            clouds.append(normalize(PointCloud(pts, label)))
    return DatasetManifest(spec.classes, clouds, name)


def generate_synthetic(spec: SynthSpec) -> tuple:
    """Return ``(source, [target_1, ..., target_M])`` manifests.

    Output is a pure function of the spec (including its seed).
    """
    root = np.random.SeedSequence(spec.seed)
    streams = root.spawn(1 + len(spec.targets))
    source = _generate_domain(
        np.random.default_rng(streams[0]), spec, spec.source_profiles, spec.samples_per_class, "source",
        spec.source_mix,
    )
    targets = []
    for t, stream in zip(spec.targets, streams[1:]):
        counts = t.samples_per_class if t.samples_per_class is not None else spec.samples_per_class
        targets.append(_generate_domain(np.random.default_rng(stream), spec, [t.profile], counts, t.profile.name))
    return source, targets
