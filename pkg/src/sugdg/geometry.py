"""Point-cloud values, geometric distances, rigid registration and augmentation."""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np
from scipy.spatial import cKDTree

from .errors import DomainError, LoadError

logger = logging.getLogger(__name__)

PC_HEADER = "SUGDG-PC v1"


@dataclass(frozen=True, eq=False)
class PointCloud:
    """An unordered set of 3D points with a class label.

    The coordinate array is copied and made read-only on construction so a
    cloud can be shared freely between threads and datasets.
    """

    points: np.ndarray
    label: int = 0
    source_tag: Optional[int] = None

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64, copy=True)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise DomainError(f"points must have shape (n, 3), got {pts.shape}")
        if pts.shape[0] < 1:
            raise DomainError("a point cloud needs at least one point")
        if not np.all(np.isfinite(pts)):
            raise DomainError("point coordinates must be finite")
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "label", int(self.label))

    @property
    def n(self) -> int:
        return self.points.shape[0]

    def with_points(self, points: np.ndarray) -> "PointCloud":
        return PointCloud(points, self.label, self.source_tag)

    def with_tag(self, source_tag: Optional[int]) -> "PointCloud":
        return PointCloud(self.points, self.label, source_tag)

    def __eq__(self, other):
        if not isinstance(other, PointCloud):
            return NotImplemented
        return (
            self.label == other.label
            and self.source_tag == other.source_tag
            and self.points.shape == other.points.shape
            and bool(np.array_equal(self.points, other.points))
        )

    __hash__ = None


@dataclass(frozen=True)
class RigidTransform:
    """Rotation followed by translation: ``p -> R @ p + t``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    def apply(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation

    def compose(self, first: "RigidTransform") -> "RigidTransform":
        """Transform equivalent to applying ``first`` and then ``self``."""
        return RigidTransform(
            self.rotation @ first.rotation,
            self.rotation @ first.translation + self.translation,
        )

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)


def _as_points(x: Union[PointCloud, np.ndarray]) -> np.ndarray:
    pts = x.points if isinstance(x, PointCloud) else np.asarray(x, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise DomainError(f"expected an (n, 3) point array, got shape {pts.shape}")
    if pts.shape[0] == 0:
        raise DomainError("point cloud is empty")
    return pts


def squared_distances(X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """All pairwise squared distances, evaluated as ``dx*dx + dy*dy + dz*dz``."""
    dx = X[:, None, 0] - Y[None, :, 0]
    dy = X[:, None, 1] - Y[None, :, 1]
    dz = X[:, None, 2] - Y[None, :, 2]
    return dx * dx + dy * dy + dz * dz


def _sequential_sum(values: np.ndarray) -> float:
    # left-to-right accumulation so results do not depend on numpy's pairwise summation
    return float(np.cumsum(values)[-1])


def chamfer_distance(X: Union[PointCloud, np.ndarray], Y: Union[PointCloud, np.ndarray]) -> float:
    """Symmetric Chamfer distance with squared norms and plain sums (no averaging)."""
    A = _as_points(X)
    B = _as_points(Y)
    d = squared_distances(A, B)
    return _sequential_sum(np.concatenate([d.min(axis=1), d.min(axis=0)]))


def pairwise_chamfer(clouds_a: np.ndarray, clouds_b: np.ndarray) -> np.ndarray:
    """Chamfer distance between every cloud of ``clouds_a`` (a, n, 3) and ``clouds_b`` (b, m, 3).

    Uses the Gram expansion of the squared distance, so values agree with
    :func:`chamfer_distance` to rounding error only.
    """
    A = np.asarray(clouds_a, dtype=np.float64)
    B = np.asarray(clouds_b, dtype=np.float64)
    nb, m = B.shape[0], B.shape[1]
    flat_b = B.reshape(-1, 3)
    sq_b = np.einsum("ij,ij->i", flat_b, flat_b)
    out = np.empty((A.shape[0], nb))
    for i, cloud in enumerate(A):
        sq_a = np.einsum("ij,ij->i", cloud, cloud)
        d = sq_a[:, None] + sq_b[None, :] - 2.0 * (cloud @ flat_b.T)
        np.maximum(d, 0.0, out=d)
        d = d.reshape(cloud.shape[0], nb, m)
        out[i] = d.min(axis=2).sum(axis=0) + d.min(axis=0).sum(axis=1)
    return out


# --------------------------------------------------------------------------- ICP


@dataclass(frozen=True)
class ICPResult:
    residual: float
    transform: RigidTransform
    degenerate: bool = False
    iterations: int = 0


def _rank(points: np.ndarray, rtol: float = 1e-9) -> int:
    centered = points - points.mean(axis=0)
    s = np.linalg.svd(centered, compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.sum(s > rtol * s[0]))


def _kabsch(P: np.ndarray, Q: np.ndarray) -> Optional[RigidTransform]:
    """Least-squares rotation+translation mapping P onto Q; None if rank-deficient."""
    cp = P.mean(axis=0)
    cq = Q.mean(axis=0)
    H = (P - cp).T @ (Q - cq)
    U, S, Vt = np.linalg.svd(H)
    if S[0] <= 0.0 or S[1] <= 1e-12 * S[0]:
        return None
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    D = np.diag([1.0, 1.0, d if d != 0 else 1.0])
    R = Vt.T @ D @ U.T
    return RigidTransform(R, cq - R @ cp)


def _bidirectional_mse(moved: np.ndarray, Y: np.ndarray, tree_y: cKDTree) -> float:
    d_xy, _ = tree_y.query(moved)
    d_yx, _ = cKDTree(moved).query(Y)
    return 0.5 * (float(np.mean(d_xy**2)) + float(np.mean(d_yx**2)))


def _pca_starts(X: np.ndarray, Y: np.ndarray) -> list:
    """Initial rotations aligning principal axes of X with those of Y (all proper sign choices)."""
    cx, cy = X.mean(axis=0), Y.mean(axis=0)
    _, ex = np.linalg.eigh(np.cov((X - cx).T))
    _, ey = np.linalg.eigh(np.cov((Y - cy).T))
    starts = []
    for signs in itertools.product((1.0, -1.0), repeat=3):
        R = ey @ np.diag(signs) @ ex.T
        if np.linalg.det(R) > 0:
            starts.append(RigidTransform(R, cy - R @ cx))
    return starts


def _run_icp(X, Y, tree_y, start: RigidTransform, max_iters: int, tol: float):
    transform = start
    moved = transform.apply(X)
    prev = np.inf
    it = 0
    for it in range(1, max_iters + 1):
        dist, idx = tree_y.query(moved)
        mse = float(np.mean(dist**2))
        if prev - mse < tol:
            break
        prev = mse
        step = _kabsch(moved, Y[idx])
        if step is None:
            break
        transform = step.compose(transform)
        moved = transform.apply(X)
    return transform, moved, it


def icp_score(
    X: Union[PointCloud, np.ndarray],
    Y: Union[PointCloud, np.ndarray],
    max_iters: int = 30,
    tol: float = 1e-6,
) -> ICPResult:
    """Register X onto Y and report the bidirectional mean-squared residual.

    Point-to-point ICP is started from the identity and from every proper
    principal-axis alignment; the start with the lowest final residual wins.
    The unregistered pair is itself a candidate, so the returned residual
    never exceeds the residual of doing nothing.
    """
    A = _as_points(X)
    B = _as_points(Y)
    tree_b = cKDTree(B)
    if A.shape[0] < 3 or B.shape[0] < 3 or _rank(A) < 2 or _rank(B) < 2:
        shift = RigidTransform(np.eye(3), B.mean(axis=0) - A.mean(axis=0))
        residual = _bidirectional_mse(shift.apply(A), B, tree_b)
        logger.debug("degenerate ICP input; using identity rotation")
        return ICPResult(residual, shift, degenerate=True)

    best = ICPResult(_bidirectional_mse(A, B, tree_b), RigidTransform.identity())
    for start in [RigidTransform.identity()] + _pca_starts(A, B):
        transform, moved, iters = _run_icp(A, B, tree_b, start, max_iters, tol)
        residual = _bidirectional_mse(moved, B, tree_b)
        if residual < best.residual:
            best = ICPResult(residual, transform, iterations=iters)
    return best


# ------------------------------------------------------------ normalize / augment


def normalize(X: PointCloud) -> PointCloud:
    """Center at the centroid and scale to unit maximum norm.

    Clouds that already satisfy both conditions to 1e-12 are returned as-is,
    which makes the operation exactly idempotent.
    """
    centroid = X.points.mean(axis=0)
    norms = np.sqrt(np.einsum("ij,ij->i", X.points, X.points))
    if np.all(np.abs(centroid) <= 1e-12) and abs(norms.max() - 1.0) <= 1e-12:
        return X
    pts = X.points - centroid
    scale = float(np.max(np.sqrt(np.einsum("ij,ij->i", pts, pts))))
    if scale > 0.0:
        pts = pts / scale
    return X.with_points(pts)


def rotation_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def augment(
    X: PointCloud,
    seed,
    jitter: float = 0.01,
    jitter_clip: float = 0.05,
    rotation: float = np.pi / 12,
) -> PointCloud:
    """Random rotation about the gravity (z) axis followed by clipped Gaussian jitter.

    ``rotation`` is the half-width of the uniform angle range in radians.
    """
    rng = np.random.default_rng(seed)
    pts = X.points
    if rotation > 0.0:
        pts = pts @ rotation_z(rng.uniform(-rotation, rotation)).T
    if jitter > 0.0:
        pts = pts + np.clip(rng.normal(0.0, jitter, pts.shape), -jitter_clip, jitter_clip)
    return X.with_points(pts)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniformly distributed proper rotation (QR of a Gaussian matrix)."""
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


# ----------------------------------------------------------------------- file IO


def format_float(x: float) -> str:
    return np.format_float_positional(float(x), unique=True, trim="-")


def write_cloud(cloud: Union[PointCloud, np.ndarray], path: Union[str, Path]) -> None:
    pts = _as_points(cloud)
    lines = [PC_HEADER]
    lines.extend(" ".join(format_float(v) for v in row) for row in pts)
    Path(path).write_text("\n".join(lines) + "\n")


def read_points(path: Union[str, Path]) -> np.ndarray:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise LoadError(f"cannot read point cloud {path}: {exc}") from exc
    lines = text.splitlines()
    if not lines or lines[0].strip() != PC_HEADER:
        raise LoadError(f"{path}: missing '{PC_HEADER}' header")
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 3:
            raise LoadError(f"{path}:{lineno}: expected 'x y z'")
        try:
            rows.append([float(p) for p in parts])
        except ValueError as exc:
            raise LoadError(f"{path}:{lineno}: {exc}") from exc
    if not rows:
        raise LoadError(f"{path}: point cloud has no points")
    pts = np.array(rows, dtype=np.float64)
    if not np.all(np.isfinite(pts)):
        raise LoadError(f"{path}: non-finite coordinate")
    return pts
