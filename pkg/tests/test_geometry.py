import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sugdg.errors import DomainError, LoadError
from sugdg.geometry import (
    PointCloud,
    RigidTransform,
    augment,
    chamfer_distance,
    icp_score,
    normalize,
    pairwise_chamfer,
    random_rotation,
    read_points,
    write_cloud,
)


def brute_chamfer(X, Y):
    """Double-loop nearest neighbours, summed left to right."""
    total = 0.0
    for x in X:
        best = np.inf
        for y in Y:
            d = (x[0] - y[0]) * (x[0] - y[0]) + (x[1] - y[1]) * (x[1] - y[1]) + (x[2] - y[2]) * (x[2] - y[2])
            best = min(best, d)
        total += best
    for y in Y:
        best = np.inf
        for x in X:
            d = (x[0] - y[0]) * (x[0] - y[0]) + (x[1] - y[1]) * (x[1] - y[1]) + (x[2] - y[2]) * (x[2] - y[2])
            best = min(best, d)
        total += best
    return total


def random_rigid(rng):
    return RigidTransform(random_rotation(rng), rng.normal(size=3))


# ------------------------------------------------------------------- values


def test_point_cloud_rejects_bad_input():
    with pytest.raises(DomainError):
        PointCloud(np.zeros((0, 3)))
    with pytest.raises(DomainError):
        PointCloud(np.zeros((4, 2)))
    with pytest.raises(DomainError):
        PointCloud(np.array([[0.0, np.nan, 0.0]]))


def test_point_cloud_is_immutable_copy():
    pts = np.ones((3, 3))
    cloud = PointCloud(pts, 2)
    pts[0, 0] = 5.0
    assert cloud.points[0, 0] == 1.0
    with pytest.raises(ValueError):
        cloud.points[0, 0] = 3.0


def test_rigid_transform_compose_and_inverse():
    rng = np.random.default_rng(0)
    a, b = random_rigid(rng), random_rigid(rng)
    X = rng.normal(size=(10, 3))
    np.testing.assert_allclose(b.compose(a).apply(X), b.apply(a.apply(X)), atol=1e-12)
    np.testing.assert_allclose(a.inverse().apply(a.apply(X)), X, atol=1e-12)


def test_random_rotation_is_proper():
    rng = np.random.default_rng(3)
    for _ in range(10):
        R = random_rotation(rng)
        np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-9)
        assert abs(np.linalg.det(R) - 1.0) < 1e-9


# ------------------------------------------------------------------- chamfer


def test_chamfer_hand_value():
    assert chamfer_distance(np.zeros((1, 3)), np.array([[1.0, 0.0, 0.0]])) == 2.0


def test_chamfer_identity_is_zero():
    X = np.random.default_rng(1).normal(size=(20, 3))
    assert chamfer_distance(X, X) == 0.0


def test_chamfer_matches_brute_force_exactly():
    rng = np.random.default_rng(2)
    for _ in range(5):
        X = rng.normal(size=(30, 3))
        Y = rng.normal(size=(25, 3))
        assert chamfer_distance(X, Y) == brute_chamfer(X, Y)


def test_chamfer_empty_cloud():
    with pytest.raises(DomainError):
        chamfer_distance(np.zeros((0, 3)), np.zeros((2, 3)))


@settings(max_examples=40, deadline=None)
@given(
    arrays(np.float64, st.tuples(st.integers(1, 12), st.just(3)), elements=st.floats(-10, 10)),
    arrays(np.float64, st.tuples(st.integers(1, 12), st.just(3)), elements=st.floats(-10, 10)),
    st.randoms(use_true_random=False),
)
def test_chamfer_symmetric_and_permutation_invariant(X, Y, rnd):
    d = chamfer_distance(X, Y)
    assert d >= 0.0
    assert d == pytest.approx(chamfer_distance(Y, X), rel=1e-12, abs=1e-12)
    px = list(range(len(X)))
    rnd.shuffle(px)
    assert d == pytest.approx(chamfer_distance(X[px], Y), rel=1e-12, abs=1e-12)


def test_pairwise_chamfer_matches_single_calls():
    rng = np.random.default_rng(4)
    A = rng.normal(size=(3, 16, 3))
    B = rng.normal(size=(4, 16, 3))
    M = pairwise_chamfer(A, B)
    for i in range(3):
        for j in range(4):
            assert M[i, j] == pytest.approx(chamfer_distance(A[i], B[j]), rel=1e-9)


# ----------------------------------------------------------------------- ICP


def test_icp_identity():
    X = np.random.default_rng(5).normal(size=(40, 3))
    result = icp_score(X, X)
    assert result.residual < 1e-9
    np.testing.assert_allclose(result.transform.rotation, np.eye(3), atol=1e-6)


@pytest.mark.parametrize("seed", range(5))
def test_icp_recovers_rigid_copy(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(50, 3)) * np.array([1.0, 0.6, 0.3])
    T = random_rigid(rng)
    result = icp_score(X, T.apply(X))
    assert result.residual < 1e-6
    round_trip = T.inverse().compose(result.transform)
    np.testing.assert_allclose(round_trip.rotation, np.eye(3), atol=1e-4)
    np.testing.assert_allclose(round_trip.translation, np.zeros(3), atol=1e-4)


def test_icp_never_worse_than_unregistered():
    rng = np.random.default_rng(9)
    X = rng.normal(size=(60, 3))
    Y = X + rng.normal(0.0, 0.01, X.shape)
    unaligned = 0.5 * chamfer_distance(X, Y) / len(X)  # same bidirectional mean for equal sizes
    assert icp_score(X, Y).residual <= unaligned + 1e-15


def test_icp_degenerate_input_is_flagged():
    line = np.outer(np.linspace(0, 1, 10), [1.0, 2.0, 3.0])
    result = icp_score(line, line + 1.0)
    assert result.degenerate
    np.testing.assert_allclose(result.transform.rotation, np.eye(3))
    assert result.residual < 1e-20


# ----------------------------------------------------------------- normalize


def test_normalize_unit_cube():
    corners = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], dtype=float)
    out = normalize(PointCloud(corners)).points
    np.testing.assert_allclose(out.mean(axis=0), 0.0, atol=1e-9)
    assert np.max(np.linalg.norm(out, axis=1)) == pytest.approx(1.0, abs=1e-9)


def test_normalize_idempotent_and_translation_invariant():
    X = PointCloud(np.random.default_rng(6).normal(size=(30, 3)))
    once = normalize(X)
    assert np.array_equal(normalize(once).points, once.points)
    shifted = normalize(PointCloud(X.points + 5.0))
    np.testing.assert_allclose(shifted.points, once.points, atol=1e-12)


def test_normalize_identical_points_only_centres():
    out = normalize(PointCloud(np.full((4, 3), 2.0)))
    np.testing.assert_array_equal(out.points, np.zeros((4, 3)))


# ------------------------------------------------------------------- augment


def test_augment_noop_and_determinism():
    X = PointCloud(np.random.default_rng(7).normal(size=(20, 3)), 1)
    assert augment(X, 3, jitter=0.0, rotation=0.0) == X
    assert augment(X, 11) == augment(X, 11)
    assert augment(X, 11).label == 1


def test_rotation_only_augment_is_rigid():
    X = normalize(PointCloud(np.random.default_rng(8).normal(size=(40, 3)) * [1.0, 0.5, 0.2]))
    rotated = normalize(augment(X, 2, jitter=0.0, rotation=1.0))
    assert chamfer_distance(rotated, X) > 0.0
    assert icp_score(rotated, X).residual < 1e-6


# ----------------------------------------------------------------------- IO


def test_cloud_file_round_trip(tmp_path):
    X = np.random.default_rng(10).normal(size=(15, 3))
    write_cloud(X, tmp_path / "c.txt")
    assert (tmp_path / "c.txt").read_text().startswith("SUGDG-PC v1\n")
    np.testing.assert_array_equal(read_points(tmp_path / "c.txt"), X)


def test_cloud_file_errors(tmp_path):
    (tmp_path / "bad.txt").write_text("0 0 0\n")
    with pytest.raises(LoadError):
        read_points(tmp_path / "bad.txt")
    (tmp_path / "short.txt").write_text("SUGDG-PC v1\n0 0\n")
    with pytest.raises(LoadError):
        read_points(tmp_path / "short.txt")
