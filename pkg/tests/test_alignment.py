import math

import numpy as np
import pytest

from sugdg.alignment import (
    KernelSpec,
    SDAWeights,
    alignment_terms,
    class_weights,
    inverse_distance_weights,
    js_distance,
    js_matrix,
    mmd2,
    sda_weights,
    soft_mmd_features,
    strip_soft_features,
    total_loss,
    weighted_ce,
)
from sugdg.errors import DomainError, NumericError
from sugdg.geometry import chamfer_distance
from sugdg.net import forward, init_params

KERNEL = KernelSpec((0.5, 1.0, 2.0))


def rbf(x, y, sigmas):
    d = sum((a - b) ** 2 for a, b in zip(x, y))
    return sum(math.exp(-d / (2 * s * s)) for s in sigmas) / len(sigmas)


def mmd_oracle(A, B, sigmas, W=None, cross_only=False):
    """Explicit double loops over the three kernel means."""
    ns, nt = len(A), len(B)
    if W is None:
        W = np.ones((ns, nt))
    W = W / W.mean()
    u = [sum(W[i]) / nt for i in range(ns)]
    v = [sum(W[:, j]) / ns for j in range(nt)]
    if cross_only:
        u, v = [1.0] * ns, [1.0] * nt
    ss = sum(u[i] * u[k] * rbf(A[i], A[k], sigmas) for i in range(ns) for k in range(ns)) / ns**2
    tt = sum(v[j] * v[k] * rbf(B[j], B[k], sigmas) for j in range(nt) for k in range(nt)) / nt**2
    if cross_only:
        st = sum(W[i, j] * rbf(A[i], B[j], sigmas) for i in range(ns) for j in range(nt)) / (ns * nt)
    else:
        st = sum(u[i] * v[j] * rbf(A[i], B[j], sigmas) for i in range(ns) for j in range(nt)) / (ns * nt)
    return ss + tt - 2 * st


def fd_grad(f, X, h=1e-6):
    g = np.zeros_like(X)
    for idx in np.ndindex(X.shape):
        Xp, Xm = X.copy(), X.copy()
        Xp[idx] += h
        Xm[idx] -= h
        g[idx] = (f(Xp) - f(Xm)) / (2 * h)
    return g


# ------------------------------------------------------------- class weights


def test_class_weights_examples():
    np.testing.assert_allclose(class_weights([50, 50], 0.7).alpha, [0.5, 0.5])
    np.testing.assert_allclose(class_weights([3, 9, 27], 0.0).alpha, [1 / 3] * 3)
    np.testing.assert_allclose(class_weights([1, 4], 1.0).alpha, [0.8, 0.2])


def test_class_weights_properties():
    m = np.array([5, 40, 12, 7])
    a = class_weights(m, 0.2).alpha
    assert a.sum() == pytest.approx(1.0)
    assert np.argmax(a) == np.argmin(m)
    assert np.all(np.diff(a[np.argsort(m)]) < 0)


def test_class_weights_empty_class_gets_zero(caplog):
    a = class_weights([0, 2, 2], 1.0).alpha
    np.testing.assert_allclose(a, [0.0, 0.5, 0.5])
    assert "no samples" in caplog.text


# -------------------------------------------------------------- weighted CE


def test_weighted_ce_uniform_softmax():
    C = 10
    alpha = np.full(C, 1 / C)
    loss, _ = weighted_ce(np.zeros((4, C)), np.arange(4), alpha)
    assert loss == pytest.approx(math.log(10) / 10, abs=1e-15)


def test_weighted_ce_confident_is_zero():
    logits = np.array([[100.0, -100.0], [-100.0, 100.0]])
    loss, grad = weighted_ce(logits, np.array([0, 1]), np.array([0.5, 0.5]))
    assert loss == pytest.approx(0.0, abs=1e-30)
    assert np.abs(grad).max() < 1e-30


def test_weighted_ce_scaling():
    rng = np.random.default_rng(0)
    logits, labels = rng.normal(size=(6, 3)), rng.integers(0, 3, 6)
    alpha = np.array([0.2, 0.3, 0.5])
    l1, g1 = weighted_ce(logits, labels, alpha)
    l2, g2 = weighted_ce(logits, labels, 2 * alpha)
    assert l2 == pytest.approx(2 * l1, rel=1e-14)
    cos = np.sum(g1 * g2) / (np.linalg.norm(g1) * np.linalg.norm(g2))
    assert cos == pytest.approx(1.0, abs=1e-12)


def test_weighted_ce_gradient():
    rng = np.random.default_rng(1)
    logits, labels = rng.normal(size=(5, 4)), rng.integers(0, 4, 5)
    alpha = class_weights([3, 5, 7, 9], 0.5).alpha
    _, g = weighted_ce(logits, labels, alpha)
    np.testing.assert_allclose(g, fd_grad(lambda z: weighted_ce(z, labels, alpha)[0], logits), atol=1e-9)


def test_weighted_ce_clamps_underflow(caplog):
    loss, grad = weighted_ce(np.array([[0.0, 1000.0]]), np.array([0]), np.array([1.0, 1.0]))
    assert loss == pytest.approx(-math.log(1e-12))
    assert np.all(grad == 0.0)
    assert "underflow" in caplog.text


# ---------------------------------------------------------------------- MMD


def test_mmd_identity_is_zero():
    A = np.random.default_rng(2).normal(size=(10, 4))
    assert abs(mmd2(A, A, KERNEL)[0]) < 1e-12


def test_mmd_single_point_hand_value():
    x, y, s = np.array([[0.0, 1.0]]), np.array([[1.0, 2.0]]), 0.7
    value, _, _ = mmd2(x, y, KernelSpec((s,)), allow_single=True)
    assert value == pytest.approx(2 - 2 * math.exp(-2.0 / (2 * s * s)), abs=1e-15)


def test_mmd_needs_two_samples():
    with pytest.raises(DomainError):
        mmd2(np.zeros((1, 2)), np.ones((3, 2)), KERNEL)


@pytest.mark.parametrize("weighted", [False, True])
def test_mmd_matches_oracle(weighted):
    rng = np.random.default_rng(3)
    A, B = rng.normal(size=(20, 8)), rng.normal(size=(20, 8)) + 0.3
    W = rng.uniform(0.1, 5.0, size=(20, 20)) if weighted else None
    assert mmd2(A, B, KERNEL, W)[0] == pytest.approx(mmd_oracle(A, B, KERNEL.sigmas, W), abs=1e-10)


def test_mmd_cross_only_matches_oracle():
    rng = np.random.default_rng(4)
    A, B = rng.normal(size=(7, 3)), rng.normal(size=(9, 3))
    W = rng.uniform(0.1, 5.0, size=(7, 9))
    value = mmd2(A, B, KERNEL, W, cross_only=True)[0]
    assert value == pytest.approx(mmd_oracle(A, B, KERNEL.sigmas, W, cross_only=True), abs=1e-10)


def test_weighted_mmd_nonnegative_and_identity():
    rng = np.random.default_rng(5)
    for _ in range(20):
        A, B = rng.normal(size=(6, 3)), rng.normal(size=(8, 3))
        W = rng.uniform(0.01, 100.0, size=(6, 8))
        assert mmd2(A, B, KERNEL, W)[0] >= -1e-12
    W = inverse_distance_weights(np.abs(A[:, None, 0] - A[None, :, 0]), 1e-3)
    assert abs(mmd2(A, A, KERNEL, W)[0]) < 1e-12


def test_uniform_weights_reduce_to_unweighted():
    rng = np.random.default_rng(6)
    A, B = rng.normal(size=(5, 3)), rng.normal(size=(4, 3))
    plain = mmd2(A, B, KERNEL)
    weighted = mmd2(A, B, KERNEL, np.full((5, 4), 3.0))
    for a, b in zip(plain, weighted):
        np.testing.assert_allclose(a, b, rtol=1e-14, atol=1e-16)


def test_mmd_permutation_invariance():
    rng = np.random.default_rng(7)
    A, B = rng.normal(size=(6, 3)), rng.normal(size=(5, 3))
    W = rng.uniform(0.5, 2.0, size=(6, 5))
    pa, pb = rng.permutation(6), rng.permutation(5)
    v1 = mmd2(A, B, KERNEL, W)[0]
    v2 = mmd2(A[pa], B[pb], KERNEL, W[np.ix_(pa, pb)])[0]
    assert v1 == pytest.approx(v2, abs=1e-14)


@pytest.mark.parametrize("cross_only", [False, True])
def test_mmd_gradients(cross_only):
    rng = np.random.default_rng(8)
    A, B = rng.normal(size=(5, 3)), rng.normal(size=(6, 3))
    W = rng.uniform(0.2, 3.0, size=(5, 6))
    _, gA, gB = mmd2(A, B, KERNEL, W, cross_only=cross_only)
    np.testing.assert_allclose(gA, fd_grad(lambda X: mmd2(X, B, KERNEL, W, cross_only=cross_only)[0], A), atol=1e-8)
    np.testing.assert_allclose(gB, fd_grad(lambda X: mmd2(A, X, KERNEL, W, cross_only=cross_only)[0], B), atol=1e-8)


def test_median_heuristic():
    A = np.array([[0.0], [1.0]])
    B = np.array([[3.0], [4.0]])
    k = KernelSpec.median_heuristic(A, B, (1.0, 4.0))
    # squared distances 1,9,16,4,9,1 -> median 6.5
    np.testing.assert_allclose(k.sigmas, [math.sqrt(6.5), math.sqrt(26.0)])


def test_bad_kernel():
    with pytest.raises(DomainError):
        KernelSpec((0.0,))


# ------------------------------------------------------------------ Soft-MMD


def test_soft_features_round_trip_and_zero_scale():
    rng = np.random.default_rng(9)
    F, G = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    la, lb = np.array([0, 1, 2, 0]), np.array([1, 1, 0, 2])
    Fa = soft_mmd_features(F, la, 2.0, 3)
    np.testing.assert_array_equal(strip_soft_features(Fa, 3), F)
    raw = mmd2(F, G, KERNEL)[0]
    assert mmd2(soft_mmd_features(F, la, 0.0, 3), soft_mmd_features(G, lb, 0.0, 3), KERNEL)[0] == pytest.approx(raw)


def test_soft_features_disjoint_labels_increase_mmd():
    F = np.random.default_rng(10).normal(size=(5, 3))
    raw = mmd2(F, F.copy(), KERNEL)[0]
    soft = mmd2(soft_mmd_features(F, np.zeros(5, int), 5.0, 2), soft_mmd_features(F, np.ones(5, int), 5.0, 2), KERNEL)[0]
    assert soft > raw


# ------------------------------------------------------------------------ JS


def test_js_examples():
    assert js_distance([0.3, 0.7], [0.3, 0.7]) == 0.0
    assert js_distance([0.75, 0.25], [0.25, 0.75]) == pytest.approx(0.5 * math.log(3), abs=1e-5)


def test_js_invalid_simplex():
    with pytest.raises(DomainError):
        js_distance([0.5, 0.6], [0.5, 0.5])
    with pytest.raises(DomainError):
        js_distance([1.2, -0.2], [0.5, 0.5])


def test_js_symmetry_and_matrix():
    rng = np.random.default_rng(11)
    P, Q = rng.dirichlet(np.ones(4), 5), rng.dirichlet(np.ones(4), 3)
    M = js_matrix(P, Q)
    for i in range(5):
        for j in range(3):
            assert js_distance(P[i], Q[j]) == pytest.approx(js_distance(Q[j], P[i]), abs=1e-15)
            assert M[i, j] == pytest.approx(js_distance(P[i], Q[j]), abs=1e-12)
            assert M[i, j] >= 0


# ----------------------------------------------------------------------- SDA


def test_sda_weight_examples():
    rng = np.random.default_rng(12)
    X = rng.normal(size=(3, 10, 3))
    Y = X.copy()
    Y[2] += 4.0  # far outlier pair partner
    probs = rng.dirichlet(np.ones(3), 3)
    w = sda_weights(X, Y, probs, probs, eps=1e-3)
    assert w.geo.mean() == pytest.approx(1.0) and w.sem.mean() == pytest.approx(1.0)
    raw = 1.0 / (np.array([[chamfer_distance(a, b) for b in Y] for a in X]) + 1e-3)
    assert raw[0, 0] == pytest.approx(1e3)
    np.testing.assert_allclose(w.geo, raw / raw.mean(), rtol=1e-6)
    assert np.unravel_index(np.argmin(w.geo), w.geo.shape)[1] == 2
    np.testing.assert_allclose(inverse_distance_weights(np.full((2, 3), 0.7), 1e-3), np.ones((2, 3)))


# -------------------------------------------------------------- total loss


def tiny_setup(seed=4):
    params = init_params(4, seed, embed_widths=(3, 8, 16, 32), cls_hidden=(16, 8))
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(8, 16, 3))
    labels = np.array([0, 1, 2, 3, 0, 1, 2, 3])
    return params, X, labels


def test_lambda_zero_is_classification_only():
    params, X, labels = tiny_setup()
    ts, tt = forward(params, X[:4]), forward(params, X[4:])
    alpha = np.full(4, 0.25)
    loss, grad = total_loss(params, ts, tt, labels[:4], labels[4:], alpha, lam=0.0)
    l_cls, g_logits = weighted_ce(np.concatenate([ts.logits, tt.logits]), labels, alpha)
    assert loss.total == l_cls and loss.ali == 0.0


def test_identical_subdomains_have_zero_alignment():
    params, X, labels = tiny_setup()
    t = forward(params, X[:4])
    sda = sda_weights(X[:4], X[:4], t.softmax, t.softmax)
    loss, _ = total_loss(params, t, t, labels[:4], labels[:4], np.full(4, 0.25), sda=sda, lam=0.5)
    assert abs(loss.ali) < 1e-12
    assert loss.total == pytest.approx(loss.cls, abs=1e-12)


def test_uniform_sda_equals_no_sda():
    params, X, labels = tiny_setup()
    ts, tt = forward(params, X[:4]), forward(params, X[4:])
    a = total_loss(params, ts, tt, labels[:4], labels[4:], np.full(4, 0.25), sda=None)
    b = total_loss(params, ts, tt, labels[:4], labels[4:], np.full(4, 0.25), sda=SDAWeights.uniform(4, 4))
    assert a[0] == b[0]
    np.testing.assert_array_equal(a[1], b[1])


def test_non_finite_term_is_named():
    params, X, labels = tiny_setup()
    ts, tt = forward(params, X[:4]), forward(params, X[4:])

    def broken(A, B, kernel, weights):
        return float("nan"), np.zeros_like(A), np.zeros_like(B)

    with pytest.raises(NumericError, match="ali_geo"):
        total_loss(params, ts, tt, labels[:4], labels[4:], np.full(4, 0.25), discrepancy=broken)


def test_alignment_terms_fixed_kernel_pair():
    params, X, labels = tiny_setup()
    ts, tt = forward(params, X[:4]), forward(params, X[4:])
    terms = alignment_terms(ts, tt, labels[:4], labels[4:], 4, kernel=(KERNEL, KernelSpec((1.0,))))
    assert terms.geo == pytest.approx(mmd2(ts.f_l, tt.f_l, KERNEL)[0])
    assert terms.grad_fh_s.shape == ts.f_h.shape
