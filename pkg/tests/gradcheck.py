"""Central finite differences over a flat parameter vector.

ReLU and max-pool make the network piecewise smooth; a finite difference is
only a valid oracle when neither probe crosses a kink. ``pattern`` captures
the active set so a test can assert that precondition explicitly.
"""

import numpy as np

from sugdg.net import forward, init_params

FD_STEP = 1e-4
REL_FLOOR = 1e-6


def tiny_model(seed):
    """1 420-parameter network and an 8-cloud batch of 16 points."""
    params = init_params(4, seed, embed_widths=(3, 8, 16, 32), cls_hidden=(16, 8))
    X = np.random.default_rng(seed).normal(size=(8, 16, 3))
    return params, X


def pattern(params, X):
    t = forward(params, X)
    return [p > 0 for p in t.pre[:-1]] + [t.pool_index]


def central_difference(loss_of_theta, params, X, h=FD_STEP):
    """Returns (fd gradient, number of probes whose activation pattern changed)."""
    base = pattern(params, X)
    theta = params.theta.copy()
    grad = np.zeros_like(theta)
    changed = 0
    for i in range(theta.size):
        for sign in (1.0, -1.0):
            params.theta[:] = theta
            params.theta[i] += sign * h
            if any(not np.array_equal(a, b) for a, b in zip(pattern(params, X), base)):
                changed += 1
            value = loss_of_theta()
            grad[i] += sign * value / (2 * h)
    params.theta[:] = theta
    return grad, changed


def relative_error(analytic, numeric, floor=REL_FLOOR):
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
