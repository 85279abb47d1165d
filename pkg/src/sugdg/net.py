"""A compact PointNet-style classifier with hand-written backpropagation.

Architecture: a shared per-point MLP (ReLU after every layer), max-pooling
over points, then a classifier MLP (ReLU on hidden layers, linear logits).
Two feature taps are exposed for alignment losses:

* ``f_l`` -- the max-pooled output of the last embedding layer;
* ``f_h`` -- the activation of classifier hidden layer ``fh_layer``.

All parameters live in one flat float64 vector so the optimizer and the
checkpoint format can treat them uniformly.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ContractError, LoadError, NumericError

logger = logging.getLogger(__name__)

CKPT_HEADER = b"SUGDG-CKPT v1\n"


@dataclass(eq=False)
class ModelParams:
    embed_widths: Tuple[int, ...]
    cls_widths: Tuple[int, ...]
    theta: np.ndarray
    fh_layer: int = 2
    trained: bool = False
    class_names: Tuple[str, ...] = ()

    def __post_init__(self):
        self.embed_widths = tuple(int(w) for w in self.embed_widths)
        self.cls_widths = tuple(int(w) for w in self.cls_widths)
        self.class_names = tuple(self.class_names)
        if self.embed_widths[0] != 3:
            raise ContractError("the embedding stack must take 3D points")
        if self.cls_widths[0] != self.embed_widths[-1]:
            raise ContractError("classifier input width must equal the embedding output width")
        if not 1 <= self.fh_layer < len(self.cls_widths) - 1:
            raise ContractError(f"fh_layer must index a hidden classifier layer, got {self.fh_layer}")
        self.theta = np.ascontiguousarray(self.theta, dtype=np.float64)
        if self.theta.shape != (self.size,):
            raise ContractError(f"parameter vector has {self.theta.size} entries, expected {self.size}")

    @staticmethod
    def count(embed_widths: Sequence[int], cls_widths: Sequence[int]) -> int:
        total = 0
        for widths in (embed_widths, cls_widths):
            for a, b in zip(widths[:-1], widths[1:]):
                total += a * b + b
        return total

    @property
    def size(self) -> int:
        return self.count(self.embed_widths, self.cls_widths)

    @property
    def num_classes(self) -> int:
        return self.cls_widths[-1]

    @property
    def n_embed(self) -> int:
        return len(self.embed_widths) - 1

    def layer_slices(self) -> List[Tuple[slice, slice, Tuple[int, int]]]:
        """(weight slice, bias slice, weight shape) per layer in declaration order."""
        out, offset = [], 0
        for widths in (self.embed_widths, self.cls_widths):
            for a, b in zip(widths[:-1], widths[1:]):
                w = slice(offset, offset + a * b)
                offset += a * b
                bias = slice(offset, offset + b)
                offset += b
                out.append((w, bias, (a, b)))
        return out

    def layers(self, vector: Optional[np.ndarray] = None) -> List[Tuple[np.ndarray, np.ndarray]]:
        vec = self.theta if vector is None else vector
        return [(vec[w].reshape(shape), vec[b]) for w, b, shape in self.layer_slices()]

    def block_of(self, index: int) -> Tuple[str, int]:
        """Which layer a flat parameter index belongs to, e.g. ``("embed", 1)``."""
        for i, (w, b, _) in enumerate(self.layer_slices()):
            if w.start <= index < b.stop:
                return ("embed", i + 1) if i < self.n_embed else ("cls", i - self.n_embed + 1)
        raise IndexError(index)

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.embed_widths, self.cls_widths, self.theta.copy(), self.fh_layer, self.trained, self.class_names
        )

    @property
    def fh_dim(self) -> int:
        return self.cls_widths[self.fh_layer]

    @property
    def fl_dim(self) -> int:
        return self.embed_widths[-1]


def init_params(
    num_classes: int,
    seed,
    embed_widths: Sequence[int] = (3, 32, 64, 128),
    cls_hidden: Sequence[int] = (64, 32),
    fh_layer: int = 2,
    class_names: Sequence[str] = (),
) -> ModelParams:
    """He-normal weights and small positive biases."""
    cls_widths = (embed_widths[-1], *cls_hidden, num_classes)
    params = ModelParams(
        embed_widths, cls_widths, np.zeros(ModelParams.count(embed_widths, cls_widths)), fh_layer, False, class_names
    )
    rng = np.random.default_rng(seed)
    for w, b, (fan_in, fan_out) in params.layer_slices():
        params.theta[w] = rng.normal(0.0, np.sqrt(2.0 / fan_in), fan_in * fan_out)
        params.theta[b] = 0.01
    return params


# ------------------------------------------------------------------ forward pass


@dataclass(eq=False)
class ForwardTrace:
    points: np.ndarray
    pre: List[np.ndarray]  # pre-activations, embedding layers then classifier layers
    act: List[np.ndarray]  # post-activations (the last entry is the logits)
    pool_index: np.ndarray  # argmax point per channel, shape (B, fl_dim)
    f_l: np.ndarray
    f_h: np.ndarray
    logits: np.ndarray
    softmax: np.ndarray
    param_size: int
    n_embed: int

    def rows(self, index) -> "ForwardTrace":
        """Sub-trace for a subset of batch rows."""
        B, n = self.points.shape[:2]
        pick = np.arange(B)[index]
        point_rows = (pick[:, None] * n + np.arange(n)[None, :]).ravel()
        k = self.n_embed
        pre = [a[point_rows] for a in self.pre[:k]] + [a[pick] for a in self.pre[k:]]
        act = [a[point_rows] for a in self.act[:k]] + [a[pick] for a in self.act[k:]]
        return ForwardTrace(
            self.points[pick], pre, act, self.pool_index[pick], self.f_l[pick], self.f_h[pick],
            self.logits[pick], self.softmax[pick], self.param_size, k,
        )


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _check_finite(arr: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite activation in {where}")


def forward(params: ModelParams, points) -> ForwardTrace:
    """Run the network on a batch of clouds, shape (B, n, 3)."""
    pts = getattr(points, "points", points)
    pts = np.asarray(pts, dtype=np.float64)
    if pts.ndim != 3 or pts.shape[2] != 3:
        raise ContractError(f"expected a (B, n, 3) batch, got shape {pts.shape}")
    B, n, _ = pts.shape
    layers = params.layers()
    n_embed = params.n_embed
    pre, act = [], []
    h = pts.reshape(B * n, 3)
    for i in range(n_embed):
        W, b = layers[i]
        z = h @ W + b
        h = np.maximum(z, 0.0)
        _check_finite(h, f"embed layer {i + 1}")
        pre.append(z)
        act.append(h)
    per_point = h.reshape(B, n, -1)
    pool_index = np.argmax(per_point, axis=1)  # first maximum wins ties
    f_l = np.take_along_axis(per_point, pool_index[:, None, :], axis=1)[:, 0, :]
    h = f_l
    n_cls = len(layers) - n_embed
    for j in range(n_cls):
        W, b = layers[n_embed + j]
        # einsum keeps each row's arithmetic independent of the batch size
        z = np.einsum("bi,ij->bj", h, W) + b
        h = np.maximum(z, 0.0) if j < n_cls - 1 else z
        _check_finite(h, f"classifier layer {j + 1}")
        pre.append(z)
        act.append(h)
    logits = h
    return ForwardTrace(
        points=pts,
        pre=pre,
        act=act,
        pool_index=pool_index,
        f_l=f_l,
        f_h=act[n_embed + params.fh_layer - 1],
        logits=logits,
        softmax=softmax(logits),
        param_size=params.size,
        n_embed=n_embed,
    )


def backward(
    params: ModelParams,
    trace: ForwardTrace,
    grad_logits: Optional[np.ndarray] = None,
    grad_fl: Optional[np.ndarray] = None,
    grad_fh: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Gradient of a scalar loss w.r.t. all parameters.

    The loss is specified through its gradients on the logits and on the two
    feature taps; any of them may be omitted (treated as zero).
    """
    if trace.param_size != params.size:
        raise ContractError("trace was produced by a network of a different shape")
    B, n, _ = trace.points.shape
    if grad_logits is not None and grad_logits.shape != trace.logits.shape:
        raise ContractError("logit gradient shape mismatch")
    if grad_fl is not None and grad_fl.shape != trace.f_l.shape:
        raise ContractError("f_l gradient shape mismatch")
    if grad_fh is not None and grad_fh.shape != trace.f_h.shape:
        raise ContractError("f_h gradient shape mismatch")

    layers = params.layers()
    slices = params.layer_slices()
    n_embed = params.n_embed
    n_cls = len(layers) - n_embed
    grad = np.zeros(params.size)

    g = np.zeros_like(trace.logits) if grad_logits is None else grad_logits
    for j in reversed(range(n_cls)):
        li = n_embed + j
        W, _ = layers[li]
        if j < n_cls - 1:
            if j == params.fh_layer - 1 and grad_fh is not None:
                g = g + grad_fh
            g = g * (trace.pre[li] > 0.0)
        inp = trace.act[li - 1] if j > 0 else trace.f_l
        w_sl, b_sl, _ = slices[li]
        grad[w_sl] = (inp.T @ g).ravel()
        grad[b_sl] = g.sum(axis=0)
        g = g @ W.T
    if grad_fl is not None:
        g = g + grad_fl

    width = trace.f_l.shape[1]
    g_points = np.zeros((B, n, width))
    np.put_along_axis(g_points, trace.pool_index[:, None, :], g[:, None, :], axis=1)
    g = g_points.reshape(B * n, width)
    for i in reversed(range(n_embed)):
        W, _ = layers[i]
        g = g * (trace.pre[i] > 0.0)
        inp = trace.act[i - 1] if i > 0 else trace.points.reshape(B * n, 3)
        w_sl, b_sl, _ = slices[i]
        grad[w_sl] = (inp.T @ g).ravel()
        grad[b_sl] = g.sum(axis=0)
        if i > 0:
            g = g @ W.T
    return grad


# --------------------------------------------------------------------- optimizer


@dataclass(eq=False)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 5e-5
    skipped: int = 0

    @classmethod
    def create(cls, size: int, **hyper) -> "AdamState":
        return cls(np.zeros(size), np.zeros(size), **hyper)


def adam_step(state: AdamState, params: ModelParams, grads: np.ndarray) -> ModelParams:
    """In-place Adam update with decoupled weight decay. Non-finite gradients skip the step."""
    if grads.shape != params.theta.shape or state.m.shape != params.theta.shape:
        raise ContractError("optimizer state, parameters and gradients must have equal length")
    if not np.all(np.isfinite(grads)):
        state.skipped += 1
        logger.warning("non-finite gradient; skipping optimizer step (%d skipped so far)", state.skipped)
        return params
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    state.m *= b1
    state.m += (1.0 - b1) * grads
    state.v *= b2
    state.v += (1.0 - b2) * grads * grads
    m_hat = state.m / (1.0 - b1**state.step)
    v_hat = state.v / (1.0 - b2**state.step)
    update = m_hat / (np.sqrt(v_hat) + state.eps)
    if state.weight_decay:
        update += state.weight_decay * params.theta
    params.theta -= state.lr * update
    return params


# -------------------------------------------------------------------- checkpoint


def save_checkpoint(params: ModelParams, state: Optional[AdamState], path: Union[str, Path]) -> None:
    """Header line, one JSON metadata line, then little-endian float64 payload.

    Payload order: parameters in declaration order, then Adam first and
    second moments when an optimizer state is stored.
    """
    meta = {
        "embed_widths": list(params.embed_widths),
        "cls_widths": list(params.cls_widths),
        "fh_layer": params.fh_layer,
        "trained": params.trained,
        "class_names": list(params.class_names),
        "n_params": params.size,
        "adam": None,
    }
    if state is not None:
        meta["adam"] = {
            "step": state.step, "lr": state.lr, "beta1": state.beta1, "beta2": state.beta2,
            "eps": state.eps, "weight_decay": state.weight_decay, "skipped": state.skipped,
        }
    blobs = [params.theta] + ([state.m, state.v] if state is not None else [])
    with open(path, "wb") as fh:
        fh.write(CKPT_HEADER)
        fh.write(json.dumps(meta, sort_keys=True).encode() + b"\n")
        for arr in blobs:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path: Union[str, Path]) -> Tuple[ModelParams, Optional[AdamState]]:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise LoadError(f"cannot read checkpoint {path}: {exc}") from exc
    if not data.startswith(CKPT_HEADER):
        raise LoadError(f"{path}: not a SUGDG-CKPT v1 checkpoint")
    rest = data[len(CKPT_HEADER):]
    line, sep, payload = rest.partition(b"\n")
    if not sep:
        raise LoadError(f"{path}: truncated checkpoint header")
    try:
        meta = json.loads(line)
        n = int(meta["n_params"])
    except (ValueError, KeyError, TypeError) as exc:
        raise LoadError(f"{path}: malformed checkpoint metadata") from exc
    blocks = 3 if meta.get("adam") else 1
    if len(payload) != blocks * n * 8:
        raise LoadError(f"{path}: truncated checkpoint ({len(payload)} payload bytes, expected {blocks * n * 8})")
    arrays = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(blocks, n)
    params = ModelParams(
        meta["embed_widths"], meta["cls_widths"], arrays[0].copy(), meta["fh_layer"],
        bool(meta["trained"]), meta.get("class_names", ()),
    )
    state = None
    if meta.get("adam"):
        a = meta["adam"]
        state = AdamState(
            arrays[1].copy(), arrays[2].copy(), a["step"], a["lr"], a["beta1"], a["beta2"],
            a["eps"], a["weight_decay"], a.get("skipped", 0),
        )
    return params, state

