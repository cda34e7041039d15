"""Adapter initialization: zeros, seeded random, and gradient-SVD.

Gradient-SVD sets each layer's B to the top-r right singular vectors of that
layer's first-step weight gradient dW = dY X^T (A stays zero). Among all
rank-r row spaces this minimizes ||dW - dW B^T B||_F, so the very first
optimizer step moves the merged weight as close as a rank-r update can get to
the full-gradient step. Layers are processed one at a time and each dW is
released before the next is formed, so at most one dense R x C gradient is
alive on top of the recorded activations; ``MemoryGauge`` instruments that
claim.

``first_step_update_check`` verifies the motivating identity empirically:
with A = 0, one gradient step of rate lr moves the merged weight by
-lr * alpha^2 * dW B^T B (mask effects disregarded, exact when the base has
no zeros). The alpha^2 factor appears because the merge scales AB by alpha
and the A-gradient carries another alpha.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .errors import ArgumentError, ShapeError
from . import matrix as mx
from .matrix import DenseMatrix, Rng
from .svd import svd
from .tape import Tape
from .adapters import (
    AdaptedLayer,
    AdapterPair,
    SppAdapter,
    merge,
    variant_backward,
    variant_forward,
)

STRATEGIES = ("zero_A_zero_B", "zero_A_random_B", "gradient_svd")

LOSS_KINDS = ("regression", "classification")


@dataclass
class InitSpec:
    """How to initialize adapter factors before training."""

    strategy: str = "zero_A_zero_B"
    seed: int = 0
    std: float = 0.02
    scale: float = 1.0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ArgumentError(
                f"unknown init strategy {self.strategy!r}, expected one of {STRATEGIES}"
            )
        if self.std < 0:
            raise ArgumentError(f"std must be nonnegative, got {self.std}")


@dataclass
class ProbeBatch:
    """One batch of inputs and targets for a single loss evaluation.

    ``targets`` is a matrix for regression (same column count as inputs) or an
    integer label per column for classification.
    """

    inputs: DenseMatrix
    targets: Union[DenseMatrix, np.ndarray]
    loss: str = "regression"

    def __post_init__(self):
        if self.loss not in LOSS_KINDS:
            raise ArgumentError(
                f"unknown loss {self.loss!r}, expected one of {LOSS_KINDS}"
            )
        if self.inputs.cols < 1:
            raise ArgumentError("probe batch must be nonempty")
        if self.loss == "regression":
            if not isinstance(self.targets, DenseMatrix):
                self.targets = DenseMatrix(self.targets)
            if self.targets.cols != self.inputs.cols:
                raise ShapeError(
                    f"targets have {self.targets.cols} columns, inputs {self.inputs.cols}"
                )
        else:
            self.targets = np.asarray(self.targets, dtype=np.int64).reshape(-1)
            if self.targets.shape[0] != self.inputs.cols:
                raise ShapeError(
                    f"need {self.inputs.cols} labels, got {self.targets.shape[0]}"
                )

    @property
    def size(self) -> int:
        return self.inputs.cols


class MemoryGauge:
    """Tracks extra dense allocations (in elements) during initialization."""

    def __init__(self):
        self.current = 0
        self.peak = 0
        self.events: list[tuple[str, int]] = []

    def alloc(self, n: int) -> None:
        self.current += n
        self.events.append(("alloc", n))
        if self.current > self.peak:
            self.peak = self.current

    def free(self, n: int) -> None:
        self.current -= n
        self.events.append(("free", n))


def fit_rank_r_rows(dw: DenseMatrix, r: int, scale: float = 1.0) -> DenseMatrix:
    """Best rank-r row basis for dw: the top-r right singular vectors as rows."""
    if r < 1 or r > min(dw.rows, dw.cols):
        raise ArgumentError(
            f"rank {r} must satisfy 1 <= r <= min({dw.rows}, {dw.cols})"
        )
    result = svd(dw)
    b = DenseMatrix(result.v.data[:, :r].T)
    if scale != 1.0:
        b = mx.scale(b, scale)
    return b


def projection_residual(dw: DenseMatrix, b: DenseMatrix) -> float:
    """||dw - dw b^T b||_F; for orthonormal rows b this is the part of dw
    outside the span."""
    projected = mx.matmul(mx.matmul(dw, mx.transpose(b)), b)
    return mx.frobenius_norm(mx.sub(dw, projected))


def singular_tail(dw: DenseMatrix, r: int) -> float:
    """sqrt(sum of squared singular values past the first r)."""
    s = svd(dw).s
    return float(math.sqrt(float(np.sum(s[r:] ** 2))))


def _fresh_zero_adapter(layer: AdaptedLayer):
    if isinstance(layer.adapter, SppAdapter):
        return SppAdapter(a=mx.zeros(layer.out_features, layer.rank),
                          b=mx.zeros(1, layer.in_features))
    return AdapterPair(a=mx.zeros(layer.out_features, layer.rank),
                       b=mx.zeros(layer.rank, layer.in_features),
                       alpha=layer.adapter.alpha)


def init_zero_zero(layer: AdaptedLayer):
    """A = 0, B = 0; the adapter branch is exactly absent."""
    layer.adapter = _fresh_zero_adapter(layer)
    return layer.adapter


def init_zero_random(layer: AdaptedLayer, seed: int, std: float):
    """A = 0, B ~ Normal(0, std) from a seeded generator."""
    adapter = _fresh_zero_adapter(layer)
    rng = Rng(seed)
    mx.fill_random_normal(adapter.b, rng, mean=0.0, std=std)
    layer.adapter = adapter
    return adapter


def init_gradient_svd(model, probe: ProbeBatch, r: int, scale: float = 1.0,
                      masked_gradient: bool = False,
                      gauge: Optional[MemoryGauge] = None,
                      diagnostics: Optional[list] = None) -> list[AdapterPair]:
    """Set every layer's B from the SVD of its first-step gradient; A = 0.

    Runs one probe forward/backward with all adapters zeroed, then walks the
    layers in order: form dW = dY X^T, take the top-r right singular vectors
    as B, and drop dW before touching the next layer. dW is the raw output
    gradient by default; ``masked_gradient`` restricts it to the sparsity
    pattern first. When a ``diagnostics`` list is supplied, one dict per layer
    records the projection residual and singular tail.
    """
    layers = list(model.layers)
    for layer in layers:
        if not isinstance(layer.adapter, AdapterPair):
            raise ArgumentError(
                f"gradient_svd requires a low-rank pair adapter, layer {layer.name!r} "
                f"has {type(layer.adapter).__name__}"
            )
        if r < 1 or r > min(layer.out_features, layer.in_features):
            raise ArgumentError(
                f"rank {r} out of range for layer {layer.name!r} "
                f"({layer.out_features}x{layer.in_features})"
            )
        layer.adapter.a.data[:] = 0.0

    tape = Tape()
    loss_id = model.forward_loss(tape, probe)
    grads = tape.backward(loss_id)

    pairs = []
    for layer in layers:
        dy = grads[layer.last_nodes["out"]]
        x = tape.value(layer.last_nodes["in"])
        n_elems = layer.out_features * layer.in_features
        if gauge is not None:
            gauge.alloc(n_elems)
        dw = mx.matmul(dy, mx.transpose(x))
        if masked_gradient:
            dw = mx.hadamard(dw, DenseMatrix(layer.original_mask.astype(np.float64)))
        b = fit_rank_r_rows(dw, r)
        if diagnostics is not None:
            diagnostics.append({
                "layer": layer.name,
                "rows": layer.out_features,
                "cols": layer.in_features,
                "rank": r,
                "grad_norm": mx.frobenius_norm(dw),
                "projection_residual": projection_residual(dw, b),
                "singular_tail": singular_tail(dw, r),
            })
        if scale != 1.0:
            b = mx.scale(b, scale)
        dw = None
        if gauge is not None:
            gauge.free(n_elems)
        pair = AdapterPair(a=mx.zeros(layer.out_features, r), b=b,
                           alpha=layer.adapter.alpha)
        layer.adapter = pair
        pairs.append(pair)
    return pairs


def apply_init(model, spec: InitSpec, probe: Optional[ProbeBatch] = None):
    """Dispatch an InitSpec over a model's layers."""
    if spec.strategy == "zero_A_zero_B":
        return [init_zero_zero(layer) for layer in model.layers]
    if spec.strategy == "zero_A_random_B":
        return [init_zero_random(layer, seed=spec.seed + i, std=spec.std)
                for i, layer in enumerate(model.layers)]
    if probe is None:
        raise ArgumentError("gradient_svd initialization requires a probe batch")
    ranks = {layer.rank for layer in model.layers}
    if len(ranks) != 1:
        raise ArgumentError(f"layers disagree on rank: {sorted(ranks)}")
    return init_gradient_svd(model, probe, r=ranks.pop(), scale=spec.scale)


def probe_loss_grad(y: DenseMatrix, probe: ProbeBatch):
    """Loss value and dLoss/dY for a single output, without a tape.

    Regression: 0.5 * sum of squared errors / L, so dY = (Y - T) / L.
    Classification: mean softmax cross-entropy over columns,
    dY = (softmax(Y) - onehot) / L.
    """
    if probe.loss == "regression":
        t = probe.targets
        if t.rows != y.rows or t.cols != y.cols:
            raise ShapeError(
                f"targets are {t.rows}x{t.cols}, output is {y.rows}x{y.cols}"
            )
        diff = mx.sub(y, t)
        n = y.cols
        loss = 0.5 * float(np.sum(diff.data ** 2)) / n
        return loss, mx.scale(diff, 1.0 / n)
    labels = probe.targets
    shifted = y.data - y.data.max(axis=0, keepdims=True)
    ez = np.exp(shifted)
    probs = ez / ez.sum(axis=0, keepdims=True)
    n = y.cols
    picked = probs[labels, np.arange(n)]
    loss = float(-np.mean(np.log(np.maximum(picked, 1e-300))))
    g = probs.copy()
    g[labels, np.arange(n)] -= 1.0
    g /= n
    return loss, DenseMatrix._wrap(g)


@dataclass
class UpdateCheckReport:
    update_residual: float
    projection_residual: float
    singular_tail: float
    grad_norm: float
    loss: float


def first_step_update_check(layer: AdaptedLayer, probe: ProbeBatch,
                            lr: float) -> UpdateCheckReport:
    """Verify that one gradient step moves the merged weight by
    -lr * alpha^2 * dW B^T B.

    Works on a scratch copy (the layer is untouched). Requires A = 0, where
    the identity is exact up to mask effects; the reported update_residual is
    relative to ||dW||_F, and projection_residual / singular_tail describe how
    much of dW the rank-r row space captures.
    """
    if not isinstance(layer.adapter, AdapterPair):
        raise ArgumentError("first_step_update_check requires a low-rank pair adapter")
    if mx.max_abs_diff(layer.adapter.a, mx.zeros(layer.adapter.a.rows,
                                                 layer.adapter.a.cols)) != 0.0:
        raise ArgumentError("first_step_update_check requires A = 0")
    work = AdaptedLayer(
        base=layer.base,
        adapter=AdapterPair(a=layer.adapter.a.copy(), b=layer.adapter.b.copy(),
                            alpha=layer.adapter.alpha),
        variant=layer.variant,
        bias=layer.bias,
        name=layer.name,
    )
    alpha = work.adapter.alpha
    x = probe.inputs

    w0 = merge(work).values
    y, ctx = variant_forward(work, x)
    loss, dy = probe_loss_grad(y, probe)
    grads = variant_backward(work, dy, ctx)

    work.adapter.a.data[:] -= lr * grads.da.data
    work.adapter.b.data[:] -= lr * grads.db.data
    w1 = merge(work).values

    dw = mx.matmul(dy, mx.transpose(x))
    b = work.adapter.b
    predicted = mx.scale(mx.matmul(mx.matmul(dw, mx.transpose(b)), b),
                         -lr * alpha * alpha)
    actual = mx.sub(w1, w0)
    grad_norm = mx.frobenius_norm(dw)
    gap = mx.frobenius_norm(mx.sub(actual, predicted))
    update_residual = 0.0 if grad_norm == 0.0 else gap / grad_norm

    r = work.rank
    return UpdateCheckReport(
        update_residual=update_residual,
        projection_residual=projection_residual(dw, b),
        singular_tail=singular_tail(dw, r),
        grad_norm=grad_norm,
        loss=loss,
    )
