"""Adapter layer variants over sparse base weights.

Every layer computes some flavor of Y = f(W, A, B) X with a frozen sparse base
weight W (R x C), trainable low-rank factors, inputs X (C x L, samples as
columns), and an optional bias. The variants differ in what they save between
forward and backward and in how the backward products are scheduled, which is
the whole point: the table below is what the instrumented counters must
reproduce exactly (matmul m*k*n MACs, hadamard m*n MACs, adds excluded).

variant   forward MACs        backward MACs                      saved elements
lora      RCL + rCL + rRL     RCL + 2rRL + 2rCL                  rL + CL
sqft      RCL + RC + rRC      2RCL + 2rRC + RC                   2RC + CL
sqft_gc   RCL + RC + rRC      2RCL + 3rRC + 2RC                  CL
spp       2RCL + 2RC          3RCL + 3RC                         3RC + CL
spp_gc    RCL + rRC + RC      3RCL + 3rRC + 2RC                  CL
lors      RCL + rRC + RC      RCL + 2rRL + 2rCL + rRC + RC       CL

- lora: Y = WX + alpha * A(BX); saves X and BX.
- sqft: Y = (W + alpha * (AB) . M) X with mask M = (W != 0); saves X, M, and
  the merged weight.
- sqft_gc: same numerics as sqft but saves only X; the merged weight is
  rebuilt in backward (+rRC + RC backward MACs).
- spp: Y = WX + (W . tile(A) . tile(B)) X; backward is derived by the tape
  from this expression, not hand-written.
- spp_gc: the same function in merged form Y = (W + W . (A @ Bhat)) X with
  Bhat the block-diagonal expansion of B; saves only X and replays the whole
  forward inside backward (checkpoint-style full recompute).
- lors: sqft's forward expression, but the merged weight is discarded after
  use and rebuilt in backward, and the adapter gradients are reordered into
  rank-r products: dA = alpha * dY (X^T B^T), dB = alpha * (A^T dY) X^T.
  The mask is dropped from dA/dB (straight-through estimator); dX uses the
  full masked merged weight.

Sparsity is preserved because every masked variant updates only through
A, B and re-applies the mask on merge. ``merge`` uses the mask captured at
construction, so later exact-zero coincidences in kept weights cannot shrink
the pattern.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import ArgumentError, GraphError, ShapeError
from . import matrix as mx
from .matrix import DenseMatrix
from .prune import SparseWeight
from .tape import Tape

VARIANTS = ("lora", "sqft", "sqft_gc", "spp", "spp_gc", "lors")

# Test hooks for negative-control verification runs. When a flag is set the
# named computation is deliberately corrupted so oracle suites must fail.
FAULT_INJECTION = {
    "lors_backward_sign_flip": False,
    "cost_model_off_by_one": False,
}


@dataclass
class AdapterPair:
    """Low-rank factors a (R x r) and b (r x C) with a scaling factor."""

    a: DenseMatrix
    b: DenseMatrix
    alpha: float = 2.0

    def __post_init__(self):
        if self.a.cols != self.b.rows:
            raise ShapeError(
                f"adapter rank mismatch: a is {self.a.rows}x{self.a.cols}, "
                f"b is {self.b.rows}x{self.b.cols}"
            )
        r = self.a.cols
        if r < 1 or r > min(self.a.rows, self.b.cols):
            raise ArgumentError(
                f"rank {r} must satisfy 1 <= r <= min({self.a.rows}, {self.b.cols})"
            )
        if not self.alpha > 0:
            raise ArgumentError(f"alpha must be positive, got {self.alpha}")

    @property
    def rank(self) -> int:
        return self.a.cols


@dataclass
class SppAdapter:
    """Hadamard-parameterized factors: a (R x r) tiled over columns, b (1 x C)."""

    a: DenseMatrix
    b: DenseMatrix

    def __post_init__(self):
        if self.b.rows != 1:
            raise ShapeError(f"spp b must be a 1xC row, got {self.b.rows}x{self.b.cols}")
        r = self.a.cols
        if self.b.cols % r != 0:
            raise ArgumentError(
                f"spp rank {r} must divide the input width {self.b.cols}"
            )

    @property
    def rank(self) -> int:
        return self.a.cols


class AdaptedLayer:
    """A frozen SparseWeight plus a trainable adapter, one of six variants."""

    def __init__(self, base: SparseWeight, adapter, variant: str,
                 bias: Optional[DenseMatrix] = None, dropout: float = 0.0,
                 name: str = ""):
        if variant not in VARIANTS:
            raise ArgumentError(f"unknown variant {variant!r}, expected one of {VARIANTS}")
        spp_family = variant in ("spp", "spp_gc")
        if spp_family and not isinstance(adapter, SppAdapter):
            raise ArgumentError(f"variant {variant} requires an SppAdapter")
        if not spp_family and not isinstance(adapter, AdapterPair):
            raise ArgumentError(f"variant {variant} requires an AdapterPair")
        if adapter.a.rows != base.rows:
            raise ShapeError(
                f"adapter a has {adapter.a.rows} rows, base has {base.rows}"
            )
        if adapter.b.cols != base.cols:
            raise ShapeError(
                f"adapter b has {adapter.b.cols} cols, base has {base.cols}"
            )
        if bias is not None and (bias.rows != base.rows or bias.cols != 1):
            raise ShapeError(
                f"bias must be {base.rows}x1, got {bias.rows}x{bias.cols}"
            )
        if not (0.0 <= dropout < 1.0):
            raise ArgumentError(f"dropout must be in [0, 1), got {dropout}")
        self.base = base
        self.adapter = adapter
        self.variant = variant
        self.bias = bias
        self.dropout = dropout
        self.name = name
        # Captured once; merge() reuses this even if a kept weight later
        # happens to land on exact zero.
        self.original_mask = base.mask_bool().copy()
        self.last_nodes: dict[str, int] = {}

    @property
    def out_features(self) -> int:
        return self.base.rows

    @property
    def in_features(self) -> int:
        return self.base.cols

    @property
    def rank(self) -> int:
        return self.adapter.rank

    def trainable(self) -> dict[str, DenseMatrix]:
        params = {"a": self.adapter.a, "b": self.adapter.b}
        if self.bias is not None:
            params["bias"] = self.bias
        return params


def make_layer(base: SparseWeight, rank: int, variant: str, alpha: float = 2.0,
               bias: Optional[DenseMatrix] = None, name: str = "") -> AdaptedLayer:
    """Build a layer with zeroed adapter factors (A = 0, B = 0)."""
    r_dim, c_dim = base.rows, base.cols
    if variant in ("spp", "spp_gc"):
        adapter = SppAdapter(a=mx.zeros(r_dim, rank), b=mx.zeros(1, c_dim))
    else:
        adapter = AdapterPair(a=mx.zeros(r_dim, rank), b=mx.zeros(rank, c_dim), alpha=alpha)
    return AdaptedLayer(base, adapter, variant, bias=bias, name=name)


@dataclass
class VariantGrads:
    da: DenseMatrix
    db: DenseMatrix
    dx: DenseMatrix
    dbias: Optional[DenseMatrix] = None


class _Context:
    """Saved-for-backward state shared by the hand-written variants."""

    __slots__ = ("layer", "consumed", "tensors")

    def __init__(self, layer: AdaptedLayer, **tensors):
        self.layer = layer
        self.consumed = False
        self.tensors = tensors

    def consume(self):
        if self.consumed:
            raise GraphError("backward context already consumed")
        self.consumed = True

    def __getattr__(self, key):
        try:
            return self.tensors[key]
        except KeyError:
            raise AttributeError(key)


def mask_matrix(base: SparseWeight) -> DenseMatrix:
    """Materialize M = (W != 0) as a float 0/1 matrix (RC extra elements)."""
    return DenseMatrix._wrap((base.values.data != 0.0).astype(np.float64))


def merged_weight(w: DenseMatrix, a: DenseMatrix, b: DenseMatrix, alpha: float,
                  mask: DenseMatrix, counters=None) -> DenseMatrix:
    """W + alpha * ((A @ B) . M), in the one evaluation order used everywhere.

    sqft saves this matrix, sqft_gc and lors rebuild it in backward, and
    merge() finalizes with it; sharing the helper keeps all of those bitwise
    identical. Costs rRC + RC MACs plus one elementwise pass.
    """
    product = mx.matmul(a, b, counters)          # rRC
    masked = mx.hadamard(product, mask, counters)  # RC
    return mx.add_scaled(w, masked, alpha, counters)


def _check_x(layer: AdaptedLayer, x: DenseMatrix) -> None:
    if x.rows != layer.in_features:
        raise ShapeError(
            f"layer expects {layer.in_features} input rows, got {x.rows}x{x.cols}"
        )


def _check_dy(layer: AdaptedLayer, dy: DenseMatrix, l_cols: int) -> None:
    if dy.rows != layer.out_features or dy.cols != l_cols:
        raise ShapeError(
            f"gradient must be {layer.out_features}x{l_cols}, got {dy.rows}x{dy.cols}"
        )


# ---------------------------------------------------------------------------
# lora
# ---------------------------------------------------------------------------

def lora_forward(layer: AdaptedLayer, x: DenseMatrix, counters=None):
    """Y = WX + alpha * A(BX); saves X and BX (rL + CL elements)."""
    _check_x(layer, x)
    w = layer.base.values
    pair = layer.adapter
    base_out = mx.matmul(w, x, counters)            # RCL
    bx = mx.matmul(pair.b, x, counters)             # rCL
    abx = mx.matmul(pair.a, bx, counters)           # rRL
    y = mx.add_scaled(base_out, abx, pair.alpha, counters)
    if layer.bias is not None:
        y = mx.add_bias(y, layer.bias, counters)
    ctx = _Context(layer, x=x, bx=bx)
    return y, ctx


def lora_backward(grad_y: DenseMatrix, ctx: _Context, counters=None) -> VariantGrads:
    """dA = alpha dY (BX)^T; dB = alpha (A^T dY) X^T; dX = W^T dY + alpha B^T (A^T dY)."""
    ctx.consume()
    layer = ctx.layer
    _check_dy(layer, grad_y, ctx.x.cols)
    w = layer.base.values
    pair = layer.adapter
    prior = None
    if counters is not None:
        prior, counters.phase = counters.phase, "backward"
    try:
        da = mx.scale(mx.matmul(grad_y, mx.transpose(ctx.bx), counters), pair.alpha, counters)  # rRL
        at_dy = mx.matmul(mx.transpose(pair.a), grad_y, counters)                               # rRL
        db = mx.scale(mx.matmul(at_dy, mx.transpose(ctx.x), counters), pair.alpha, counters)    # rCL
        dx = mx.add_scaled(
            mx.matmul(mx.transpose(w), grad_y, counters),       # RCL
            mx.matmul(mx.transpose(pair.b), at_dy, counters),   # rCL
            pair.alpha, counters,
        )
        dbias = mx.reduce_sum_rows(grad_y, counters) if layer.bias is not None else None
    finally:
        if counters is not None:
            counters.phase = prior
    return VariantGrads(da=da, db=db, dx=dx, dbias=dbias)


# ---------------------------------------------------------------------------
# sqft and sqft_gc
# ---------------------------------------------------------------------------

def sqft_forward(layer: AdaptedLayer, x: DenseMatrix, counters=None):
    """Y = (W + alpha (AB) . M) X; saves X, M, and the merged weight."""
    _check_x(layer, x)
    pair = layer.adapter
    mask = mask_matrix(layer.base)
    merged = merged_weight(layer.base.values, pair.a, pair.b, pair.alpha, mask, counters)
    y = mx.matmul(merged, x, counters)              # RCL
    if layer.bias is not None:
        y = mx.add_bias(y, layer.bias, counters)
    ctx = _Context(layer, x=x, mask=mask, merged=merged)
    return y, ctx


def _sqft_grads(layer: AdaptedLayer, grad_y: DenseMatrix, x: DenseMatrix,
                mask: DenseMatrix, merged: DenseMatrix, counters) -> VariantGrads:
    pair = layer.adapter
    dx = mx.matmul(mx.transpose(merged), grad_y, counters)       # RCL
    dy_xt = mx.matmul(grad_y, mx.transpose(x), counters)         # RCL
    masked = mx.hadamard(dy_xt, mask, counters)                  # RC
    da = mx.scale(mx.matmul(masked, mx.transpose(pair.b), counters), pair.alpha, counters)  # rRC
    db = mx.scale(mx.matmul(mx.transpose(pair.a), masked, counters), pair.alpha, counters)  # rRC
    dbias = mx.reduce_sum_rows(grad_y, counters) if layer.bias is not None else None
    return VariantGrads(da=da, db=db, dx=dx, dbias=dbias)


def sqft_backward(grad_y: DenseMatrix, ctx: _Context, counters=None) -> VariantGrads:
    """dX = merged^T dY; dA/dB from (dY X^T) . M, scaled by alpha."""
    ctx.consume()
    layer = ctx.layer
    _check_dy(layer, grad_y, ctx.x.cols)
    prior = None
    if counters is not None:
        prior, counters.phase = counters.phase, "backward"
    try:
        return _sqft_grads(layer, grad_y, ctx.x, ctx.mask, ctx.merged, counters)
    finally:
        if counters is not None:
            counters.phase = prior


def sqft_gc_forward(layer: AdaptedLayer, x: DenseMatrix, counters=None):
    """Numerically identical to sqft_forward, but saves only X."""
    y, full_ctx = sqft_forward(layer, x, counters)
    ctx = _Context(layer, x=full_ctx.tensors["x"])
    return y, ctx


def sqft_gc_backward(grad_y: DenseMatrix, ctx: _Context, counters=None) -> VariantGrads:
    """Rebuild mask and merged weight (rRC + RC), then run the sqft schedule."""
    ctx.consume()
    layer = ctx.layer
    _check_dy(layer, grad_y, ctx.x.cols)
    pair = layer.adapter
    prior = None
    if counters is not None:
        prior, counters.phase = counters.phase, "backward"
    try:
        mask = mask_matrix(layer.base)
        merged = merged_weight(layer.base.values, pair.a, pair.b, pair.alpha, mask, counters)
        return _sqft_grads(layer, grad_y, ctx.x, mask, merged, counters)
    finally:
        if counters is not None:
            counters.phase = prior


# ---------------------------------------------------------------------------
# lors
# ---------------------------------------------------------------------------

def lors_forward(layer: AdaptedLayer, x: DenseMatrix, counters=None):
    """sqft's forward expression, discarding mask and merged weight after use.

    Only X is saved (CL elements). Bitwise-equal to sqft_forward because both
    route through merged_weight with identical operand order.
    """
    _check_x(layer, x)
    pair = layer.adapter
    mask = mask_matrix(layer.base)
    merged = merged_weight(layer.base.values, pair.a, pair.b, pair.alpha, mask, counters)
    y = mx.matmul(merged, x, counters)              # RCL
    if layer.bias is not None:
        y = mx.add_bias(y, layer.bias, counters)
    ctx = _Context(layer, x=x)
    return y, ctx


def lors_backward(grad_y: DenseMatrix, ctx: _Context, counters=None) -> VariantGrads:
    """Recompute the merged weight, then rank-r reordered adapter gradients.

    dX = merged^T dY (full masked weight); dA = alpha * dY (X^T B^T) and
    dB = alpha * (A^T dY) X^T carry no mask: the straight-through estimator
    drops it from the adapter-gradient path. Costs RCL + 2rRL + 2rCL MACs for
    the products plus rRC + RC for the recompute.
    """
    ctx.consume()
    layer = ctx.layer
    _check_dy(layer, grad_y, ctx.x.cols)
    pair = layer.adapter
    x = ctx.x
    prior = None
    if counters is not None:
        prior, counters.phase = counters.phase, "backward"
    try:
        mask = mask_matrix(layer.base)
        merged = merged_weight(layer.base.values, pair.a, pair.b, pair.alpha, mask, counters)
        dx = mx.matmul(mx.transpose(merged), grad_y, counters)                  # RCL
        xt_bt = mx.matmul(mx.transpose(x), mx.transpose(pair.b), counters)      # rCL
        at_dy = mx.matmul(mx.transpose(pair.a), grad_y, counters)               # rRL
        da = mx.scale(mx.matmul(grad_y, xt_bt, counters), pair.alpha, counters)  # rRL
        db = mx.scale(mx.matmul(at_dy, mx.transpose(x), counters), pair.alpha, counters)  # rCL
        if FAULT_INJECTION["lors_backward_sign_flip"]:
            da = mx.scale(da, -1.0)
        dbias = mx.reduce_sum_rows(grad_y, counters) if layer.bias is not None else None
    finally:
        if counters is not None:
            counters.phase = prior
    return VariantGrads(da=da, db=db, dx=dx, dbias=dbias)


# ---------------------------------------------------------------------------
# spp and spp_gc
# ---------------------------------------------------------------------------

def _spp_dropout_mask(layer: AdaptedLayer, x: DenseMatrix) -> Optional[DenseMatrix]:
    if layer.dropout <= 0.0:
        return None
    rng = getattr(layer, "dropout_rng", None)
    if rng is None:
        raise ArgumentError("spp dropout > 0 requires layer.dropout_rng to be set")
    keep = (rng.uniforms(x.rows * x.cols) >= layer.dropout).astype(np.float64)
    return DenseMatrix._wrap(keep.reshape(x.rows, x.cols) / (1.0 - layer.dropout))


def spp_forward(layer: AdaptedLayer, x: DenseMatrix, counters=None):
    """Y = WX + (W . tile(A, C/r) . tile(B, R)) X, recorded on a private tape.

    tile(A, n) lays n copies of A side by side, so column q of the tiled
    matrix is A[:, q mod r]. The backward pass is whatever reverse-mode
    differentiation of this graph yields; nothing is hand-scheduled.
    """
    _check_x(layer, x)
    adapter = layer.adapter
    r = adapter.rank
    tape = Tape(counters=counters, track_saved=False)
    w_id = tape.leaf(layer.base.values, requires_grad=False, is_param=True, name="base")
    a_id = tape.leaf(adapter.a, requires_grad=True, is_param=True, name="a")
    b_id = tape.leaf(adapter.b, requires_grad=True, is_param=True, name="b")
    x_id = tape.leaf(x, requires_grad=True, name="x")

    branch_x = x_id
    drop = _spp_dropout_mask(layer, x)
    if drop is not None:
        drop_id = tape.leaf(drop, requires_grad=False, name="dropout_mask")
        branch_x = tape.hadamard(x_id, drop_id)

    rep_a = tape.repeat_cols(a_id, layer.in_features // r)
    t1 = tape.hadamard(w_id, rep_a)
    rep_b = tape.repeat_rows(b_id, layer.out_features)
    t2 = tape.hadamard(t1, rep_b)
    adapted = tape.matmul(t2, branch_x)
    base_out = tape.matmul(w_id, x_id)
    y_id = tape.add(base_out, adapted)
    bias_id = None
    if layer.bias is not None:
        bias_id = tape.leaf(layer.bias, requires_grad=True, is_param=True, name="bias")
        y_id = tape.add_bias(y_id, bias_id)

    ctx = _Context(layer, x=x)
    ctx.tensors["tape"] = tape
    ctx.tensors["ids"] = {"x": x_id, "a": a_id, "b": b_id, "bias": bias_id, "y": y_id}
    return tape.value(y_id), ctx


def spp_backward(grad_y: DenseMatrix, ctx: _Context, counters=None) -> VariantGrads:
    """Reverse pass of the recorded Repeat-expression graph.

    Tallies land in the counters bound when the graph was recorded (the ones
    passed to spp_forward); the ``counters`` argument exists for signature
    uniformity only.
    """
    ctx.consume()
    layer = ctx.layer
    tape: Tape = ctx.tensors["tape"]
    ids = ctx.tensors["ids"]
    _check_dy(layer, grad_y, ctx.x.cols)
    grads = tape.backward(ids["y"], seed=grad_y)
    dbias = grads.get(ids["bias"]) if ids["bias"] is not None else None
    return VariantGrads(da=grads[ids["a"]], db=grads[ids["b"]], dx=grads[ids["x"]], dbias=dbias)


def spp_counted_saved(ctx: _Context) -> list[DenseMatrix]:
    """Tensors the Repeat-expression graph saved for backward (3RC + CL)."""
    tape: Tape = ctx.tensors["tape"]
    return [t for node in tape.nodes for t in node.saved]


def _block_diag_expand(b: DenseMatrix, r: int) -> DenseMatrix:
    """Scatter a 1 x C row into r x C with entry (q mod r, q) = b[q]."""
    cols = b.cols
    out = np.zeros((r, cols))
    idx = np.arange(cols)
    out[idx % r, idx] = b.data[0]
    return DenseMatrix._wrap(out)


def spp_gc_forward(layer: AdaptedLayer, x: DenseMatrix, counters=None):
    """The spp function in merged form: Y = (W + W . (A @ Bhat)) X; saves only X.

    Bhat is the block-diagonal expansion of B, which makes the merged form
    equal (up to rounding) to the Repeat form while exposing the rank-r
    matmul A @ Bhat (rRC MACs) instead of a tiled Hadamard chain.
    """
    _check_x(layer, x)
    adapter = layer.adapter
    if layer.dropout > 0.0:
        raise ArgumentError("spp_gc does not support dropout > 0")
    bhat = _block_diag_expand(adapter.b, adapter.rank)
    product = mx.matmul(adapter.a, bhat, counters)       # rRC
    scaled_w = mx.hadamard(layer.base.values, product, counters)  # RC
    merged = mx.add(layer.base.values, scaled_w, counters)
    y = mx.matmul(merged, x, counters)                   # RCL
    if layer.bias is not None:
        y = mx.add_bias(y, layer.bias, counters)
    ctx = _Context(layer, x=x)
    return y, ctx


def spp_gc_backward(grad_y: DenseMatrix, ctx: _Context, counters=None) -> VariantGrads:
    """Replay the full merged-form forward on a scratch tape, then differentiate.

    The replay (rRC + RC + RCL) plus the derived reverse pass
    (2RCL + RC + 2rRC) lands on 3RCL + 3rRC + 2RC backward MACs.
    """
    ctx.consume()
    layer = ctx.layer
    adapter = layer.adapter
    _check_dy(layer, grad_y, ctx.x.cols)
    prior = None
    if counters is not None:
        prior, counters.phase = counters.phase, "backward"
    try:
        tape = Tape(counters=counters, track_saved=False)
        w_id = tape.leaf(layer.base.values, requires_grad=False, is_param=True)
        a_id = tape.leaf(adapter.a, requires_grad=True, is_param=True)
        b_id = tape.leaf(adapter.b, requires_grad=True, is_param=True)
        x_id = tape.leaf(ctx.x, requires_grad=True)
        bhat_id = tape.block_diag_rows(b_id, adapter.rank)
        product = tape.matmul(a_id, bhat_id)          # rRC
        scaled_w = tape.hadamard(w_id, product)       # RC
        merged = tape.add(w_id, scaled_w)
        y_id = tape.matmul(merged, x_id)              # RCL
        bias_id = None
        if layer.bias is not None:
            bias_id = tape.leaf(layer.bias, requires_grad=True, is_param=True)
            y_id = tape.add_bias(y_id, bias_id)
        grads = tape.backward(y_id, seed=grad_y)
        dbias = grads.get(bias_id) if bias_id is not None else None
        return VariantGrads(da=grads[a_id], db=grads[b_id], dx=grads[x_id], dbias=dbias)
    finally:
        if counters is not None:
            counters.phase = prior


# ---------------------------------------------------------------------------
# dispatch, cost predictions, merge
# ---------------------------------------------------------------------------

_FORWARD = {
    "lora": lora_forward,
    "sqft": sqft_forward,
    "sqft_gc": sqft_gc_forward,
    "spp": spp_forward,
    "spp_gc": spp_gc_forward,
    "lors": lors_forward,
}

_BACKWARD = {
    "lora": lora_backward,
    "sqft": sqft_backward,
    "sqft_gc": sqft_gc_backward,
    "spp": spp_backward,
    "spp_gc": spp_gc_backward,
    "lors": lors_backward,
}


def variant_forward(layer: AdaptedLayer, x: DenseMatrix, counters=None):
    return _FORWARD[layer.variant](layer, x, counters)


def variant_backward(layer: AdaptedLayer, grad_y: DenseMatrix, ctx, counters=None) -> VariantGrads:
    return _BACKWARD[layer.variant](grad_y, ctx, counters)


def counted_saved(layer: AdaptedLayer, ctx: _Context) -> list[DenseMatrix]:
    """The tensors a layer keeps alive between forward and backward."""
    if layer.variant == "lora":
        return [ctx.x, ctx.bx]
    if layer.variant == "sqft":
        return [ctx.x, ctx.mask, ctx.merged]
    if layer.variant == "spp":
        return spp_counted_saved(ctx)
    return [ctx.x]  # sqft_gc, spp_gc, lors


def apply_layer(tape: Tape, layer: AdaptedLayer, x_id: int) -> int:
    """Record the layer on a model tape as one fused node.

    Inputs are (x, a, b[, bias]) so the gradient map exposes every trainable
    parameter; node ids are remembered on the layer for the optimizer.
    """
    x = tape.value(x_id)
    a_id = tape.leaf(layer.adapter.a, requires_grad=True, is_param=True,
                     name=f"{layer.name}.a")
    b_id = tape.leaf(layer.adapter.b, requires_grad=True, is_param=True,
                     name=f"{layer.name}.b")
    inputs = [x_id, a_id, b_id]
    bias_id = None
    if layer.bias is not None:
        bias_id = tape.leaf(layer.bias, requires_grad=True, is_param=True,
                            name=f"{layer.name}.bias")
        inputs.append(bias_id)
    y, ctx = variant_forward(layer, x, tape.counters)
    c = tape.counters

    def bwd(dy):
        g = variant_backward(layer, dy, ctx, c)
        out = [g.dx, g.da, g.db]
        if bias_id is not None:
            out.append(g.dbias)
        return out

    y_id = tape.record(layer.variant, inputs, y, bwd,
                       saved=counted_saved(layer, ctx), name=layer.name)
    layer.last_nodes = {"in": x_id, "out": y_id, "a": a_id, "b": b_id, "bias": bias_id}
    return y_id


@dataclass(frozen=True)
class VariantCostModel:
    """Closed-form cost functions of (R, C, L, r) for one layer pass.

    The functions predict exactly what the instrumented counters report for a
    forward and backward with X requiring a gradient (the general mid-network
    setting: every schedule computes dX).
    """

    variant: str
    macs_forward: Callable[[int, int, int, int], int]
    macs_backward: Callable[[int, int, int, int], int]
    saved_elements: Callable[[int, int, int, int], int]


COST_MODELS = {
    "lora": VariantCostModel(
        "lora",
        macs_forward=lambda R, C, L, r: R * C * L + r * C * L + r * R * L,
        macs_backward=lambda R, C, L, r: R * C * L + 2 * r * R * L + 2 * r * C * L,
        saved_elements=lambda R, C, L, r: r * L + C * L,
    ),
    "sqft": VariantCostModel(
        "sqft",
        macs_forward=lambda R, C, L, r: R * C * L + R * C + r * R * C,
        macs_backward=lambda R, C, L, r: 2 * R * C * L + 2 * r * R * C + R * C,
        saved_elements=lambda R, C, L, r: 2 * R * C + C * L,
    ),
    "sqft_gc": VariantCostModel(
        "sqft_gc",
        macs_forward=lambda R, C, L, r: R * C * L + R * C + r * R * C,
        macs_backward=lambda R, C, L, r: 2 * R * C * L + 3 * r * R * C + 2 * R * C,
        saved_elements=lambda R, C, L, r: C * L,
    ),
    "spp": VariantCostModel(
        "spp",
        macs_forward=lambda R, C, L, r: 2 * R * C * L + 2 * R * C,
        macs_backward=lambda R, C, L, r: 3 * R * C * L + 3 * R * C,
        saved_elements=lambda R, C, L, r: 3 * R * C + C * L,
    ),
    "spp_gc": VariantCostModel(
        "spp_gc",
        macs_forward=lambda R, C, L, r: R * C * L + r * R * C + R * C,
        macs_backward=lambda R, C, L, r: 3 * R * C * L + 3 * r * R * C + 2 * R * C,
        saved_elements=lambda R, C, L, r: C * L,
    ),
    "lors": VariantCostModel(
        "lors",
        macs_forward=lambda R, C, L, r: R * C * L + r * R * C + R * C,
        macs_backward=lambda R, C, L, r: (
            R * C * L + 2 * r * R * L + 2 * r * C * L + r * R * C + R * C
        ),
        saved_elements=lambda R, C, L, r: C * L,
    ),
}


@dataclass
class CostPrediction:
    macs_forward: int
    macs_backward: int
    saved_elements: int


def predict_cost(variant: str, R: int, C: int, L: int, r: int) -> CostPrediction:
    """Evaluate the variant's cost model at a concrete shape."""
    if variant not in COST_MODELS:
        raise ArgumentError(f"unknown variant {variant!r}, expected one of {VARIANTS}")
    if min(R, C, L, r) < 1:
        raise ArgumentError(f"dimensions must be positive, got {(R, C, L, r)}")
    model = COST_MODELS[variant]
    pred = CostPrediction(
        macs_forward=model.macs_forward(R, C, L, r),
        macs_backward=model.macs_backward(R, C, L, r),
        saved_elements=model.saved_elements(R, C, L, r),
    )
    if FAULT_INJECTION["cost_model_off_by_one"]:
        pred.macs_backward += 1
    return pred


def merge(layer: AdaptedLayer) -> SparseWeight:
    """Finalize the layer into a plain sparse weight.

    Pair variants produce W + alpha * (AB) . M with the mask captured at
    construction; spp variants produce W + W . tile(A) . tile(B), which is
    masked by W itself. The result's pattern is a subset of the original.
    """
    w = layer.base.values
    if isinstance(layer.adapter, SppAdapter):
        adapter = layer.adapter
        rep_a = np.tile(adapter.a.data, (1, layer.in_features // adapter.rank))
        rep_b = np.tile(adapter.b.data, (layer.out_features, 1))
        merged = DenseMatrix(w.data + w.data * rep_a * rep_b)
    else:
        mask = DenseMatrix(layer.original_mask.astype(np.float64))
        merged = merged_weight(w, layer.adapter.a, layer.adapter.b,
                               layer.adapter.alpha, mask)
    merged.data[~layer.original_mask] = 0.0
    return SparseWeight(merged, pattern=layer.base.pattern, ratio=layer.base.ratio)
