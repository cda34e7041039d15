"""Single-use reverse-mode tape with MAC and saved-element accounting.

A ``Tape`` records a forward computation as a list of nodes. Each node holds
its output value, the ids of its inputs, a backward closure, and the list of
tensors it saved for the backward pass. ``backward`` walks the nodes in
reverse recording order exactly once, accumulating gradients for every node
that participates in the loss (fan-out sums in tape order). A tape can be
differentiated once; reuse raises GraphError.

Accounting rules (shared with the adapter layers):

- MACs: matmul m*k*n, hadamard m*n; recorded into macs_forward or
  macs_backward according to the counter's phase.
- Elementwise ops (adds, scalings, bias adds, reductions): 0 MACs, tallied
  into a separate elementwise bucket excluded from MAC comparisons.
- Saved elements: the node's saved list counts rows*cols per entry.
  Parameter tensors (frozen base weights, adapter factors, biases) are
  captured by backward closures without being counted: they are resident for
  the optimizer regardless, so saving them costs no extra memory. Only
  genuinely materialized activations and intermediates count.

Backward closures compute gradients only for inputs that require them, so
cost tallies respect what a given graph actually needs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import ArgumentError, GraphError, ShapeError
from . import matrix as mx
from .matrix import DenseMatrix


@dataclass
class CostCounters:
    """Cumulative cost tallies. Monotone until reset_counters."""

    macs_forward: int = 0
    macs_backward: int = 0
    saved_elements: int = 0
    elementwise_forward: int = 0
    elementwise_backward: int = 0
    phase: str = "forward"

    def add_macs(self, n: int) -> None:
        if self.phase == "forward":
            self.macs_forward += n
        else:
            self.macs_backward += n

    def add_elementwise(self, n: int) -> None:
        if self.phase == "forward":
            self.elementwise_forward += n
        else:
            self.elementwise_backward += n

    def add_saved(self, n: int) -> None:
        self.saved_elements += n


def reset_counters(counters: CostCounters) -> None:
    counters.macs_forward = 0
    counters.macs_backward = 0
    counters.saved_elements = 0
    counters.elementwise_forward = 0
    counters.elementwise_backward = 0
    counters.phase = "forward"


class SavedContext:
    """Tracks saved-for-backward footprint: per-node counts, total, peak.

    ``current`` rises as nodes save tensors during the forward pass and falls
    as backward consumes them, so ``peak`` reflects the largest simultaneously
    live saved set.
    """

    def __init__(self):
        self.per_node: dict[int, int] = {}
        self.pass_total = 0
        self.current = 0
        self.peak = 0

    def on_save(self, node_id: int, count: int) -> None:
        self.per_node[node_id] = count
        self.pass_total += count
        self.current += count
        if self.current > self.peak:
            self.peak = self.current

    def on_release(self, node_id: int) -> None:
        self.current -= self.per_node.get(node_id, 0)


@dataclass
class TapeNode:
    id: int
    op: str
    value: DenseMatrix
    inputs: tuple[int, ...]
    backward_fn: Optional[Callable]
    saved: tuple[DenseMatrix, ...] = ()
    requires_grad: bool = False
    is_param: bool = False
    name: str = ""

    @property
    def saved_element_count(self) -> int:
        return sum(t.rows * t.cols for t in self.saved)


class Tape:
    def __init__(self, counters: Optional[CostCounters] = None, track_saved: bool = True):
        self.counters = counters if counters is not None else CostCounters()
        self.track_saved = track_saved
        self.nodes: list[TapeNode] = []
        self.saved_ctx = SavedContext()
        self.consumed = False
        self.backward_invocations = 0

    # -- construction -------------------------------------------------------

    def leaf(self, value: DenseMatrix, requires_grad: bool = False,
             is_param: bool = False, name: str = "") -> int:
        node = TapeNode(
            id=len(self.nodes), op="leaf", value=value, inputs=(),
            backward_fn=None, requires_grad=requires_grad,
            is_param=is_param, name=name,
        )
        self.nodes.append(node)
        return node.id

    def record(self, op: str, inputs, value: DenseMatrix,
               backward_fn: Optional[Callable], saved=(), name: str = "") -> int:
        inputs = tuple(inputs)
        for i in inputs:
            if not (0 <= i < len(self.nodes)):
                raise GraphError(f"record({op}): dangling input id {i}")
        requires_grad = any(self.nodes[i].requires_grad for i in inputs)
        node = TapeNode(
            id=len(self.nodes), op=op, value=value, inputs=inputs,
            backward_fn=backward_fn, saved=tuple(saved),
            requires_grad=requires_grad, name=name,
        )
        self.nodes.append(node)
        count = node.saved_element_count
        if count:
            self.saved_ctx.on_save(node.id, count)
            if self.track_saved:
                self.counters.add_saved(count)
        return node.id

    def value(self, node_id: int) -> DenseMatrix:
        return self.nodes[node_id].value

    def node(self, node_id: int) -> TapeNode:
        return self.nodes[node_id]

    # -- differentiation ----------------------------------------------------

    def backward(self, loss_id: int, seed: Optional[DenseMatrix] = None) -> dict[int, DenseMatrix]:
        """Reverse pass from loss_id; returns node id -> gradient.

        Without an explicit seed the loss must be a 1x1 scalar and is seeded
        with 1.0. Each node's backward closure runs at most once; gradients
        fan in by summation in reverse tape order.
        """
        if self.consumed:
            raise GraphError("backward on a consumed tape")
        if not (0 <= loss_id < len(self.nodes)):
            raise GraphError(f"backward: dangling loss id {loss_id}")
        loss = self.nodes[loss_id]
        if seed is None:
            if loss.value.shape != (1, 1):
                raise ShapeError(
                    f"backward: loss must be 1x1, got {loss.value.rows}x{loss.value.cols}"
                )
            seed = DenseMatrix([[1.0]])
        elif seed.shape != loss.value.shape:
            raise ShapeError(
                f"backward: seed shape {seed.rows}x{seed.cols} does not match "
                f"node shape {loss.value.rows}x{loss.value.cols}"
            )
        self.consumed = True
        prior_phase = self.counters.phase
        self.counters.phase = "backward"
        grads: dict[int, DenseMatrix] = {loss_id: seed}
        try:
            for node in reversed(self.nodes[: loss_id + 1]):
                if node.id not in grads or node.backward_fn is None:
                    continue
                self.backward_invocations += 1
                input_grads = node.backward_fn(grads[node.id])
                for inp_id, g in zip(node.inputs, input_grads):
                    if g is None:
                        continue
                    if inp_id in grads:
                        grads[inp_id] = mx.add(grads[inp_id], g, self.counters)
                    else:
                        grads[inp_id] = g
                self.saved_ctx.on_release(node.id)
        finally:
            self.counters.phase = prior_phase
        return grads

    # -- primitive differentiable ops ----------------------------------------

    def matmul(self, a_id: int, b_id: int, name: str = "") -> int:
        a_node, b_node = self.nodes[a_id], self.nodes[b_id]
        a, b = a_node.value, b_node.value
        out = mx.matmul(a, b, self.counters)
        need_da = a_node.requires_grad
        need_db = b_node.requires_grad
        saved = []
        if need_da and not b_node.is_param:
            saved.append(b)
        if need_db and not a_node.is_param:
            saved.append(a)
        c = self.counters

        def bwd(dy):
            da = mx.matmul(dy, mx.transpose(b), c) if need_da else None
            db = mx.matmul(mx.transpose(a), dy, c) if need_db else None
            return (da, db)

        return self.record("matmul", (a_id, b_id), out, bwd, saved=saved, name=name)

    def hadamard(self, a_id: int, b_id: int, name: str = "") -> int:
        a_node, b_node = self.nodes[a_id], self.nodes[b_id]
        a, b = a_node.value, b_node.value
        out = mx.hadamard(a, b, self.counters)
        need_da = a_node.requires_grad
        need_db = b_node.requires_grad
        saved = []
        if need_da and not b_node.is_param:
            saved.append(b)
        if need_db and not a_node.is_param:
            saved.append(a)
        c = self.counters

        def bwd(dy):
            da = mx.hadamard(dy, b, c) if need_da else None
            db = mx.hadamard(dy, a, c) if need_db else None
            return (da, db)

        return self.record("hadamard", (a_id, b_id), out, bwd, saved=saved, name=name)

    def add(self, a_id: int, b_id: int, name: str = "") -> int:
        a_node, b_node = self.nodes[a_id], self.nodes[b_id]
        out = mx.add(a_node.value, b_node.value, self.counters)

        def bwd(dy):
            return (dy if a_node.requires_grad else None,
                    dy if b_node.requires_grad else None)

        return self.record("add", (a_id, b_id), out, bwd, name=name)

    def sub(self, a_id: int, b_id: int, name: str = "") -> int:
        a_node, b_node = self.nodes[a_id], self.nodes[b_id]
        out = mx.sub(a_node.value, b_node.value, self.counters)
        c = self.counters

        def bwd(dy):
            da = dy if a_node.requires_grad else None
            db = mx.scale(dy, -1.0, c) if b_node.requires_grad else None
            return (da, db)

        return self.record("sub", (a_id, b_id), out, bwd, name=name)

    def add_scaled(self, a_id: int, b_id: int, alpha: float, name: str = "") -> int:
        a_node, b_node = self.nodes[a_id], self.nodes[b_id]
        out = mx.add_scaled(a_node.value, b_node.value, alpha, self.counters)
        c = self.counters

        def bwd(dy):
            da = dy if a_node.requires_grad else None
            db = mx.scale(dy, alpha, c) if b_node.requires_grad else None
            return (da, db)

        return self.record("add_scaled", (a_id, b_id), out, bwd, name=name)

    def scale(self, a_id: int, alpha: float, name: str = "") -> int:
        a_node = self.nodes[a_id]
        out = mx.scale(a_node.value, alpha, self.counters)
        c = self.counters

        def bwd(dy):
            return (mx.scale(dy, alpha, c) if a_node.requires_grad else None,)

        return self.record("scale", (a_id,), out, bwd, name=name)

    def square(self, a_id: int, name: str = "") -> int:
        """Elementwise square; saves its input once (vs twice for hadamard(a, a))."""
        a_node = self.nodes[a_id]
        a = a_node.value
        out = mx.hadamard(a, a, self.counters)
        saved = [a] if (a_node.requires_grad and not a_node.is_param) else []
        c = self.counters

        def bwd(dy):
            if not a_node.requires_grad:
                return (None,)
            return (mx.scale(mx.hadamard(dy, a, c), 2.0, c),)

        return self.record("square", (a_id,), out, bwd, saved=saved, name=name)

    def relu(self, a_id: int, name: str = "") -> int:
        a_node = self.nodes[a_id]
        a = a_node.value
        out = mx.relu(a, self.counters)
        gate = DenseMatrix._wrap((a.data > 0.0).astype(np.float64))
        saved = [gate] if a_node.requires_grad else []
        c = self.counters

        def bwd(dy):
            if not a_node.requires_grad:
                return (None,)
            return (mx.hadamard(dy, gate, c),)

        return self.record("relu", (a_id,), out, bwd, saved=saved, name=name)

    def add_bias(self, a_id: int, bias_id: int, name: str = "") -> int:
        a_node, bias_node = self.nodes[a_id], self.nodes[bias_id]
        out = mx.add_bias(a_node.value, bias_node.value, self.counters)
        c = self.counters

        def bwd(dy):
            da = dy if a_node.requires_grad else None
            db = mx.reduce_sum_rows(dy, c) if bias_node.requires_grad else None
            return (da, db)

        return self.record("add_bias", (a_id, bias_id), out, bwd, name=name)

    def repeat_cols(self, a_id: int, times: int, name: str = "") -> int:
        """Tile the column block: [A A ... A], so out[:, q] = A[:, q mod r]."""
        a_node = self.nodes[a_id]
        a = a_node.value
        if times < 1:
            raise ArgumentError(f"repeat_cols: times must be positive, got {times}")
        out = DenseMatrix._wrap(np.tile(a.data, (1, times)))
        r = a.cols
        c = self.counters

        def bwd(dy):
            if not a_node.requires_grad:
                return (None,)
            c.add_elementwise(dy.rows * dy.cols)
            acc = dy.data.reshape(dy.rows, times, r).sum(axis=1)
            return (DenseMatrix._wrap(acc),)

        return self.record("repeat_cols", (a_id,), out, bwd, name=name)

    def repeat_rows(self, a_id: int, times: int, name: str = "") -> int:
        """Tile rows: stack `times` copies of a (1 x C) row vector."""
        a_node = self.nodes[a_id]
        a = a_node.value
        if times < 1:
            raise ArgumentError(f"repeat_rows: times must be positive, got {times}")
        out = DenseMatrix._wrap(np.tile(a.data, (times, 1)))
        c = self.counters

        def bwd(dy):
            if not a_node.requires_grad:
                return (None,)
            c.add_elementwise(dy.rows * dy.cols)
            acc = dy.data.reshape(times, a.rows, a.cols).sum(axis=0)
            return (DenseMatrix._wrap(acc),)

        return self.record("repeat_rows", (a_id,), out, bwd, name=name)

    def block_diag_rows(self, b_id: int, r: int, name: str = "") -> int:
        """Scatter a 1 x C row into an r x C matrix with out[q mod r, q] = b[q].

        Column blocks of width r are then diagonal sub-blocks holding the
        corresponding segment of b. Pure data movement (0 MACs).
        """
        b_node = self.nodes[b_id]
        b = b_node.value
        if b.rows != 1:
            raise ShapeError(f"block_diag_rows: expected a 1xC row, got {b.rows}x{b.cols}")
        if b.cols % r != 0:
            raise ArgumentError(f"block_diag_rows: r={r} must divide C={b.cols}")
        cols = b.cols
        out = np.zeros((r, cols))
        idx = np.arange(cols)
        out[idx % r, idx] = b.data[0]
        c = self.counters

        def bwd(dy):
            if not b_node.requires_grad:
                return (None,)
            c.add_elementwise(r * cols)
            return (DenseMatrix._wrap(dy.data[idx % r, idx].reshape(1, cols)),)

        return self.record("block_diag_rows", (b_id,), DenseMatrix._wrap(out), bwd, name=name)

    def sum_all(self, a_id: int, name: str = "") -> int:
        a_node = self.nodes[a_id]
        a = a_node.value
        self.counters.add_elementwise(a.rows * a.cols)
        out = DenseMatrix._wrap(np.array([[a.data.sum()]]))
        c = self.counters

        def bwd(dy):
            if not a_node.requires_grad:
                return (None,)
            c.add_elementwise(a.rows * a.cols)
            return (DenseMatrix._wrap(np.full((a.rows, a.cols), dy.data[0, 0])),)

        return self.record("sum_all", (a_id,), out, bwd, name=name)

    def softmax_cross_entropy(self, logits_id: int, labels: np.ndarray, name: str = "") -> int:
        """Mean cross-entropy over columns of K x L logits; labels in [0, K).

        Saves the K x L probability matrix for the backward pass.
        """
        logits_node = self.nodes[logits_id]
        z = logits_node.value
        labels = np.asarray(labels, dtype=np.int64)
        if labels.shape != (z.cols,):
            raise ShapeError(
                f"softmax_cross_entropy: need {z.cols} labels for {z.rows}x{z.cols} logits, "
                f"got {labels.shape}"
            )
        shifted = z.data - z.data.max(axis=0, keepdims=True)
        ez = np.exp(shifted)
        probs = ez / ez.sum(axis=0, keepdims=True)
        self.counters.add_elementwise(3 * z.rows * z.cols)
        picked = probs[labels, np.arange(z.cols)]
        loss = float(-np.mean(np.log(np.maximum(picked, 1e-300))))
        out = DenseMatrix([[loss]])
        probs_m = DenseMatrix._wrap(probs)
        saved = [probs_m] if logits_node.requires_grad else []
        c = self.counters
        n = z.cols

        def bwd(dy):
            if not logits_node.requires_grad:
                return (None,)
            c.add_elementwise(z.rows * z.cols)
            g = probs.copy()
            g[labels, np.arange(n)] -= 1.0
            g *= dy.data[0, 0] / n
            return (DenseMatrix._wrap(g),)

        return self.record("softmax_cross_entropy", (logits_id,), out, bwd,
                           saved=saved, name=name)
