"""Reverse-mode differentiation over a recorded computation tape.

Small by design: just the primitives the discretized hedging loss needs
(add, sub, mul, div, matvec, silu, sigmoid, pospart, square, mean, plus
pair-stacking to assemble network inputs).  Values are float64 numpy
arrays.  A node is either "shared" (parameters, scalar constants) or
"batched", carrying a leading Monte Carlo sample axis; batching lets one
tape evaluate and differentiate a whole batch of paths at once.

Two backward passes are provided:

* ``backward`` - gradient of a scalar output with respect to every
  registered parameter slot (batch contributions summed), used by the
  gradient estimators;
* ``backward_per_sample`` - per-sample gradients of a batched output,
  one row per path, used by the decay diagnostics.

Gradients are deterministic: identical tapes replay identical float
operations in identical order.
"""

from __future__ import annotations

import numpy as np


class TapeError(ValueError):
    """Shape mismatch or misuse of the tape API."""


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # Split by sign to stay overflow-free for large |z|.
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


class Tape:
    """Append-only record of primitive operations.

    Single-writer while recording, single-reader during backward; use
    one tape per (batch of) Monte Carlo sample(s).
    """

    def __init__(self):
        self.values: list[np.ndarray] = []
        self.batched: list[bool] = []
        self.ops: list[tuple] = []  # (opcode, out_id, input_ids, aux)
        self.parameter_slots: list[int] = []

    # -- node creation -------------------------------------------------

    def _new_node(self, value, batched: bool) -> int:
        self.values.append(np.asarray(value, dtype=np.float64))
        self.batched.append(batched)
        return len(self.values) - 1

    def constant(self, value, batched: bool = False) -> int:
        """A non-differentiable input (market data, increments, time grid)."""
        return self._new_node(value, batched)

    def parameter(self, value) -> int:
        """A differentiable leaf; backward returns one gradient per slot."""
        node = self._new_node(value, batched=False)
        self.parameter_slots.append(node)
        return node

    def value(self, node: int) -> np.ndarray:
        return self.values[node]

    # -- shape bookkeeping ----------------------------------------------

    def _eff_shape(self, node: int) -> tuple:
        """Shape without the batch axis."""
        shape = self.values[node].shape
        return shape[1:] if self.batched[node] else shape

    def _batch_size(self, node: int):
        return self.values[node].shape[0] if self.batched[node] else None

    def _record_elementwise(self, opcode: str, a: int, b: int,
                            value: np.ndarray, aux=None) -> int:
        batched = self.batched[a] or self.batched[b]
        try:
            eff = np.broadcast_shapes(self._eff_shape(a), self._eff_shape(b))
        except ValueError as exc:
            raise TapeError(f"{opcode}: non-conforming shapes "
                            f"{self.values[a].shape} vs {self.values[b].shape}") from exc
        sizes = {s for s in (self._batch_size(a), self._batch_size(b))
                 if s is not None}
        if len(sizes) > 1:
            raise TapeError(f"{opcode}: mismatched batch sizes {sizes}")
        expect = ((sizes.pop(),) + eff) if batched else eff
        if value.shape != expect:
            raise TapeError(f"{opcode}: result shape {value.shape} != "
                            f"expected {expect}")
        out = self._new_node(value, batched)
        self.ops.append((opcode, out, (a, b), aux))
        return out

    def _record_unary(self, opcode: str, a: int, value: np.ndarray,
                      aux=None) -> int:
        out = self._new_node(value, self.batched[a])
        self.ops.append((opcode, out, (a,), aux))
        return out

    # -- primitives ------------------------------------------------------

    def add(self, a: int, b: int) -> int:
        return self._record_elementwise(
            "add", a, b, self.values[a] + self.values[b])

    def sub(self, a: int, b: int) -> int:
        return self._record_elementwise(
            "sub", a, b, self.values[a] - self.values[b])

    def mul(self, a: int, b: int) -> int:
        return self._record_elementwise(
            "mul", a, b, self.values[a] * self.values[b])

    def div(self, a: int, b: int) -> int:
        if np.any(self.values[b] == 0.0):
            raise ZeroDivisionError("div: zero in denominator")
        return self._record_elementwise(
            "div", a, b, self.values[a] / self.values[b])

    def matvec(self, w: int, x: int) -> int:
        """w @ x with a shared weight: 2-d w maps (n,) -> (m,); 1-d w is a
        dot product.  A batched x carries the product row-wise."""
        wv, xv = self.values[w], self.values[x]
        if self.batched[w]:
            raise TapeError("matvec: weight operand must be shared")
        if wv.ndim not in (1, 2):
            raise TapeError(f"matvec: weight must be 1-d or 2-d, got {wv.ndim}-d")
        n = wv.shape[-1]
        if self._eff_shape(x) != (n,):
            raise TapeError(f"matvec: operand shape {xv.shape} does not "
                            f"conform to weight {wv.shape}")
        if self.batched[x]:
            value = xv @ wv.T if wv.ndim == 2 else xv @ wv
        else:
            value = wv @ xv
        out = self._new_node(value, self.batched[x])
        self.ops.append(("matvec", out, (w, x), None))
        return out

    def silu(self, a: int) -> int:
        s = _sigmoid(self.values[a])
        return self._record_unary("silu", a, self.values[a] * s, aux=s)

    def sigmoid(self, a: int) -> int:
        return self._record_unary("sigmoid", a, _sigmoid(self.values[a]))

    def pospart(self, a: int) -> int:
        """max(z, 0); the derivative at exactly 0 is taken to be 0."""
        return self._record_unary("pospart", a,
                                  np.maximum(self.values[a], 0.0))

    def square(self, a: int) -> int:
        return self._record_unary("square", a, self.values[a] ** 2)

    def mean(self, a: int) -> int:
        """Average a batched or 1-d node down to a shared scalar."""
        v = self.values[a]
        if v.ndim != 1:
            raise TapeError(f"mean: expected a 1-d node, got shape {v.shape}")
        out = self._new_node(np.mean(v), batched=False)
        self.ops.append(("mean", out, (a,), v.shape[0]))
        return out

    def stack_pair(self, a: int, b: int) -> int:
        """Assemble two scalar-per-sample nodes into length-2 vectors."""
        if self._eff_shape(a) != () or self._eff_shape(b) != ():
            raise TapeError("stack_pair: operands must be scalar per sample")
        batched = self.batched[a] or self.batched[b]
        va, vb = self.values[a], self.values[b]
        if batched:
            sizes = {s for s in (self._batch_size(a), self._batch_size(b))
                     if s is not None}
            if len(sizes) > 1:
                raise TapeError(f"stack_pair: mismatched batch sizes {sizes}")
            n = sizes.pop()
            value = np.empty((n, 2))
            value[:, 0] = va
            value[:, 1] = vb
        else:
            value = np.array([va, vb], dtype=np.float64)
        out = self._new_node(value, batched)
        self.ops.append(("stack_pair", out, (a, b), None))
        return out


# -- backward ------------------------------------------------------------


def _reduce_to(adj: np.ndarray, target: tuple) -> np.ndarray:
    """Sum a broadcast adjoint back down to `target` shape."""
    while adj.ndim > len(target):
        adj = adj.sum(axis=0)
    for axis, size in enumerate(target):
        if size == 1 and adj.shape[axis] != 1:
            adj = adj.sum(axis=axis, keepdims=True)
    return adj


def _reduce_keep_batch(adj: np.ndarray, eff: tuple, nbatch: int) -> np.ndarray:
    """Like _reduce_to but onto (nbatch,) + eff, never collapsing axis 0."""
    target = (nbatch,) + eff
    while adj.ndim > len(target):
        adj = adj.sum(axis=1)
    for axis in range(1, len(target)):
        if target[axis] == 1 and adj.shape[axis] != 1:
            adj = adj.sum(axis=axis, keepdims=True)
    return adj


def _backward_sweep(tape: Tape, out: int, seed_adjoint: np.ndarray,
                    per_sample: int | None) -> list[np.ndarray]:
    """Shared reverse sweep.  per_sample is the batch size when computing
    per-sample gradients (adjoints keep a leading batch axis), else None."""
    adjoints: list = [None] * len(tape.values)
    adjoints[out] = seed_adjoint

    def accumulate(node: int, contrib: np.ndarray) -> None:
        eff = tape._eff_shape(node)
        if per_sample is not None:
            contrib = _reduce_keep_batch(np.asarray(contrib), eff, per_sample)
        else:
            target = tape.values[node].shape
            contrib = _reduce_to(np.asarray(contrib), target)
        if adjoints[node] is None:
            adjoints[node] = contrib
        else:
            adjoints[node] = adjoints[node] + contrib

    for opcode, node, ins, aux in reversed(tape.ops):
        adj = adjoints[node]
        if adj is None:
            continue
        if opcode == "add":
            accumulate(ins[0], adj)
            accumulate(ins[1], adj)
        elif opcode == "sub":
            accumulate(ins[0], adj)
            accumulate(ins[1], -adj)
        elif opcode == "mul":
            a, b = ins
            accumulate(a, adj * tape.values[b])
            accumulate(b, adj * tape.values[a])
        elif opcode == "div":
            a, b = ins
            accumulate(a, adj / tape.values[b])
            accumulate(b, -adj * tape.values[node] / tape.values[b])
        elif opcode == "matvec":
            w, x = ins
            wv, xv = tape.values[w], tape.values[x]
            x_batched = tape.batched[x]
            adj_has_batch = per_sample is not None or x_batched
            if wv.ndim == 2:
                if adj_has_batch and adj.ndim == 2:
                    if x_batched:
                        adj_w = (np.einsum("bm,bn->bmn", adj, xv)
                                 if per_sample is not None
                                 else np.einsum("bm,bn->mn", adj, xv))
                    else:
                        adj_w = np.einsum("bm,n->bmn", adj, xv)
                    adj_x = adj @ wv
                else:
                    adj_w = np.outer(adj, xv)
                    adj_x = adj @ wv
            else:  # dot product with a 1-d weight
                if adj_has_batch and adj.ndim == 1:
                    if x_batched:
                        adj_w = (adj[:, None] * xv if per_sample is not None
                                 else adj @ xv)
                    else:
                        adj_w = adj[:, None] * xv[None, :]
                    adj_x = adj[:, None] * wv[None, :]
                else:
                    adj_w = adj * xv
                    adj_x = adj * wv
            accumulate(w, adj_w)
            accumulate(x, adj_x)
        elif opcode == "silu":
            s = aux
            accumulate(ins[0], adj * (s * (1.0 + tape.values[ins[0]] * (1.0 - s))))
        elif opcode == "sigmoid":
            s = tape.values[node]
            accumulate(ins[0], adj * s * (1.0 - s))
        elif opcode == "pospart":
            accumulate(ins[0], adj * (tape.values[ins[0]] > 0.0))
        elif opcode == "square":
            accumulate(ins[0], adj * 2.0 * tape.values[ins[0]])
        elif opcode == "mean":
            if per_sample is not None:
                raise TapeError("mean mixes samples; per-sample gradients "
                                "are undefined through it")
            accumulate(ins[0],
                       np.broadcast_to(adj / aux, tape.values[ins[0]].shape))
        elif opcode == "stack_pair":
            accumulate(ins[0], adj[..., 0])
            accumulate(ins[1], adj[..., 1])
        else:  # pragma: no cover - every opcode above is handled
            raise TapeError(f"unknown opcode {opcode!r}")

    grads = []
    for slot in tape.parameter_slots:
        adj = adjoints[slot]
        if adj is None:
            eff = tape.values[slot].shape
            shape = ((per_sample,) + eff) if per_sample is not None else eff
            adj = np.zeros(shape)
        grads.append(adj)
    return grads


def backward(tape: Tape, out: int) -> list[np.ndarray]:
    """Gradients of the scalar node `out` for every parameter slot."""
    if tape.batched[out] or tape.values[out].shape != ():
        raise TapeError(
            f"backward: output must be a shared scalar node, got shape "
            f"{tape.values[out].shape} (batched={tape.batched[out]})")
    return _backward_sweep(tape, out, np.asarray(1.0), per_sample=None)


def backward_per_sample(tape: Tape, out: int) -> list[np.ndarray]:
    """Per-sample gradients of a batched scalar-per-sample node.

    Returns one array of shape (batch,) + slot_shape per parameter slot,
    row i holding the gradient of out[i].
    """
    if not tape.batched[out] or tape.values[out].ndim != 1:
        raise TapeError(
            "backward_per_sample: output must be a batched per-sample scalar")
    n = tape.values[out].shape[0]
    return _backward_sweep(tape, out, np.ones(n), per_sample=n)
