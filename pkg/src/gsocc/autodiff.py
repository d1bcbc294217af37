"""Reverse-mode gradients over a tape of coarse, hand-differentiated kernels.

The tape is not a general autodiff system: it records calls to a fixed set of
:class:`Primitive` kernels (attention, decode head, fusion, splatting, loss,
row gather/scatter), each of which ships its own analytic backward.
Discrete selections made while building the graph (neighbor indices,
argmax class masks) are passed as static arguments and are therefore
constants for differentiation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import attention as _att
from .exceptions import InvalidTapeError, NumericInputError


@dataclass(frozen=True)
class Primitive:
    name: str
    forward: Callable
    backward: Callable
    n_out: int = 1


@dataclass(eq=False)
class Var:
    tape: "GradientTape"
    key: int
    value: np.ndarray

    @property
    def shape(self):
        return self.value.shape


@dataclass(eq=False)
class _Node:
    prim: Primitive
    inputs: tuple
    outputs: tuple
    static: dict
    cache: object = field(repr=False)


class GradientTape:
    """Ordered record of executed primitives with saved activations."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._values: dict[int, np.ndarray] = {}
        self._leaves: dict[int, str | None] = {}
        self._next = 0

    def _new_key(self) -> int:
        self._next += 1
        return self._next

    def var(self, value, name: str | None = None) -> Var:
        """Register a leaf (parameter or input)."""
        key = self._new_key()
        value = np.asarray(value, dtype=np.float64)
        self._values[key] = value
        self._leaves[key] = name
        return Var(self, key, value)

    def apply(self, prim: Primitive, *inputs: Var, **static):
        for v in inputs:
            if v.tape is not self:
                raise InvalidTapeError(f"{prim.name}: input recorded on a different tape")
        outs, cache = prim.forward(*(v.value for v in inputs), **static)
        out_vars = []
        for o in outs:
            key = self._new_key()
            self._values[key] = o
            out_vars.append(Var(self, key, o))
        self.nodes.append(
            _Node(prim, tuple(v.key for v in inputs), tuple(v.key for v in out_vars), static, cache)
        )
        return out_vars[0] if prim.n_out == 1 else tuple(out_vars)

    def backward(self, output: Var, grad=None) -> dict[int, np.ndarray]:
        """Cotangents for every key reachable from ``output``.

        ``grad`` defaults to 1 for a scalar output.
        """
        if not isinstance(output, Var) or output.tape is not self or output.key not in self._values:
            raise InvalidTapeError("output was not recorded on this tape")
        if grad is None:
            if output.value.size != 1:
                raise InvalidTapeError("a non-scalar output needs an explicit gradient")
            grad = np.ones_like(output.value)
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != output.value.shape:
            raise InvalidTapeError(
                f"gradient shape {grad.shape} does not match output shape {output.value.shape}"
            )
        grads: dict[int, np.ndarray] = {output.key: grad}
        for node in reversed(self.nodes):
            out_grads = [grads.get(k) for k in node.outputs]
            if all(g is None for g in out_grads):
                continue
            if node.prim.n_out == 1:
                in_grads = node.prim.backward(node.cache, out_grads[0])
            else:
                in_grads = node.prim.backward(node.cache, *out_grads)
            for key, g in zip(node.inputs, in_grads):
                if g is None:
                    continue
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
        return grads

    def grad_of(self, grads: dict, var: Var) -> np.ndarray:
        return grads.get(var.key, np.zeros_like(var.value))

    def replay(self) -> bool:
        """Re-run every recorded forward from the leaves; True iff bit-identical."""
        values = {k: v for k, v in self._values.items() if k in self._leaves}
        for node in self.nodes:
            outs, _ = node.prim.forward(*(values[k] for k in node.inputs), **node.static)
            for key, o in zip(node.outputs, outs):
                if not np.array_equal(o, self._values[key], equal_nan=True):
                    return False
                values[key] = o
        return True


def backward(tape: GradientTape, loss: Var, loss_grad=None, wrt: dict | None = None) -> dict:
    """Run the backward pass; with ``wrt`` ({name: Var}) return named gradients."""
    grads = tape.backward(loss, loss_grad)
    if wrt is None:
        return grads
    return {name: tape.grad_of(grads, v) for name, v in wrt.items()}


# --- generic row primitives ----------------------------------------------------


def _take_rows_fwd(X, *, rows):
    return (X[rows],), (X.shape, rows)


def _take_rows_bwd(cache, d):
    shape, rows = cache
    out = np.zeros(shape)
    np.add.at(out, rows, d)
    return (out,)


def _merge_rows_fwd(A, B, *, rows_a, rows_b, n):
    out = np.empty((n, A.shape[1]))
    out[rows_a] = A
    out[rows_b] = B
    return (out,), (rows_a, rows_b)


def _merge_rows_bwd(cache, d):
    rows_a, rows_b = cache
    return d[rows_a], d[rows_b]


def _sum_fwd(X):
    return (np.asarray(X.sum()),), X.shape


def _sum_bwd(shape, d):
    return (np.full(shape, float(d)),)


def _weighted_sum_fwd(X, *, weights):
    return (np.asarray(np.sum(X * weights)),), weights


def _weighted_sum_bwd(weights, d):
    return (float(d) * weights,)


TAKE_ROWS = Primitive("take_rows", _take_rows_fwd, _take_rows_bwd)
MERGE_ROWS = Primitive("merge_rows", _merge_rows_fwd, _merge_rows_bwd)
SUM = Primitive("sum", _sum_fwd, _sum_bwd)
WEIGHTED_SUM = Primitive("weighted_sum", _weighted_sum_fwd, _weighted_sum_bwd)
ATTENTION = Primitive("attention", _att.attention_forward, _att.attention_backward, n_out=2)
REFINE = Primitive("refine", _att.refine_forward, _att.refine_backward)
CONSTRAIN = Primitive("constrain", _att.constrain_forward, _att.constrain_backward)
RELU_LAYER = Primitive("relu_layer", _att.relu_layer_forward, _att.relu_layer_backward)


# --- finite differences ------------------------------------------------------------


def fd_gradient(func: Callable, point, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function."""
    x = np.array(point, dtype=np.float64, copy=True)
    g = np.empty_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(func(x))
        flat[i] = orig - eps
        fm = float(func(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericInputError(f"non-finite function value near coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * eps)
    return g


def relative_error(a, b, floor: float = 1e-8) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def fd_check(func: Callable, grad, point, eps: float = 1e-5) -> float:
    """Max relative error between an analytic gradient and central differences.

    ``grad`` is either the analytic gradient at ``point`` or a callable that
    returns it.
    """
    point = np.asarray(point, dtype=np.float64)
    analytic = grad(point) if callable(grad) else grad
    analytic = np.asarray(analytic, dtype=np.float64)
    if analytic.shape != point.shape:
        raise NumericInputError("analytic gradient shape does not match the point")
    if not np.all(np.isfinite(analytic)):
        raise NumericInputError("analytic gradient is not finite")
    numeric = fd_gradient(func, point, eps)
    if numeric.size == 0:
        return 0.0
    return float(relative_error(analytic, numeric).max())
