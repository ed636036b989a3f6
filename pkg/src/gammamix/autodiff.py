"""Reverse-mode differentiation on a flat tape of numpy primitives.

Desk-scale engine: one tape records one scalar objective over named
float64 parameter arrays, and ``backward`` accumulates exact gradients
into the owning :class:`ParamStore`. No graph rewriting, no higher-order
derivatives, no GPU. Everything is float64 so finite-difference checks
are meaningful.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "DomainError",
    "GradCheckError",
    "ParamStore",
    "Tape",
    "Var",
    "record",
    "backward",
    "grad_check",
]


class DomainError(ValueError):
    """A primitive was evaluated outside its domain (log / divide)."""

    def __init__(self, op: str, node: int, detail: str):
        super().__init__(f"{op} at tape node {node}: {detail}")
        self.op = op
        self.node = node


class GradCheckError(RuntimeError):
    """grad_check met a non-finite analytic or numeric value."""


def _f64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # stable on both tails
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softplus(x: np.ndarray) -> np.ndarray:
    # max(x, 0) + log1p(exp(-|x|)) is exact on both branches
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


class ParamStore:
    """Named float64 parameter arrays plus same-shaped gradient buffers."""

    def __init__(self) -> None:
        self._values: dict[str, np.ndarray] = {}
        self._grads: dict[str, np.ndarray] = {}

    def add(self, name: str, value) -> np.ndarray:
        if name in self._values:
            raise KeyError(f"parameter {name!r} already registered")
        arr = _f64(value).copy()
        self._values[name] = arr
        self._grads[name] = np.zeros_like(arr)
        return arr

    def __contains__(self, name: str) -> bool:
        return name in self._values

    def names(self) -> list[str]:
        return list(self._values)

    def value(self, name: str) -> np.ndarray:
        return self._values[name]

    def grad(self, name: str) -> np.ndarray:
        return self._grads[name]

    def set_value(self, name: str, value) -> None:
        arr = _f64(value)
        if arr.shape != self._values[name].shape:
            raise ValueError(
                f"shape mismatch for {name!r}: {arr.shape} vs {self._values[name].shape}"
            )
        self._values[name][...] = arr

    def zero_grads(self) -> None:
        for g in self._grads.values():
            g[...] = 0.0

    def grads_finite(self) -> bool:
        return all(np.all(np.isfinite(g)) for g in self._grads.values())

    def nonfinite_grad_names(self) -> list[str]:
        return [n for n, g in self._grads.items() if not np.all(np.isfinite(g))]

    def grad_norm(self) -> float:
        total = 0.0
        for g in self._grads.values():
            total += float(np.sum(g * g))
        return float(np.sqrt(total))

    def scale_grads(self, factor: float) -> None:
        for g in self._grads.values():
            g *= factor

    def copy(self) -> "ParamStore":
        dup = ParamStore()
        for name, arr in self._values.items():
            dup.add(name, arr)
            dup._grads[name][...] = self._grads[name]
        return dup

    def n_scalars(self) -> int:
        return sum(v.size for v in self._values.values())


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` over the axes that numpy broadcasting expanded."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


class Var:
    """Handle to one tape node. Supports arithmetic with autoconversion."""

    __slots__ = ("tape", "idx")

    def __init__(self, tape: "Tape", idx: int):
        self.tape = tape
        self.idx = idx

    @property
    def value(self) -> np.ndarray:
        return self.tape._vals[self.idx]

    @property
    def shape(self) -> tuple[int, ...]:
        return self.tape._vals[self.idx].shape

    def __add__(self, other):
        return self.tape.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return self.tape.sub(self, other)

    def __rsub__(self, other):
        return self.tape.sub(other, self)

    def __mul__(self, other):
        return self.tape.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return self.tape.div(self, other)

    def __rtruediv__(self, other):
        return self.tape.div(other, self)

    def __neg__(self):
        return self.tape.neg(self)


class Tape:
    """Topologically ordered record of primitive operations.

    Node k stores its op name, input node ids, auxiliary payload
    (indices, slice bounds, parameter name) and the computed value.
    Inputs always precede the node, so one reversed sweep in
    :meth:`backward` propagates adjoints exactly.
    """

    def __init__(self, params: ParamStore | None = None):
        self.params = params
        self._ops: list[str] = []
        self._args: list[tuple[int, ...]] = []
        self._aux: list = []
        self._vals: list[np.ndarray] = []
        self._param_nodes: dict[str, int] = {}
        self.output: Var | None = None

    def __len__(self) -> int:
        return len(self._ops)

    # ---- node construction -------------------------------------------------

    def _push(self, op: str, args: tuple[int, ...], value: np.ndarray, aux=None) -> Var:
        self._ops.append(op)
        self._args.append(args)
        self._aux.append(aux)
        self._vals.append(value)
        return Var(self, len(self._ops) - 1)

    def _var(self, x) -> Var:
        if isinstance(x, Var):
            if x.tape is not self:
                raise ValueError("Var belongs to a different tape")
            return x
        return self.const(x)

    def const(self, x) -> Var:
        return self._push("const", (), _f64(x))

    def param(self, name: str) -> Var:
        if self.params is None:
            raise ValueError("tape has no ParamStore attached")
        if name not in self.params:
            raise KeyError(f"unknown parameter {name!r}")
        if name in self._param_nodes:
            return Var(self, self._param_nodes[name])
        var = self._push("param", (), self.params.value(name), aux=name)
        self._param_nodes[name] = var.idx
        return var

    # ---- primitives ---------------------------------------------------------

    def add(self, a, b) -> Var:
        a, b = self._var(a), self._var(b)
        return self._push("add", (a.idx, b.idx), a.value + b.value)

    def sub(self, a, b) -> Var:
        a, b = self._var(a), self._var(b)
        return self._push("sub", (a.idx, b.idx), a.value - b.value)

    def mul(self, a, b) -> Var:
        a, b = self._var(a), self._var(b)
        return self._push("mul", (a.idx, b.idx), a.value * b.value)

    def div(self, a, b) -> Var:
        a, b = self._var(a), self._var(b)
        if np.any(b.value == 0.0):
            raise DomainError("div", len(self._ops), "zero divisor")
        return self._push("div", (a.idx, b.idx), a.value / b.value)

    def neg(self, a) -> Var:
        a = self._var(a)
        return self._push("neg", (a.idx,), -a.value)

    def exp(self, a) -> Var:
        a = self._var(a)
        with np.errstate(over="ignore"):  # overflow propagates as inf, flagged after backward
            return self._push("exp", (a.idx,), np.exp(a.value))

    def log(self, a) -> Var:
        a = self._var(a)
        if np.any(a.value <= 0.0):
            raise DomainError("log", len(self._ops), "nonpositive input")
        return self._push("log", (a.idx,), np.log(a.value))

    def square(self, a) -> Var:
        a = self._var(a)
        return self._push("square", (a.idx,), a.value * a.value)

    def softplus(self, a) -> Var:
        a = self._var(a)
        return self._push("softplus", (a.idx,), _softplus(a.value))

    def tanh(self, a) -> Var:
        a = self._var(a)
        return self._push("tanh", (a.idx,), np.tanh(a.value))

    def dot(self, a, b) -> Var:
        a, b = self._var(a), self._var(b)
        if a.value.ndim != 1 or b.value.ndim != 1:
            raise ValueError("dot expects two 1-d vectors")
        return self._push("dot", (a.idx, b.idx), _f64(a.value @ b.value))

    def matmul(self, a, b) -> Var:
        a, b = self._var(a), self._var(b)
        if a.value.ndim != 2 or b.value.ndim not in (1, 2):
            raise ValueError("matmul expects (matrix, matrix) or (matrix, vector)")
        return self._push("matmul", (a.idx, b.idx), a.value @ b.value)

    def sum(self, a) -> Var:
        a = self._var(a)
        return self._push("sum", (a.idx,), _f64(a.value.sum()))

    def row_sum(self, a) -> Var:
        a = self._var(a)
        if a.value.ndim != 2:
            raise ValueError("row_sum expects a matrix")
        return self._push("row_sum", (a.idx,), a.value.sum(axis=1))

    def gather_rows(self, a, idx) -> Var:
        a = self._var(a)
        idx = np.asarray(idx, dtype=np.intp)
        if idx.ndim != 1:
            raise ValueError("gather_rows expects a 1-d index array")
        return self._push("gather", (a.idx,), a.value[idx], aux=idx)

    def segment_sum(self, a, idx, n_segments: int) -> Var:
        a = self._var(a)
        idx = np.asarray(idx, dtype=np.intp)
        if idx.shape != (a.value.shape[0],):
            raise ValueError("segment index must have one entry per row")
        out = np.zeros((n_segments,) + a.value.shape[1:])
        np.add.at(out, idx, a.value)
        return self._push("segsum", (a.idx,), out, aux=idx)

    def slice_cols(self, a, start: int, stop: int) -> Var:
        a = self._var(a)
        if a.value.ndim != 2:
            raise ValueError("slice_cols expects a matrix")
        return self._push("slice", (a.idx,), a.value[:, start:stop].copy(), aux=(start, stop))

    # ---- reverse sweep ------------------------------------------------------

    def backward(self, out: Var | None = None) -> None:
        """Accumulate d(out)/d(param) into the ParamStore gradient buffers."""
        if out is None:
            out = self.output
        if out is None:
            raise ValueError("no output variable recorded")
        if out.value.shape != ():
            raise ValueError("backward target must be scalar")

        adj: list[np.ndarray | None] = [None] * len(self._ops)
        adj[out.idx] = np.ones(())

        def acc(i: int, g: np.ndarray) -> None:
            if self._ops[i] == "const":
                return  # constants absorb no gradient
            if adj[i] is None:
                adj[i] = np.zeros_like(self._vals[i])
            adj[i] += g

        # overflow / nan propagate silently; callers inspect grads_finite()
        with np.errstate(over="ignore", invalid="ignore"):
            self._sweep(out, adj, acc)

    def _sweep(self, out: Var, adj: list, acc) -> None:
        for k in range(out.idx, -1, -1):
            g = adj[k]
            if g is None:
                continue
            op = self._ops[k]
            args = self._args[k]
            if op == "const":
                continue
            if op == "param":
                self.params.grad(self._aux[k])[...] += g
                continue
            if op == "add":
                a, b = args
                acc(a, _unbroadcast(g, self._vals[a].shape))
                acc(b, _unbroadcast(g, self._vals[b].shape))
            elif op == "sub":
                a, b = args
                acc(a, _unbroadcast(g, self._vals[a].shape))
                acc(b, _unbroadcast(-g, self._vals[b].shape))
            elif op == "mul":
                a, b = args
                acc(a, _unbroadcast(g * self._vals[b], self._vals[a].shape))
                acc(b, _unbroadcast(g * self._vals[a], self._vals[b].shape))
            elif op == "div":
                a, b = args
                acc(a, _unbroadcast(g / self._vals[b], self._vals[a].shape))
                acc(b, _unbroadcast(-g * self._vals[a] / (self._vals[b] ** 2), self._vals[b].shape))
            elif op == "neg":
                acc(args[0], -g)
            elif op == "exp":
                acc(args[0], g * self._vals[k])
            elif op == "log":
                acc(args[0], g / self._vals[args[0]])
            elif op == "square":
                acc(args[0], 2.0 * g * self._vals[args[0]])
            elif op == "softplus":
                acc(args[0], g * _sigmoid(self._vals[args[0]]))
            elif op == "tanh":
                acc(args[0], g * (1.0 - self._vals[k] ** 2))
            elif op == "dot":
                a, b = args
                acc(a, g * self._vals[b])
                acc(b, g * self._vals[a])
            elif op == "matmul":
                a, b = args
                av, bv = self._vals[a], self._vals[b]
                if bv.ndim == 2:
                    acc(a, g @ bv.T)
                    acc(b, av.T @ g)
                else:
                    acc(a, np.outer(g, bv))
                    acc(b, av.T @ g)
            elif op == "sum":
                acc(args[0], np.broadcast_to(g, self._vals[args[0]].shape).copy())
            elif op == "row_sum":
                acc(args[0], np.broadcast_to(g[:, None], self._vals[args[0]].shape).copy())
            elif op == "gather":
                src_shape = self._vals[args[0]].shape
                contrib = np.zeros(src_shape)
                np.add.at(contrib, self._aux[k], g)
                acc(args[0], contrib)
            elif op == "segsum":
                acc(args[0], g[self._aux[k]])
            elif op == "slice":
                start, stop = self._aux[k]
                contrib = np.zeros_like(self._vals[args[0]])
                contrib[:, start:stop] = g
                acc(args[0], contrib)
            else:  # pragma: no cover
                raise NotImplementedError(op)

    # ---- diagnostics ---------------------------------------------------------

    def replay_exact(self) -> bool:
        """Recompute every node from its recorded inputs; True iff bit-identical."""
        for k, op in enumerate(self._ops):
            if op in ("const", "param"):
                continue
            ins = [self._vals[i] for i in self._args[k]]
            aux = self._aux[k]
            if op == "add":
                v = ins[0] + ins[1]
            elif op == "sub":
                v = ins[0] - ins[1]
            elif op == "mul":
                v = ins[0] * ins[1]
            elif op == "div":
                v = ins[0] / ins[1]
            elif op == "neg":
                v = -ins[0]
            elif op == "exp":
                v = np.exp(ins[0])
            elif op == "log":
                v = np.log(ins[0])
            elif op == "square":
                v = ins[0] * ins[0]
            elif op == "softplus":
                v = _softplus(ins[0])
            elif op == "tanh":
                v = np.tanh(ins[0])
            elif op == "dot":
                v = _f64(ins[0] @ ins[1])
            elif op == "matmul":
                v = ins[0] @ ins[1]
            elif op == "sum":
                v = _f64(ins[0].sum())
            elif op == "row_sum":
                v = ins[0].sum(axis=1)
            elif op == "gather":
                v = ins[0][aux]
            elif op == "segsum":
                v = np.zeros_like(self._vals[k])
                np.add.at(v, aux, ins[0])
            elif op == "slice":
                v = ins[0][:, aux[0]:aux[1]]
            else:  # pragma: no cover
                raise NotImplementedError(op)
            if not np.array_equal(v, self._vals[k]):
                return False
        return True


def record(fn: Callable[[Tape], Var], params: ParamStore | None = None) -> tuple[float, Tape]:
    """Run `fn` on a fresh tape and return (scalar value, tape).

    `fn` must be deterministic (draw any randomness beforehand and close
    over it) and must return a scalar Var built from tape primitives.
    """
    tape = Tape(params)
    out = fn(tape)
    if not isinstance(out, Var):
        raise TypeError("recorded function must return a Var")
    if out.value.shape != ():
        raise ValueError("recorded function must return a scalar")
    tape.output = out
    return float(out.value), tape


def backward(tape: Tape) -> None:
    tape.backward()


def grad_check(
    fn: Callable[[Tape], Var],
    params: ParamStore,
    h: float = 1e-6,
    names: Sequence[str] | None = None,
) -> float:
    """Max relative error of tape gradients against central differences.

    Relative error per scalar parameter is
    ``|analytic - numeric| / max(1, |analytic|)``. Raises
    :class:`GradCheckError` with the offending parameter when either side
    is non-finite.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    _, tape = record(fn, params)
    params.zero_grads()
    tape.backward()
    check_names = list(names) if names is not None else params.names()
    analytic = {n: params.grad(n).copy() for n in check_names}
    for n, g in analytic.items():
        if not np.all(np.isfinite(g)):
            raise GradCheckError(f"non-finite analytic gradient for {n!r}")

    worst = 0.0
    for name in check_names:
        base = params.value(name)
        ana = analytic[name]
        for ix in np.ndindex(base.shape):
            orig = base[ix]
            base[ix] = orig + h
            f_plus, _ = record(fn, params)
            base[ix] = orig - h
            f_minus, _ = record(fn, params)
            base[ix] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise GradCheckError(f"non-finite evaluation perturbing {name}{list(ix)}")
            numeric = (f_plus - f_minus) / (2.0 * h)
            err = abs(float(ana[ix]) - numeric) / max(1.0, abs(float(ana[ix])))
            if err > worst:
                worst = err
    return worst
