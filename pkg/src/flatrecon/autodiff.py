"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tape` is an append-only record of operations.  Every op function in
this module takes :class:`Var` handles, computes its forward value eagerly with
numpy and appends a node holding the input ids and a vector-Jacobian closure.
:func:`backward` walks the node list in reverse.

Complex grids are carried as two real channels ``(2, H, W)``; the only
complex-aware ops are :func:`fft2c` and :func:`ifft2c`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


VJP = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


@dataclass
class Node:
    op: str
    inputs: tuple[int, ...]
    value: np.ndarray
    requires_grad: bool
    vjp: VJP | None = None


@dataclass
class Tape:
    nodes: list[Node] = field(default_factory=list)
    grads: dict[int, np.ndarray] = field(default_factory=dict)

    def _append(self, node: Node) -> "Var":
        self.nodes.append(node)
        return Var(self, len(self.nodes) - 1)

    def leaf(self, value, requires_grad: bool = False, op: str = "leaf") -> "Var":
        arr = np.asarray(value, dtype=np.float64)
        return self._append(Node(op, (), arr, requires_grad))

    def param(self, value) -> "Var":
        return self.leaf(value, requires_grad=True, op="param")

    def const(self, value) -> "Var":
        return self.leaf(value, requires_grad=False, op="const")

    def record(self, op: str, inputs: Sequence["Var"], value: np.ndarray, vjp: VJP) -> "Var":
        for v in inputs:
            if v.tape is not self:
                raise ContractError("operands belong to a different tape")
        needs = any(self.nodes[v.idx].requires_grad for v in inputs)
        # NaN and Inf survive summation, so one reduction detects both
        if not np.isfinite(value.sum()):
            raise FloatingPointError(f"non-finite value produced by {op}")
        return self._append(Node(op, tuple(v.idx for v in inputs), value, needs, vjp if needs else None))

    def __len__(self) -> int:
        return len(self.nodes)


class Var:
    """Handle to one node on a tape."""

    __slots__ = ("tape", "idx")

    def __init__(self, tape: Tape, idx: int):
        self.tape = tape
        self.idx = idx

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.idx].value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def requires_grad(self) -> bool:
        return self.tape.nodes[self.idx].requires_grad

    @property
    def grad(self) -> np.ndarray | None:
        return self.tape.grads.get(self.idx)

    def __add__(self, other: "Var") -> "Var":
        return add(self, other)

    def __sub__(self, other: "Var") -> "Var":
        return sub(self, other)

    def __mul__(self, other: "Var") -> "Var":
        return mul(self, other)

    def __neg__(self) -> "Var":
        return scale(self, -1.0)

    def __repr__(self) -> str:
        node = self.tape.nodes[self.idx]
        return f"Var(#{self.idx} {node.op} shape={node.value.shape})"


def _same_shape(a: Var, b: Var, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# --------------------------------------------------------------------------
# elementwise


def add(a: Var, b: Var) -> Var:
    _same_shape(a, b, "add")
    return a.tape.record("add", (a, b), a.value + b.value, lambda g: (g, g))


def sub(a: Var, b: Var) -> Var:
    _same_shape(a, b, "sub")
    return a.tape.record("sub", (a, b), a.value - b.value, lambda g: (g, -g))


def mul(a: Var, b: Var) -> Var:
    _same_shape(a, b, "mul")
    av, bv = a.value, b.value
    return a.tape.record("mul", (a, b), av * bv, lambda g: (g * bv, g * av))


def div(a: Var, b: Var) -> Var:
    _same_shape(a, b, "div")
    av, bv = a.value, b.value
    out = av / bv
    return a.tape.record("div", (a, b), out, lambda g: (g / bv, -g * out / bv))


def scale(a: Var, c: float) -> Var:
    c = float(c)
    return a.tape.record("scale", (a,), a.value * c, lambda g: (g * c,))


def scale_by(a: Var, s: Var) -> Var:
    """Multiply an array by a scalar-valued node (learnable step sizes)."""
    if s.value.size != 1:
        raise ShapeError("scale_by expects a single-element scale")
    av, sv = a.value, s.value
    return a.tape.record(
        "scale_by", (a, s), av * sv.reshape(()),
        lambda g: (g * sv.reshape(()), np.asarray(np.sum(g * av)).reshape(sv.shape)),
    )


def add_scalar(a: Var, c: float) -> Var:
    c = float(c)
    return a.tape.record("add_scalar", (a,), a.value + c, lambda g: (g,))


def relu(a: Var) -> Var:
    av = a.value
    return a.tape.record("relu", (a,), np.maximum(av, 0.0), lambda g: (g * (av > 0),))


def square(a: Var) -> Var:
    av = a.value
    return a.tape.record("square", (a,), av * av, lambda g: (2.0 * g * av,))


def absolute(a: Var) -> Var:
    av = a.value
    return a.tape.record("abs", (a,), np.abs(av), lambda g: (g * np.sign(av),))


def sqrt(a: Var) -> Var:
    out = np.sqrt(a.value)
    return a.tape.record("sqrt", (a,), out, lambda g: (0.5 * g / out,))


def elementwise(tag: str, *operands) -> Var:
    """Dispatch by op tag: add, sub, mul, scale, relu, square."""
    table = {"add": add, "sub": sub, "mul": mul, "scale": scale, "relu": relu, "square": square}
    if tag not in table:
        raise ValueError(f"unknown elementwise op {tag!r}")
    return table[tag](*operands)


# --------------------------------------------------------------------------
# reductions and reshaping


def reduce_mean(a: Var) -> Var:
    av = a.value
    if av.size == 0:
        raise ValueError("reduce_mean of an empty array")
    n = av.size
    shape = av.shape
    return a.tape.record("reduce_mean", (a,), np.asarray(av.mean()), lambda g: (np.full(shape, g / n),))


def reduce_sum(a: Var) -> Var:
    shape = a.shape
    return a.tape.record("reduce_sum", (a,), np.asarray(a.value.sum()), lambda g: (np.full(shape, g),))


def add_n(terms: Sequence[Var]) -> Var:
    """Sum of equally shaped nodes, accumulated in index order."""
    if not terms:
        raise ValueError("add_n of nothing")
    for t in terms[1:]:
        _same_shape(terms[0], t, "add_n")
    out = terms[0].value.copy()
    for t in terms[1:]:
        out = out + t.value
    k = len(terms)
    return terms[0].tape.record("add_n", tuple(terms), out, lambda g: (g,) * k)


def concat(parts: Sequence[Var], axis: int = 0) -> Var:
    sizes = [p.shape[axis] for p in parts]
    cuts = np.cumsum(sizes)[:-1]
    out = np.concatenate([p.value for p in parts], axis=axis)
    return parts[0].tape.record("concat", tuple(parts), out, lambda g: tuple(np.split(g, cuts, axis=axis)))


def channel(a: Var, c: int) -> Var:
    """Select channel ``c`` of a ``(C, H, W)`` array, keeping a leading axis of 1."""
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        full[c] = g[0]
        return (full,)

    return a.tape.record("channel", (a,), a.value[c:c + 1].copy(), vjp)


# --------------------------------------------------------------------------
# convolution


def conv2d(x: Var, w: Var, pad: int) -> Var:
    """Zero-padded 2-D cross-correlation of a ``(C_in, H, W)`` input.

    The padded input is flattened row-major; every kernel tap then reads one
    contiguous span of it, so each tap is a single ``(O, C) @ (C, L)`` product.
    Outputs land on a grid ``Wp`` wide whose trailing ``kW - 1`` columns are junk.
    """
    xv, wv = x.value, w.value
    if xv.ndim != 3 or wv.ndim != 4:
        raise ShapeError("conv2d expects input (C,H,W) and kernel (O,C,kH,kW)")
    cout, cin, kh, kw = wv.shape
    if cin != xv.shape[0]:
        raise ShapeError(f"conv2d: kernel expects {cin} input channels, got {xv.shape[0]}")
    h, wd = xv.shape[1:]
    hp, wp = h + 2 * pad, wd + 2 * pad
    if pad < 0 or hp < kh or wp < kw:
        raise ShapeError("conv2d: kernel larger than padded input")
    ho, wo = hp - kh + 1, wp - kw + 1
    span = (ho - 1) * wp + wo
    offs = [i * wp + j for i in range(kh) for j in range(kw)]
    taps = np.ascontiguousarray(wv.transpose(2, 3, 0, 1)).reshape(kh * kw, cout, cin)
    taps_t = np.ascontiguousarray(taps.transpose(0, 2, 1)).reshape(kh * kw * cin, cout)
    xp = np.zeros((cin, hp * wp))
    xp.reshape(cin, hp, wp)[:, pad:pad + h, pad:pad + wd] = xv
    acc = taps[0] @ xp[:, offs[0]:offs[0] + span]
    for t in range(1, len(offs)):
        acc += taps[t] @ xp[:, offs[t]:offs[t] + span]
    wide = np.zeros((cout, ho * wp))
    wide[:, :span] = acc
    out = wide.reshape(cout, ho, wp)[:, :, :wo].copy()

    def vjp(g):
        gw = np.zeros((cout, ho, wp))
        gw[:, :, :wo] = g
        gf = gw.reshape(cout, ho * wp)[:, :span]
        dw = np.empty((kh * kw, cout, cin))
        dcols = (taps_t @ gf).reshape(kh * kw, cin, span)
        dxp = np.zeros((cin, hp * wp))
        for t, o in enumerate(offs):
            dw[t] = gf @ xp[:, o:o + span].T
            dxp[:, o:o + span] += dcols[t]
        dx = dxp.reshape(cin, hp, wp)[:, pad:pad + h, pad:pad + wd]
        return dx, dw.reshape(kh, kw, cout, cin).transpose(2, 3, 0, 1)

    return x.tape.record("conv2d", (x, w), out, vjp)


def add_bias(x: Var, b: Var) -> Var:
    """Add a per-channel bias ``(C,)`` to a ``(C, H, W)`` array."""
    if b.value.shape != (x.shape[0],):
        raise ShapeError("add_bias: bias must have one entry per channel")
    return x.tape.record(
        "add_bias", (x, b), x.value + b.value[:, None, None], lambda g: (g, g.sum(axis=(1, 2)))
    )


def box_filter(x: Var, size: int) -> Var:
    """Mean over every ``size x size`` window fully inside each channel (valid mode)."""
    xv = x.value
    c, h, w = xv.shape
    if size > h or size > w:
        raise ShapeError(f"window {size} larger than image {h}x{w}")
    ho, wo = h - size + 1, w - size + 1
    # separable running sums
    cs = np.cumsum(np.pad(xv, ((0, 0), (1, 0), (0, 0))), axis=1)
    rows = cs[:, size:, :] - cs[:, :-size, :]
    cs = np.cumsum(np.pad(rows, ((0, 0), (0, 0), (1, 0))), axis=2)
    out = (cs[:, :, size:] - cs[:, :, :-size]) / (size * size)

    def vjp(g):
        gp = np.pad(g, ((0, 0), (size - 1, size - 1), (size - 1, size - 1)))
        cs = np.cumsum(np.pad(gp, ((0, 0), (1, 0), (0, 0))), axis=1)
        rows = cs[:, size:, :] - cs[:, :-size, :]
        cs = np.cumsum(np.pad(rows, ((0, 0), (0, 0), (1, 0))), axis=2)
        return ((cs[:, :, size:] - cs[:, :, :-size]) / (size * size),)

    assert out.shape == (c, ho, wo)
    return x.tape.record("box_filter", (x,), out, vjp)


# --------------------------------------------------------------------------
# complex helpers on two-channel arrays


def to_channels(z: np.ndarray) -> np.ndarray:
    out = np.empty((2,) + z.shape)
    out[0] = z.real
    out[1] = z.imag
    return out


def to_complex(a: np.ndarray) -> np.ndarray:
    return a[0] + 1j * a[1]


_DFT_CACHE: dict[int, np.ndarray] = {}


def centered_dft_matrix(n: int) -> np.ndarray:
    """Unitary 1-D DFT with the zero frequency moved to index ``n // 2`` on both sides."""
    mat = _DFT_CACHE.get(n)
    if mat is None:
        eye = np.fft.ifftshift(np.eye(n), axes=0)
        mat = np.fft.fftshift(np.fft.fft(eye, axis=0, norm="ortho"), axes=0)
        mat.flags.writeable = False
        _DFT_CACHE[n] = mat
    return mat


def _fft2c(z: np.ndarray) -> np.ndarray:
    return centered_dft_matrix(z.shape[0]) @ z @ centered_dft_matrix(z.shape[1]).T


def _ifft2c(z: np.ndarray) -> np.ndarray:
    return centered_dft_matrix(z.shape[0]).conj().T @ z @ centered_dft_matrix(z.shape[1]).conj()


def fft2c(x: Var) -> Var:
    # unitary: the real-linear transpose is the inverse transform
    out = to_channels(_fft2c(to_complex(x.value)))
    return x.tape.record("fft2c", (x,), out, lambda g: (to_channels(_ifft2c(to_complex(g))),))


def ifft2c(x: Var) -> Var:
    out = to_channels(_ifft2c(to_complex(x.value)))
    return x.tape.record("ifft2c", (x,), out, lambda g: (to_channels(_fft2c(to_complex(g))),))


def magnitude(x: Var, eps: float = 1e-12) -> Var:
    """Complex modulus of a ``(2, H, W)`` array as ``(1, H, W)``."""
    xv = x.value
    out = np.sqrt(xv[0] ** 2 + xv[1] ** 2 + eps)[None]
    return x.tape.record("magnitude", (x,), out, lambda g: (g * xv / out,))


# --------------------------------------------------------------------------
# reverse pass


def backward(tape: Tape, loss: Var) -> dict[int, np.ndarray]:
    """Reverse accumulation from a scalar ``loss``; returns grads of trainable leaves."""
    if loss.tape is not tape:
        raise ContractError("loss node is not on this tape")
    if loss.value.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {loss.idx: np.ones_like(loss.value)}
    nodes = tape.nodes
    for i in range(loss.idx, -1, -1):
        g = grads.get(i)
        node = nodes[i]
        if g is None or node.vjp is None:
            continue
        for j, gj in zip(node.inputs, node.vjp(g)):
            if gj is None or not nodes[j].requires_grad:
                continue
            if j in grads:
                grads[j] = grads[j] + gj
            else:
                grads[j] = gj
        del grads[i]
    tape.grads = {i: g for i, g in grads.items() if not nodes[i].inputs}
    return tape.grads


# --------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros_like(cls, param: np.ndarray) -> "OptimizerState":
        return cls(np.zeros_like(param), np.zeros_like(param), 0)


def adamw_step(
    param: np.ndarray,
    grad: np.ndarray,
    state: OptimizerState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> tuple[np.ndarray, OptimizerState]:
    """One AdamW update with decoupled weight decay; returns new arrays."""
    if lr <= 0:
        raise ConfigError("learning rate must be positive")
    if not (param.shape == grad.shape == state.m.shape == state.v.shape):
        raise ShapeError("param, grad and moments must share a shape")
    step = state.step + 1
    m = beta1 * state.m + (1.0 - beta1) * grad
    v = beta2 * state.v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** step)
    v_hat = v / (1.0 - beta2 ** step)
    new = param * (1.0 - lr * weight_decay)
    new = new - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new, OptimizerState(m, v, step)


class AdamW:
    """Keeps one :class:`OptimizerState` per named parameter."""

    def __init__(self, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        if lr <= 0:
            raise ConfigError("learning rate must be positive")
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.state: dict[str, OptimizerState] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        for name in sorted(grads):
            p = params[name]
            st = self.state.get(name) or OptimizerState.zeros_like(p)
            params[name], self.state[name] = adamw_step(
                p, grads[name], st, self.lr, self.betas[0], self.betas[1], self.eps, self.weight_decay
            )
