"""Reverse-mode automatic differentiation over dense float64 arrays.

A minimal tape-based engine: primitives compute with numpy and, while a Tape
is active (see `recording`), append a backward closure to it. Records are
appended in construction order, which is already a topological order, so the
backward pass is a single reverse sweep that visits each node exactly once.

Only the primitives the latency predictor needs are provided. Structural
constants (adjacency masks, index arrays, pair matrices) are passed as plain
numpy arrays and never receive gradients; learnable values are Tensors.

Everything is float64. Tapes are single-owner: build one forward pass per
tape from one thread.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import NonScalarLoss, ShapeMismatch

Array = np.ndarray


class Tensor:
    """A float64 array tracked by the autodiff engine."""

    __slots__ = ("data",)

    def __init__(self, data):
        self.data = np.asarray(data, dtype=np.float64)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape})"


def param(data) -> Tensor:
    """Alias for constructing a leaf tensor that will receive gradients."""
    return Tensor(np.array(data, dtype=np.float64))


class Tape:
    """Ordered record of primitive applications from one forward pass."""

    __slots__ = ("_records",)

    def __init__(self):
        # (output tensor, backward closure); closures call acc(input, grad)
        self._records: list[tuple[Tensor, Callable]] = []

    def __len__(self) -> int:
        return len(self._records)

    def _record(self, out: Tensor, bwd: Callable) -> None:
        self._records.append((out, bwd))


_ACTIVE: list[Tape] = []


@contextmanager
def recording(tape: Tape | None = None) -> Iterator[Tape]:
    """Activate a tape; primitives called inside record onto it."""
    tape = tape if tape is not None else Tape()
    _ACTIVE.append(tape)
    try:
        yield tape
    finally:
        _ACTIVE.pop()


def _tape() -> Tape | None:
    return _ACTIVE[-1] if _ACTIVE else None


def _data(x) -> Array:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum a gradient back down to the shape numpy broadcast it up from."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _binary(a, b, fwd, bwd_a, bwd_b) -> Tensor:
    ad, bd = _data(a), _data(b)
    try:
        out = Tensor(fwd(ad, bd))
    except ValueError as e:
        raise ShapeMismatch(str(e)) from None
    tape = _tape()
    if tape is not None:

        def bwd(g: Array, acc) -> None:
            if isinstance(a, Tensor):
                acc(a, _unbroadcast(bwd_a(g, ad, bd), ad.shape))
            if isinstance(b, Tensor):
                acc(b, _unbroadcast(bwd_b(g, ad, bd), bd.shape))

        tape._record(out, bwd)
    return out


def add(a, b) -> Tensor:
    return _binary(a, b, lambda x, y: x + y, lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b) -> Tensor:
    return _binary(a, b, lambda x, y: x - y, lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b) -> Tensor:
    return _binary(a, b, lambda x, y: x * y, lambda g, x, y: g * y, lambda g, x, y: g * x)


def scale(a, c: float) -> Tensor:
    return mul(a, np.float64(c))


def matmul(a, b) -> Tensor:
    """Matrix product on the last two axes, broadcasting leading axes."""
    ad, bd = _data(a), _data(b)
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeMismatch(f"matmul needs >=2-D operands, got {ad.shape} @ {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeMismatch(f"matmul inner dims differ: {ad.shape} @ {bd.shape}")
    out = Tensor(np.matmul(ad, bd))
    tape = _tape()
    if tape is not None:

        def bwd(g: Array, acc) -> None:
            if isinstance(a, Tensor):
                ga = np.matmul(g, np.swapaxes(bd, -1, -2))
                acc(a, _unbroadcast(ga, ad.shape))
            if isinstance(b, Tensor):
                gb = np.matmul(np.swapaxes(ad, -1, -2), g)
                acc(b, _unbroadcast(gb, bd.shape))

        tape._record(out, bwd)
    return out


def _unary(x, fwd, bwd_fn) -> Tensor:
    xd = _data(x)
    out = Tensor(fwd(xd))
    tape = _tape()
    if tape is not None and isinstance(x, Tensor):

        def bwd(g: Array, acc) -> None:
            acc(x, bwd_fn(g, xd, out.data))

        tape._record(out, bwd)
    return out


def sigmoid(x) -> Tensor:
    def fwd(v):
        e = np.exp(-np.abs(v))
        return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    return _unary(x, fwd, lambda g, v, o: g * o * (1.0 - o))


def relu(x) -> Tensor:
    return _unary(x, lambda v: np.maximum(v, 0.0), lambda g, v, o: g * (v > 0))


def leaky_relu(x, slope: float = 0.2) -> Tensor:
    return _unary(
        x,
        lambda v: np.where(v > 0, v, slope * v),
        lambda g, v, o: g * np.where(v > 0, 1.0, slope),
    )


def transpose_last2(x) -> Tensor:
    return _unary(
        x,
        lambda v: np.swapaxes(v, -1, -2).copy(),
        lambda g, v, o: np.swapaxes(g, -1, -2),
    )


def masked_softmax(x, mask: Array) -> Tensor:
    """Row softmax over the last axis restricted to mask==1 entries.

    Masked entries get weight 0. A row whose mask is all zero (empty support)
    yields an all-zero row rather than NaN.
    """
    xd = _data(x)
    maskb = np.broadcast_to(np.asarray(mask, dtype=bool), xd.shape)
    neg = np.where(maskb, xd, -np.inf)
    rowmax = neg.max(axis=-1, keepdims=True)
    rowmax = np.where(np.isfinite(rowmax), rowmax, 0.0)
    e = np.exp(np.where(maskb, xd - rowmax, -np.inf))
    den = e.sum(axis=-1, keepdims=True)
    out_data = np.divide(e, den, out=np.zeros_like(e), where=den > 0)
    out = Tensor(out_data)
    tape = _tape()
    if tape is not None and isinstance(x, Tensor):
        o = out_data

        def bwd(g: Array, acc) -> None:
            acc(x, o * (g - (g * o).sum(axis=-1, keepdims=True)))

        tape._record(out, bwd)
    return out


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply the learned affine."""
    xd, gd, bd = _data(x), _data(gain), _data(bias)
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gd + bd)
    tape = _tape()
    if tape is not None:

        def bwd(g: Array, acc) -> None:
            if isinstance(x, Tensor):
                gx_hat = g * gd
                term = (
                    gx_hat
                    - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
                )
                acc(x, term * inv)
            if isinstance(gain, Tensor):
                acc(gain, _unbroadcast(g * xhat, gd.shape))
            if isinstance(bias, Tensor):
                acc(bias, _unbroadcast(g, bd.shape))

        tape._record(out, bwd)
    return out


def concat(parts: Sequence, axis: int = -1) -> Tensor:
    datas = [_data(p) for p in parts]
    try:
        out = Tensor(np.concatenate(datas, axis=axis))
    except ValueError as e:
        raise ShapeMismatch(str(e)) from None
    tape = _tape()
    if tape is not None:
        sizes = [d.shape[axis] for d in datas]
        splits = np.cumsum(sizes)[:-1]

        def bwd(g: Array, acc) -> None:
            for part, piece in zip(parts, np.split(g, splits, axis=axis)):
                if isinstance(part, Tensor):
                    acc(part, piece)

        tape._record(out, bwd)
    return out


def gather(table, idx) -> Tensor:
    """Row lookup into an embedding table: out[...] = table[idx[...], :]."""
    td = _data(table)
    idx = np.asarray(idx, dtype=np.intp)
    out = Tensor(td[idx])
    tape = _tape()
    if tape is not None and isinstance(table, Tensor):

        def bwd(g: Array, acc) -> None:
            gt = np.zeros_like(td)
            np.add.at(gt, idx.reshape(-1), g.reshape(-1, td.shape[-1]))
            acc(table, gt)

        tape._record(out, bwd)
    return out


def take_node(x, index: int) -> Tensor:
    """Select one row along the second-to-last axis: x[..., index, :]."""
    xd = _data(x)
    out = Tensor(xd[..., index, :].copy())
    tape = _tape()
    if tape is not None and isinstance(x, Tensor):

        def bwd(g: Array, acc) -> None:
            gx = np.zeros_like(xd)
            gx[..., index, :] = g
            acc(x, gx)

        tape._record(out, bwd)
    return out


def sum_all(x) -> Tensor:
    xd = _data(x)
    out = Tensor(xd.sum())
    tape = _tape()
    if tape is not None and isinstance(x, Tensor):

        def bwd(g: Array, acc) -> None:
            acc(x, np.broadcast_to(g, xd.shape).copy())

        tape._record(out, bwd)
    return out


def mean_all(x) -> Tensor:
    xd = _data(x)
    n = xd.size
    out = Tensor(xd.mean())
    tape = _tape()
    if tape is not None and isinstance(x, Tensor):

        def bwd(g: Array, acc) -> None:
            acc(x, np.broadcast_to(g / n, xd.shape).copy())

        tape._record(out, bwd)
    return out


def backward(tape: Tape, loss: Tensor) -> dict[Tensor, Array]:
    """Reverse sweep over the tape; returns gradients for leaf tensors.

    The loss must be a single-element tensor. Intermediate gradients are
    popped as they are consumed, so the returned map holds only tensors that
    were never produced by a recorded primitive (parameters and inputs).
    """
    if loss.data.size != 1:
        raise NonScalarLoss(f"loss has shape {loss.data.shape}")
    grads: dict[Tensor, Array] = {loss: np.ones_like(loss.data)}

    def acc(t: Tensor, g: Array) -> None:
        prev = grads.get(t)
        grads[t] = g if prev is None else prev + g

    for out, bwd in reversed(tape._records):
        g = grads.pop(out, None)
        if g is None:
            continue
        bwd(g, acc)
    return grads


def named_grads(params: dict[str, Tensor], grads: dict[Tensor, Array]) -> dict[str, Array]:
    """Re-key a backward() result by parameter name; missing entries are zero."""
    return {
        name: grads.get(t, np.zeros_like(t.data)) for name, t in params.items()
    }


@dataclass
class AdamState:
    """Adam moments, one per named parameter, plus the shared step counter."""

    m: dict[str, Array]
    v: dict[str, Array]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: dict[str, Tensor]) -> "AdamState":
        return cls(
            m={k: np.zeros_like(t.data) for k, t in params.items()},
            v={k: np.zeros_like(t.data) for k, t in params.items()},
        )


def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, Array],
    state: AdamState,
    lr: float,
    weight_decay: float = 0.0,
) -> None:
    """One Adam update with bias correction and decoupled weight decay.

    Decay is applied as p <- p - lr*wd*p before the moment update, so it never
    enters the moments.
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ShapeMismatch(f"grad for {name}: {g.shape} vs param {p.data.shape}")
        if weight_decay:
            p.data -= lr * weight_decay * p.data
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


@dataclass
class FiniteDiffReport:
    max_rel_err: float
    worst_param: str
    worst_index: int
    n_checked: int
    failures: list[tuple[str, int, float]] = field(default_factory=list)

    def ok(self, tolerance: float) -> bool:
        return self.max_rel_err < tolerance


def finite_diff_check(
    model_eval: Callable[[], Tensor],
    params: dict[str, Tensor],
    n_samples: int = 100,
    h: float = 1e-5,
    seed: int = 0,
    tolerance: float = 1e-4,
    denom_floor: float = 1e-6,
) -> FiniteDiffReport:
    """Compare analytic gradients against central finite differences.

    model_eval must be a pure function of the current parameter values: it is
    re-run with individual entries perturbed by +/-h. Coordinates are sampled
    uniformly over all parameter entries.
    """
    with recording() as tape:
        loss = model_eval()
    analytic = named_grads(params, backward(tape, loss))

    rng = np.random.default_rng(seed)
    names = sorted(params)
    sizes = np.array([params[n].data.size for n in names])
    total = int(sizes.sum())
    n_samples = min(n_samples, total)
    flat_choices = rng.choice(total, size=n_samples, replace=False)

    report = FiniteDiffReport(0.0, "", -1, n_samples)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    for flat in sorted(flat_choices):
        which = int(np.searchsorted(offsets, flat, side="right") - 1)
        name = names[which]
        idx = int(flat - offsets[which])
        pdata = params[name].data
        orig = pdata.flat[idx]
        pdata.flat[idx] = orig + h
        f_plus = float(model_eval().data)
        pdata.flat[idx] = orig - h
        f_minus = float(model_eval().data)
        pdata.flat[idx] = orig
        numeric = (f_plus - f_minus) / (2.0 * h)
        a = float(analytic[name].flat[idx])
        rel = abs(a - numeric) / max(abs(a), abs(numeric), denom_floor)
        if rel > report.max_rel_err:
            report.max_rel_err = rel
            report.worst_param = name
            report.worst_index = idx
        if rel >= tolerance:
            report.failures.append((name, idx, rel))
    return report
