"""Small dense-tensor core with a recording tape for reverse-mode gradients.

Only the operations the capsule network needs are provided. Every op works on
whatever float dtype its inputs carry, so the same code path runs in float32
for training and float64 for finite-difference checks.

Usage::

    with Tape() as tape:
        y = relu(matmul(x, w))
        loss = sum_all(y)
    gx, gw = tape.gradient(loss, [x, w])
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""

    def __init__(self, message, op=None, index=None):
        super().__init__(message)
        self.op = op
        self.index = index


class Tensor:
    """Dense array plus an optional accumulated gradient.

    ``data`` is cast to float32 unless a dtype is given explicitly.
    """

    __slots__ = ("data", "grad", "name")

    def __init__(self, data, dtype=None, name: str = ""):
        arr = np.asarray(data, dtype=np.float32 if dtype is None else dtype)
        self.data = arr if arr.flags.c_contiguous else arr.copy(order="C")
        self.grad = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class TapeEntry:
    op: str
    inputs: tuple
    output: Tensor
    backward: Callable


@dataclass
class Tape:
    """Ordered record of op applications.

    Entries are appended in execution order, which is already a topological
    order, so backward is a single reverse sweep.
    """

    entries: list = field(default_factory=list)
    check_finite: bool = True

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def gradient(self, target: Tensor, sources: Sequence[Tensor], seed=None) -> list:
        """Gradients of ``target`` w.r.t. ``sources`` (zeros where unreachable)."""
        grads = {id(target): np.ones_like(target.data) if seed is None
                 else np.asarray(seed, dtype=target.dtype)}
        for entry in reversed(self.entries):
            g = grads.get(id(entry.output))
            if g is None:
                continue
            in_grads = entry.backward(g)
            for t, gi in zip(entry.inputs, in_grads):
                if gi is None:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        return [grads.get(id(s), np.zeros_like(s.data)) for s in sources]

    def backward(self, target: Tensor, sources: Sequence[Tensor]) -> None:
        """Like ``gradient`` but stores results on ``source.grad``."""
        for s, g in zip(sources, self.gradient(target, sources)):
            s.grad = g if s.grad is None else s.grad + g


_TAPES: list = []


def record(op: str, out_data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap ``out_data`` in a Tensor and log the op on the active tape, if any.

    ``backward`` maps the output gradient to a tuple of input gradients
    (``None`` for inputs that need no gradient).
    """
    out = Tensor(out_data, dtype=out_data.dtype)
    if _TAPES:
        tape = _TAPES[-1]
        if tape.check_finite and not np.all(np.isfinite(out_data)):
            raise NonFiniteError(f"non-finite output in op {op!r} (tape entry {len(tape.entries)})",
                                 op=op, index=len(tape.entries))
        tape.entries.append(TapeEntry(op, tuple(inputs), out, backward))
    return out


# ---------------------------------------------------------------------------
# convolution


def _conv_out(size, k, s):
    return (size - k) // s + 1


def _windows(x: np.ndarray, kh: int, kw: int, sh: int, sw: int) -> np.ndarray:
    # [B, C, H', W', kH, kW] strided view
    v = sliding_window_view(x, (kh, kw), axis=(2, 3))
    return v[:, :, ::sh, ::sw]


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor, stride=(1, 1)) -> Tensor:
    """Valid cross-correlation.

    ``x`` is [C_in, H, W] or batched [B, C_in, H, W]; ``kernels`` is
    [C_out, C_in, kH, kW]. Output spatial size is floor((H-kH)/sH)+1.
    """
    xd = x.data
    batched = xd.ndim == 4
    if not batched:
        if xd.ndim != 3:
            raise DimensionError(f"conv2d expects rank 3 or 4 input, got shape {xd.shape}")
        xd = xd[None]
    c_out, c_in, kh, kw = kernels.shape
    if xd.shape[1] != c_in:
        raise DimensionError(f"input has {xd.shape[1]} channels, kernels expect {c_in}")
    if bias.shape != (c_out,):
        raise DimensionError(f"bias shape {bias.shape} does not match {c_out} output channels")
    sh, sw = stride
    H, W = xd.shape[2:]
    if H < kh or W < kw:
        raise DimensionError(f"input {H}x{W} smaller than kernel {kh}x{kw}")
    ho, wo = _conv_out(H, kh, sh), _conv_out(W, kw, sw)
    cols = _windows(xd, kh, kw, sh, sw)[:, :, :ho, :wo]
    k = kernels.data
    # [B, H', W', C_out] -> [B, C_out, H', W']
    out = np.tensordot(cols, k, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out, dtype=np.result_type(xd, k))
    if not batched:
        out = out[0]
    saved = (xd, k, stride)

    def backward(g):
        gb = g if batched else g[None]
        return conv2d_backward(gb, saved, squeeze=not batched)

    return record("conv2d", out, (x, kernels, bias), backward)


def conv2d_backward(grad_out: np.ndarray, saved, squeeze: bool = False):
    """Gradients of a conv2d w.r.t. (input, kernels, bias).

    ``saved`` is the (input, kernels, stride) triple captured by the forward
    pass; ``grad_out`` is batched [B, C_out, H', W'].
    """
    if saved is None:
        raise ValueError("conv2d_backward called without saved activations")
    xd, k, (sh, sw) = saved
    c_out, c_in, kh, kw = k.shape
    B, _, H, W = xd.shape
    ho, wo = _conv_out(H, kh, sh), _conv_out(W, kw, sw)
    if grad_out.shape != (B, c_out, ho, wo):
        raise DimensionError(f"grad_out shape {grad_out.shape} != forward output {(B, c_out, ho, wo)}")
    cols = _windows(xd, kh, kw, sh, sw)[:, :, :ho, :wo]
    gk = np.tensordot(grad_out, cols, axes=([0, 2, 3], [0, 2, 3]))  # [C_out, C_in, kH, kW]
    gbias = grad_out.sum(axis=(0, 2, 3))
    # [kH, kW, B, C_in, H', W'] so each kernel tap is one contiguous slab
    gcols = np.tensordot(k, grad_out, axes=([0], [1]))
    gcols = np.ascontiguousarray(gcols.transpose(1, 2, 3, 0, 4, 5))
    gx = np.zeros_like(xd)
    for i in range(kh):
        for j in range(kw):
            gx[:, :, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw] += gcols[i, j]
    if squeeze:
        gx = gx[0]
    return gx, gk.astype(k.dtype, copy=False), gbias.astype(k.dtype, copy=False)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading batch dimensions must match exactly."""
    ad, bd = a.data, b.data
    if ad.ndim < 2 or ad.ndim != bd.ndim:
        raise DimensionError(f"matmul rank mismatch: {ad.shape} @ {bd.shape}")
    if ad.shape[:-2] != bd.shape[:-2]:
        raise DimensionError(f"matmul batch mismatch: {ad.shape} @ {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {ad.shape} @ {bd.shape}")

    def backward(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return record("matmul", ad @ bd, (a, b), backward)


def contract(subscripts: str, a: Tensor, b: Tensor) -> Tensor:
    """Two-operand einsum without repeated or dangling indices.

    Every index of each operand must appear in the output or the other
    operand, which keeps the backward rule a pair of einsums.
    """
    ins, out_s = subscripts.replace(" ", "").split("->")
    sa, sb = ins.split(",")
    for s, other in ((sa, sb), (sb, sa)):
        if len(set(s)) != len(s) or any(c not in out_s and c not in other for c in s):
            raise ValueError(f"unsupported contraction {subscripts!r}")
    ad, bd = a.data, b.data
    out = np.einsum(subscripts, ad, bd, optimize=True)

    def backward(g):
        ga = np.einsum(f"{out_s},{sb}->{sa}", g, bd, optimize=True)
        gb = np.einsum(f"{out_s},{sa}->{sb}", g, ad, optimize=True)
        return ga, gb

    return record("contract", np.asarray(out), (a, b), backward)


# ---------------------------------------------------------------------------
# elementwise and structural


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add shape mismatch {a.shape} vs {b.shape}")
    return record("add", a.data + b.data, (a, b), lambda g: (g, g))


def scale(a: Tensor, s: float) -> Tensor:
    s = a.dtype.type(s)
    return record("scale", a.data * s, (a,), lambda g: (g * s,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return record("relu", np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return record("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    out = np.ascontiguousarray(x.data.transpose(axes))
    return record("transpose", out, (x,), lambda g: (g.transpose(inv),))


def expand(x: Tensor, n: int) -> Tensor:
    """Repeat ``x`` along a new leading axis of length ``n``."""
    out = np.repeat(x.data[None], n, axis=0)
    return record("expand", out, (x,), lambda g: (g.sum(axis=0),))


def sum_all(x: Tensor) -> Tensor:
    return record("sum", np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                  lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    return record("mean", np.asarray(x.data.mean(), dtype=x.dtype), (x,),
                  lambda g: (np.broadcast_to(g / n, x.shape).astype(x.dtype),))


# ---------------------------------------------------------------------------
# capsule nonlinearities


def softmax_rows(b: Tensor) -> Tensor:
    """Softmax along the last axis, max-subtracted."""
    z = b.data - b.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return record("softmax", p, (b,), backward)


def squash(v: Tensor) -> Tensor:
    """``|v|^2/(1+|v|^2) * v/|v|`` along the last axis; zero maps to zero."""
    vd = v.data
    n2 = (vd * vd).sum(axis=-1, keepdims=True)
    n = np.sqrt(n2)
    factor = n / (1 + n2)  # |v|/(1+|v|^2), finite at 0
    out = vd * factor

    def backward(g):
        safe_n = np.where(n > 0, n, 1)
        # d factor / d(n2), times 2, times (v.g): kept finite by the v*v/|v| pairing
        dfac = np.where(n > 0, (1 - n2) / (safe_n * (1 + n2) ** 2), 0)
        vg = (vd * g).sum(axis=-1, keepdims=True)
        return (g * factor + vd * (dfac * vg),)

    return record("squash", out, (v,), backward)


def norm(v: Tensor) -> Tensor:
    """Euclidean norm over the last axis; subgradient 0 at the origin."""
    vd = v.data
    n = np.sqrt((vd * vd).sum(axis=-1))

    def backward(g):
        safe = np.where(n > 0, n, 1)
        return (vd * (np.where(n > 0, g / safe, 0))[..., None],)

    return record("norm", n, (v,), backward)


# ---------------------------------------------------------------------------
# finite-difference checking


@dataclass
class GradCheckReport:
    errors: list
    tol: float
    names: list

    @property
    def max_error(self) -> float:
        return max(self.errors) if self.errors else 0.0

    @property
    def passed(self) -> bool:
        return all(e < self.tol for e in self.errors)

    def __str__(self):
        rows = [f"{n or f'input{i}'}: {e:.3e}" for i, (n, e) in enumerate(zip(self.names, self.errors))]
        status = "PASS" if self.passed else "FAIL"
        return f"gradcheck {status} (tol {self.tol:g}): " + ", ".join(rows)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-2) -> float:
    """Max over entries of |a-n| / max(|a|, |n|, floor * max|n|).

    The floor keeps entries that are tiny relative to the largest gradient
    from being judged on finite-difference truncation noise alone.
    """
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    if a.size == 0:
        return 0.0
    scale_ = max(np.abs(n).max(), np.abs(a).max(), 1e-12)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor * scale_)
    return float((np.abs(a - n) / denom).max())


def grad_check(fn: Callable, inputs: Sequence, tol: float = 1e-4, step: float = 1e-3,
               max_entries: int | None = None, seed: int = 0, names=None,
               floor: float = 1e-2) -> GradCheckReport:
    """Compare tape gradients of ``fn`` against central differences.

    ``fn`` maps Tensors to a Tensor; non-scalar outputs are sum-reduced.
    Both the tape pass and the finite-difference recomputation run in
    float64. ``max_entries`` limits the probed coordinates per input
    (chosen at random with ``seed``); ``None`` probes every entry.
    """
    arrays = [np.array(as_tensor(x).data, dtype=np.float64) for x in inputs]

    def scalar(arrs, tape=None):
        ts = [Tensor(a, dtype=np.float64) for a in arrs]
        out = fn(*ts)
        if out.data.ndim:
            out = sum_all(out)
        return ts, out

    with Tape() as tape:
        ts, out = scalar(arrays)
    analytic = tape.gradient(out, ts)

    rng = np.random.default_rng(seed)
    errors = []
    for k, arr in enumerate(arrays):
        flat_idx = np.arange(arr.size)
        if max_entries is not None and arr.size > max_entries:
            flat_idx = rng.choice(arr.size, size=max_entries, replace=False)
        numeric = np.empty(len(flat_idx))
        for m, idx in enumerate(flat_idx):
            pos = np.unravel_index(idx, arr.shape)
            orig = arr[pos]
            arr[pos] = orig + step
            fp = float(scalar(arrays)[1].data)
            arr[pos] = orig - step
            fm = float(scalar(arrays)[1].data)
            arr[pos] = orig
            numeric[m] = (fp - fm) / (2 * step)
            if not math.isfinite(numeric[m]):
                raise NonFiniteError(f"non-finite finite difference at input {k}, entry {pos}")
        errors.append(relative_error(analytic[k].ravel()[flat_idx], numeric, floor=floor))
    if names is None:
        names = [getattr(x, "name", "") for x in inputs]
    return GradCheckReport(errors, tol, list(names))
