"""Minimal reverse-mode autodiff over numpy arrays.

Design:
  * A Tensor is a numpy array (float32 or float64) plus an optional gradient
    buffer of the same shape.
  * Ops are free functions. While a Tape is active (``with Tape() as tape:``)
    every op appends a backward closure to it; ``tape.backward(loss)`` replays
    the closures in reverse execution order, visiting each exactly once.
  * Without an active tape, ops run forward-only (inference mode).
  * All arithmetic is plain numpy, so results are bit-deterministic for fixed
    inputs: elementwise ops have a fixed evaluation order and reductions use
    numpy's fixed-topology pairwise summation.
  * 64-bit mode exists for gradient checking; ops require both operands to
    share one dtype and never promote silently.

Tapes are cheap, thread-confined objects; create one per training step.

Multiply accounting: matmul reports its scalar multiply count to the active
MultiplyCounter (if any) under the current label, so attention cost claims can
be checked against an instrumented count rather than trusted.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError, GeometryError

__all__ = [
    "Tensor",
    "Tape",
    "MultiplyCounter",
    "count_multiplies",
    "multiply_label",
    "tensor",
    "add",
    "sub",
    "mul",
    "scale",
    "add_bias",
    "mul_const",
    "matmul",
    "softmax",
    "gelu",
    "layer_norm",
    "embedding",
    "gather_rows",
    "cross_entropy",
    "reshape",
    "transpose",
    "concat",
    "conv2d",
    "conv2d_transpose",
    "sum_all",
    "mean_all",
    "grad_check",
    "grad_check_direction",
]

_FLOAT_DTYPES = (np.float32, np.float64)

_state = threading.local()


def _active_tape() -> "Tape | None":
    return getattr(_state, "tape", None)


def _active_counter() -> "MultiplyCounter | None":
    return getattr(_state, "counter", None)


def _current_label() -> str:
    return getattr(_state, "label", "default")


class Tensor:
    """A numpy array with an optional gradient buffer of the same shape."""

    __slots__ = ("data", "grad")

    def __init__(self, data: np.ndarray):
        if not isinstance(data, np.ndarray):
            raise TypeError("Tensor wraps a numpy array; use tensor() for lists")
        if data.dtype.type not in _FLOAT_DTYPES:
            raise TypeError(f"Tensor dtype must be float32 or float64, got {data.dtype}")
        self.data = data
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise GeometryError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def accumulate_grad(self, value: np.ndarray) -> None:
        value = np.asarray(value)
        if value.shape != self.data.shape:
            raise GeometryError(
                f"gradient shape {value.shape} does not match tensor shape {self.data.shape}"
            )
        if self.grad is None:
            self.grad = value.astype(self.data.dtype, copy=True)
        else:
            self.grad += value

    def zero_grad(self) -> None:
        self.grad = None

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name})"


def tensor(data, dtype=np.float32) -> Tensor:
    """Build a Tensor from any array-like, copying into the given dtype."""
    return Tensor(np.array(data, dtype=dtype))


class Tape:
    """Ordered record of executed ops; replay backward visits each once."""

    def __init__(self):
        self._nodes: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []
        self._entered = False

    def __enter__(self) -> "Tape":
        if _active_tape() is not None:
            raise ContractError("a Tape is already active on this thread")
        self._entered = True
        _state.tape = self
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _state.tape = None

    def record(self, out: Tensor, backward: Callable[[np.ndarray], None]) -> None:
        self._nodes.append((out, backward))

    def __len__(self) -> int:
        return len(self._nodes)

    def backward(self, loss: Tensor) -> None:
        """Seed d(loss)/d(loss)=1 and propagate through the tape in reverse."""
        if loss.data.size != 1:
            raise GeometryError(f"backward needs a scalar loss, got shape {loss.shape}")
        if _active_tape() is self:
            raise ContractError("call backward() after the recording block has exited")
        loss.accumulate_grad(np.ones_like(loss.data))
        for out, backward_fn in reversed(self._nodes):
            if out.grad is None:
                continue
            backward_fn(out.grad)


class MultiplyCounter:
    """Tallies scalar multiplies reported by matmul, keyed by label."""

    def __init__(self):
        self.counts: dict[str, int] = {}

    def add(self, label: str, n: int) -> None:
        self.counts[label] = self.counts.get(label, 0) + n

    def total(self) -> int:
        return sum(self.counts.values())

    def __getitem__(self, label: str) -> int:
        return self.counts.get(label, 0)


@contextmanager
def count_multiplies(counter: MultiplyCounter):
    """Route matmul multiply counts on this thread into `counter`."""
    prev = _active_counter()
    _state.counter = counter
    try:
        yield counter
    finally:
        _state.counter = prev


@contextmanager
def multiply_label(label: str):
    """Attribute multiply counts inside the block to `label`."""
    prev = _current_label()
    _state.label = label
    try:
        yield
    finally:
        _state.label = prev


def _require_tensor(x, name: str) -> None:
    if not isinstance(x, Tensor):
        raise TypeError(f"{name} must be a Tensor, got {type(x).__name__}")


def _require_same_dtype(a: Tensor, b: Tensor) -> None:
    if a.data.dtype != b.data.dtype:
        raise TypeError(f"dtype mismatch: {a.data.dtype} vs {b.data.dtype}")


def _emit(out_data: np.ndarray, backward: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor(np.asarray(out_data))
    tape = _active_tape()
    if tape is not None:
        tape.record(out, backward)
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; shapes must match exactly (no broadcasting)."""
    _require_tensor(a, "a")
    _require_tensor(b, "b")
    _require_same_dtype(a, b)
    if a.shape != b.shape:
        raise GeometryError(f"add shape mismatch: {a.shape} vs {b.shape}")

    def backward(dout: np.ndarray) -> None:
        a.accumulate_grad(dout)
        b.accumulate_grad(dout)

    return _emit(a.data + b.data, backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise difference; shapes must match exactly."""
    _require_tensor(a, "a")
    _require_tensor(b, "b")
    _require_same_dtype(a, b)
    if a.shape != b.shape:
        raise GeometryError(f"sub shape mismatch: {a.shape} vs {b.shape}")

    def backward(dout: np.ndarray) -> None:
        a.accumulate_grad(dout)
        b.accumulate_grad(-dout)

    return _emit(a.data - b.data, backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; shapes must match exactly."""
    _require_tensor(a, "a")
    _require_tensor(b, "b")
    _require_same_dtype(a, b)
    if a.shape != b.shape:
        raise GeometryError(f"mul shape mismatch: {a.shape} vs {b.shape}")

    def backward(dout: np.ndarray) -> None:
        a.accumulate_grad(dout * b.data)
        b.accumulate_grad(dout * a.data)

    return _emit(a.data * b.data, backward)


def scale(x: Tensor, s: float) -> Tensor:
    """Multiply by a python scalar (not differentiated through s)."""
    _require_tensor(x, "x")
    s = float(s)

    def backward(dout: np.ndarray) -> None:
        x.accumulate_grad(dout * np.asarray(s, dtype=x.dtype))

    return _emit(x.data * np.asarray(s, dtype=x.dtype), backward)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a vector bias along the last axis."""
    _require_tensor(x, "x")
    _require_tensor(b, "b")
    _require_same_dtype(x, b)
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise GeometryError(f"bias shape {b.shape} incompatible with input {x.shape}")

    def backward(dout: np.ndarray) -> None:
        x.accumulate_grad(dout)
        b.accumulate_grad(dout.reshape(-1, b.shape[0]).sum(axis=0))

    return _emit(x.data + b.data, backward)


def mul_const(x: Tensor, c: np.ndarray) -> Tensor:
    """Multiply by a constant array (broadcastable); no gradient flows into c."""
    _require_tensor(x, "x")
    c = np.asarray(c, dtype=x.dtype)
    out_data = x.data * c
    if out_data.shape != x.shape:
        raise GeometryError(f"mul_const must not change shape: {x.shape} -> {out_data.shape}")

    def backward(dout: np.ndarray) -> None:
        x.accumulate_grad(dout * c)

    return _emit(out_data, backward)


def _matmul_count(a_shape: tuple[int, ...], b_shape: tuple[int, ...]) -> int:
    # scalar multiplies of a plain (possibly batched) matrix product
    m, k = a_shape[-2], a_shape[-1]
    n = b_shape[-1]
    batch = 1
    for d in a_shape[:-2]:
        batch *= d
    return batch * m * k * n


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.

    Supported shapes:
      * (m,k) @ (k,n)
      * (...,m,k) @ (k,n)        -- shared projection, weight grad sums batch
      * (...,m,k) @ (...,k,n)    -- leading dims must match exactly
    Anything else is a geometry error; implicit broadcasting is not offered.
    """
    _require_tensor(a, "a")
    _require_tensor(b, "b")
    _require_same_dtype(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise GeometryError(f"matmul needs >=2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise GeometryError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise GeometryError(
            f"matmul leading dims must match exactly: {a.shape} @ {b.shape}"
        )

    counter = _active_counter()
    if counter is not None:
        counter.add(_current_label(), _matmul_count(a.shape, b.shape))

    if b.ndim == 2 and a.ndim > 2:

        def backward(dout: np.ndarray) -> None:
            k, n = b.shape
            a.accumulate_grad(dout @ b.data.T)
            b.accumulate_grad(a.data.reshape(-1, k).T @ dout.reshape(-1, n))

    else:

        def backward(dout: np.ndarray) -> None:
            a.accumulate_grad(dout @ np.swapaxes(b.data, -1, -2))
            b.accumulate_grad(np.swapaxes(a.data, -1, -2) @ dout)

    return _emit(a.data @ b.data, backward)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilized by subtracting the row max."""
    _require_tensor(x, "x")
    if x.ndim < 1:
        raise GeometryError("softmax needs at least one axis")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=-1, keepdims=True)

    def backward(dout: np.ndarray) -> None:
        inner = (dout * out_data).sum(axis=-1, keepdims=True)
        x.accumulate_grad(out_data * (dout - inner))

    return _emit(out_data, backward)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    _require_tensor(x, "x")
    inv_sqrt2 = np.asarray(1.0 / math.sqrt(2.0), dtype=x.dtype)
    phi = (erf(x.data * inv_sqrt2) + 1) * np.asarray(0.5, dtype=x.dtype)
    out_data = (x.data * phi).astype(x.dtype, copy=False)

    def backward(dout: np.ndarray) -> None:
        inv_sqrt2pi = np.asarray(1.0 / math.sqrt(2.0 * math.pi), dtype=x.dtype)
        density = np.exp(x.data * x.data * np.asarray(-0.5, dtype=x.dtype)) * inv_sqrt2pi
        x.accumulate_grad(dout * (phi + x.data * density))

    return _emit(out_data, backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis to zero mean / unit variance, then affine."""
    _require_tensor(x, "x")
    _require_tensor(gain, "gain")
    _require_tensor(bias, "bias")
    _require_same_dtype(x, gain)
    _require_same_dtype(x, bias)
    c = x.shape[-1]
    if gain.shape != (c,) or bias.shape != (c,):
        raise GeometryError(
            f"layer_norm affine shapes {gain.shape}/{bias.shape} must be ({c},)"
        )
    mean = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.dtype))
    normed = centered * inv_std
    out_data = normed * gain.data + bias.data

    def backward(dout: np.ndarray) -> None:
        bias.accumulate_grad(dout.reshape(-1, c).sum(axis=0))
        gain.accumulate_grad((dout * normed).reshape(-1, c).sum(axis=0))
        dnormed = dout * gain.data
        # d/dx of (x - mean) * inv_std with mean, var functions of x
        dvar_term = (dnormed * normed).mean(axis=-1, keepdims=True)
        dmean_term = dnormed.mean(axis=-1, keepdims=True)
        x.accumulate_grad(inv_std * (dnormed - dmean_term - normed * dvar_term))

    return _emit(out_data, backward)


def embedding(table: Tensor, indices: np.ndarray) -> Tensor:
    """Row lookup: out[..., :] = table[indices[...], :].

    Gradient scatter-adds into the looked-up rows; untouched rows keep an
    exactly-zero gradient.
    """
    _require_tensor(table, "table")
    if table.ndim != 2:
        raise GeometryError(f"embedding table must be 2-d, got {table.shape}")
    indices = np.asarray(indices)
    if not np.issubdtype(indices.dtype, np.integer):
        raise TypeError(f"indices must be integers, got {indices.dtype}")
    if indices.size and (indices.min() < 0 or indices.max() >= table.shape[0]):
        raise IndexError(
            f"index out of range for table with {table.shape[0]} rows: "
            f"[{indices.min()}, {indices.max()}]"
        )
    idx = indices.copy()

    def backward(dout: np.ndarray) -> None:
        dtable = np.zeros_like(table.data)
        np.add.at(dtable, idx.reshape(-1), dout.reshape(-1, table.shape[1]))
        table.accumulate_grad(dtable)

    return _emit(table.data[idx], backward)


def gather_rows(x: Tensor, indices: np.ndarray) -> Tensor:
    """Select rows of a 2-d tensor; gradient is zero at unselected rows."""
    _require_tensor(x, "x")
    if x.ndim != 2:
        raise GeometryError(f"gather_rows expects a 2-d tensor, got {x.shape}")
    indices = np.asarray(indices)
    if indices.ndim != 1 or not np.issubdtype(indices.dtype, np.integer):
        raise TypeError("indices must be a 1-d integer array")
    if indices.size and (indices.min() < 0 or indices.max() >= x.shape[0]):
        raise IndexError(f"row index out of range for {x.shape[0]} rows")
    idx = indices.copy()

    def backward(dout: np.ndarray) -> None:
        dx = np.zeros_like(x.data)
        np.add.at(dx, idx, dout)
        x.accumulate_grad(dx)

    return _emit(x.data[idx], backward)


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-softmax probability of the target classes.

    logits: (..., M); targets: integer array of shape logits.shape[:-1].
    Gradient at each position is (softmax(logits) - onehot(target)) / P where
    P is the number of positions averaged over.
    """
    _require_tensor(logits, "logits")
    if logits.ndim < 1:
        raise GeometryError("cross_entropy needs a class axis")
    m = logits.shape[-1]
    targets = np.asarray(targets)
    if not np.issubdtype(targets.dtype, np.integer):
        raise TypeError(f"targets must be integers, got {targets.dtype}")
    if targets.shape != logits.shape[:-1]:
        raise GeometryError(
            f"targets shape {targets.shape} must match logits leading shape "
            f"{logits.shape[:-1]}"
        )
    if targets.size == 0:
        raise ContractError("cross_entropy over an empty target set")
    if targets.min() < 0 or targets.max() >= m:
        raise IndexError(f"target class out of range [0, {m})")

    flat_logits = logits.data.reshape(-1, m)
    flat_targets = targets.reshape(-1).copy()
    p = flat_targets.shape[0]
    shifted = flat_logits - flat_logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=-1, keepdims=True)
    log_z = np.log(e.sum(axis=-1))
    losses = log_z - shifted[np.arange(p), flat_targets]
    out_data = np.asarray(losses.mean(), dtype=logits.dtype)

    def backward(dout: np.ndarray) -> None:
        d = probs.copy()
        d[np.arange(p), flat_targets] -= 1
        d *= dout.reshape(()) / np.asarray(p, dtype=logits.dtype)
        logits.accumulate_grad(d.reshape(logits.shape).astype(logits.dtype, copy=False))

    return _emit(out_data, backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Reshape preserving element count; gradient reshapes back."""
    _require_tensor(x, "x")
    shape = tuple(int(s) for s in shape)
    if math.prod(shape) != x.data.size:
        raise GeometryError(f"cannot reshape {x.shape} to {shape}")
    in_shape = x.shape

    def backward(dout: np.ndarray) -> None:
        x.accumulate_grad(dout.reshape(in_shape))

    return _emit(x.data.reshape(shape).copy(), backward)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    """Permute axes; gradient applies the inverse permutation."""
    _require_tensor(x, "x")
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise GeometryError(f"axes {axes} is not a permutation of {x.ndim} dims")
    inverse = np.argsort(axes)

    def backward(dout: np.ndarray) -> None:
        x.accumulate_grad(np.ascontiguousarray(dout.transpose(inverse)))

    return _emit(np.ascontiguousarray(x.data.transpose(axes)), backward)


def _im2col(x_pad: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    # (n, hp, wp, c) -> (n, ho, wo, kh, kw, c)
    windows = np.lib.stride_tricks.sliding_window_view(x_pad, (kh, kw), axis=(1, 2))
    windows = windows[:, ::stride, ::stride]  # (n, ho, wo, c, kh, kw)
    return np.ascontiguousarray(np.moveaxis(windows, 3, 5))


def _col2im_add(
    cols: np.ndarray, hp: int, wp: int, kh: int, kw: int, stride: int
) -> np.ndarray:
    # (n, ho, wo, kh, kw, c) -> (n, hp, wp, c), overlaps summed
    n, ho, wo = cols.shape[:3]
    c = cols.shape[-1]
    out = np.zeros((n, hp, wp, c), dtype=cols.dtype)
    for di in range(kh):
        for dj in range(kw):
            out[:, di : di + ho * stride : stride, dj : dj + wo * stride : stride, :] += cols[
                :, :, :, di, dj, :
            ]
    return out


def _check_conv_args(kernel: Tensor, stride: int, padding: int) -> None:
    if kernel.ndim != 4:
        raise GeometryError(f"conv kernel must be 4-d (kh,kw,cin,cout), got {kernel.shape}")
    if stride < 1:
        raise GeometryError(f"stride must be >= 1, got {stride}")
    if padding < 0:
        raise GeometryError(f"padding must be >= 0, got {padding}")


def conv2d(
    x: Tensor, kernel: Tensor, bias: Tensor | None, stride: int = 1, padding: int = 0
) -> Tensor:
    """2-d strided convolution, channels last.

    x: (n, h, w, cin); kernel: (kh, kw, cin, cout); bias: (cout,) or None.
    Output spatial size is (h + 2*padding - kh)//stride + 1.
    """
    _require_tensor(x, "x")
    _require_tensor(kernel, "kernel")
    _require_same_dtype(x, kernel)
    _check_conv_args(kernel, stride, padding)
    if x.ndim != 4:
        raise GeometryError(f"conv2d input must be 4-d (n,h,w,c), got {x.shape}")
    kh, kw, cin, cout = kernel.shape
    n, h, w, c = x.shape
    if c != cin:
        raise GeometryError(f"input channels {c} != kernel cin {cin}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if hp < kh or wp < kw:
        raise GeometryError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    if bias is not None:
        _require_tensor(bias, "bias")
        _require_same_dtype(x, bias)
        if bias.shape != (cout,):
            raise GeometryError(f"conv bias shape {bias.shape} must be ({cout},)")

    x_pad = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    cols = _im2col(x_pad, kh, kw, stride)  # (n, ho, wo, kh, kw, cin)
    cols2 = cols.reshape(n * ho * wo, kh * kw * cin)
    k2 = kernel.data.reshape(kh * kw * cin, cout)
    out_data = (cols2 @ k2).reshape(n, ho, wo, cout)
    if bias is not None:
        out_data = out_data + bias.data

    def backward(dout: np.ndarray) -> None:
        dflat = dout.reshape(n * ho * wo, cout)
        kernel.accumulate_grad((cols2.T @ dflat).reshape(kernel.shape))
        if bias is not None:
            bias.accumulate_grad(dflat.sum(axis=0))
        dcols = (dflat @ k2.T).reshape(n, ho, wo, kh, kw, cin)
        dx_pad = _col2im_add(dcols, hp, wp, kh, kw, stride)
        if padding:
            dx_pad = dx_pad[:, padding : padding + h, padding : padding + w, :]
        x.accumulate_grad(dx_pad)

    return _emit(out_data, backward)


def conv2d_transpose(
    x: Tensor,
    kernel: Tensor,
    bias: Tensor | None,
    stride: int = 1,
    padding: int = 0,
    output_padding: int = 0,
) -> Tensor:
    """Transposed 2-d convolution (the adjoint of conv2d's input map).

    x: (n, h, w, cin); kernel: (kh, kw, cout, cin); bias: (cout,) or None.
    Output spatial size is (h-1)*stride - 2*padding + kh + output_padding.
    """
    _require_tensor(x, "x")
    _require_tensor(kernel, "kernel")
    _require_same_dtype(x, kernel)
    _check_conv_args(kernel, stride, padding)
    if x.ndim != 4:
        raise GeometryError(f"conv2d_transpose input must be 4-d, got {x.shape}")
    if output_padding < 0 or output_padding >= stride:
        raise GeometryError(
            f"output_padding must be in [0, stride), got {output_padding}"
        )
    kh, kw, cout, cin = kernel.shape
    n, h, w, c = x.shape
    if c != cin:
        raise GeometryError(f"input channels {c} != kernel cin {cin}")
    h_out = (h - 1) * stride - 2 * padding + kh + output_padding
    w_out = (w - 1) * stride - 2 * padding + kw + output_padding
    if h_out < 1 or w_out < 1:
        raise GeometryError("transposed conv output would be empty")
    if bias is not None:
        _require_tensor(bias, "bias")
        _require_same_dtype(x, bias)
        if bias.shape != (cout,):
            raise GeometryError(f"conv bias shape {bias.shape} must be ({cout},)")

    hp = h_out + 2 * padding
    wp = w_out + 2 * padding
    k2 = kernel.data.reshape(kh * kw * cout, cin)
    cols = (x.data.reshape(n * h * w, cin) @ k2.T).reshape(n, h, w, kh, kw, cout)
    full = _col2im_add(cols, hp, wp, kh, kw, stride)
    out_data = full[:, padding : padding + h_out, padding : padding + w_out, :]
    out_data = np.ascontiguousarray(out_data)
    if bias is not None:
        out_data = out_data + bias.data

    def backward(dout: np.ndarray) -> None:
        if bias is not None:
            bias.accumulate_grad(dout.reshape(-1, cout).sum(axis=0))
        dout_pad = np.pad(
            dout, ((0, 0), (padding, padding), (padding, padding), (0, 0))
        )
        dcols = _im2col(dout_pad[:, : (h - 1) * stride + kh, : (w - 1) * stride + kw, :],
                        kh, kw, stride)  # (n, h, w, kh, kw, cout)
        dcols2 = dcols.reshape(n * h * w, kh * kw * cout)
        x.accumulate_grad((dcols2 @ k2).reshape(n, h, w, cin))
        kernel.accumulate_grad(
            (dcols2.T @ x.data.reshape(n * h * w, cin)).reshape(kernel.shape)
        )

    return _emit(out_data, backward)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate along an axis; gradient splits back to the inputs."""
    if not parts:
        raise ContractError("concat needs at least one tensor")
    for p in parts:
        _require_tensor(p, "parts")
        _require_same_dtype(parts[0], p)
        if p.ndim != parts[0].ndim:
            raise GeometryError("concat operands must share rank")
    axis = axis % parts[0].ndim
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(dout: np.ndarray) -> None:
        for p, start, stop in zip(parts, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * dout.ndim
            sl[axis] = slice(start, stop)
            p.accumulate_grad(np.ascontiguousarray(dout[tuple(sl)]))

    return _emit(np.concatenate([p.data for p in parts], axis=axis), backward)


def sum_all(x: Tensor) -> Tensor:
    """Sum every element to a scalar."""
    _require_tensor(x, "x")

    def backward(dout: np.ndarray) -> None:
        x.accumulate_grad(np.broadcast_to(dout.reshape(()), x.shape).astype(x.dtype))

    return _emit(np.asarray(x.data.sum(), dtype=x.dtype), backward)


def mean_all(x: Tensor) -> Tensor:
    """Mean of every element, as a scalar."""
    _require_tensor(x, "x")
    inv = 1.0 / x.data.size

    def backward(dout: np.ndarray) -> None:
        g = dout.reshape(()) * np.asarray(inv, dtype=x.dtype)
        x.accumulate_grad(np.broadcast_to(g, x.shape).astype(x.dtype))

    return _emit(np.asarray(x.data.mean(), dtype=x.dtype), backward)


def grad_check(
    fn: Callable[[list[Tensor]], Tensor],
    points: Iterable[np.ndarray],
    epsilon: float = 1e-5,
    max_checks: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare tape gradients of a scalar function against central differences.

    `fn` maps a list of leaf Tensors to a scalar Tensor and must be pure. The
    tape gradient is computed in the dtype of `points`; the finite-difference
    oracle always runs in float64 so its own noise does not mask backward-pass
    defects. Checks every coordinate, or `max_checks` randomly chosen ones.
    Returns the maximum relative error |g - fd| / max(|g|, |fd|, 1e-12).
    """
    points = [np.asarray(p) for p in points]
    leaves = [Tensor(p.copy()) for p in points]
    with Tape() as tape:
        out = fn(leaves)
    if not isinstance(out, Tensor) or out.data.size != 1:
        raise ContractError("grad_check needs fn to return a scalar Tensor")
    tape.backward(out)
    grads = [
        leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        for leaf in leaves
    ]

    coords: list[tuple[int, int]] = []
    for ti, p in enumerate(points):
        coords.extend((ti, i) for i in range(p.size))
    if max_checks is not None and max_checks < len(coords):
        if rng is None:
            rng = np.random.default_rng(0)
        chosen = rng.choice(len(coords), size=max_checks, replace=False)
        coords = [coords[int(i)] for i in np.sort(chosen)]

    points64 = [p.astype(np.float64) for p in points]

    def eval64() -> float:
        result = fn([Tensor(p.copy()) for p in points64])
        return float(result.data.reshape(()))

    worst = 0.0
    for ti, flat in coords:
        original = points64[ti].flat[flat]
        points64[ti].flat[flat] = original + epsilon
        f_plus = eval64()
        points64[ti].flat[flat] = original - epsilon
        f_minus = eval64()
        points64[ti].flat[flat] = original
        fd = (f_plus - f_minus) / (2.0 * epsilon)
        g = float(grads[ti].flat[flat])
        rel = abs(g - fd) / max(abs(g), abs(fd), 1e-12)
        worst = max(worst, rel)
    return worst


def grad_check_direction(
    fn: Callable[[list[Tensor]], Tensor],
    points: Iterable[np.ndarray],
    epsilon: float = 1e-5,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare the tape gradient projected on one random unit direction
    against the central difference of `fn` along that same direction.

    The componentwise check loses meaning on coordinates whose true partial
    sits below the finite-difference roundoff floor ~u*|f|/(2*epsilon); the
    directional form aggregates every coordinate into a single derivative of
    healthy magnitude, so a defect anywhere in the backward pass still shows
    while the oracle noise stays far below the tolerances of interest. The
    tape gradient keeps the dtype of `points`; the difference quotient runs
    in float64. Returns |<g,d> - fd| / max(|<g,d>|, |fd|, 1e-12).
    """
    if rng is None:
        rng = np.random.default_rng(0)
    points = [np.asarray(p) for p in points]
    leaves = [Tensor(p.copy()) for p in points]
    with Tape() as tape:
        out = fn(leaves)
    if not isinstance(out, Tensor) or out.data.size != 1:
        raise ContractError("grad_check_direction needs fn to return a scalar Tensor")
    tape.backward(out)

    direction = rng.normal(0.0, 1.0, sum(p.size for p in points))
    direction /= np.linalg.norm(direction)
    splits = np.cumsum([p.size for p in points])[:-1]
    parts = [d.copy() for d in np.split(direction, splits)]

    g_dot_d = 0.0
    for leaf, part in zip(leaves, parts):
        grad = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        g_dot_d += float(np.asarray(grad, np.float64).reshape(-1) @ part)

    points64 = [p.astype(np.float64) for p in points]

    def eval_at(sign: float) -> float:
        shifted = [
            Tensor(p + sign * epsilon * part.reshape(p.shape))
            for p, part in zip(points64, parts)
        ]
        return float(fn(shifted).data.reshape(()))

    fd = (eval_at(1.0) - eval_at(-1.0)) / (2.0 * epsilon)
    return abs(g_dot_d - fd) / max(abs(g_dot_d), abs(fd), 1e-12)
