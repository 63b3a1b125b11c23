"""Dense numeric kernels with fixed summation order and allocation accounting.

Matrices are plain row-major ``numpy.ndarray`` objects. Kernels never reorder
reductions: the matmul accumulates ``k`` in ascending order for every output
element, so results are bit-identical to a scalar triple loop.
"""
from __future__ import annotations

import math
import threading
import weakref
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import KernelError, ShapeError

GELU_TANH_COEF = math.sqrt(2.0 / math.pi)  # 0.7978845608028654
GELU_CUBIC_COEF = 0.044715

PRECISIONS = {"float32": np.float32, "float64": np.float64}


def resolve_dtype(precision) -> np.dtype:
    if isinstance(precision, str):
        try:
            return np.dtype(PRECISIONS[precision])
        except KeyError:
            raise ValueError(f"unknown precision {precision!r}; expected one of {sorted(PRECISIONS)}") from None
    dt = np.dtype(precision)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dt}")
    return dt


# ---------------------------------------------------------------------------
# allocation accounting


class AllocCounter:
    """Process-wide tally of bytes held by kernel outputs.

    Tracking is off by default because registering a finalizer per array
    costs about a microsecond; benchmarks enable it for the memory pass only.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self.current_bytes = 0
        self.peak_bytes = 0
        self.enabled = False

    def alloc(self, nbytes: int) -> None:
        with self._lock:
            self.current_bytes += nbytes
            if self.current_bytes > self.peak_bytes:
                self.peak_bytes = self.current_bytes

    def free(self, nbytes: int) -> None:
        with self._lock:
            self.current_bytes -= nbytes

    def track(self, arr: np.ndarray) -> np.ndarray:
        # views share their base's buffer and are not counted again
        if self.enabled and arr.base is None:
            n = arr.nbytes
            self.alloc(n)
            weakref.finalize(arr, self.free, n)
        return arr

    def reset_peak(self) -> None:
        with self._lock:
            self.peak_bytes = self.current_bytes

    @contextmanager
    def window(self):
        """Enable tracking and yield a `MemoryWindow` filled in on exit."""
        prev = self.enabled
        self.enabled = True
        self.reset_peak()
        win = MemoryWindow(start_bytes=self.current_bytes)
        try:
            yield win
        finally:
            win.peak_bytes = self.peak_bytes
            win.end_bytes = self.current_bytes
            self.enabled = prev


@dataclass
class MemoryWindow:
    start_bytes: int
    peak_bytes: int = 0
    end_bytes: int = 0

    @property
    def peak_delta(self) -> int:
        return self.peak_bytes - self.start_bytes


ALLOC = AllocCounter()


def track(arr: np.ndarray) -> np.ndarray:
    return ALLOC.track(arr)


# ---------------------------------------------------------------------------
# rng


class Rng:
    """Seeded PCG64 stream (numpy's documented, platform-stable bit generator)."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def normal(self, shape, std=1.0, dtype=np.float64) -> np.ndarray:
        return (self._gen.standard_normal(shape) * std).astype(dtype, copy=False)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def spawn(self, key: int) -> "Rng":
        return Rng((self.seed * 1_000_003 + int(key)) % (2**63))


# ---------------------------------------------------------------------------
# kernels


def _check_finite(out: np.ndarray, name: str) -> np.ndarray:
    # a finite sum implies every element is finite
    if not math.isfinite(float(out.sum())) and not np.isfinite(out).all():
        raise KernelError(f"{name}: non-finite output")
    return out


@njit(cache=True)
def _rows(a, b, out, i, ni):
    # rows i..i+ni of a @ b; every output element accumulates k in ascending order
    m = out.shape[1]
    kk = a.shape[1]
    if ni == 4:
        for j in range(m):
            out[i, j] = 0.0
            out[i + 1, j] = 0.0
            out[i + 2, j] = 0.0
            out[i + 3, j] = 0.0
        for k in range(kk):
            a0 = a[i, k]
            a1 = a[i + 1, k]
            a2 = a[i + 2, k]
            a3 = a[i + 3, k]
            for j in range(m):
                bkj = b[k, j]
                out[i, j] += a0 * bkj
                out[i + 1, j] += a1 * bkj
                out[i + 2, j] += a2 * bkj
                out[i + 3, j] += a3 * bkj
    else:
        for r in range(i, i + ni):
            for j in range(m):
                out[r, j] = 0.0
            for k in range(kk):
                ark = a[r, k]
                for j in range(m):
                    out[r, j] += ark * b[k, j]


@njit(cache=True)
def _mm2(a, b, out):
    """``out = a @ b[:K, :m]`` where K = a.shape[1], m = out.shape[1]."""
    n = a.shape[0]
    i = 0
    while i < n:
        ni = min(4, n - i)
        _rows(a, b, out, i, ni)
        i += ni
    return out


@njit(cache=True)
def _bmm(a, b, out):
    for p in range(a.shape[0]):
        _mm2(a[p], b[p], out[p])
    return out


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with ascending-k accumulation.

    ``a`` may carry leading batch dimensions. ``b`` is either a single
    ``(k, m)`` matrix shared across the batch or has the same leading
    dimensions as ``a``.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs at least 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    return matmul_prefix(a, b, b.shape[-1])


def matmul_prefix(a: np.ndarray, b: np.ndarray, m: int) -> np.ndarray:
    """``a @ b[..., :K, :m]`` reading a larger buffer ``b`` in place (K = a.shape[-1]).

    Lets attention read the live prefix of a preallocated KV-cache buffer
    without copying it.
    """
    if a.dtype != b.dtype:
        raise ShapeError(f"matmul dtype mismatch: {a.dtype} vs {b.dtype}")
    kk = a.shape[-1]
    if b.shape[-2] < kk or b.shape[-1] < m:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}[:{kk}, :{m}]")
    lead = a.shape[:-1]
    if b.ndim == 2:
        a2 = np.ascontiguousarray(a.reshape(-1, kk))
        buf = np.empty((a2.shape[0], m), dtype=a.dtype)
        _mm2(a2, np.ascontiguousarray(b), buf)
        out = buf.reshape(*lead, m)
    else:
        if a.shape[:-2] != b.shape[:-2]:
            raise ShapeError(f"matmul batch mismatch: {a.shape} x {b.shape}")
        n = a.shape[-2]
        a3 = np.ascontiguousarray(a.reshape(-1, n, kk))
        b3 = np.ascontiguousarray(b).reshape(-1, b.shape[-2], b.shape[-1])
        buf = np.empty((a3.shape[0], n, m), dtype=a.dtype)
        _bmm(a3, b3, buf)
        out = buf.reshape(*a.shape[:-1], m)
    _check_finite(buf, "matmul")
    track(buf)
    return out


def softmax_rows(a: np.ndarray) -> np.ndarray:
    """Softmax over the last axis with max subtraction."""
    if a.size == 0:
        raise ShapeError("softmax of an empty matrix")
    if np.isnan(a).any():
        raise KernelError("softmax: NaN input")
    shifted = a - a.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return track(e / e.sum(axis=-1, keepdims=True))


def gelu(x):
    """Tanh-approximated GELU."""
    x = np.asarray(x)
    return track(0.5 * x * (1.0 + np.tanh(GELU_TANH_COEF * (x + GELU_CUBIC_COEF * x**3))))


def gelu_grad(x):
    x = np.asarray(x)
    u = GELU_TANH_COEF * (x + GELU_CUBIC_COEF * x**3)
    t = np.tanh(u)
    du = GELU_TANH_COEF * (1.0 + 3.0 * GELU_CUBIC_COEF * x**2)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du


def sigmoid(x):
    x = np.asarray(x)
    return 1.0 / (1.0 + np.exp(-x))


def silu(x):
    x = np.asarray(x)
    return track(x * sigmoid(x))


def silu_grad(x):
    s = sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


def relu(x):
    x = np.asarray(x)
    return track(np.maximum(x, 0.0).astype(x.dtype, copy=False))


def relu_grad(x):
    x = np.asarray(x)
    return (x > 0).astype(x.dtype)


ACTIVATIONS = {"gelu": (gelu, gelu_grad), "silu": (silu, silu_grad), "relu": (relu, relu_grad)}


def elementwise_scale_rows(m: np.ndarray, v: np.ndarray, out: np.ndarray | None = None) -> np.ndarray:
    """``out[..., i, j] = v[..., j] * m[..., i, j]``.

    ``v`` is one vector broadcast over every row, or one vector per leading
    batch entry of ``m`` (shape ``m.shape[:-2] + (cols,)``). Pass ``out=m``
    to scale in place.
    """
    if v.shape[-1] != m.shape[-1]:
        raise ShapeError(f"scale vector length {v.shape[-1]} != matrix cols {m.shape[-1]}")
    if v.ndim != 1:
        if m.ndim < 2 or v.shape[:-1] != m.shape[:-2]:
            raise ShapeError(f"per-batch scale vectors {v.shape} do not match {m.shape}")
        v = v[..., None, :]
    if out is not None:
        return np.multiply(m, v, out=out)
    return track(m * v)


def rmsnorm(x: np.ndarray, weight: np.ndarray, eps: float) -> np.ndarray:
    ms = np.mean(x * x, axis=-1, keepdims=True)
    return track(x / np.sqrt(ms + eps) * weight)
