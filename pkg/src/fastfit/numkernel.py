"""Dense numeric kernels and seeded RNG shared by every other module.

Values are plain numpy arrays (row-major, rank 1-3, float32/float64 per the
build-wide dtype switch). Every kernel is a pure function: it coerces inputs
to the active dtype, validates shapes, and checks its output for NaN/Inf,
which is treated as a contract violation rather than a value.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np

# The universal value carrier: contiguous row-major ndarray, rank 1-3.
TensorF = np.ndarray

LAYER_NORM_EPS = 1e-5

MAX_RANK = 3


class ShapeError(ValueError):
    """Operand shapes violate a kernel precondition."""


class NumericError(ArithmeticError):
    """A kernel produced (or was fed) NaN/Inf where finite values are required."""


# ---------------------------------------------------------------------------
# Build-wide dtype switch. Verification suites run float64, benchmarks float32.
# ---------------------------------------------------------------------------

_state = threading.local()


def set_dtype(dtype) -> None:
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"build dtype must be float32 or float64, got {dt}")
    _state.dtype = dt


def get_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(np.float64))


@contextmanager
def use_dtype(dtype):
    """Temporarily switch the build dtype (restores the previous one)."""
    prev = get_dtype()
    set_dtype(dtype)
    try:
        yield
    finally:
        set_dtype(prev)


def tolerance(abs64: float, abs32: float) -> float:
    """Pick the dtype-appropriate absolute tolerance."""
    return abs64 if get_dtype() == np.dtype(np.float64) else abs32


# ---------------------------------------------------------------------------
# Kernel invocation counters (used by the cache cost instrumentation).
# ---------------------------------------------------------------------------

_kernel_calls: dict[str, int] = {}


def reset_kernel_counts() -> None:
    _kernel_calls.clear()


def kernel_counts() -> dict[str, int]:
    return dict(_kernel_calls)


def total_kernel_calls() -> int:
    return sum(_kernel_calls.values())


def _count(name: str) -> None:
    _kernel_calls[name] = _kernel_calls.get(name, 0) + 1


def record_kernel(name: str) -> None:
    """Count a kernel-equivalent invocation performed outside this module."""
    _count(name)


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------

def as_tensor(x, allow_noncontiguous: bool = False) -> TensorF:
    """Coerce to a contiguous array in the active dtype; rank must be <= 3."""
    a = np.asarray(x, dtype=get_dtype())
    if a.ndim > MAX_RANK:
        raise ShapeError(f"rank {a.ndim} exceeds the rank-{MAX_RANK} contract")
    if not allow_noncontiguous:
        a = np.ascontiguousarray(a)
    return a


def check_finite(a: TensorF, where: str = "kernel") -> TensorF:
    if not np.all(np.isfinite(a)):
        raise NumericError(f"non-finite values produced by {where}")
    return a


# ---------------------------------------------------------------------------
# Kernels
# ---------------------------------------------------------------------------

def matmul(a: TensorF, b: TensorF) -> TensorF:
    """Standard matrix product of 2-D operands, accumulated in the build dtype."""
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} x {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dims differ: {a.shape} x {b.shape}")
    _count("matmul")
    return check_finite(a @ b, "matmul")


def softmax_rows(x: TensorF) -> TensorF:
    """Row-wise softmax with max-subtraction; -inf entries map to exactly 0.

    A row that is -inf everywhere has no distribution to normalize to and
    raises NumericError.
    """
    x = as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"softmax_rows needs a 2-D input, got shape {x.shape}")
    if np.isnan(x).any() or np.isposinf(x).any():
        raise NumericError("softmax_rows input must be finite or -inf")
    _count("softmax_rows")
    row_max = np.max(x, axis=1, keepdims=True)
    if not np.all(np.isfinite(row_max)):
        raise NumericError("softmax_rows: entire row is masked (-inf)")
    e = np.exp(x - row_max)
    out = e / np.sum(e, axis=1, keepdims=True)
    return check_finite(out, "softmax_rows")


def layer_norm(x: TensorF, gain: TensorF, bias: TensorF) -> TensorF:
    """Per-row standardization followed by an affine map; eps 1e-5 in the sqrt."""
    x = as_tensor(x)
    gain = as_tensor(gain)
    bias = as_tensor(bias)
    if x.ndim != 2:
        raise ShapeError(f"layer_norm needs a 2-D input, got shape {x.shape}")
    d = x.shape[1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"gain/bias must be ({d},), got {gain.shape}/{bias.shape}")
    _count("layer_norm")
    mean = np.mean(x, axis=1, keepdims=True)
    var = np.mean((x - mean) ** 2, axis=1, keepdims=True)
    xhat = (x - mean) / np.sqrt(var + LAYER_NORM_EPS)
    return check_finite(xhat * gain + bias, "layer_norm")


def normalize_rows(x: TensorF) -> tuple[TensorF, TensorF]:
    """layer_norm's standardization step, returning (xhat, inv_std) for reuse."""
    x = as_tensor(x)
    mean = np.mean(x, axis=1, keepdims=True)
    var = np.mean((x - mean) ** 2, axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + LAYER_NORM_EPS)
    return (x - mean) * inv_std, inv_std


def sigmoid(x: TensorF) -> TensorF:
    x = as_tensor(x)
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def silu(x: TensorF) -> TensorF:
    """x * sigmoid(x), elementwise."""
    x = as_tensor(x)
    _count("silu")
    return check_finite(x * sigmoid(x), "silu")


def init_weights(shape, rng: "Rng", scheme: str = "uniform-fan-in") -> TensorF:
    """Deterministic weight init: uniform-fan-in (bound 1/sqrt(fan_in)), zeros,
    or identity. fan_in is the leading dim."""
    shape = tuple(int(s) for s in shape)
    if len(shape) == 0 or len(shape) > MAX_RANK:
        raise ShapeError(f"init_weights: bad shape {shape}")
    if scheme == "zeros":
        return np.zeros(shape, dtype=get_dtype())
    if scheme == "identity":
        if len(shape) != 2 or shape[0] != shape[1]:
            raise ShapeError(f"identity init needs a square matrix, got {shape}")
        return np.eye(shape[0], dtype=get_dtype())
    if scheme == "uniform-fan-in":
        bound = 1.0 / np.sqrt(shape[0])
        return rng.uniform(shape, -bound, bound)
    raise ValueError(f"unknown init scheme {scheme!r}")


# ---------------------------------------------------------------------------
# RNG — counter-based (Philox), so one seed yields one stream everywhere.
# ---------------------------------------------------------------------------

class Rng:
    """Seeded counter-based generator (Philox) with derived child streams."""

    def __init__(self, seed: int, _seq: np.random.SeedSequence | None = None):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._seq = _seq if _seq is not None else np.random.SeedSequence(self.seed)
        self._gen = np.random.Generator(np.random.Philox(self._seq))

    def spawn(self, n: int = 1) -> "Rng | list[Rng]":
        children = [Rng(self.seed, _seq=s) for s in self._seq.spawn(n)]
        return children[0] if n == 1 else children

    def derive(self, label: str) -> "Rng":
        """Independent stream keyed by (seed, label); stable across calls."""
        key = int.from_bytes(label.encode("utf-8")[:8].ljust(8, b"\0"), "little")
        return Rng(self.seed, _seq=np.random.SeedSequence([self.seed, key]))

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> TensorF:
        return as_tensor(self._gen.uniform(low, high, size=shape))

    def normal(self, shape) -> TensorF:
        return as_tensor(self._gen.standard_normal(size=shape))

    def integers(self, low: int, high: int | None = None, size=None):
        return self._gen.integers(low, high, size=size)

    def random(self) -> float:
        return float(self._gen.random())

    def choice(self, seq, size=None, replace=True):
        return self._gen.choice(seq, size=size, replace=replace)
