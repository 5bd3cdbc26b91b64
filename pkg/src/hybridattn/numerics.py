"""Dense float64 matrices, reduced-precision emulation and finite differences.

A "matrix" throughout the package is a C-contiguous 2-D ``float64`` numpy
array. Reduced precision is emulated by rounding float64 values onto the
bf16 or e4m3 grids at explicit injection points; all arithmetic stays in
64-bit.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import _kernels


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ConfigError(ValueError):
    """A configuration violates its invariants."""


class NonFiniteError(ArithmeticError):
    """A NaN or infinity reached a place that forbids it."""


def as_matrix(x, name: str = "matrix", *, finite: bool = True) -> np.ndarray:
    m = np.ascontiguousarray(x, dtype=np.float64)
    if m.ndim == 1:
        m = m[None, :]
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    if finite and not np.all(np.isfinite(m)):
        raise NonFiniteError(f"{name} contains NaN or Inf")
    return m


def matmul(a, b) -> np.ndarray:
    """Matrix product with a fixed ascending summation order.

    Each output element is accumulated as ``0.0 + a[i,0]*b[0,j] + a[i,1]*b[1,j] + ...``
    so a row of the result depends only on the matching row of ``a``. This is
    what makes batched and one-token-at-a-time evaluation bitwise identical.
    """
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    return _kernels.matmul(a, b)


# --- bf16 -----------------------------------------------------------------

BF16_MAX = float.fromhex("0x1.fep127")


def round_bf16(x) -> np.ndarray:
    """Round to the nearest bfloat16 value (ties to even), returned as float64.

    Rounds directly from float64, so there is no double rounding through
    float32. Values past the bf16 range overflow to +-inf as in IEEE 754.
    """
    arr = np.asarray(x, dtype=np.float64)
    shape = arr.shape
    flat = np.ascontiguousarray(arr.reshape(1, -1) if arr.ndim != 2 else arr)
    return _kernels.round_bf16(flat).reshape(shape)


# --- fp8 e4m3 -------------------------------------------------------------

E4M3_MAX = 448.0
_E4M3_MIN_NORMAL_EXP = -6
_E4M3_NAN_CODES = (0x7F, 0xFF)


def _e4m3_table() -> np.ndarray:
    values = np.empty(256, dtype=np.float64)
    for code in range(256):
        sign = -1.0 if code & 0x80 else 1.0
        exp = (code >> 3) & 0xF
        man = code & 0x7
        if code in _E4M3_NAN_CODES:
            values[code] = np.nan
        elif exp == 0:
            values[code] = sign * man * 2.0**-9
        else:
            values[code] = sign * (1.0 + man / 8.0) * 2.0 ** (exp - 7)
    return values


E4M3_VALUES = _e4m3_table()
E4M3_VALUES.setflags(write=False)


def round_e4m3(y: np.ndarray) -> np.ndarray:
    """Round to the e4m3 grid (ties to even), saturating at +-448."""
    y = np.asarray(y, dtype=np.float64)
    _, e = np.frexp(y)
    e = np.maximum(e, _E4M3_MIN_NORMAL_EXP + 1)
    q = np.ldexp(1.0, e - 4)
    r = np.rint(y / q) * q
    return np.clip(r, -E4M3_MAX, E4M3_MAX)


def encode_e4m3(y: np.ndarray) -> np.ndarray:
    """Map values already on the e4m3 grid to their 8-bit codes."""
    y = np.asarray(y, dtype=np.float64)
    sign = np.where(np.signbit(y), 0x80, 0).astype(np.int64)
    a = np.abs(y)
    sub = a < 2.0**_E4M3_MIN_NORMAL_EXP
    m, e = np.frexp(np.where(sub, 1.0, a))
    exp_field = e - 1 + 7
    man_field = np.rint((2.0 * m - 1.0) * 8.0).astype(np.int64)
    normal_code = (exp_field << 3) | man_field
    sub_code = np.rint(a * 2.0**9).astype(np.int64)
    code = np.where(sub, sub_code, normal_code) | sign
    return code.astype(np.uint8)


@dataclass(frozen=True)
class QuantizedBlockMatrix:
    codes: np.ndarray  # uint8, same shape as the source matrix
    scales: np.ndarray  # one positive scale per block
    block_rows: int
    block_cols: int

    @property
    def shape(self) -> tuple[int, int]:
        return self.codes.shape


def _block_slices(n: int, size: int):
    return [slice(s, min(s + size, n)) for s in range(0, n, size)]


def quantize_fp8_blockwise(x, block_rows: int = 128, block_cols: int = 128) -> QuantizedBlockMatrix:
    """Absolute-max blockwise e4m3 quantization.

    Each block gets ``scale = max|x| / 448`` (1.0 for an all-zero block) and
    stores the e4m3 code of ``x / scale``. Edge blocks may be smaller than
    the nominal block size; they are scaled on their own.
    """
    if block_rows < 1 or block_cols < 1:
        raise ConfigError("fp8 block dimensions must be >= 1")
    x = as_matrix(x, "fp8 input")
    rows = _block_slices(x.shape[0], block_rows)
    cols = _block_slices(x.shape[1], block_cols)
    codes = np.zeros(x.shape, dtype=np.uint8)
    scales = np.ones((len(rows), len(cols)), dtype=np.float64)
    for bi, rs in enumerate(rows):
        for bj, cs in enumerate(cols):
            block = x[rs, cs]
            amax = float(np.max(np.abs(block))) if block.size else 0.0
            scale = amax / E4M3_MAX if amax > 0.0 else 1.0
            scales[bi, bj] = scale
            codes[rs, cs] = encode_e4m3(round_e4m3(block / scale))
    return QuantizedBlockMatrix(codes, scales, block_rows, block_cols)


def dequantize(q: QuantizedBlockMatrix) -> np.ndarray:
    values = E4M3_VALUES[q.codes]
    n, m = q.codes.shape
    out = np.empty((n, m), dtype=np.float64)
    for bi, rs in enumerate(_block_slices(n, q.block_rows)):
        for bj, cs in enumerate(_block_slices(m, q.block_cols)):
            out[rs, cs] = values[rs, cs] * q.scales[bi, bj]
    return out


# --- precision modes ------------------------------------------------------


class Precision(enum.Enum):
    EXACT64 = "exact"
    BF16 = "bf16"
    FP8_BLOCKWISE = "fp8"


@dataclass(frozen=True)
class PrecisionMode:
    kind: Precision = Precision.EXACT64
    block_rows: int = 128
    block_cols: int = 128

    def __post_init__(self):
        if self.kind is Precision.FP8_BLOCKWISE and (self.block_rows < 1 or self.block_cols < 1):
            raise ConfigError("fp8 block dimensions must be >= 1")

    @classmethod
    def exact(cls) -> "PrecisionMode":
        return cls(Precision.EXACT64)

    @classmethod
    def bf16(cls) -> "PrecisionMode":
        return cls(Precision.BF16)

    @classmethod
    def fp8(cls, block_rows: int = 128, block_cols: int = 128) -> "PrecisionMode":
        return cls(Precision.FP8_BLOCKWISE, block_rows, block_cols)

    @classmethod
    def parse(cls, text: str) -> "PrecisionMode":
        """Parse ``exact``, ``bf16``, ``fp8`` or ``fp8x<rows>x<cols>``."""
        t = text.strip().lower()
        if t in ("exact", "exact64", "fp64", "fp32"):
            return cls.exact()
        if t == "bf16":
            return cls.bf16()
        if t.startswith("fp8"):
            parts = t.split("x")[1:]
            if not parts:
                return cls.fp8()
            if len(parts) != 2:
                raise ConfigError(f"bad fp8 precision spec {text!r}")
            return cls.fp8(int(parts[0]), int(parts[1]))
        raise ConfigError(f"unknown precision {text!r}")

    @property
    def is_exact(self) -> bool:
        return self.kind is Precision.EXACT64

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Round ``x`` onto this mode's grid (identity for exact)."""
        if self.kind is Precision.EXACT64:
            return x
        if self.kind is Precision.BF16:
            return round_bf16(x)
        x = np.asarray(x, dtype=np.float64)
        flat = x.reshape(-1, x.shape[-1]) if x.ndim != 2 else x
        out = dequantize(quantize_fp8_blockwise(flat, self.block_rows, self.block_cols))
        return out.reshape(x.shape)

    def __str__(self) -> str:
        if self.kind is Precision.FP8_BLOCKWISE:
            return f"fp8x{self.block_rows}x{self.block_cols}"
        return self.kind.value


# --- finite differences ---------------------------------------------------


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of a matrix."""
    if not h > 0:
        raise ValueError("step h must be positive")
    x = as_matrix(x, "x").copy()
    grad = np.empty_like(x)
    for idx in np.ndindex(*x.shape):
        orig = x[idx]
        x[idx] = orig + h
        fp = float(f(x))
        x[idx] = orig - h
        fm = float(f(x))
        x[idx] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"objective is non-finite near index {idx}")
        grad[idx] = (fp - fm) / (2.0 * h)
    return grad
