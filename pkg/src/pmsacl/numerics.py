"""Dense-array plumbing: PMT1 tensor files, counter-based RNG streams, and a
finite-difference gradient checker.

Arrays are plain numpy ndarrays in row-major order: float32 for training,
float64 for oracles and gradient checks. Public operations reject NaN/Inf.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import FormatError, NumericError

MAGIC = b"PMT1"
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}

# Hard cap so a corrupt header cannot ask for an absurd allocation.
_MAX_ELEMENTS = 1 << 33


def require_finite(arr: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {what}")
    return arr


def write_tensor(path: str | Path, arr: np.ndarray) -> None:
    """Write ``arr`` in the PMT1 format (little-endian, row-major, no padding)."""
    arr = np.ascontiguousarray(arr)
    if arr.dtype not in _DTYPE_CODES:
        raise FormatError(f"unsupported dtype {arr.dtype}; use float32 or float64")
    require_finite(arr)
    if any(e <= 0 for e in arr.shape):
        raise FormatError(f"extents must be positive, got {arr.shape}")
    if any(e > 0xFFFFFFFF for e in arr.shape):
        raise FormatError(f"extent overflow in shape {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def read_tensor(path: str | Path) -> np.ndarray:
    """Read a PMT1 file back into an ndarray, bit-exact."""
    data = Path(path).read_bytes()
    arr, used = decode_tensor(data)
    if used != len(data):
        raise FormatError(f"{used} bytes expected, file has trailing {len(data) - used}")
    return arr


def decode_tensor(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one PMT1 record from ``buf[offset:]``; returns (array, end offset)."""
    if len(buf) - offset < 6:
        raise FormatError("truncated header")
    if buf[offset : offset + 4] != MAGIC:
        raise FormatError(f"bad magic {buf[offset:offset + 4]!r}")
    code, ndim = buf[offset + 4], buf[offset + 5]
    if code not in _CODE_DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    pos = offset + 6
    if len(buf) - pos < 4 * ndim:
        raise FormatError("truncated extents")
    shape = struct.unpack_from(f"<{ndim}I", buf, pos)
    pos += 4 * ndim
    if any(e == 0 for e in shape):
        raise FormatError(f"zero extent in shape {shape}")
    count = 1
    for e in shape:
        count *= e
        if count > _MAX_ELEMENTS:
            raise FormatError(f"extent overflow: shape {shape}")
    dtype = _CODE_DTYPES[code]
    nbytes = count * dtype.itemsize
    if len(buf) - pos < nbytes:
        raise FormatError(f"truncated payload: need {nbytes} bytes, have {len(buf) - pos}")
    arr = np.frombuffer(buf, dtype=dtype, count=count, offset=pos).reshape(shape)
    return arr.astype(dtype.newbyteorder("="), copy=True), pos + nbytes


def encode_tensor(arr: np.ndarray) -> bytes:
    """PMT1 bytes for ``arr`` (same encoding as :func:`write_tensor`)."""
    arr = np.ascontiguousarray(arr)
    if arr.dtype not in _DTYPE_CODES:
        raise FormatError(f"unsupported dtype {arr.dtype}; use float32 or float64")
    require_finite(arr)
    if any(e <= 0 for e in arr.shape):
        raise FormatError(f"extents must be positive, got {arr.shape}")
    head = MAGIC + struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()


# ---------------------------------------------------------------------------
# Counter-based random streams
# ---------------------------------------------------------------------------

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_FNV_OFFSET = np.uint64(0xCBF29CE484222325)
_FNV_PRIME = np.uint64(0x100000001B3)


def _mix(x: np.ndarray) -> np.ndarray:
    """SplitMix64 finaliser; bijective on uint64."""
    x = (x ^ (x >> np.uint64(30))) * _MIX1
    x = (x ^ (x >> np.uint64(27))) * _MIX2
    return x ^ (x >> np.uint64(31))


def _label_key(seed: int, label: str) -> np.uint64:
    with np.errstate(over="ignore"):
        h = _FNV_OFFSET
        for byte in label.encode("utf-8"):
            h = np.uint64((int(h) ^ byte) & 0xFFFFFFFFFFFFFFFF)
            h = np.uint64((int(h) * int(_FNV_PRIME)) & 0xFFFFFFFFFFFFFFFF)
        key = _mix(np.uint64(seed & 0xFFFFFFFFFFFFFFFF) ^ h)
    return np.uint64(key)


@dataclass
class RngStream:
    """Deterministic counter-based random stream.

    Identical (seed, label) pairs reproduce the same sequence on every
    platform; distinct labels give independent streams. Streams are cheap
    value types: split one per sample before fanning out work and the result
    is independent of scheduling.
    """

    seed: int
    label: str = "root"
    counter: int = 0
    _key: np.uint64 = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self._key = _label_key(self.seed, self.label)

    def child(self, *parts: object) -> "RngStream":
        """Derive an independent stream labelled ``label/part[/part...]``."""
        suffix = "/".join(str(p) for p in parts)
        return RngStream(self.seed, f"{self.label}/{suffix}")

    def _raw(self, n: int) -> np.ndarray:
        counters = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            return _mix(self._key + counters * _GOLDEN)

    def uniform(self, size: int | tuple[int, ...] = ()) -> np.ndarray | float:
        """Uniform draws in [0, 1) with 53-bit resolution."""
        shape = (size,) if isinstance(size, int) else tuple(size)
        n = int(np.prod(shape)) if shape else 1
        vals = (self._raw(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return vals.reshape(shape) if shape else float(vals[0])

    def normal(self, size: int | tuple[int, ...] = ()) -> np.ndarray | float:
        """Standard normal draws via Box-Muller (2 uniforms per pair)."""
        shape = (size,) if isinstance(size, int) else tuple(size)
        n = int(np.prod(shape)) if shape else 1
        pairs = (n + 1) // 2
        u = (self._raw(2 * pairs) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        u1, u2 = u[:pairs], u[pairs:]
        radius = np.sqrt(-2.0 * np.log1p(-u1))
        angle = 2.0 * np.pi * u2
        vals = np.concatenate([radius * np.cos(angle), radius * np.sin(angle)])[:n]
        return vals.reshape(shape) if shape else float(vals[0])

    def integers(self, low: int, high: int, size: int | tuple[int, ...] = ()) -> np.ndarray | int:
        """Uniform integers in [low, high). Raises on an empty range."""
        if high <= low:
            raise NumericError(f"empty integer range [{low}, {high})")
        shape = (size,) if isinstance(size, int) else tuple(size)
        n = int(np.prod(shape)) if shape else 1
        u = (self._raw(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        vals = low + np.floor(u * (high - low)).astype(np.int64)
        return vals.reshape(shape) if shape else int(vals[0])

    def choice(self, n_options: int) -> int:
        return int(self.integers(0, n_options))

    def bernoulli(self, prob: float) -> bool:
        return bool(self.uniform() < prob)


# ---------------------------------------------------------------------------
# Finite-difference gradient oracle
# ---------------------------------------------------------------------------


def finite_diff_grad(
    fn: Callable[[np.ndarray], float],
    point: np.ndarray,
    step: float = 1e-5,
) -> np.ndarray:
    """Central-difference gradient estimate of a scalar function, in float64.

    Evaluates (f(x + h e_i) - f(x - h e_i)) / 2h for every coordinate. Used
    as the independent oracle for every analytic gradient in the package.
    """
    if step <= 0:
        raise NumericError(f"step must be positive, got {step}")
    x = np.asarray(point, dtype=np.float64)
    flat = x.reshape(-1).copy()
    grad = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        f_plus = float(fn(flat.reshape(x.shape)))
        flat[i] = orig - step
        f_minus = float(fn(flat.reshape(x.shape)))
        flat[i] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NumericError(f"non-finite function value near coordinate {i}")
        grad[i] = (f_plus - f_minus) / (2.0 * step)
    return grad.reshape(x.shape)


def max_relative_error(analytic: np.ndarray, reference: np.ndarray, floor: float = 1e-8) -> float:
    """max_i |a_i - r_i| / max(|a_i|, |r_i|, floor); the gradcheck metric."""
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    r = np.asarray(reference, dtype=np.float64).reshape(-1)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(r)), floor)
    return float(np.max(np.abs(a - r) / denom)) if a.size else 0.0
