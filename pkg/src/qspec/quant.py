"""Group-wise 4-bit weight quantization and per-token fake activation quantization.

One ``QuantizedTensor`` per linear layer is the single weight store shared by
both execution paths: the high-precision path dequantizes it and runs the
matmul on raw float activations, the low-precision path additionally pushes
the activations through a dynamic 4-bit quantize-dequantize round trip first.
No integer matmul kernels exist here; low-precision execution is emulated in
float32 ("fake quantization") so both paths stay bit-reproducible.

Quantization convention: symmetric, signed codes in [-8, 7], one scale per
(row, group) with ``scale = max|value| / 7``.  With a max-abs scale the -8
edge is never produced, so zero stays exactly representable and re-quantizing
dequantized data is a no-op.  To make that idempotence exact in float32 the
group max is first snapped to the nearest fixed point of
``m -> f32(7 * f32(m / 7))`` (at most 1 ulp away, converges in <= 2 steps).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import ConfigError, ShapeError
from .numerics import ensure_f32, matmul

F32 = np.float32
SEVEN = np.float32(7.0)

CODE_MIN = -8
CODE_MAX = 7

DEFAULT_GROUP_SIZE = 128


class ExecutionMode(Enum):
    """Activation handling for a forward pass over the shared 4-bit weights."""

    HIGH_PRECISION = "high"  # weights dequantized, activations untouched (W4A16-style)
    LOW_PRECISION = "low"    # activations fake-quantized per token/group (W4A4-style)


# ---------------------------------------------------------------------------
# Instrumentation (used by the mode-purity and weight-sharing audits)
# ---------------------------------------------------------------------------

_activation_quant_calls = 0
_qlinear_log: list[tuple[int, ExecutionMode]] | None = None


def activation_quant_calls() -> int:
    """Number of fake_quantize_activations invocations since the last reset."""
    return _activation_quant_calls


def reset_activation_quant_calls() -> None:
    global _activation_quant_calls
    _activation_quant_calls = 0


def start_qlinear_log() -> None:
    """Begin recording (id(weight), mode) for every qlinear_forward call."""
    global _qlinear_log
    _qlinear_log = []


def stop_qlinear_log() -> list[tuple[int, ExecutionMode]]:
    """Stop recording and return the collected call log."""
    global _qlinear_log
    log = _qlinear_log or []
    _qlinear_log = None
    return log


# ---------------------------------------------------------------------------
# Packing: two signed 4-bit codes per byte
# ---------------------------------------------------------------------------


def pack_int4(codes: np.ndarray) -> np.ndarray:
    """Pack int8 codes in [-8, 7] into bytes, two per byte over the flat row-major order.

    Byte b holds the code for flat element 2b in its low nibble and element
    2b+1 in its high nibble, both two's-complement 4-bit.  An odd element
    count leaves the final high nibble zero.
    """
    flat = codes.reshape(-1).astype(np.int8)
    if flat.size % 2 != 0:
        flat = np.concatenate([flat, np.zeros(1, dtype=np.int8)])
    u = flat.astype(np.uint8) & 0x0F
    return (u[0::2] | (u[1::2] << 4)).astype(np.uint8)


def unpack_int4(packed: np.ndarray, count: int) -> np.ndarray:
    """Unpack ``count`` signed 4-bit codes from a packed byte array."""
    low = (packed & 0x0F).astype(np.int16)
    high = ((packed >> 4) & 0x0F).astype(np.int16)
    inter = np.empty(packed.size * 2, dtype=np.int16)
    inter[0::2] = low
    inter[1::2] = high
    # two's-complement sign extension of the 4-bit field
    return (((inter ^ 8) - 8).astype(np.int8))[:count]


# ---------------------------------------------------------------------------
# QuantizedTensor
# ---------------------------------------------------------------------------


@dataclass
class QuantizedTensor:
    """Packed 4-bit weight codes plus per-(row, group) float32 scales.

    Immutable after construction; safe for concurrent reads.  ``codes`` is the
    packed byte array over the flat row-major [out_features x in_features]
    element order, ``scales`` has shape [out_features, in_features/group_size].
    """

    out_features: int
    in_features: int
    group_size: int
    codes: np.ndarray
    scales: np.ndarray
    _dequant_t_cache: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self) -> None:
        if self.in_features % self.group_size != 0:
            raise ConfigError(
                f"in_features {self.in_features} not divisible by group_size {self.group_size}"
            )
        n_elems = self.out_features * self.in_features
        if self.codes.dtype != np.uint8 or self.codes.size != (n_elems + 1) // 2:
            raise ShapeError(f"packed codes must hold {(n_elems + 1) // 2} bytes")
        n_groups = self.in_features // self.group_size
        if self.scales.shape != (self.out_features, n_groups) or self.scales.dtype != np.float32:
            raise ShapeError(f"scales must be float32 [{self.out_features}, {n_groups}]")
        if np.any(self.scales < 0) or not np.all(np.isfinite(self.scales)):
            raise ShapeError("scales must be finite and non-negative")

    @property
    def packed_bytes(self) -> int:
        """Byte count of the packed code storage (out*in/2 for even sizes)."""
        return int(self.codes.size)

    def unpacked_codes(self) -> np.ndarray:
        """Signed int8 codes of shape [out_features, in_features]."""
        flat = unpack_int4(self.codes, self.out_features * self.in_features)
        return flat.reshape(self.out_features, self.in_features)

    def dequant_t(self) -> np.ndarray:
        """Dequantized weights, transposed to [in_features, out_features].

        Cached after the first call: an emulation convenience only, and not
        counted as model weight footprint (real low-bit kernels never
        materialize the float weights).
        """
        if self._dequant_t_cache is None:
            self._dequant_t_cache = np.ascontiguousarray(dequantize(self).T)
        return self._dequant_t_cache


def _snap_group_max(m: np.ndarray) -> np.ndarray:
    """Snap group maxima to fixed points of ``m -> f32(7 * f32(m / 7))``.

    Guarantees that re-quantizing dequantized data recovers bit-identical
    scales.  The map is monotone with displacement <= 2 ulp, so iteration
    converges; 2 passes suffice in practice and 8 is a hard safety bound.
    """
    m = m.astype(np.float32, copy=True)
    for _ in range(8):
        nxt = SEVEN * (m / SEVEN)
        if np.array_equal(nxt, m):
            return m
        m = nxt
    raise AssertionError("group-max snap failed to converge")


def _quantize_groups(x: np.ndarray, group_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Shared kernel: symmetric 4-bit codes and scales per (row, group).

    Returns (codes int8 [rows, cols], scales float32 [rows, cols/group_size]).
    Ties round to even (IEEE rint).  All-zero groups get scale 0 and codes 0.
    """
    rows, cols = x.shape
    n_groups = cols // group_size
    g = x.reshape(rows, n_groups, group_size)
    m = _snap_group_max(np.max(np.abs(g), axis=-1))
    scales = m / SEVEN
    with np.errstate(divide="ignore", invalid="ignore"):
        q = np.rint(g / scales[:, :, None])
    q = np.where(scales[:, :, None] == 0, 0.0, q)
    codes = np.clip(q, CODE_MIN, CODE_MAX).astype(np.int8)
    return codes.reshape(rows, cols), scales


def quantize_groupwise(w: np.ndarray, group_size: int = DEFAULT_GROUP_SIZE) -> QuantizedTensor:
    """Quantize a float32 weight matrix [out, in] group-wise along the input axis.

    Per (row, group): ``scale = max|value| / 7`` and
    ``code = clamp(round(value / scale), -8, 7)``; an all-zero group gets
    scale 0 and codes 0.

    Raises:
        ConfigError: if the column count is not divisible by ``group_size``
            (partial groups are rejected, not padded).
    """
    ensure_f32(w, "w", 2)
    if group_size < 1 or w.shape[1] % group_size != 0:
        raise ConfigError(f"cols {w.shape[1]} not divisible by group_size {group_size}")
    codes, scales = _quantize_groups(w, group_size)
    return QuantizedTensor(
        out_features=w.shape[0],
        in_features=w.shape[1],
        group_size=group_size,
        codes=pack_int4(codes),
        scales=scales,
    )


def dequantize(q: QuantizedTensor) -> np.ndarray:
    """Float32 weights [out, in]: ``value = code * scale`` per element."""
    codes = q.unpacked_codes().astype(np.float32)
    n_groups = q.in_features // q.group_size
    g = codes.reshape(q.out_features, n_groups, q.group_size)
    return (g * q.scales[:, :, None]).reshape(q.out_features, q.in_features)


def fake_quantize_activations(x: np.ndarray, group_size: int = DEFAULT_GROUP_SIZE) -> np.ndarray:
    """Quantize-then-dequantize each activation row with dynamic per-group scales.

    Output stays float32 but every element lies on its group's 4-bit grid
    ``{k * scale : k in [-8, 7]}``.  Already-on-grid inputs pass through
    unchanged, which is what makes a low-precision pass over pre-quantized
    activations bit-identical to a high-precision one.
    """
    global _activation_quant_calls
    ensure_f32(x, "x", 2)
    if group_size < 1 or x.shape[1] % group_size != 0:
        raise ConfigError(f"cols {x.shape[1]} not divisible by group_size {group_size}")
    _activation_quant_calls += 1
    codes, scales = _quantize_groups(x, group_size)
    rows, cols = x.shape
    g = codes.astype(np.float32).reshape(rows, cols // group_size, group_size)
    return (g * scales[:, :, None]).reshape(rows, cols)


def qlinear_forward(q: QuantizedTensor, x: np.ndarray, mode: ExecutionMode) -> np.ndarray:
    """Linear layer ``x [m, in] -> x @ dequantize(q)^T [m, out]`` routed by mode.

    LOW_PRECISION fake-quantizes the activations first; both modes read the
    same ``QuantizedTensor`` instance, so no second weight copy ever exists.
    """
    ensure_f32(x, "x", 2)
    if x.shape[1] != q.in_features:
        raise ShapeError(f"qlinear input width {x.shape[1]} != in_features {q.in_features}")
    if _qlinear_log is not None:
        _qlinear_log.append((id(q), mode))
    if mode is ExecutionMode.LOW_PRECISION:
        x = fake_quantize_activations(x, q.group_size)
    return matmul(x, q.dequant_t())
