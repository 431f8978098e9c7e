"""Checkpoint format and seeded model construction.

Checkpoint layout (all integers little-endian):

    magic  4 bytes  b"QSPC"
    u32    format version (currently 1)
    u32    header byte length, then that many bytes of UTF-8 header text
           ("key=value" lines, fixed key order, floats via repr)
    u32    record count, then for each record:
        u16  name length, then UTF-8 name
        u8   dtype code: 0 = f32, 1 = i4-packed
        u8   ndim, then u32 dims
        u64  payload byte length, then raw little-endian payload

f32 payloads hold row-major float32 data; i4-packed payloads hold two signed
4-bit codes per byte over the flat element order (ceil(elements / 2) bytes).
Every quantized record ``<name>.codes`` has a sibling ``<name>.scales`` f32
record.  Saving is deterministic, so save -> load -> save is byte-identical.

Model weights are drawn from a documented generator rather than a platform
RNG so the same (config, seed) yields the same checkpoint everywhere: a
64-bit linear congruential generator with the Knuth MMIX constants,

    state <- (6364136223846793005 * state + 1442695040888963407) mod 2^64,

where each draw advances the state once and maps the top 24 bits to a float32
in [-1, 1) via bits / 2^23 - 1.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import replace
from typing import BinaryIO, Iterator

import numpy as np

from .errors import CheckpointError, ConfigError, QSpecError
from .model import LayerWeights, ModelConfig, TransformerModel
from .quant import QuantizedTensor, quantize_groupwise

MAGIC = b"QSPC"
FORMAT_VERSION = 1

_DTYPE_F32 = 0
_DTYPE_I4 = 1

_HEADER_FIELDS = (
    "n_layers", "d_model", "n_heads", "n_kv_heads", "d_ff",
    "vocab_size", "max_seq_len", "rope_theta", "norm_eps", "group_size",
)
_FLOAT_FIELDS = {"rope_theta", "norm_eps"}

_LCG_MUL = 6364136223846793005
_LCG_INC = 1442695040888963407
_LCG_MASK = (1 << 64) - 1
_LCG_BLOCK = 4096


class Lcg64:
    """Deterministic 64-bit LCG (Knuth MMIX constants) emitting float32 in [-1, 1)."""

    def __init__(self, seed: int) -> None:
        self.state = seed & _LCG_MASK
        # Jump tables for vectorized block draws: state_{k+j} = M[j]*state_k + C[j].
        muls = np.empty(_LCG_BLOCK, dtype=np.uint64)
        incs = np.empty(_LCG_BLOCK, dtype=np.uint64)
        m, c = 1, 0
        for j in range(_LCG_BLOCK):
            m = (m * _LCG_MUL) & _LCG_MASK
            c = (c * _LCG_MUL + _LCG_INC) & _LCG_MASK
            muls[j] = m
            incs[j] = c
        self._muls = muls
        self._incs = incs

    def next_u64(self) -> int:
        self.state = (self.state * _LCG_MUL + _LCG_INC) & _LCG_MASK
        return self.state

    def next_float(self) -> np.float32:
        bits = self.next_u64() >> 40
        return np.float32(bits) / np.float32(1 << 23) - np.float32(1.0)

    def fill(self, count: int) -> np.ndarray:
        """Vectorized draw of ``count`` floats, identical to repeated next_float()."""
        out = np.empty(count, dtype=np.float32)
        done = 0
        while done < count:
            n = min(_LCG_BLOCK, count - done)
            states = self._muls[:n] * np.uint64(self.state) + self._incs[:n]
            self.state = int(states[-1])
            bits = (states >> np.uint64(40)).astype(np.float32)
            out[done:done + n] = bits / np.float32(1 << 23) - np.float32(1.0)
            done += n
        return out

    def matrix(self, rows: int, cols: int, scale: np.float32) -> np.ndarray:
        return (self.fill(rows * cols) * scale).reshape(rows, cols)


def _float_tensor_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, int] | tuple[int]]]:
    """Names and shapes of all float tensors of an unquantized model, in file order."""
    hd = cfg.head_dim
    shapes: list[tuple[str, tuple[int, int] | tuple[int]]] = [
        ("token_embedding", (cfg.vocab_size, cfg.d_model)),
    ]
    for i in range(cfg.n_layers):
        shapes.extend([
            (f"layers.{i}.attn_norm", (cfg.d_model,)),
            (f"layers.{i}.q_proj", (cfg.n_heads * hd, cfg.d_model)),
            (f"layers.{i}.k_proj", (cfg.n_kv_heads * hd, cfg.d_model)),
            (f"layers.{i}.v_proj", (cfg.n_kv_heads * hd, cfg.d_model)),
            (f"layers.{i}.o_proj", (cfg.d_model, cfg.d_model)),
            (f"layers.{i}.ffn_norm", (cfg.d_model,)),
            (f"layers.{i}.gate_proj", (cfg.d_ff, cfg.d_model)),
            (f"layers.{i}.up_proj", (cfg.d_ff, cfg.d_model)),
            (f"layers.{i}.down_proj", (cfg.d_model, cfg.d_ff)),
        ])
    shapes.append(("final_norm", (cfg.d_model,)))
    shapes.append(("lm_head", (cfg.vocab_size, cfg.d_model)))
    return shapes


_QUANTIZED_SUFFIXES = ("q_proj", "k_proj", "v_proj", "o_proj", "gate_proj", "up_proj",
                       "down_proj")


def _is_projection(name: str) -> bool:
    return name == "lm_head" or name.rsplit(".", 1)[-1] in _QUANTIZED_SUFFIXES


def random_float_tensors(cfg: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    """Seeded float weights: LCG draws scaled by 1/sqrt(d_model); norms are ones.

    Tensors are drawn in the documented file order, row-major, so the same
    (config, seed) reproduces identical weights on any platform.
    """
    rng = Lcg64(seed)
    scale = np.float32(1.0 / math.sqrt(cfg.d_model))
    tensors: dict[str, np.ndarray] = {}
    for name, shape in _float_tensor_shapes(cfg):
        if len(shape) == 1:
            tensors[name] = np.ones(shape, dtype=np.float32)
        else:
            tensors[name] = rng.matrix(shape[0], shape[1], scale)
    return tensors


def model_from_float_tensors(cfg: ModelConfig, tensors: dict[str, np.ndarray]) -> TransformerModel:
    """Quantize every projection and assemble the runnable model."""
    def quant(name: str) -> QuantizedTensor:
        return quantize_groupwise(tensors[name], cfg.group_size)

    layers = []
    for i in range(cfg.n_layers):
        p = f"layers.{i}"
        layers.append(LayerWeights(
            attn_norm=tensors[f"{p}.attn_norm"],
            q_proj=quant(f"{p}.q_proj"),
            k_proj=quant(f"{p}.k_proj"),
            v_proj=quant(f"{p}.v_proj"),
            o_proj=quant(f"{p}.o_proj"),
            ffn_norm=tensors[f"{p}.ffn_norm"],
            gate_proj=quant(f"{p}.gate_proj"),
            up_proj=quant(f"{p}.up_proj"),
            down_proj=quant(f"{p}.down_proj"),
        ))
    return TransformerModel(
        config=cfg,
        token_embedding=tensors["token_embedding"],
        layers=layers,
        final_norm=tensors["final_norm"],
        lm_head=quant("lm_head"),
    )


def random_init(cfg: ModelConfig, seed: int) -> TransformerModel:
    """Deterministic seeded model: draw float weights, then quantize group-wise."""
    return model_from_float_tensors(cfg, random_float_tensors(cfg, seed))


# ---------------------------------------------------------------------------
# Header text
# ---------------------------------------------------------------------------


def config_to_text(cfg: ModelConfig) -> str:
    lines = []
    for field in _HEADER_FIELDS:
        value = getattr(cfg, field)
        lines.append(f"{field}={value!r}" if field in _FLOAT_FIELDS else f"{field}={value}")
    return "\n".join(lines) + "\n"


def config_from_text(text: str) -> ModelConfig:
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise CheckpointError(f"header line {lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    missing = [f for f in _HEADER_FIELDS if f not in values]
    if missing:
        raise CheckpointError(f"header missing fields: {', '.join(missing)}")
    extra = [k for k in values if k not in _HEADER_FIELDS]
    if extra:
        raise CheckpointError(f"header has unknown fields: {', '.join(extra)}")
    try:
        kwargs = {
            f: (float(values[f]) if f in _FLOAT_FIELDS else int(values[f]))
            for f in _HEADER_FIELDS
        }
    except ValueError as exc:
        raise CheckpointError(f"header value: {exc}") from exc
    try:
        return ModelConfig(**kwargs)
    except ConfigError as exc:
        raise CheckpointError(f"header config invalid: {exc}") from exc


# ---------------------------------------------------------------------------
# Record-level reader/writer
# ---------------------------------------------------------------------------


def _write_record(out: BinaryIO, name: str, dtype: int, shape: tuple[int, ...],
                  payload: bytes) -> None:
    name_b = name.encode("utf-8")
    out.write(struct.pack("<H", len(name_b)))
    out.write(name_b)
    out.write(struct.pack("<BB", dtype, len(shape)))
    for dim in shape:
        out.write(struct.pack("<I", dim))
    out.write(struct.pack("<Q", len(payload)))
    out.write(payload)


def _read_exact(f: BinaryIO, n: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return data


def _read_records(f: BinaryIO) -> Iterator[tuple[str, int, tuple[int, ...], bytes]]:
    (count,) = struct.unpack("<I", _read_exact(f, 4, "record count"))
    for _ in range(count):
        (name_len,) = struct.unpack("<H", _read_exact(f, 2, "record name length"))
        name = _read_exact(f, name_len, "record name").decode("utf-8")
        dtype, ndim = struct.unpack("<BB", _read_exact(f, 2, f"record '{name}' dtype"))
        shape = tuple(
            struct.unpack("<I", _read_exact(f, 4, f"record '{name}' dims"))[0]
            for _ in range(ndim)
        )
        (plen,) = struct.unpack("<Q", _read_exact(f, 8, f"record '{name}' payload length"))
        payload = _read_exact(f, plen, f"record '{name}' payload")
        yield name, dtype, shape, payload


def _expected_i4_bytes(shape: tuple[int, ...]) -> int:
    elems = 1
    for dim in shape:
        elems *= dim
    return (elems + 1) // 2


def _validate_payload(name: str, dtype: int, shape: tuple[int, ...], payload: bytes) -> None:
    if dtype == _DTYPE_F32:
        expected = 4
        for dim in shape:
            expected *= dim
    elif dtype == _DTYPE_I4:
        expected = _expected_i4_bytes(shape)
    else:
        raise CheckpointError(f"record '{name}': unknown dtype code {dtype}")
    if len(payload) != expected:
        raise CheckpointError(
            f"record '{name}': payload is {len(payload)} bytes, expected {expected} "
            f"for shape {shape}"
        )


def _open_checkpoint(f: BinaryIO) -> ModelConfig:
    magic = _read_exact(f, 4, "magic")
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}, expected {MAGIC!r}")
    (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format version {version}")
    (header_len,) = struct.unpack("<I", _read_exact(f, 4, "header length"))
    header = _read_exact(f, header_len, "header").decode("utf-8")
    return config_from_text(header)


def _begin_checkpoint(out: BinaryIO, cfg: ModelConfig, n_records: int) -> None:
    header = config_to_text(cfg).encode("utf-8")
    out.write(MAGIC)
    out.write(struct.pack("<I", FORMAT_VERSION))
    out.write(struct.pack("<I", len(header)))
    out.write(header)
    out.write(struct.pack("<I", n_records))


# ---------------------------------------------------------------------------
# Quantized checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(model: TransformerModel, path: str) -> None:
    """Write a quantized model; byte-deterministic for a given model."""
    cfg = model.config
    records: list[tuple[str, int, tuple[int, ...], bytes]] = []

    def add_f32(name: str, arr: np.ndarray) -> None:
        records.append((name, _DTYPE_F32, arr.shape, arr.astype("<f4").tobytes()))

    def add_quant(name: str, q: QuantizedTensor) -> None:
        records.append((f"{name}.codes", _DTYPE_I4,
                        (q.out_features, q.in_features), q.codes.tobytes()))
        records.append((f"{name}.scales", _DTYPE_F32,
                        q.scales.shape, q.scales.astype("<f4").tobytes()))

    add_f32("token_embedding", model.token_embedding)
    for i, layer in enumerate(model.layers):
        p = f"layers.{i}"
        add_f32(f"{p}.attn_norm", layer.attn_norm)
        add_quant(f"{p}.q_proj", layer.q_proj)
        add_quant(f"{p}.k_proj", layer.k_proj)
        add_quant(f"{p}.v_proj", layer.v_proj)
        add_quant(f"{p}.o_proj", layer.o_proj)
        add_f32(f"{p}.ffn_norm", layer.ffn_norm)
        add_quant(f"{p}.gate_proj", layer.gate_proj)
        add_quant(f"{p}.up_proj", layer.up_proj)
        add_quant(f"{p}.down_proj", layer.down_proj)
    add_f32("final_norm", model.final_norm)
    add_quant("lm_head", model.lm_head)

    buf = io.BytesIO()
    _begin_checkpoint(buf, cfg, len(records))
    for name, dtype, shape, payload in records:
        _write_record(buf, name, dtype, shape, payload)
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_checkpoint(path: str) -> TransformerModel:
    """Load a quantized checkpoint; every tensor round-trips bit-exactly."""
    with open(path, "rb") as f:
        cfg = _open_checkpoint(f)
        records: dict[str, tuple[int, tuple[int, ...], bytes]] = {}
        for name, dtype, shape, payload in _read_records(f):
            if name in records:
                raise CheckpointError(f"record '{name}': duplicated")
            _validate_payload(name, dtype, shape, payload)
            records[name] = (dtype, shape, payload)

    def take_f32(name: str, shape: tuple[int, ...]) -> np.ndarray:
        if name not in records:
            raise CheckpointError(f"record '{name}': missing")
        dtype, rshape, payload = records.pop(name)
        if dtype != _DTYPE_F32 or rshape != shape:
            raise CheckpointError(
                f"record '{name}': expected f32 {shape}, found dtype={dtype} shape={rshape}"
            )
        return np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(shape)

    def take_quant(name: str, out_features: int, in_features: int) -> QuantizedTensor:
        codes_name = f"{name}.codes"
        if codes_name not in records:
            if name in records:
                raise CheckpointError(
                    f"record '{name}': stored as f32 (unquantized checkpoint); "
                    f"run the quantize step first"
                )
            raise CheckpointError(f"record '{codes_name}': missing")
        dtype, shape, payload = records.pop(codes_name)
        if dtype != _DTYPE_I4 or shape != (out_features, in_features):
            raise CheckpointError(
                f"record '{codes_name}': expected i4-packed ({out_features}, {in_features}),"
                f" found dtype={dtype} shape={shape}"
            )
        scales = take_f32(f"{name}.scales", (out_features, in_features // cfg.group_size))
        try:
            return QuantizedTensor(
                out_features=out_features, in_features=in_features,
                group_size=cfg.group_size,
                codes=np.frombuffer(payload, dtype=np.uint8).copy(),
                scales=scales,
            )
        except QSpecError as exc:  # invariant violations name the record
            raise CheckpointError(f"record '{codes_name}': {exc}") from exc

    hd = cfg.head_dim
    embedding = take_f32("token_embedding", (cfg.vocab_size, cfg.d_model))
    layers = []
    for i in range(cfg.n_layers):
        p = f"layers.{i}"
        layers.append(LayerWeights(
            attn_norm=take_f32(f"{p}.attn_norm", (cfg.d_model,)),
            q_proj=take_quant(f"{p}.q_proj", cfg.n_heads * hd, cfg.d_model),
            k_proj=take_quant(f"{p}.k_proj", cfg.n_kv_heads * hd, cfg.d_model),
            v_proj=take_quant(f"{p}.v_proj", cfg.n_kv_heads * hd, cfg.d_model),
            o_proj=take_quant(f"{p}.o_proj", cfg.d_model, cfg.d_model),
            ffn_norm=take_f32(f"{p}.ffn_norm", (cfg.d_model,)),
            gate_proj=take_quant(f"{p}.gate_proj", cfg.d_ff, cfg.d_model),
            up_proj=take_quant(f"{p}.up_proj", cfg.d_ff, cfg.d_model),
            down_proj=take_quant(f"{p}.down_proj", cfg.d_model, cfg.d_ff),
        ))
    final_norm = take_f32("final_norm", (cfg.d_model,))
    lm_head = take_quant("lm_head", cfg.vocab_size, cfg.d_model)
    if records:
        raise CheckpointError(f"unexpected records: {', '.join(sorted(records))}")
    return TransformerModel(
        config=cfg, token_embedding=embedding, layers=layers,
        final_norm=final_norm, lm_head=lm_head,
    )


# ---------------------------------------------------------------------------
# Float checkpoints (pre-quantization)
# ---------------------------------------------------------------------------


def save_float_checkpoint(cfg: ModelConfig, tensors: dict[str, np.ndarray], path: str) -> None:
    """Write an unquantized model: every tensor as an f32 record."""
    shapes = _float_tensor_shapes(cfg)
    buf = io.BytesIO()
    _begin_checkpoint(buf, cfg, len(shapes))
    for name, shape in shapes:
        if name not in tensors:
            raise CheckpointError(f"record '{name}': missing from float tensor set")
        arr = tensors[name]
        if tuple(arr.shape) != tuple(shape):
            raise CheckpointError(f"record '{name}': shape {arr.shape} != expected {shape}")
        _write_record(buf, name, _DTYPE_F32, tuple(shape), arr.astype("<f4").tobytes())
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_float_checkpoint(path: str) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        cfg = _open_checkpoint(f)
        tensors: dict[str, np.ndarray] = {}
        for name, dtype, shape, payload in _read_records(f):
            if dtype != _DTYPE_F32:
                raise CheckpointError(f"record '{name}': float checkpoint holds non-f32 record")
            _validate_payload(name, dtype, shape, payload)
            tensors[name] = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(shape)
    for name, shape in _float_tensor_shapes(cfg):
        if name not in tensors:
            raise CheckpointError(f"record '{name}': missing")
        if tuple(tensors[name].shape) != tuple(shape):
            raise CheckpointError(f"record '{name}': unexpected shape {tensors[name].shape}")
    return cfg, tensors


def quantize_checkpoint(src: str, dst: str, group_size: int | None = None) -> TransformerModel:
    """Convert an f32 checkpoint into a quantized one; returns the loaded model."""
    cfg, tensors = load_float_checkpoint(src)
    if group_size is not None and group_size != cfg.group_size:
        cfg = replace(cfg, group_size=group_size)
    model = model_from_float_tensors(cfg, tensors)
    save_checkpoint(model, dst)
    return model
