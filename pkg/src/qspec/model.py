"""Decoder-only transformer with mode-routed linears and a committed/scratch KV cache.

The forward pass is parameterized by ``ExecutionMode``: every linear layer is
routed through ``qlinear_forward`` against the one shared ``QuantizedTensor``
per layer, while attention scores, softmax, and value mixing always run in
plain float32 regardless of mode.  New key/value entries land in one of two
bounded scratch regions (draft or verify); ``kv_commit`` promotes verified
entries into the committed buffers and discards everything else.

Attention is computed per query position over exactly its visible context
(committed prefix + same-region entries written earlier in the pass), so a
multi-token pass reduces over the same element sequence as chained
single-token passes and stays bit-identical to them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import ConfigError, SequenceOverflowError, ShapeError, TokenIdError
from .numerics import rmsnorm, rope_tables, silu, softmax_lastaxis
from .quant import DEFAULT_GROUP_SIZE, ExecutionMode, QuantizedTensor, qlinear_forward

F32 = np.float32

DEFAULT_GAMMA_MAX = 8


@dataclass
class ModelConfig:
    """Shape and hyperparameter bundle for a transformer model."""

    n_layers: int
    d_model: int
    n_heads: int
    n_kv_heads: int
    d_ff: int
    vocab_size: int
    max_seq_len: int
    rope_theta: float = 10000.0
    norm_eps: float = 1e-5
    group_size: int = DEFAULT_GROUP_SIZE

    def __post_init__(self) -> None:
        counts = {
            "n_layers": self.n_layers, "d_model": self.d_model, "n_heads": self.n_heads,
            "n_kv_heads": self.n_kv_heads, "d_ff": self.d_ff, "vocab_size": self.vocab_size,
            "max_seq_len": self.max_seq_len, "group_size": self.group_size,
        }
        for name, value in counts.items():
            if int(value) < 1:
                raise ConfigError(f"{name} must be >= 1, got {value}")
        if self.d_model % self.n_heads != 0:
            raise ConfigError("d_model must be divisible by n_heads")
        if self.n_heads % self.n_kv_heads != 0:
            raise ConfigError("n_heads must be divisible by n_kv_heads")
        if self.d_model % self.group_size != 0 or self.d_ff % self.group_size != 0:
            raise ConfigError("d_model and d_ff must be divisible by group_size")
        if (self.d_model // self.n_heads) % 2 != 0:
            raise ConfigError("head dimension must be even for rotary embeddings")
        if self.rope_theta <= 0 or self.norm_eps <= 0:
            raise ConfigError("rope_theta and norm_eps must be positive")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


@dataclass
class LayerWeights:
    """One decoder block: attention + gated FFN, all matmul weights quantized."""

    attn_norm: np.ndarray
    q_proj: QuantizedTensor
    k_proj: QuantizedTensor
    v_proj: QuantizedTensor
    o_proj: QuantizedTensor
    ffn_norm: np.ndarray
    gate_proj: QuantizedTensor
    up_proj: QuantizedTensor
    down_proj: QuantizedTensor


@dataclass
class TransformerModel:
    """Immutable model weights; shareable read-only across many caches/threads."""

    config: ModelConfig
    token_embedding: np.ndarray  # [vocab, d_model] float32, not quantized
    layers: list[LayerWeights]
    final_norm: np.ndarray
    lm_head: QuantizedTensor
    _rope: tuple[np.ndarray, np.ndarray] | None = field(default=None, repr=False, compare=False)

    def __post_init__(self) -> None:
        cfg = self.config
        if len(self.layers) != cfg.n_layers:
            raise ConfigError(f"expected {cfg.n_layers} layers, got {len(self.layers)}")
        if self.token_embedding.shape != (cfg.vocab_size, cfg.d_model):
            raise ShapeError("token_embedding shape mismatch")

    def rope(self) -> tuple[np.ndarray, np.ndarray]:
        """Cached cos/sin tables covering every position up to max_seq_len."""
        if self._rope is None:
            self._rope = rope_tables(
                self.config.max_seq_len, self.config.head_dim, self.config.rope_theta
            )
        return self._rope

    def quantized_tensors(self) -> list[tuple[str, QuantizedTensor]]:
        """All quantized weight stores, one per linear layer (audit surface)."""
        out: list[tuple[str, QuantizedTensor]] = []
        for i, layer in enumerate(self.layers):
            for proj in ("q_proj", "k_proj", "v_proj", "o_proj",
                         "gate_proj", "up_proj", "down_proj"):
                out.append((f"layers.{i}.{proj}", getattr(layer, proj)))
        out.append(("lm_head", self.lm_head))
        return out


class WriteTarget(Enum):
    """Scratch region a forward pass appends its new KV entries to."""

    DRAFT = "draft"
    VERIFY = "verify"


@dataclass
class LogitsBlock:
    """Next-token logits for each input position of one forward pass."""

    logits: np.ndarray  # [n_positions, vocab_size] float32
    mode: ExecutionMode

    def row(self, j: int) -> np.ndarray:
        return self.logits[j]


@dataclass
class CostCounter:
    """Deterministic multiply-accumulate counter (matmul-class work only)."""

    units: int = 0

    def add(self, macs: int) -> None:
        self.units += macs


class KVCache:
    """Per-layer committed KV buffers plus two bounded scratch regions.

    Positions below ``committed_len`` hold verified entries only (when driven
    by the speculative engine).  Scratch capacity is ``gamma_max + 1``
    positions per region regardless of sequence length, which is the whole
    memory story: drafting borrows a constant-size buffer instead of a second
    cache.  ``pending_token`` is the newest committed-to-the-sequence token
    whose KV has deliberately not been computed yet.
    """

    def __init__(self, config: ModelConfig, gamma_max: int = DEFAULT_GAMMA_MAX) -> None:
        if gamma_max < 1:
            raise ConfigError("gamma_max must be >= 1")
        self.config = config
        self.gamma_max = gamma_max
        self.scratch_capacity = gamma_max + 1
        n_kv, hd = config.n_kv_heads, config.head_dim
        committed_shape = (config.max_seq_len, n_kv, hd)
        scratch_shape = (self.scratch_capacity, n_kv, hd)
        self.committed_k = [np.zeros(committed_shape, dtype=F32) for _ in range(config.n_layers)]
        self.committed_v = [np.zeros(committed_shape, dtype=F32) for _ in range(config.n_layers)]
        self.draft_k = [np.zeros(scratch_shape, dtype=F32) for _ in range(config.n_layers)]
        self.draft_v = [np.zeros(scratch_shape, dtype=F32) for _ in range(config.n_layers)]
        self.verify_k = [np.zeros(scratch_shape, dtype=F32) for _ in range(config.n_layers)]
        self.verify_v = [np.zeros(scratch_shape, dtype=F32) for _ in range(config.n_layers)]
        self.committed_len = 0
        self.draft_len = 0
        self.verify_len = 0
        self.pending_token: int | None = None

    def region_len(self, target: WriteTarget) -> int:
        return self.draft_len if target is WriteTarget.DRAFT else self.verify_len

    def region_buffers(
        self, target: WriteTarget
    ) -> tuple[list[np.ndarray], list[np.ndarray]]:
        if target is WriteTarget.DRAFT:
            return self.draft_k, self.draft_v
        return self.verify_k, self.verify_v

    def _set_region_len(self, target: WriteTarget, value: int) -> None:
        if target is WriteTarget.DRAFT:
            self.draft_len = value
        else:
            self.verify_len = value

    def clear_scratch(self) -> None:
        self.draft_len = 0
        self.verify_len = 0


def kv_reset(kv: KVCache) -> None:
    """Drop all committed and scratch entries and the pending token."""
    kv.committed_len = 0
    kv.clear_scratch()
    kv.pending_token = None


def kv_commit(kv: KVCache, accept_len: int) -> None:
    """Promote verify-scratch entries for the pending token plus ``accept_len``
    accepted drafts into the committed buffers, then clear both scratch regions.

    Entries for rejected positions are simply dropped with the scratch.
    """
    need = accept_len + 1
    if accept_len < 0 or need > kv.verify_len:
        raise SequenceOverflowError(
            f"accept_len {accept_len} exceeds verify-scratch contents ({kv.verify_len})"
        )
    if kv.committed_len + need > kv.config.max_seq_len:
        raise SequenceOverflowError("commit would exceed max_seq_len")
    c = kv.committed_len
    for li in range(kv.config.n_layers):
        kv.committed_k[li][c:c + need] = kv.verify_k[li][:need]
        kv.committed_v[li][c:c + need] = kv.verify_v[li][:need]
    kv.committed_len = c + need
    kv.clear_scratch()


def kv_memory_report(kv: KVCache) -> dict[str, int]:
    """Byte accounting: committed usage plus fixed scratch capacity."""
    cfg = kv.config
    per_position = cfg.n_layers * 2 * cfg.n_kv_heads * cfg.head_dim * 4
    return {
        "committed_bytes": kv.committed_len * per_position,
        "scratch_bytes": 2 * kv.scratch_capacity * per_position,
        "per_position_bytes": per_position,
    }


def _rope_rows(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    # x: [n, heads, head_dim]; cos/sin: [n, head_dim/2] broadcast over heads.
    even = x[..., 0::2]
    odd = x[..., 1::2]
    c = cos[:, None, :]
    s = sin[:, None, :]
    out = np.empty_like(x)
    out[..., 0::2] = even * c - odd * s
    out[..., 1::2] = even * s + odd * c
    return out


def forward(
    model: TransformerModel,
    tokens: list[int],
    kv: KVCache,
    mode: ExecutionMode,
    write_target: WriteTarget,
    counter: CostCounter | None = None,
) -> LogitsBlock:
    """Causal forward pass over ``tokens``, appending their KV to one scratch region.

    The attention context for the j-th new token is the committed prefix, the
    target region's pre-existing entries, and the new entries written earlier
    in this call.  Logits are returned for every input position.

    Raises:
        SequenceOverflowError: the pass would exceed max_seq_len or the
            scratch region capacity.
        TokenIdError: a token id falls outside the vocabulary.
    """
    cfg = model.config
    n = len(tokens)
    if n == 0:
        raise ShapeError("forward requires a non-empty token sequence")
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise TokenIdError(f"token id out of vocab range [0, {cfg.vocab_size})")
    c = kv.committed_len
    r = kv.region_len(write_target)
    base = c + r
    if base + n > cfg.max_seq_len:
        raise SequenceOverflowError(
            f"sequence overflow: {base} committed/scratch + {n} new > {cfg.max_seq_len}"
        )
    if r + n > kv.scratch_capacity:
        raise SequenceOverflowError(
            f"scratch overflow: {r} + {n} new > capacity {kv.scratch_capacity}"
        )

    n_heads, n_kv, hd = cfg.n_heads, cfg.n_kv_heads, cfg.head_dim
    heads_per_kv = n_heads // n_kv
    inv_sqrt_hd = F32(1.0) / np.sqrt(F32(hd))
    cos_t, sin_t = model.rope()
    cos = cos_t[base:base + n]
    sin = sin_t[base:base + n]
    region_k, region_v = kv.region_buffers(write_target)

    macs = 0
    x = model.token_embedding[ids]
    for li, layer in enumerate(model.layers):
        h = rmsnorm(x, layer.attn_norm, cfg.norm_eps)
        q = qlinear_forward(layer.q_proj, h, mode).reshape(n, n_heads, hd)
        k = qlinear_forward(layer.k_proj, h, mode).reshape(n, n_kv, hd)
        v = qlinear_forward(layer.v_proj, h, mode).reshape(n, n_kv, hd)
        q = _rope_rows(q, cos, sin)
        k = _rope_rows(k, cos, sin)
        macs += n * cfg.d_model * (cfg.d_model + 2 * n_kv * hd)

        # Contiguous context workspace: committed ++ region ++ this call's rows.
        ctx_k = np.empty((base + n, n_kv, hd), dtype=F32)
        ctx_v = np.empty((base + n, n_kv, hd), dtype=F32)
        ctx_k[:c] = kv.committed_k[li][:c]
        ctx_v[:c] = kv.committed_v[li][:c]
        ctx_k[c:base] = region_k[li][:r]
        ctx_v[c:base] = region_v[li][:r]
        ctx_k[base:] = k
        ctx_v[base:] = v

        qg = q.reshape(n, n_kv, heads_per_kv, hd)
        attn = np.empty((n, cfg.d_model), dtype=F32)
        for j in range(n):
            ctx = base + j + 1
            scores = np.einsum("ghd,tgd->ght", qg[j], ctx_k[:ctx], optimize=False) * inv_sqrt_hd
            probs = softmax_lastaxis(scores)
            mix = np.einsum("ght,tgd->ghd", probs, ctx_v[:ctx], optimize=False)
            attn[j] = mix.reshape(cfg.d_model)
            macs += 2 * n_heads * hd * ctx

        x = x + qlinear_forward(layer.o_proj, attn, mode)
        h2 = rmsnorm(x, layer.ffn_norm, cfg.norm_eps)
        gate = silu(qlinear_forward(layer.gate_proj, h2, mode))
        up = qlinear_forward(layer.up_proj, h2, mode)
        x = x + qlinear_forward(layer.down_proj, gate * up, mode)
        macs += n * cfg.d_model * (cfg.d_model + 3 * cfg.d_ff)

        region_k[li][r:r + n] = k
        region_v[li][r:r + n] = v

    xf = rmsnorm(x, model.final_norm, cfg.norm_eps)
    logits = qlinear_forward(model.lm_head, xf, mode)
    macs += n * cfg.d_model * cfg.vocab_size
    kv._set_region_len(write_target, r + n)
    if counter is not None:
        counter.add(macs)
    return LogitsBlock(logits=logits, mode=mode)
