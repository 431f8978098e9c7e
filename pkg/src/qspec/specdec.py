"""Draft-verify generation loop over a single weight-quantized model.

A cycle drafts up to gamma tokens with the cheap low-precision-activation
path, verifies them in one high-precision forward pass, greedily accepts the
longest matching prefix, emits one terminal token (the verifier's correction
on rejection, or a bonus token on full acceptance), and commits the verified
KV entries.  Because acceptance compares top-1 tokens and the verify path is
the same arithmetic as plain high-precision decoding, the emitted sequence is
token-identical to ordinary greedy decoding; the draft path only changes how
fast tokens arrive.

``SequenceEngine`` exposes the loop phase by phase so a batch scheduler can
interleave many sequences; ``generate_qspec`` / ``generate_greedy`` drive a
single sequence start to finish.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Literal

import numpy as np

from .errors import ConfigError, SequenceOverflowError, ShapeError, TraceError
from .model import (
    CostCounter,
    KVCache,
    LogitsBlock,
    TransformerModel,
    WriteTarget,
    forward,
    kv_commit,
)
from .numerics import argmax_row, softmax_row
from .quant import ExecutionMode


@dataclass
class GenerationConfig:
    """Knobs for one generation run.

    ``draft_mode`` defaults to the low-precision path; setting it to
    HIGH_PRECISION yields the degenerate self-draft configuration whose
    acceptance rate is exactly 1.
    """

    gamma: int = 3
    max_new_tokens: int = 32
    eos_token: int | None = None
    record_trace: bool = True
    draft_mode: ExecutionMode = ExecutionMode.LOW_PRECISION

    def __post_init__(self) -> None:
        if self.gamma < 1:
            raise ConfigError(f"gamma must be >= 1, got {self.gamma}")
        if self.max_new_tokens < 1:
            raise ConfigError(f"max_new_tokens must be >= 1, got {self.max_new_tokens}")


class TokenSource(Enum):
    """How a cycle's terminal token was produced."""

    RESAMPLED = "resampled"  # verifier's correction after a rejection
    BONUS = "bonus"          # extra token after full acceptance


@dataclass
class CycleRecord:
    """One draft-verify cycle: what was proposed, kept, and what it cost."""

    drafted: list[int]
    accept_len: int
    emitted: list[int]
    terminal_token_source: TokenSource
    draft_cost_units: float
    verify_cost_units: float
    draft_wall_s: float = 0.0
    verify_wall_s: float = 0.0


@dataclass
class GenerationResult:
    """Committed tokens plus per-cycle trace and aggregate accounting."""

    tokens: list[int]           # prompt + generated continuation
    new_tokens: list[int]       # generated continuation only
    cycles: list[CycleRecord]
    acceptance_rate: float
    tokens_per_cycle: float
    finish_reason: str          # "eos" | "max_new_tokens"
    dropped_after_eos: int
    prefill_cost_units: float = 0.0
    draft_cost_units: float = 0.0
    verify_cost_units: float = 0.0
    prefill_wall_s: float = 0.0
    draft_wall_s: float = 0.0
    verify_wall_s: float = 0.0
    total_wall_s: float = 0.0


def draft_phase(
    model: TransformerModel,
    kv: KVCache,
    pending_token: int,
    gamma: int,
    *,
    mode: ExecutionMode = ExecutionMode.LOW_PRECISION,
    eos_token: int | None = None,
    counter: CostCounter | None = None,
) -> tuple[list[int], LogitsBlock]:
    """Speculate up to ``gamma`` tokens with sequential single-token forwards.

    The first forward processes the pending token, each later one the token
    just drafted; every draft is the argmax of its predecessor's logits.  All
    KV lands in the draft scratch region only.  Drafting stops early after
    proposing ``eos_token`` (anything past it could never be kept).
    """
    if gamma < 1:
        raise ConfigError("draft gamma must be >= 1")
    drafted: list[int] = []
    rows: list[np.ndarray] = []
    inp = pending_token
    for _ in range(gamma):
        block = forward(model, [inp], kv, mode, WriteTarget.DRAFT, counter)
        tok = argmax_row(block.row(0))
        drafted.append(tok)
        rows.append(block.row(0))
        if eos_token is not None and tok == eos_token:
            break
        inp = tok
    return drafted, LogitsBlock(logits=np.stack(rows), mode=mode)


def verify_phase(
    model: TransformerModel,
    kv: KVCache,
    pending_token: int,
    drafted: list[int],
    *,
    counter: CostCounter | None = None,
) -> LogitsBlock:
    """Verify all drafted tokens in one high-precision forward pass.

    Processes ``[pending_token, drafted...]``; row j predicts the token after
    position j, so the block has ``len(drafted) + 1`` rows.  KV goes to the
    verify scratch region.  Depends only on the token ids, not on how the
    drafts were produced.
    """
    if not drafted:
        raise ShapeError("verify_phase requires a non-empty draft")
    return forward(
        model, [pending_token, *drafted], kv,
        ExecutionMode.HIGH_PRECISION, WriteTarget.VERIFY, counter,
    )


def accept_greedy(drafted: list[int], verify_logits: LogitsBlock) -> tuple[int, int, bool]:
    """Greedy acceptance: keep the longest prefix matching the verifier's top-1 picks.

    Returns ``(accept_len, next_token, is_bonus)``.  On a rejection the next
    token is the verifier's argmax at the first mismatch; on full acceptance
    it is the bonus argmax from the final row.
    """
    logits = verify_logits.logits
    if logits.shape[0] != len(drafted) + 1:
        raise ShapeError(
            f"verify block has {logits.shape[0]} rows for {len(drafted)} drafts"
        )
    accept_len = 0
    while accept_len < len(drafted) and drafted[accept_len] == argmax_row(logits[accept_len]):
        accept_len += 1
    if accept_len < len(drafted):
        return accept_len, argmax_row(logits[accept_len]), False
    return accept_len, argmax_row(logits[len(drafted)]), True


class SequenceEngine:
    """Drives one sequence: prefill, then decode cycles against a private KVCache.

    ``algorithm="qspec"`` runs draft-verify cycles (phases split so a batch
    scheduler can run all drafts, then all verifies); ``algorithm="greedy"``
    runs plain one-token steps in ``greedy_mode``.  Prefill always uses the
    high-precision path for qspec, and ``greedy_mode`` for greedy runs.
    """

    def __init__(
        self,
        model: TransformerModel,
        prompt: list[int],
        cfg: GenerationConfig,
        *,
        algorithm: Literal["qspec", "greedy"] = "qspec",
        greedy_mode: ExecutionMode = ExecutionMode.HIGH_PRECISION,
        kv: KVCache | None = None,
    ) -> None:
        if not prompt:
            raise ShapeError("prompt must be non-empty")
        if len(prompt) + cfg.max_new_tokens > model.config.max_seq_len:
            raise SequenceOverflowError(
                f"prompt ({len(prompt)}) + max_new_tokens ({cfg.max_new_tokens}) "
                f"exceeds max_seq_len ({model.config.max_seq_len})"
            )
        self.model = model
        self.cfg = cfg
        self.algorithm = algorithm
        self.greedy_mode = greedy_mode
        self.kv = kv if kv is not None else KVCache(model.config, gamma_max=cfg.gamma)
        if cfg.gamma > self.kv.gamma_max:
            raise ConfigError(f"gamma {cfg.gamma} exceeds cache gamma_max {self.kv.gamma_max}")
        self.prompt = list(prompt)
        self.tokens: list[int] = list(prompt)
        self.new_tokens: list[int] = []
        self.cycles: list[CycleRecord] = []
        self.done = False
        self.finish_reason = ""
        self.dropped_after_eos = 0
        self._prefilled = False
        self._in_flight_draft: tuple[list[int], float, float] | None = None
        self._total_drafted = 0
        self._total_accepted = 0
        self._total_emitted = 0
        self._n_cycles = 0
        self._prefill_counter = CostCounter()
        self._draft_counter = CostCounter()
        self._verify_counter = CostCounter()
        self._prefill_wall = 0.0
        self._draft_wall = 0.0
        self._verify_wall = 0.0

    # -- prefill -----------------------------------------------------------

    def prefill(self) -> None:
        """Process the prompt in scratch-sized chunks, then emit the first token."""
        if self._prefilled:
            raise ConfigError("prefill called twice")
        mode = (
            ExecutionMode.HIGH_PRECISION if self.algorithm == "qspec" else self.greedy_mode
        )
        t0 = time.perf_counter()
        step = self.kv.scratch_capacity
        last_block: LogitsBlock | None = None
        for start in range(0, len(self.prompt), step):
            chunk = self.prompt[start:start + step]
            last_block = forward(
                self.model, chunk, self.kv, mode, WriteTarget.VERIFY, self._prefill_counter
            )
            kv_commit(self.kv, len(chunk) - 1)
        assert last_block is not None
        first = argmax_row(last_block.row(-1))
        self._prefill_wall += time.perf_counter() - t0
        self._prefilled = True
        self._append([first])

    # -- qspec cycle, split into scheduler-friendly phases ------------------

    def run_draft_phase(self) -> None:
        """Draft tokens for the current cycle (qspec only)."""
        self._require_active("qspec")
        if self._in_flight_draft is not None:
            raise ConfigError("draft phase already ran for this cycle")
        remaining = self.cfg.max_new_tokens - len(self.new_tokens)
        gamma_eff = min(self.cfg.gamma, max(1, remaining - 1))
        gamma_eff = min(gamma_eff, self.model.config.max_seq_len - self.kv.committed_len - 1)
        if gamma_eff < 1:
            raise SequenceOverflowError("no room to draft within max_seq_len")
        t0 = time.perf_counter()
        units0 = self._draft_counter.units
        drafted, _ = draft_phase(
            self.model, self.kv, self._pending(), gamma_eff,
            mode=self.cfg.draft_mode, eos_token=self.cfg.eos_token,
            counter=self._draft_counter,
        )
        wall = time.perf_counter() - t0
        self._draft_wall += wall
        self._in_flight_draft = (drafted, float(self._draft_counter.units - units0), wall)

    def run_verify_phase(self) -> None:
        """Verify the in-flight draft, accept, commit KV, and record the cycle."""
        self._require_active("qspec")
        if self._in_flight_draft is None:
            raise ConfigError("verify phase requires a prior draft phase")
        drafted, draft_units, draft_wall = self._in_flight_draft
        self._in_flight_draft = None
        t0 = time.perf_counter()
        units0 = self._verify_counter.units
        block = verify_phase(self.model, self.kv, self._pending(), drafted,
                             counter=self._verify_counter)
        accept_len, next_token, is_bonus = accept_greedy(drafted, block)
        verify_wall = time.perf_counter() - t0
        self._verify_wall += verify_wall

        emitted = drafted[:accept_len] + [next_token]
        remaining = self.cfg.max_new_tokens - len(self.new_tokens)
        kept = emitted[:remaining]
        if self.cfg.eos_token is not None and self.cfg.eos_token in kept:
            kept = kept[:kept.index(self.cfg.eos_token) + 1]
        self.dropped_after_eos += len(emitted) - len(kept)
        kv_commit(self.kv, len(kept) - 1)

        self._total_drafted += len(drafted)
        self._total_accepted += accept_len
        self._total_emitted += len(kept)
        self._n_cycles += 1
        if self.cfg.record_trace:
            self.cycles.append(CycleRecord(
                drafted=drafted,
                accept_len=accept_len,
                emitted=kept,
                terminal_token_source=TokenSource.BONUS if is_bonus else TokenSource.RESAMPLED,
                draft_cost_units=draft_units,
                verify_cost_units=float(self._verify_counter.units - units0),
                draft_wall_s=draft_wall,
                verify_wall_s=verify_wall,
            ))
        self._append(kept)

    def run_cycle(self) -> None:
        self.run_draft_phase()
        self.run_verify_phase()

    # -- plain greedy step ---------------------------------------------------

    def run_greedy_step(self) -> None:
        """One autoregressive token in ``greedy_mode`` (greedy algorithm only)."""
        self._require_active("greedy")
        t0 = time.perf_counter()
        block = forward(
            self.model, [self._pending()], self.kv, self.greedy_mode,
            WriteTarget.VERIFY, self._verify_counter,
        )
        kv_commit(self.kv, 0)
        self._verify_wall += time.perf_counter() - t0
        self._append([argmax_row(block.row(0))])

    # -- bookkeeping ---------------------------------------------------------

    @property
    def draft_cost_units(self) -> int:
        return self._draft_counter.units

    @property
    def verify_cost_units(self) -> int:
        return self._verify_counter.units

    def _pending(self) -> int:
        tok = self.kv.pending_token
        assert tok is not None
        return tok

    def _require_active(self, algorithm: str) -> None:
        if self.algorithm != algorithm:
            raise ConfigError(f"engine runs algorithm={self.algorithm!r}")
        if not self._prefilled:
            raise ConfigError("prefill must run first")
        if self.done:
            raise ConfigError("sequence already finished")

    def _append(self, kept: list[int]) -> None:
        self.tokens.extend(kept)
        self.new_tokens.extend(kept)
        self.kv.pending_token = kept[-1]
        if self.cfg.eos_token is not None and kept[-1] == self.cfg.eos_token:
            self.done = True
            self.finish_reason = "eos"
        elif len(self.new_tokens) >= self.cfg.max_new_tokens:
            self.done = True
            self.finish_reason = "max_new_tokens"

    def result(self, total_wall_s: float | None = None) -> GenerationResult:
        acceptance = (
            self._total_accepted / self._total_drafted if self._total_drafted else 1.0
        )
        per_cycle = self._total_emitted / self._n_cycles if self._n_cycles else 0.0
        phase_wall = self._prefill_wall + self._draft_wall + self._verify_wall
        return GenerationResult(
            tokens=list(self.tokens),
            new_tokens=list(self.new_tokens),
            cycles=list(self.cycles),
            acceptance_rate=acceptance,
            tokens_per_cycle=per_cycle,
            finish_reason=self.finish_reason,
            dropped_after_eos=self.dropped_after_eos,
            prefill_cost_units=float(self._prefill_counter.units),
            draft_cost_units=float(self._draft_counter.units),
            verify_cost_units=float(self._verify_counter.units),
            prefill_wall_s=self._prefill_wall,
            draft_wall_s=self._draft_wall,
            verify_wall_s=self._verify_wall,
            total_wall_s=total_wall_s if total_wall_s is not None else phase_wall,
        )


def generate_qspec(
    model: TransformerModel, prompt: list[int], cfg: GenerationConfig
) -> GenerationResult:
    """Full speculative run: high-precision prefill, then draft-verify cycles.

    Token-identical to ``generate_greedy(..., HIGH_PRECISION, ...)`` by
    construction of the acceptance rule and the deterministic kernels.
    """
    t0 = time.perf_counter()
    eng = SequenceEngine(model, prompt, cfg, algorithm="qspec")
    eng.prefill()
    while not eng.done:
        eng.run_cycle()
    return eng.result(total_wall_s=time.perf_counter() - t0)


def generate_greedy(
    model: TransformerModel,
    prompt: list[int],
    mode: ExecutionMode,
    cfg: GenerationConfig,
) -> GenerationResult:
    """Plain autoregressive greedy decode in one execution mode.

    With HIGH_PRECISION this is the quality baseline the speculative loop must
    reproduce exactly; with LOW_PRECISION it is the fast-but-lossy ablation.
    """
    t0 = time.perf_counter()
    eng = SequenceEngine(model, prompt, cfg, algorithm="greedy", greedy_mode=mode)
    eng.prefill()
    while not eng.done:
        eng.run_greedy_step()
    return eng.result(total_wall_s=time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# Similarity probe
# ---------------------------------------------------------------------------


@dataclass
class ProbeRecord:
    """Both modes' probability of one golden token, and low-precision agreement."""

    position: int
    p_high: float
    p_low: float
    accepted: bool


def _prefill_logits(model: TransformerModel, tokens: list[int], mode: ExecutionMode) -> np.ndarray:
    """Logits for every position of one prefill pass in the given mode."""
    kv = KVCache(model.config)
    step = kv.scratch_capacity
    blocks = []
    for start in range(0, len(tokens), step):
        chunk = tokens[start:start + step]
        blocks.append(forward(model, chunk, kv, mode, WriteTarget.VERIFY).logits)
        kv_commit(kv, len(chunk) - 1)
    return np.concatenate(blocks, axis=0)


def similarity_probe(
    model: TransformerModel, prompt: list[int], golden: list[int]
) -> list[ProbeRecord]:
    """Compare both modes' predictions against a golden continuation.

    Runs one prefill per mode over ``prompt + golden`` and records, for each
    golden position, the softmax probability each mode assigns to the golden
    token and whether the low-precision argmax matches it.  ``golden`` is
    expected to come from a high-precision greedy run over the same prompt.
    """
    if not golden:
        raise ShapeError("golden continuation must be non-empty")
    if not prompt:
        raise ShapeError("prompt must be non-empty")
    concat = list(prompt) + list(golden)
    high = _prefill_logits(model, concat, ExecutionMode.HIGH_PRECISION)
    low = _prefill_logits(model, concat, ExecutionMode.LOW_PRECISION)
    records = []
    for j, gold in enumerate(golden):
        pos = len(prompt) - 1 + j
        records.append(ProbeRecord(
            position=pos,
            p_high=float(softmax_row(high[pos])[gold]),
            p_low=float(softmax_row(low[pos])[gold]),
            accepted=argmax_row(low[pos]) == gold,
        ))
    return records


# ---------------------------------------------------------------------------
# Trace export (line-delimited, one record per cycle)
# ---------------------------------------------------------------------------


def format_cycle_record(index: int, rec: CycleRecord, request_id: str | None = None) -> str:
    """One cycle as a ``key=value`` line; lists are comma-separated."""
    parts = []
    if request_id is not None:
        parts.append(f"request={request_id}")
    parts.extend([
        f"cycle={index}",
        "drafted=" + ",".join(str(t) for t in rec.drafted),
        f"accept_len={rec.accept_len}",
        "emitted=" + ",".join(str(t) for t in rec.emitted),
        f"source={rec.terminal_token_source.value}",
        f"draft_cost_units={rec.draft_cost_units!r}",
        f"verify_cost_units={rec.verify_cost_units!r}",
    ])
    return " ".join(parts)


def format_trace(cycles: list[CycleRecord], request_id: str | None = None) -> str:
    return "\n".join(
        format_cycle_record(i, rec, request_id) for i, rec in enumerate(cycles)
    )


def parse_trace(lines: str | Iterable[str]) -> list[CycleRecord]:
    """Parse a cycle-trace stream back into records (wall times are not carried)."""
    if isinstance(lines, str):
        lines = lines.splitlines()
    records = []
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields: dict[str, str] = {}
        for part in line.split():
            if "=" not in part:
                raise TraceError(f"line {lineno}: malformed field {part!r}")
            key, value = part.split("=", 1)
            fields[key] = value
        try:
            drafted = [int(t) for t in fields["drafted"].split(",") if t]
            emitted = [int(t) for t in fields["emitted"].split(",") if t]
            rec = CycleRecord(
                drafted=drafted,
                accept_len=int(fields["accept_len"]),
                emitted=emitted,
                terminal_token_source=TokenSource(fields["source"]),
                draft_cost_units=float(fields["draft_cost_units"]),
                verify_cost_units=float(fields["verify_cost_units"]),
            )
        except (KeyError, ValueError) as exc:
            raise TraceError(f"line {lineno}: {exc}") from exc
        if not rec.drafted or not rec.emitted:
            raise TraceError(f"line {lineno}: empty drafted/emitted list")
        if rec.accept_len > len(rec.drafted):
            raise TraceError(f"line {lineno}: accept_len exceeds draft length")
        records.append(rec)
    return records
