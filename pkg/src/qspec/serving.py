"""FCFS continuous batching over independent per-sequence engines.

The scheduler runs synchronized cycles: every active slot drafts, then every
slot verifies, with per-slot acceptance lengths free to differ (ragged
commit).  Slots hold independent KV caches over one shared immutable model,
so batching can never change a request's tokens relative to standalone
generation; completed requests free their slot and the earliest waiting
request is admitted at the next cycle boundary.
"""

from __future__ import annotations

import time
from collections import deque
from dataclasses import dataclass, replace
from typing import Iterable, Literal

from .errors import ConfigError, WorkloadError
from .model import TransformerModel
from .quant import ExecutionMode
from .specdec import GenerationConfig, GenerationResult, SequenceEngine

ServingMode = Literal["qspec", "greedy-high", "greedy-low"]


@dataclass
class Request:
    """One generation request in a workload."""

    id: str
    prompt: list[int]
    max_new_tokens: int
    arrival_index: int


@dataclass
class RejectedRequest:
    """A request refused at admission, with the reason; scheduling continues."""

    id: str
    reason: str


@dataclass
class _Slot:
    request: Request
    engine: SequenceEngine
    fresh: bool  # admitted this step; prefill was its work for the cycle


@dataclass
class BatchState:
    """Live scheduler state: fixed capacity slots plus the FCFS waiting queue."""

    capacity: int
    slots: list[_Slot | None]
    waiting: deque[Request]

    def active(self) -> list[_Slot]:
        return [s for s in self.slots if s is not None]

    def has_work(self) -> bool:
        return bool(self.waiting) or any(s is not None for s in self.slots)


@dataclass
class ServingStats:
    """Aggregate accounting for one serving run."""

    total_new_tokens: int
    wall_seconds: float
    throughput_tokens_per_s: float
    n_steps: int
    n_cycles: int
    prefill_cost_units: float
    draft_cost_units: float
    verify_cost_units: float
    prefill_wall_s: float
    draft_wall_s: float
    verify_wall_s: float
    other_wall_s: float
    step_draft_units: list[float]
    step_verify_units: list[float]
    admission_order: list[str]
    completion_order: list[str]
    rejected: list[RejectedRequest]


@dataclass
class LatencySplit:
    """Per-valid-token decode latency, partitioned into draft and verify."""

    total: float
    draft_share: float
    verify_share: float


def _build_engine(
    model: TransformerModel, req: Request, cfg: GenerationConfig, mode: ServingMode
) -> SequenceEngine:
    req_cfg = replace(cfg, max_new_tokens=req.max_new_tokens)
    if mode == "qspec":
        return SequenceEngine(model, req.prompt, req_cfg, algorithm="qspec")
    greedy_mode = (
        ExecutionMode.HIGH_PRECISION if mode == "greedy-high" else ExecutionMode.LOW_PRECISION
    )
    return SequenceEngine(model, req.prompt, req_cfg, algorithm="greedy", greedy_mode=greedy_mode)


def run_fcfs(
    requests: list[Request],
    batch_size: int,
    model: TransformerModel,
    cfg: GenerationConfig,
    mode: ServingMode = "qspec",
) -> tuple[dict[str, GenerationResult], ServingStats]:
    """Serve all requests first-come-first-served with continuous batch refill.

    Returns per-request results keyed by id plus run-level stats.  Requests
    whose prompt cannot fit (empty, or prompt + max_new_tokens beyond
    max_seq_len) are rejected with an error record and scheduling continues.
    """
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    if not requests:
        raise ConfigError("requests must be non-empty")
    if mode not in ("qspec", "greedy-high", "greedy-low"):
        raise ConfigError(f"unknown serving mode {mode!r}")
    ids = [r.id for r in requests]
    if len(set(ids)) != len(ids):
        raise WorkloadError("duplicate request ids in workload")

    state = BatchState(
        capacity=batch_size,
        slots=[None] * batch_size,
        waiting=deque(sorted(requests, key=lambda r: r.arrival_index)),
    )
    outputs: dict[str, GenerationResult] = {}
    rejected: list[RejectedRequest] = []
    admission_order: list[str] = []
    completion_order: list[str] = []
    step_draft_units: list[float] = []
    step_verify_units: list[float] = []
    n_steps = 0
    n_cycles = 0

    t_start = time.perf_counter()
    while state.has_work():
        n_steps += 1
        # Admission at the cycle boundary: fill free slots FCFS, prefilling now.
        for i in range(batch_size):
            if state.slots[i] is not None:
                continue
            while state.waiting:
                req = state.waiting.popleft()
                max_len = model.config.max_seq_len
                if not req.prompt:
                    rejected.append(RejectedRequest(req.id, "empty prompt"))
                    continue
                if len(req.prompt) + req.max_new_tokens > max_len:
                    rejected.append(RejectedRequest(
                        req.id,
                        f"prompt ({len(req.prompt)}) + max_new_tokens "
                        f"({req.max_new_tokens}) exceeds max_seq_len ({max_len})",
                    ))
                    continue
                engine = _build_engine(model, req, cfg, mode)
                engine.prefill()
                admission_order.append(req.id)
                state.slots[i] = _Slot(request=req, engine=engine, fresh=True)
                break
            else:
                break

        active = [s for s in state.active() if not s.fresh and not s.engine.done]
        # Draft sub-phase across the batch, then verify sub-phase.
        draft_units0 = sum(s.engine.draft_cost_units for s in active)
        verify_units0 = sum(s.engine.verify_cost_units for s in active)
        if mode == "qspec":
            for slot in active:
                slot.engine.run_draft_phase()
            for slot in active:
                slot.engine.run_verify_phase()
        else:
            for slot in active:
                slot.engine.run_greedy_step()
        n_cycles += len(active)
        step_draft_units.append(
            float(sum(s.engine.draft_cost_units for s in active) - draft_units0)
        )
        step_verify_units.append(
            float(sum(s.engine.verify_cost_units for s in active) - verify_units0)
        )

        # Retire finished sequences; their slots refill next step.
        for i in range(batch_size):
            slot = state.slots[i]
            if slot is None:
                continue
            slot.fresh = False
            if slot.engine.done:
                outputs[slot.request.id] = slot.engine.result()
                completion_order.append(slot.request.id)
                state.slots[i] = None
    wall = time.perf_counter() - t_start

    total_new = sum(len(r.new_tokens) for r in outputs.values())
    prefill_units = sum(r.prefill_cost_units for r in outputs.values())
    draft_units = sum(r.draft_cost_units for r in outputs.values())
    verify_units = sum(r.verify_cost_units for r in outputs.values())
    prefill_wall = sum(r.prefill_wall_s for r in outputs.values())
    draft_wall = sum(r.draft_wall_s for r in outputs.values())
    verify_wall = sum(r.verify_wall_s for r in outputs.values())
    stats = ServingStats(
        total_new_tokens=total_new,
        wall_seconds=wall,
        throughput_tokens_per_s=total_new / wall if wall > 0 else 0.0,
        n_steps=n_steps,
        n_cycles=n_cycles,
        prefill_cost_units=prefill_units,
        draft_cost_units=draft_units,
        verify_cost_units=verify_units,
        prefill_wall_s=prefill_wall,
        draft_wall_s=draft_wall,
        verify_wall_s=verify_wall,
        other_wall_s=max(0.0, wall - prefill_wall - draft_wall - verify_wall),
        step_draft_units=step_draft_units,
        step_verify_units=step_verify_units,
        admission_order=admission_order,
        completion_order=completion_order,
        rejected=rejected,
    )
    return outputs, stats


def per_valid_token_latency(stats: ServingStats) -> LatencySplit:
    """Decode cost per committed token, split into draft and verify shares.

    The split covers the two decode phases only (prefill and scheduler
    overhead are excluded from the two-way decomposition); the shares sum to
    the total exactly.
    """
    if stats.total_new_tokens == 0:
        raise ConfigError("per_valid_token_latency requires at least one committed token")
    draft_share = stats.draft_cost_units / stats.total_new_tokens
    verify_share = stats.verify_cost_units / stats.total_new_tokens
    return LatencySplit(
        total=draft_share + verify_share,
        draft_share=draft_share,
        verify_share=verify_share,
    )


# ---------------------------------------------------------------------------
# Workload files: one request per line -- id, max_new_tokens, prompt token ids
# ---------------------------------------------------------------------------


def parse_workload(lines: str | Iterable[str]) -> list[Request]:
    """Parse a workload file; arrival order is the line order."""
    if isinstance(lines, str):
        lines = lines.splitlines()
    requests: list[Request] = []
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) < 3:
            raise WorkloadError(
                f"line {lineno}: expected 'id max_new_tokens prompt...', got {line!r}"
            )
        try:
            max_new = int(parts[1])
            prompt = [int(t) for t in parts[2:]]
        except ValueError as exc:
            raise WorkloadError(f"line {lineno}: {exc}") from exc
        if max_new < 1:
            raise WorkloadError(f"line {lineno}: max_new_tokens must be >= 1")
        requests.append(Request(
            id=parts[0], prompt=prompt, max_new_tokens=max_new,
            arrival_index=len(requests),
        ))
    if not requests:
        raise WorkloadError("workload contains no requests")
    return requests


def format_stats(stats: ServingStats) -> str:
    """Stats as structured text, one key:value per line."""
    lines = [
        f"total_new_tokens: {stats.total_new_tokens}",
        f"wall_seconds: {stats.wall_seconds!r}",
        f"throughput_tokens_per_s: {stats.throughput_tokens_per_s!r}",
        f"n_steps: {stats.n_steps}",
        f"n_cycles: {stats.n_cycles}",
        f"prefill_cost_units: {stats.prefill_cost_units!r}",
        f"draft_cost_units: {stats.draft_cost_units!r}",
        f"verify_cost_units: {stats.verify_cost_units!r}",
        f"prefill_wall_s: {stats.prefill_wall_s!r}",
        f"draft_wall_s: {stats.draft_wall_s!r}",
        f"verify_wall_s: {stats.verify_wall_s!r}",
        f"other_wall_s: {stats.other_wall_s!r}",
        f"admission_order: {','.join(stats.admission_order)}",
        f"completion_order: {','.join(stats.completion_order)}",
        f"rejected: {','.join(r.id for r in stats.rejected)}",
    ]
    return "\n".join(lines)
