"""Analytic and trace-replay economics of draft-verify decoding.

Kernel speeds are inputs here, never measurements: a ``LatencyProfile`` maps
(phase, batch size, token count) to abstract cost units, so the same
generation trace can be priced under any hardware assumption.  Aggregation
uses exact rational arithmetic internally, which makes the closed-form model
and the trace replay agree bit-for-bit on constant-acceptance traces instead
of merely "closely".
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from fractions import Fraction
from typing import Iterable, Sequence

from .errors import ConfigError, ProfileError, TraceError
from .model import TransformerModel
from .specdec import CycleRecord, GenerationConfig, generate_qspec


# ---------------------------------------------------------------------------
# Latency profile
# ---------------------------------------------------------------------------


@dataclass
class LatencyProfile:
    """Configurable cost tables, piecewise-linear over batch size.

    ``draft``: batch -> cost of one low-precision single-token batched forward.
    ``verify``: batch -> sorted (n_tokens, cost) points for one high-precision
    forward over n tokens; every batch must include an n=1 point, which
    defines the plain single-token baseline cost.
    """

    draft: dict[int, Fraction]
    verify: dict[int, list[tuple[int, Fraction]]]

    def __post_init__(self) -> None:
        if not self.draft or not self.verify:
            raise ProfileError("profile needs at least one draft and one verify entry")
        for batch, cost in self.draft.items():
            if batch < 1 or cost <= 0:
                raise ProfileError(f"draft entry batch={batch} must have batch>=1, cost>0")
        for batch, points in self.verify.items():
            if batch < 1 or not points:
                raise ProfileError(f"verify entries missing for batch={batch}")
            ns = [n for n, _ in points]
            if len(set(ns)) != len(ns):
                raise ProfileError(f"duplicate verify n_tokens for batch={batch}")
            if 1 not in ns:
                raise ProfileError(f"verify batch={batch} needs an n=1 entry (the baseline)")
            if any(n < 1 or c <= 0 for n, c in points):
                raise ProfileError(f"verify batch={batch} entries must have n>=1, cost>0")
            points.sort(key=lambda p: p[0])

    @staticmethod
    def _interp_batch(table_batches: Sequence[int], batch: int) -> tuple[int, int, Fraction]:
        lo = max((b for b in table_batches if b <= batch), default=None)
        hi = min((b for b in table_batches if b >= batch), default=None)
        if lo is None or hi is None:
            raise ProfileError(
                f"batch {batch} outside profile range [{min(table_batches)}, {max(table_batches)}]"
            )
        w = Fraction(0) if hi == lo else Fraction(batch - lo, hi - lo)
        return lo, hi, w

    def draft_cost(self, batch: int) -> Fraction:
        """L_draft(B): one low-precision single-token forward at batch B."""
        lo, hi, w = self._interp_batch(sorted(self.draft), batch)
        return self.draft[lo] * (1 - w) + self.draft[hi] * w

    def verify_cost(self, batch: int, n_tokens: int) -> Fraction:
        """L_verify(B, n): one high-precision forward over n tokens at batch B."""
        if n_tokens < 1:
            raise ProfileError("verify n_tokens must be >= 1")
        lo, hi, w = self._interp_batch(sorted(self.verify), batch)
        return self._verify_at(lo, n_tokens) * (1 - w) + self._verify_at(hi, n_tokens) * w

    def _verify_at(self, batch: int, n: int) -> Fraction:
        points = self.verify[batch]
        for pn, pc in points:
            if pn == n:
                return pc
        below = [(pn, pc) for pn, pc in points if pn < n]
        above = [(pn, pc) for pn, pc in points if pn > n]
        if below and above:
            (n0, c0), (n1, c1) = below[-1], above[0]
        elif len(below) >= 2:  # extrapolate past the largest configured n
            (n0, c0), (n1, c1) = below[-2], below[-1]
        elif len(above) >= 2:
            (n0, c0), (n1, c1) = above[0], above[1]
        else:
            return below[-1][1] if below else above[0][1]
        return c0 + (c1 - c0) * Fraction(n - n0, n1 - n0)

    def base_cost(self, batch: int) -> Fraction:
        """L_base(B) = L_verify(B, 1): plain high-precision single-token forward."""
        return self.verify_cost(batch, 1)


def parse_profile(lines: str | Iterable[str]) -> LatencyProfile:
    """Parse a profile file: ``draft batch=B cost=C`` / ``verify batch=B n=N cost=C``."""
    if isinstance(lines, str):
        lines = lines.splitlines()
    draft: dict[int, Fraction] = {}
    verify: dict[int, list[tuple[int, Fraction]]] = {}
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        kind = parts[0]
        fields: dict[str, str] = {}
        for part in parts[1:]:
            if "=" not in part:
                raise ProfileError(f"line {lineno}: malformed field {part!r}")
            key, value = part.split("=", 1)
            fields[key] = value
        try:
            if kind == "draft":
                draft[int(fields["batch"])] = Fraction(float(fields["cost"]))
            elif kind == "verify":
                verify.setdefault(int(fields["batch"]), []).append(
                    (int(fields["n"]), Fraction(float(fields["cost"])))
                )
            else:
                raise ProfileError(f"line {lineno}: unknown entry kind {kind!r}")
        except (KeyError, ValueError) as exc:
            raise ProfileError(f"line {lineno}: {exc}") from exc
    return LatencyProfile(draft=draft, verify=verify)


def format_profile(profile: LatencyProfile) -> str:
    lines = []
    for batch in sorted(profile.draft):
        lines.append(f"draft batch={batch} cost={float(profile.draft[batch])!r}")
    for batch in sorted(profile.verify):
        for n, cost in profile.verify[batch]:
            lines.append(f"verify batch={batch} n={n} cost={float(cost)!r}")
    return "\n".join(lines)


def illustrative_profile() -> LatencyProfile:
    """A hand-tuned stand-in for measured kernel curves, for demos and tests.

    Draft forwards cost a fraction of the baseline and parallel verification
    grows sublinearly in token count; with a ~70%-acceptance trace at gamma=3
    this prices out to roughly 1.2x-1.8x over plain high-precision decoding.
    An illustration of that regime only; it reproduces no measured hardware
    numbers.
    """
    draft = {1: Fraction(3, 10), 8: Fraction(3, 10), 16: Fraction(32, 100), 32: Fraction(36, 100)}
    verify: dict[int, list[tuple[int, Fraction]]] = {}
    for batch in (1, 8, 16, 32):
        verify[batch] = [
            (1, Fraction(1)), (2, Fraction(105, 100)),
            (4, Fraction(115, 100)), (8, Fraction(14, 10)),
        ]
    return LatencyProfile(draft=draft, verify=verify)


# ---------------------------------------------------------------------------
# Acceptance model
# ---------------------------------------------------------------------------


@dataclass
class AcceptanceModel:
    """Distribution of per-cycle accepted-draft counts over {0..gamma}."""

    gamma: int
    weights: list[Fraction]  # index a -> probability mass of accept_len == a

    def __post_init__(self) -> None:
        if self.gamma < 1:
            raise ConfigError("acceptance model gamma must be >= 1")
        if len(self.weights) != self.gamma + 1:
            raise ConfigError(f"need {self.gamma + 1} weights, got {len(self.weights)}")
        if any(w < 0 for w in self.weights):
            raise ConfigError("acceptance weights must be non-negative")
        total = sum(self.weights)
        if total <= 0:
            raise ConfigError("acceptance weights must not all be zero")
        self.weights = [w / total for w in self.weights]

    @classmethod
    def from_trace(cls, accept_lens: Sequence[int], gamma: int) -> "AcceptanceModel":
        """Empirical distribution from observed per-cycle accept lengths."""
        if not accept_lens:
            raise ConfigError("empty acceptance trace")
        weights = [Fraction(0)] * (gamma + 1)
        for a in accept_lens:
            if not 0 <= a <= gamma:
                raise ConfigError(f"accept_len {a} outside [0, {gamma}]")
            weights[a] += 1
        return cls(gamma=gamma, weights=weights)

    @classmethod
    def point_mass(cls, accept_len: int, gamma: int) -> "AcceptanceModel":
        weights = [Fraction(0)] * (gamma + 1)
        weights[accept_len] = Fraction(1)
        return cls(gamma=gamma, weights=weights)

    @classmethod
    def from_distribution(cls, weights: Sequence[float], gamma: int) -> "AcceptanceModel":
        return cls(gamma=gamma, weights=[Fraction(w) for w in weights])

    def expected_accept_len(self) -> Fraction:
        return sum((Fraction(a) * w for a, w in enumerate(self.weights)), Fraction(0))


# ---------------------------------------------------------------------------
# Closed-form model and trace replay
# ---------------------------------------------------------------------------


@dataclass
class AnalyticReport:
    tokens_per_cycle: float
    speedup: float
    per_valid_token_latency: float


@dataclass
class ReplayReport:
    committed_tokens: int
    total_cost_units: float
    draft_share: float       # absolute cost units; draft + verify == total exactly
    verify_share: float
    throughput_units: float  # committed tokens per cost unit
    speedup_vs_base: float
    per_valid_token_latency: float


def analytic_speedup(
    profile: LatencyProfile, acceptance: AcceptanceModel, gamma: int, batch: int
) -> AnalyticReport:
    """Expected-value model of one cycle.

    tokens_per_cycle = E[accept_len] + 1;
    cycle_cost = gamma * L_draft(B) + L_verify(B, gamma + 1);
    speedup = tokens_per_cycle * L_base(B) / cycle_cost.
    """
    if gamma < 1:
        raise ConfigError("gamma must be >= 1")
    if acceptance.gamma != gamma:
        raise ConfigError(f"acceptance model gamma {acceptance.gamma} != {gamma}")
    tokens_per_cycle = acceptance.expected_accept_len() + 1
    cycle_cost = gamma * profile.draft_cost(batch) + profile.verify_cost(batch, gamma + 1)
    speedup = tokens_per_cycle * profile.base_cost(batch) / cycle_cost
    return AnalyticReport(
        tokens_per_cycle=float(tokens_per_cycle),
        speedup=float(speedup),
        per_valid_token_latency=float(cycle_cost / tokens_per_cycle),
    )


def replay_trace(
    cycles: Sequence[CycleRecord], profile: LatencyProfile, batch: int
) -> ReplayReport:
    """Price a recorded cycle trace under a profile's kernel costs.

    Each cycle's draft phase costs |drafted| single-token draft forwards and
    its verify phase one |drafted|+1-token forward; totals divide by the
    committed (emitted) token count.  The baseline for the speedup is the same
    token count decoded one high-precision forward at a time.
    """
    if not cycles:
        raise TraceError("cannot replay an empty trace")
    l_draft = profile.draft_cost(batch)
    l_base = profile.base_cost(batch)
    draft_total = Fraction(0)
    verify_total = Fraction(0)
    tokens = 0
    for rec in cycles:
        draft_total += len(rec.drafted) * l_draft
        verify_total += profile.verify_cost(batch, len(rec.drafted) + 1)
        tokens += len(rec.emitted)
    if tokens == 0:
        raise TraceError("trace commits no tokens")
    total = draft_total + verify_total
    draft_f = float(draft_total)
    verify_f = float(verify_total)
    return ReplayReport(
        committed_tokens=tokens,
        total_cost_units=draft_f + verify_f,
        draft_share=draft_f,
        verify_share=verify_f,
        throughput_units=float(Fraction(tokens) / total),
        speedup_vs_base=float(tokens * l_base / total),
        per_valid_token_latency=float(total / tokens),
    )


# ---------------------------------------------------------------------------
# Draft-length sweep
# ---------------------------------------------------------------------------


@dataclass
class SweepRow:
    gamma: int
    acceptance_rate: float
    tokens_per_cycle: float
    modeled_speedup: float | None


def gamma_sweep(
    model: TransformerModel,
    prompts: Sequence[list[int]],
    gammas: Sequence[int],
    profile: LatencyProfile | None = None,
    *,
    cfg: GenerationConfig | None = None,
    batch: int = 1,
) -> list[SweepRow]:
    """Measure acceptance against draft length and price it through the model.

    Runs the speculative loop for every gamma over every prompt, aggregates
    the acceptance statistics, and (when a profile is given) feeds the
    empirical acceptance distribution into ``analytic_speedup``.
    """
    base_cfg = cfg if cfg is not None else GenerationConfig()
    rows: list[SweepRow] = []
    for gamma in gammas:
        if gamma < 1:
            raise ConfigError(f"sweep gamma must be >= 1, got {gamma}")
        accept_lens: list[int] = []
        drafted = 0
        accepted = 0
        emitted = 0
        n_cycles = 0
        for prompt in prompts:
            result = generate_qspec(model, list(prompt), replace(base_cfg, gamma=gamma))
            for rec in result.cycles:
                accept_lens.append(rec.accept_len)
                drafted += len(rec.drafted)
                accepted += rec.accept_len
                emitted += len(rec.emitted)
                n_cycles += 1
        modeled = None
        if profile is not None and accept_lens:
            acceptance = AcceptanceModel.from_trace(accept_lens, gamma)
            modeled = analytic_speedup(profile, acceptance, gamma, batch).speedup
        rows.append(SweepRow(
            gamma=gamma,
            acceptance_rate=accepted / drafted if drafted else 1.0,
            tokens_per_cycle=emitted / n_cycles if n_cycles else 0.0,
            modeled_speedup=modeled,
        ))
    return rows


def format_sweep_table(rows: Sequence[SweepRow]) -> str:
    """Tab-separated sweep table, one row per gamma."""
    out = ["gamma\tacceptance_rate\ttokens_per_cycle\tmodeled_speedup"]
    for row in rows:
        modeled = "" if row.modeled_speedup is None else repr(row.modeled_speedup)
        out.append(
            f"{row.gamma}\t{row.acceptance_rate!r}\t{row.tokens_per_cycle!r}\t{modeled}"
        )
    return "\n".join(out)
