"""Draft-verify loop tests: phases, acceptance rule, equivalence, probe, trace."""

from __future__ import annotations

import numpy as np
import pytest

from conftest import toy_model, zero_model
from qspec.errors import ConfigError, SequenceOverflowError, ShapeError, TraceError
from qspec.model import KVCache, LogitsBlock, WriteTarget, forward, kv_commit
from qspec.numerics import argmax_row
from qspec.quant import ExecutionMode
from qspec.specdec import (
    CycleRecord,
    GenerationConfig,
    SequenceEngine,
    TokenSource,
    accept_greedy,
    draft_phase,
    format_trace,
    generate_greedy,
    generate_qspec,
    parse_trace,
    similarity_probe,
    verify_phase,
)


def one_hot_logits(token_ids: list[int], vocab: int) -> LogitsBlock:
    rows = np.zeros((len(token_ids), vocab), dtype=np.float32)
    for j, t in enumerate(token_ids):
        rows[j, t] = 1.0
    return LogitsBlock(logits=rows, mode=ExecutionMode.HIGH_PRECISION)


def prefilled_cache(model, prompt: list[int], gamma_max: int = 8) -> KVCache:
    kv = KVCache(model.config, gamma_max=gamma_max)
    forward(model, prompt, kv, ExecutionMode.HIGH_PRECISION, WriteTarget.VERIFY)
    kv_commit(kv, len(prompt) - 1)
    return kv


class TestDraftPhase:
    def test_gamma_one(self):
        model = toy_model(0)
        kv = prefilled_cache(model, [1, 2, 3])
        drafted, block = draft_phase(model, kv, pending_token=4, gamma=1)
        assert len(drafted) == 1
        assert block.logits.shape[0] == 1
        assert kv.draft_len == 1

    def test_matches_stepwise_oracle(self):
        model = toy_model(5)
        prompt = [3, 7, 11]
        kv = prefilled_cache(model, prompt)
        drafted, _ = draft_phase(model, kv, pending_token=20, gamma=4)
        # independent hand-rolled loop on a twin cache
        kv2 = prefilled_cache(model, prompt)
        expected, inp = [], 20
        for _ in range(4):
            block = forward(model, [inp], kv2, ExecutionMode.LOW_PRECISION, WriteTarget.DRAFT)
            tok = argmax_row(block.logits[0])
            expected.append(tok)
            inp = tok
        assert drafted == expected

    def test_high_precision_draft_equals_greedy_continuation(self):
        model = toy_model(1)
        prompt = [2, 4, 6]
        golden = generate_greedy(
            model, prompt, ExecutionMode.HIGH_PRECISION, GenerationConfig(max_new_tokens=6)
        ).new_tokens
        kv = prefilled_cache(model, prompt)
        drafted, _ = draft_phase(
            model, kv, pending_token=golden[0], gamma=5, mode=ExecutionMode.HIGH_PRECISION
        )
        assert drafted == golden[1:6]

    def test_stops_at_drafted_eos(self):
        model = zero_model()  # always drafts token 0
        kv = prefilled_cache(model, [1, 2])
        drafted, _ = draft_phase(model, kv, pending_token=3, gamma=5, eos_token=0)
        assert drafted == [0]


class TestVerifyPhase:
    def test_row_count(self):
        model = toy_model(0)
        kv = prefilled_cache(model, [1, 2, 3])
        block = verify_phase(model, kv, pending_token=4, drafted=[5, 6, 7])
        assert block.logits.shape[0] == 4
        assert kv.verify_len == 4

    def test_empty_draft_rejected(self):
        model = toy_model(0)
        kv = prefilled_cache(model, [1, 2, 3])
        with pytest.raises(ShapeError):
            verify_phase(model, kv, pending_token=4, drafted=[])

    def test_prefix_consistency(self):
        # verify row 0 == a lone single-token high-precision forward
        model = toy_model(2)
        prompt = [9, 8, 7]
        kv_a = prefilled_cache(model, prompt)
        kv_b = prefilled_cache(model, prompt)
        block = verify_phase(model, kv_a, pending_token=5, drafted=[1, 2, 3])
        lone = forward(model, [5], kv_b, ExecutionMode.HIGH_PRECISION, WriteTarget.VERIFY)
        assert np.array_equal(block.logits[0], lone.logits[0])

    def test_depends_only_on_token_ids(self):
        # same ids give identical logits whether drafts were real or injected,
        # and junk in the draft region is invisible
        model = toy_model(3)
        prompt = [10, 20, 30]
        kv_a = prefilled_cache(model, prompt)
        drafted, _ = draft_phase(model, kv_a, pending_token=40, gamma=3)
        block_a = verify_phase(model, kv_a, pending_token=40, drafted=drafted)
        kv_b = prefilled_cache(model, prompt)
        block_b = verify_phase(model, kv_b, pending_token=40, drafted=drafted)
        assert np.array_equal(block_a.logits, block_b.logits)


class TestAcceptGreedy:
    def test_all_match_gives_bonus(self):
        block = one_hot_logits([5, 6, 7, 8], vocab=16)
        accept_len, nxt, bonus = accept_greedy([5, 6, 7], block)
        assert (accept_len, nxt, bonus) == (3, 8, True)

    def test_first_mismatch(self):
        block = one_hot_logits([9, 6, 7, 8], vocab=16)
        accept_len, nxt, bonus = accept_greedy([5, 6, 7], block)
        assert (accept_len, nxt, bonus) == (0, 9, False)

    def test_mid_rejection_discards_suffix(self):
        block = one_hot_logits([5, 6, 12, 8], vocab=16)
        accept_len, nxt, bonus = accept_greedy([5, 6, 7], block)
        assert (accept_len, nxt, bonus) == (2, 12, False)

    def test_arity_mismatch(self):
        with pytest.raises(ShapeError):
            accept_greedy([1, 2], one_hot_logits([1, 2], vocab=8))

    def test_two_cycle_walkthrough(self):
        # gamma=4: first cycle accepts everything plus a bonus token, the second
        # keeps two drafts and takes the verifier's correction; after both
        # cycles eight tokens exist so the next cycle starts from the ninth.
        vocab = 128
        emitted = 0
        block1 = one_hot_logits([10, 11, 12, 13, 14], vocab)
        a1, n1, b1 = accept_greedy([10, 11, 12, 13], block1)
        assert (a1, n1, b1) == (4, 14, True)
        emitted += a1 + 1
        block2 = one_hot_logits([20, 21, 99, 50, 60], vocab)
        a2, n2, b2 = accept_greedy([20, 21, 22, 23], block2)
        assert (a2, n2, b2) == (2, 99, False)
        emitted += a2 + 1
        assert emitted == 8


class TestGenerateQspec:
    def test_vocab_one_emits_token_zero(self):
        model = toy_model(0, vocab_size=1, max_seq_len=32)
        result = generate_qspec(model, [0], GenerationConfig(gamma=3, max_new_tokens=6))
        assert result.new_tokens == [0] * 6

    @pytest.mark.parametrize("gamma", [1, 2, 3, 5, 7])
    def test_matches_greedy_oracle(self, gamma):
        model = toy_model(6, vocab_size=512)
        prompt = [4, 9, 100, 3]
        oracle = generate_greedy(
            model, prompt, ExecutionMode.HIGH_PRECISION, GenerationConfig(max_new_tokens=14)
        )
        result = generate_qspec(model, prompt, GenerationConfig(gamma=gamma, max_new_tokens=14))
        assert result.tokens == oracle.tokens

    @pytest.mark.parametrize("gamma", range(1, 8))
    def test_degenerate_high_precision_draft(self, gamma):
        # budget: 1 prefill-emitted token + 3 full cycles of gamma+1
        model = toy_model(7)
        cfg = GenerationConfig(
            gamma=gamma, max_new_tokens=3 * (gamma + 1) + 1,
            draft_mode=ExecutionMode.HIGH_PRECISION,
        )
        result = generate_qspec(model, [1, 2, 3], cfg)
        assert result.acceptance_rate == 1.0
        assert result.tokens_per_cycle == gamma + 1

    def test_cycle_emission_bounds_and_accounting(self):
        model = toy_model(8)
        cfg = GenerationConfig(gamma=4, max_new_tokens=17)
        result = generate_qspec(model, [5, 6], cfg)
        assert sum(len(c.emitted) for c in result.cycles) == len(result.new_tokens) - 1
        for rec in result.cycles:
            assert 1 <= len(rec.emitted) <= cfg.gamma + 1
            assert rec.accept_len <= len(rec.drafted)

    def test_trace_recording_can_be_disabled(self):
        model = toy_model(6, vocab_size=512)
        with_trace = generate_qspec(model, [4, 9], GenerationConfig(gamma=3, max_new_tokens=12))
        without = generate_qspec(
            model, [4, 9], GenerationConfig(gamma=3, max_new_tokens=12, record_trace=False)
        )
        assert without.cycles == []
        assert without.tokens == with_trace.tokens
        assert without.acceptance_rate == with_trace.acceptance_rate
        assert without.tokens_per_cycle == with_trace.tokens_per_cycle

    def test_empty_prompt_rejected(self):
        with pytest.raises(ShapeError):
            generate_qspec(toy_model(0), [], GenerationConfig())

    def test_budget_overflow_rejected(self):
        model = toy_model(0, max_seq_len=16)
        with pytest.raises(SequenceOverflowError):
            generate_qspec(model, [1, 2, 3], GenerationConfig(max_new_tokens=14))


class TestEosHandling:
    def _model_and_eos(self):
        # pick an eos token whose first occurrence is mid-continuation
        model = toy_model(9, vocab_size=512)
        prompt = [7, 8, 9]
        golden = generate_greedy(
            model, prompt, ExecutionMode.HIGH_PRECISION, GenerationConfig(max_new_tokens=16)
        ).new_tokens
        eos = next(
            golden[i] for i in range(3, len(golden) - 1) if golden.index(golden[i]) == i
        )
        return model, prompt, golden, eos

    @pytest.mark.parametrize("gamma", range(1, 8))
    def test_eos_truncation_matches_greedy(self, gamma):
        model, prompt, golden, eos = self._model_and_eos()
        oracle = generate_greedy(
            model, prompt, ExecutionMode.HIGH_PRECISION,
            GenerationConfig(max_new_tokens=16, eos_token=eos),
        )
        assert oracle.finish_reason == "eos"
        result = generate_qspec(
            model, prompt, GenerationConfig(gamma=gamma, max_new_tokens=16, eos_token=eos)
        )
        assert result.tokens == oracle.tokens
        assert result.finish_reason == "eos"
        assert result.new_tokens[-1] == eos

    def test_eos_as_first_token(self):
        model = zero_model()
        result = generate_qspec(model, [1, 2], GenerationConfig(max_new_tokens=8, eos_token=0))
        assert result.new_tokens == [0]
        assert result.finish_reason == "eos"
        assert result.cycles == []
        assert result.acceptance_rate == 1.0

    def test_dropped_tokens_are_logged(self):
        model, prompt, golden, eos = self._model_and_eos()
        result = generate_qspec(
            model, prompt, GenerationConfig(gamma=7, max_new_tokens=16, eos_token=eos)
        )
        oracle_len = golden.index(eos) + 1
        assert len(result.new_tokens) == oracle_len
        assert result.dropped_after_eos >= 0


class TestGenerateGreedy:
    def test_zero_model_repeats_token_zero(self):
        result = generate_greedy(
            zero_model(), [3, 4], ExecutionMode.HIGH_PRECISION, GenerationConfig(max_new_tokens=5)
        )
        assert result.new_tokens == [0] * 5

    def test_low_precision_diverges_and_position_is_recordable(self):
        model = toy_model(6, vocab_size=512)
        prompt = [4, 9, 100, 3]
        cfg = GenerationConfig(max_new_tokens=14)
        hi = generate_greedy(model, prompt, ExecutionMode.HIGH_PRECISION, cfg).new_tokens
        lo = generate_greedy(model, prompt, ExecutionMode.LOW_PRECISION, cfg).new_tokens
        divergence = next((i for i, (a, b) in enumerate(zip(hi, lo)) if a != b), None)
        assert divergence is not None  # seeded so the paths do split


class TestSequenceEngine:
    def test_phase_misuse_errors(self):
        model = toy_model(0)
        eng = SequenceEngine(model, [1, 2], GenerationConfig(max_new_tokens=8))
        with pytest.raises(ConfigError):
            eng.run_draft_phase()  # prefill required first
        eng.prefill()
        with pytest.raises(ConfigError):
            eng.prefill()
        with pytest.raises(ConfigError):
            eng.run_verify_phase()  # no draft in flight
        eng.run_draft_phase()
        with pytest.raises(ConfigError):
            eng.run_draft_phase()
        eng.run_verify_phase()
        with pytest.raises(ConfigError):
            eng.run_greedy_step()  # wrong algorithm

    def test_gamma_exceeding_cache_capacity(self):
        model = toy_model(0)
        kv = KVCache(model.config, gamma_max=2)
        with pytest.raises(ConfigError):
            SequenceEngine(model, [1], GenerationConfig(gamma=5, max_new_tokens=4), kv=kv)


class TestSimilarityProbe:
    def test_zero_model_uniform_and_accepted(self):
        model = zero_model()
        golden = generate_greedy(
            model, [1, 2], ExecutionMode.HIGH_PRECISION, GenerationConfig(max_new_tokens=4)
        ).new_tokens
        records = similarity_probe(model, [1, 2], golden)
        vocab = model.config.vocab_size
        for rec in records:
            assert rec.accepted
            assert rec.p_high == pytest.approx(1.0 / vocab, rel=1e-5)
            assert rec.p_low == pytest.approx(1.0 / vocab, rel=1e-5)

    def test_row_count_matches_golden(self):
        model = toy_model(3)
        golden = generate_greedy(
            model, [5, 6, 7], ExecutionMode.HIGH_PRECISION, GenerationConfig(max_new_tokens=6)
        ).new_tokens
        records = similarity_probe(model, [5, 6, 7], golden)
        assert len(records) == len(golden)

    def test_accepted_flags_match_stepwise_oracle(self):
        # teacher-forced low-precision argmax, recomputed one prefix at a time
        model = toy_model(4, vocab_size=512)
        prompt = [3, 5, 8]
        cfg = GenerationConfig(max_new_tokens=8)
        golden = generate_greedy(model, prompt, ExecutionMode.HIGH_PRECISION, cfg).new_tokens
        records = similarity_probe(model, prompt, golden)
        for j, rec in enumerate(records):
            prefix = prompt + golden[:j]
            step = generate_greedy(
                model, prefix, ExecutionMode.LOW_PRECISION, GenerationConfig(max_new_tokens=1)
            ).new_tokens[0]
            assert rec.accepted == (step == golden[j])

    def test_empty_golden_rejected(self):
        with pytest.raises(ShapeError):
            similarity_probe(toy_model(0), [1], [])


class TestTraceRoundTrip:
    def test_format_parse_round_trip(self):
        model = toy_model(6, vocab_size=512)
        result = generate_qspec(model, [4, 9], GenerationConfig(gamma=3, max_new_tokens=12))
        text = format_trace(result.cycles)
        parsed = parse_trace(text)
        assert len(parsed) == len(result.cycles)
        for a, b in zip(parsed, result.cycles):
            assert a.drafted == b.drafted
            assert a.accept_len == b.accept_len
            assert a.emitted == b.emitted
            assert a.terminal_token_source == b.terminal_token_source
            assert a.draft_cost_units == b.draft_cost_units
            assert a.verify_cost_units == b.verify_cost_units

    def test_parse_rejects_malformed(self):
        with pytest.raises(TraceError):
            parse_trace("cycle=0 drafted=1 accept_len=2 emitted=1 source=bonus "
                        "draft_cost_units=1.0 verify_cost_units=1.0")  # accept > drafted
        with pytest.raises(TraceError):
            parse_trace("not a trace line")

    def test_parse_accepts_request_tag(self):
        rec = CycleRecord(
            drafted=[1, 2], accept_len=1, emitted=[1, 9],
            terminal_token_source=TokenSource.RESAMPLED,
            draft_cost_units=2.0, verify_cost_units=3.0,
        )
        text = format_trace([rec], request_id="r7")
        assert "request=r7" in text
        assert parse_trace(text)[0].drafted == [1, 2]
