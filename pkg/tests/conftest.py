"""Shared toy-model builders for the test suite."""

from __future__ import annotations

import numpy as np
import pytest

from qspec import ModelConfig, TransformerModel, model_from_float_tensors, random_init
from qspec.storage import _float_tensor_shapes


def make_config(**overrides) -> ModelConfig:
    base = dict(
        n_layers=2, d_model=64, n_heads=4, n_kv_heads=2, d_ff=128,
        vocab_size=256, max_seq_len=96, rope_theta=10000.0, norm_eps=1e-5,
        group_size=32,
    )
    base.update(overrides)
    return ModelConfig(**base)


_MODEL_CACHE: dict[tuple, TransformerModel] = {}


def toy_model(seed: int = 0, **overrides) -> TransformerModel:
    """Seeded random model; cached because construction dominates test time."""
    cfg = make_config(**overrides)
    key = (seed, tuple(sorted(cfg.__dict__.items())))
    if key not in _MODEL_CACHE:
        _MODEL_CACHE[key] = random_init(cfg, seed)
    return _MODEL_CACHE[key]


def zero_model(**overrides) -> TransformerModel:
    """All projection weights zero (norms stay ones): logits are identically zero."""
    cfg = make_config(**overrides)
    tensors = {}
    for name, shape in _float_tensor_shapes(cfg):
        if len(shape) == 1:
            tensors[name] = np.ones(shape, dtype=np.float32)
        else:
            tensors[name] = np.zeros(shape, dtype=np.float32)
    return model_from_float_tensors(cfg, tensors)


def random_prompt(rng: np.random.Generator, vocab: int, length: int) -> list[int]:
    return [int(t) for t in rng.integers(0, vocab, size=length)]


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
