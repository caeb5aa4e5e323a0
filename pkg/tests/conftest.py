import pytest

from aslkv.model import ModelConfig, build_model, random_tokens


@pytest.fixture(scope="session")
def small_model():
    return build_model(ModelConfig(num_layers=12, num_q_heads=4, num_kv_heads=2, head_dim=8, hidden_dim=32, vocab_size=97, rng_seed=5))


@pytest.fixture(scope="session")
def small_tokens():
    return random_tokens(64, 97, 11)
