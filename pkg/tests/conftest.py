import numpy as np
import pytest

from lnsr.encoder import Batch, EncoderConfig, EncoderModel, Parameters, init_params


@pytest.fixture
def tiny_config():
    return EncoderConfig(num_layers=2, d_model=8, n_heads=2, d_ff=16, vocab_size=16, max_seq_len=8)


@pytest.fixture
def tiny_params(tiny_config):
    """Parameters with enough spread that layers do real work."""
    rng = np.random.default_rng(3)
    p = init_params(tiny_config, rng)
    return Parameters(tiny_config, {k: v + rng.normal(0.0, 0.3, v.shape) for k, v in p.tensors.items()})


@pytest.fixture
def tiny_model(tiny_config):
    return EncoderModel(tiny_config)


@pytest.fixture
def tiny_batch():
    seqs = [np.array([1, 5, 6, 7, 8, 2]), np.array([1, 9, 10, 11]), np.array([1, 12, 13, 5, 6])]
    return Batch.from_sequences(seqs, np.array([0, 1, 1]))


SMALL = {
    "epochs": 2,
    "batch_size": 16,
    "learning_rate": 1e-3,
    "encoder": {"num_layers": 2, "d_model": 16, "n_heads": 2, "d_ff": 32, "vocab_size": 64, "max_seq_len": 16},
    "data": {"train_size": 48, "eval_size": 40, "seq_len": 10},
    "pretrain": {"enabled": False},
    "probe": {"draws": 2, "max_examples": 8},
}


@pytest.fixture
def small_cfg():
    """Factory for a fast training config; keyword overrides use dotted keys."""
    from lnsr.harness.config import build_config

    def make(**overrides):
        return build_config(SMALL, {k.replace("__", "."): v for k, v in overrides.items()})

    return make


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
