import numpy as np
import pytest

from stabletune import data as D
from stabletune import model as M
from stabletune import trainer as TR


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_spec():
    return D.SyntheticTaskSpec(train_size=96, val_size=48, test_size=48, seq_len=10, min_len=6, seed=3)


@pytest.fixture(scope="session")
def small_data(small_spec):
    return D.generate_synthetic(small_spec)


@pytest.fixture(scope="session")
def toy_cfg(small_data):
    return M.ModelConfig(
        vocab_size=small_data.vocab_size,
        max_seq_len=small_data.max_seq_len,
        hidden_dim=16,
        num_heads=2,
        num_blocks=2,
        ffn_dim=32,
        num_classes=small_data.num_classes,
    )


@pytest.fixture(scope="session")
def task():
    """The default synthetic task (1000 train examples)."""
    spec = D.SyntheticTaskSpec()
    return spec, D.generate_synthetic(spec)


@pytest.fixture(scope="session")
def desk_cfg(task):
    _, ds = task
    return M.ModelConfig(vocab_size=ds.vocab_size, max_seq_len=ds.max_seq_len, num_classes=ds.num_classes)


@pytest.fixture(scope="session")
def snapshot(task, desk_cfg):
    """Masked-token pretrained weights for the default model, built once per session."""
    spec, _ = task
    params, losses = TR.pretrain_tiny(desk_cfg, spec, seed=0)
    assert np.mean(losses[-100:]) < np.mean(losses[:100])
    return params


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def acceptance_log():
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
