import numpy as np
import pytest

from hashqa import synthetic
from hashqa.config import TrainConfig
from hashqa.data import build_vocab, corpus_from_records, dataset_from_records, read_jsonl
from hashqa.model import init_params


@pytest.fixture(scope="session")
def bundled_records():
    return read_jsonl(synthetic.bundled_path("train")), read_jsonl(synthetic.bundled_path("dev"))


@pytest.fixture(scope="session")
def bundled(bundled_records):
    """(cfg, vocab, train_set, dev_set) on the shipped synthetic split."""
    train_recs, dev_recs = bundled_records
    cfg = TrainConfig()
    vocab = build_vocab(corpus_from_records(train_recs), cfg.min_count)
    return cfg, vocab, dataset_from_records(train_recs, cfg.L, vocab), dataset_from_records(dev_recs, cfg.L, vocab)


@pytest.fixture
def small_cfg():
    return TrainConfig(D=16, E=16, L=8, M=8, F=16, layers=1, epochs=2, batch_size=8)


@pytest.fixture
def small_setup(small_cfg):
    """A tiny generated dataset with matching untrained params."""
    recs = synthetic.generate(12, pool_size=6, seed=3)
    vocab = build_vocab(corpus_from_records(recs))
    ds = dataset_from_records(recs, small_cfg.L, vocab)
    return small_cfg, vocab, ds, init_params(small_cfg, len(vocab))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
