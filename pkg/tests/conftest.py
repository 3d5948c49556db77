import pytest
import torch

from t2icount.config import load_config, set_key


def small_cfg(backbone="mock", **overrides):
    """Fast config: mock or tiny backbone, 64 px synthetic images, small heads."""
    cfg = load_config("toy")
    for key, value in {
        "backbone.kind": backbone,
        "hscm.embed_dim": 32,
        "hscm.heads": 4,
        "counter.hidden_channels": 16,
        "counter.attn_heads": 4,
        "data.synth.image_size": 64,
        "data.synth.n_train": 8,
        "data.synth.n_val": 4,
        "data.synth.n_test": 4,
        "data.synth.minority_range": [1, 3],
        "data.synth.majority_range": [6, 10],
        "data.crop_size": 64,
        "eval.window": 64,
        "eval.stride": 64,
        "train.batch_size": 4,
        "train.epochs": 2,
        "train.max_steps": None,
        "train.log_every": 0,
        **overrides,
    }.items():
        set_key(cfg, key, value)
    return cfg


@pytest.fixture
def cfg():
    return small_cfg()


@pytest.fixture
def tiny_cfg():
    return small_cfg("tiny")


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)


def pytest_terminal_summary(terminalreporter):
    import sys
    acceptance = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    if acceptance is None or not acceptance.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in acceptance.report_lines():
        terminalreporter.write_line(line)
