import numpy as np
import pytest

from gexrestore.binning import ValueBinner
from gexrestore.model import GexModel, ModelConfig


def tiny_model(vocab=12, d=8, layers=1, heads=2, levels=8, seed=0, **kw):
    cfg = ModelConfig(vocab_size=vocab, d=d, n_layers=layers, n_heads=heads, n_levels=levels, **kw)
    return GexModel(cfg, ValueBinner(n_levels=levels), seed=seed)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def model():
    return tiny_model()


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
