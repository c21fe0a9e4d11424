import numpy as np
import pytest

from viref.data import ClipFeatureSet, FeatureSequence
from viref.models import PairFeatures, RefExpModel, VirefConfig

TAGS = ("viref", "viref_a", "viref_e")


def tiny_config(**kw) -> VirefConfig:
    base = dict(enc_layers=2, dec_layers=2, hidden=8, dim=6, vocab_size=12, embed_dim=5, dropout=0.2)
    base.update(kw)
    return VirefConfig(**base)


def tiny_model(tag, seed=0, dtype=np.float64, **kw) -> RefExpModel:
    return RefExpModel(tag, tiny_config(**kw), seed=seed, dtype=dtype)


def random_pair(rng, m=3, dim=6) -> PairFeatures:
    return PairFeatures(FeatureSequence(rng.normal(size=(m, 5, dim))), ClipFeatureSet(rng.normal(size=(6, dim))))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
