import numpy as np
import pytest

from hrvkit.core import HeadId
from hrvkit.toy import PlantSpec, ToyConfig, ToyEngine, plant_concept_head
from hrvkit.vocab import ConceptVocabulary

FIVE = [("Animals", ["cat"]), ("Vehicles", ["bus"]), ("Color", ["red"]),
        ("Furniture", ["desk"]), ("Plants", ["elm"])]


@pytest.fixture
def small_vocab():
    return ConceptVocabulary([("Color", ["red", "blue"]), ("Plants", ["tree", "oak tree#2"]),
                              ("Animals", ["cat"])])


@pytest.fixture
def five_vocab():
    return ConceptVocabulary(FIVE)


def planted_layout(vocab, heads_per_concept=3):
    cfg = ToyConfig(layers=4)
    ids = [HeadId(l, h) for l in range(cfg.layers) for h in range(cfg.heads_per_layer)]
    plan = {c: ids[i * heads_per_concept:(i + 1) * heads_per_concept]
            for i, c in enumerate(vocab.names)}
    return cfg, plan


@pytest.fixture
def planted(five_vocab):
    cfg, plan = planted_layout(five_vocab)
    eng = plant_concept_head(ToyEngine(cfg, five_vocab), PlantSpec.disjoint(plan, 10.0))
    return eng, plan


@pytest.fixture
def toy(small_vocab):
    return ToyEngine(ToyConfig(), small_vocab)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda l: int(l.split()[1])):
            terminalreporter.write_line(line)
