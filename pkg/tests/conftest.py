import numpy as np
import pytest

from oktransformer.kb import ingest, load_templates
from oktransformer.model import OkEncoder
from oktransformer.resources import bundled_path
from oktransformer.training import TaskModel, TaskSpec, load_jsonl
from oktransformer.transformer import ModelConfig, VanillaEncoder, Vocabulary


@pytest.fixture(scope="session")
def templates():
    return load_templates(bundled_path("templates.tsv"))


@pytest.fixture(scope="session")
def mini_kb(templates):
    return ingest(bundled_path("mini_kb.tsv"), templates)


@pytest.fixture(scope="session")
def mini_data():
    return load_jsonl(bundled_path("mini_dataset.jsonl"))


@pytest.fixture(scope="session")
def vocab(mini_kb, mini_data):
    return Vocabulary.build([e.text for e in mini_data] + [e.rendered for e in mini_kb.entries])


def small_config(vocab_size, **kw):
    base = dict(layers=2, hidden=16, heads=2, ffn=32, vocab_size=vocab_size, max_len=32, n_max=4,
                init_std=0.3, seed=0)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def ok_model(vocab, mini_kb):
    cfg = small_config(len(vocab))
    return TaskModel(OkEncoder.init(cfg), TaskSpec("classification", 2), vocab, mini_kb, head_std=0.3)


@pytest.fixture
def vanilla_model(vocab, mini_kb):
    cfg = small_config(len(vocab))
    return TaskModel(VanillaEncoder.init(cfg), TaskSpec("classification", 2), vocab, mini_kb, head_std=0.3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
