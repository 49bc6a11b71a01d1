import numpy as np
import pytest
import torch
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def float64():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(old)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """Eight families, one minute of labels each, half a minute unlabeled."""
    from hearthside.synthgen import CorpusConfig, synth_corpus

    out = tmp_path_factory.mktemp("small_corpus")
    synth_corpus(CorpusConfig(n_families=8, labeled_minutes=8, unlabeled_minutes=4), out, seed=0)
    return out / "manifest.jsonl"


@pytest.fixture(scope="session")
def small_data(small_corpus):
    from hearthside.pipeline import prepare

    return prepare(small_corpus, hop_s=1.0)


ACCEPTANCE: dict = {}


def record(criterion: int, ok: bool, detail: str) -> None:
    """Store one acceptance line; printed again in the terminal summary."""
    line = f"criterion {criterion:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[criterion] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
