import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from lfakit.synth import GenConfig, generate_corpus

settings.register_profile("ci", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("dev", max_examples=20, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "ci"))

_ACCEPTANCE = []


@pytest.fixture
def criterion():
    """Record a one-line verdict for the acceptance summary."""
    def record(name, passed, detail=""):
        line = f"[{'PASS' if passed else 'FAIL'}] {name}" + (f" -- {detail}" if detail else "")
        _ACCEPTANCE.append(line)
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_corpus():
    return generate_corpus(GenConfig(identities=3, clips_per=20, seed=7, dim=64))


@pytest.fixture
def corpus_dir(tmp_path, small_corpus):
    paths = small_corpus.write(tmp_path / "corpus")
    return {k: str(v) for k, v in paths.items()}
