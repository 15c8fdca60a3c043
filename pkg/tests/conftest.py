"""Shared fixtures and the acceptance-report terminal hook."""

from __future__ import annotations

import numpy as np
import pytest

from specsteer.core import Vocabulary
from specsteer.models import TableModel
from specsteer.toydata import toy_world

# One line per acceptance criterion, printed after the test run so the
# verdicts survive pytest's output capture.
ACCEPTANCE_RESULTS: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_RESULTS:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def world():
    """Bundled toy corpora world; built once per test run."""
    return toy_world()


def make_vocab(size: int) -> Vocabulary:
    tokens = tuple(f"t{i}" for i in range(size - 1)) + ("</s>",)
    return Vocabulary(tokens=tokens, eos_id=size - 1)


def random_table_triple(rng: np.random.Generator, size: int):
    """Three single-row TableModels over a shared vocabulary."""
    vocab = make_vocab(size)
    models = tuple(
        TableModel(vocab, {(): rng.dirichlet(np.ones(size))}) for _ in range(3)
    )
    return vocab, models
