"""Shared fixtures: a small toy corpus for unit tests and the default-scale runs for acceptance."""

import time

import pytest

from crossmod.synergy import (
    SliceStore,
    ToyCorpusConfig,
    TrainConfig,
    gen_toy_corpus,
    run_ablation,
    toy_forge_config,
)

SMALL_CORPUS = dict(n_volumes=12, slices_per_volume=24)
SMALL_TRAIN = dict(stage1_epochs=2, stage2_steps=100)


@pytest.fixture(scope="session")
def small_corpus():
    return gen_toy_corpus(ToyCorpusConfig(**SMALL_CORPUS))


@pytest.fixture(scope="session")
def small_store(small_corpus):
    return SliceStore.from_toy(small_corpus)


@pytest.fixture(scope="session")
def small_train_cfg():
    return TrainConfig(**SMALL_TRAIN)


@pytest.fixture(scope="session")
def default_store():
    return SliceStore.from_toy(gen_toy_corpus(ToyCorpusConfig()))


@pytest.fixture(scope="session")
def default_ablation(default_store):
    """The five-seed default ablation, run once per session; returns (report, seconds)."""
    start = time.perf_counter()
    report = run_ablation(default_store, forge_cfg=toy_forge_config(), train_cfg=TrainConfig())
    return report, time.perf_counter() - start


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
