"""Shared fixtures: a small texture corpus with a quickly trained extractor
and index for fast tests, plus the cached desk-scale suite for the slow
end-to-end trend tests."""

from pathlib import Path

import numpy as np
import pytest

import activated_sr.features as features_mod
import activated_sr.model as model_mod
from activated_sr.imaging import DegradationSpec, load_png, make_pair
from activated_sr.model import SRArchitecture
from activated_sr.synth import generate_corpus

TESTS_ROOT = Path(__file__).resolve().parent


@pytest.fixture(scope="session")
def toy_corpus(tmp_path_factory) -> Path:
    d = tmp_path_factory.mktemp("toy_corpus")
    generate_corpus(d, 32, size=48, seed=7)
    return d


@pytest.fixture(scope="session")
def toy_extractor(toy_corpus):
    return features_mod.train_desk_extractor(toy_corpus, epochs=10, seed=0)


@pytest.fixture(scope="session")
def toy_index(toy_extractor, toy_corpus):
    return features_mod.build_index(toy_extractor, toy_corpus, k_store=6)


@pytest.fixture(scope="session")
def toy_pairs(toy_corpus):
    spec = DegradationSpec(scale=2)
    paths = sorted(toy_corpus.glob("*.png"))[:6]
    return [make_pair(load_png(p), spec, p.name) for p in paths]


@pytest.fixture(scope="session")
def tiny_arch():
    return SRArchitecture(n_resblocks=2, n_feats=8, scale=2)


@pytest.fixture(scope="session")
def tiny_model(tiny_arch):
    return model_mod.build_model(tiny_arch, rng_seed=0)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def desk_suite():
    """Desk-scale artifacts (corpus, extractor, index, baseline, report).

    Cached under tests/_desk_cache; the first build takes tens of minutes.
    """
    from _suite import ensure_suite

    return ensure_suite(TESTS_ROOT)


_ACCEPTANCE_RESULTS: dict[str, str] = {}


def record_acceptance(criterion: str, passed: bool, detail: str) -> None:
    _ACCEPTANCE_RESULTS[criterion] = f"[{'PASS' if passed else 'FAIL'}] {detail}"


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for crit in sorted(_ACCEPTANCE_RESULTS, key=lambda c: int(c.split()[-1])):
        terminalreporter.write_line(f"{crit}: {_ACCEPTANCE_RESULTS[crit]}")
