import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default",
    deadline=None,
    max_examples=30,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def desk_cfg():
    from hnseg.config import desk_preset

    return desk_preset()


@pytest.fixture(scope="session")
def phantom_case():
    from hnseg.phantom import PhantomSpec, generate_case

    return generate_case(PhantomSpec(seed=3), 0)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory, desk_cfg):
    """Six raw phantoms and their desk-preprocessed versions."""
    from hnseg.phantom import generate_corpus
    from hnseg.preprocess import preprocess_corpus

    root = tmp_path_factory.mktemp("corpus")
    generate_corpus(desk_cfg.phantom, 6, root / "raw")
    preprocess_corpus(root / "raw", root / "pre", desk_cfg.crop, desk_cfg.normalization, desk_cfg.spacing)
    return root


@pytest.fixture(scope="session")
def trained_model(tmp_path_factory, tiny_corpus, desk_cfg):
    """A desk network trained briefly on the tiny corpus (single fold, so it validates on its training set)."""
    from dataclasses import replace

    from hnseg.trainer import load_cases, train_fold

    cfg = replace(desk_cfg, train=replace(desk_cfg.train, epochs=12, val_every=4))
    cases = load_cases(tiny_corpus / "pre")
    out = tmp_path_factory.mktemp("trained")
    result = train_fold(cfg, [sorted(cases)], cases, out)
    return cfg, cases, result, out


def pytest_terminal_summary(terminalreporter):
    from acceptance_report import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
