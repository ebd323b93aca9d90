import numpy as np
import pytest

from geood.embeddings_io import EmbeddingSet, Role
from geood.synth import SynthConfig, generate_experiment


def labeled(X, y, name="train", role=Role.TRAIN):
    return EmbeddingSet(np.asarray(X, dtype=float), np.asarray(y), name, role)


def unlabeled(X, name="ood"):
    X = np.asarray(X, dtype=float)
    return EmbeddingSet(X, np.full(X.shape[0], -1), name, Role.OOD)


@pytest.fixture(scope="session")
def small_exp():
    cfg = SynthConfig(seed=3, n_classes=3, dim=8, samples_per_class=150)
    return generate_experiment(cfg, ["subspace_shift", "isotropic_far", "radial_shell"])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- acceptance summary ------------------------------------------------------------

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
