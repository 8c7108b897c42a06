import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from retroclass.harness import synth_fixture

# property tests must be reproducible run-to-run; derandomize pins the
# example stream and deadline=None tolerates slow first-call BLAS warmup
settings.register_profile(
    "repo",
    derandomize=True,
    max_examples=40,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("repo")

GOLDEN_FIXTURE_PARAMS = dict(seed=1, n_classes=20, dim=64,
                             queries_per_class=50, eta_p=0.6, eta_c=0.1,
                             captions_per_class=40)


@pytest.fixture(scope="session")
def small_fixture():
    """Cheap six-class problem shared by the unit tests."""
    return synth_fixture(seed=11, n_classes=6, dim=24, queries_per_class=8,
                         eta_p=0.5, eta_c=0.1, captions_per_class=15)


@pytest.fixture(scope="session")
def golden_fixture():
    """The seed-1 problem the golden reports are frozen against."""
    return synth_fixture(**GOLDEN_FIXTURE_PARAMS)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


def unit_rows(rng, n, d):
    m = rng.standard_normal((n, d))
    return m / np.linalg.norm(m, axis=1, keepdims=True)
