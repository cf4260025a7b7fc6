import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from udap import corpus, models

settings.register_profile("default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def tiny_images():
    return corpus.generate(64, 7)


@pytest.fixture(scope="session")
def tiny_bundle(tiny_images):
    """Briefly trained small bundle: cheap, but every component is a real trained network."""
    codec = models.train_autoencoder(tiny_images, epochs=3, seed=0, hidden=8)
    schedule = models.make_linear_schedule()
    den = models.train_denoiser(codec, schedule, tiny_images, steps=40, seed=0, channels=(8, 8, 8))
    return models.ModelBundle(schedule, codec, den, {"tag": "tiny"})


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        ok, detail = RESULTS[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
