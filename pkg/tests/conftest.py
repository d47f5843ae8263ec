import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from pingo.dataset import generate_dataset
from pingo.physics import GenerationConfig

settings.register_profile(
    "pingo", max_examples=25, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("pingo")


def numeric_grad(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central differences of scalar f with respect to every entry of x (in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        fp = f()
        x[i] = old - eps
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return g


@pytest.fixture(scope="session")
def small_gravity():
    """Tiny 4-body gravity set: 4 frames per time unit, 3 time units."""
    cfg = GenerationConfig(
        system="gravity", n_bodies=4, n_train=16, n_valid=8, n_test=8,
        total_steps=3000, sample_every=250, seed=11,
    )
    return generate_dataset(cfg)


@pytest.fixture(scope="session")
def small_charged():
    cfg = GenerationConfig(
        system="charged", n_bodies=5, n_train=6, n_valid=3, n_test=3,
        total_steps=2000, sample_every=250, seed=5,
    )
    return generate_dataset(cfg)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def verdict():
    """Record one PASS/FAIL line per acceptance criterion; printed in the summary."""

    def record(tag: str, ok: bool, detail: str) -> bool:
        line = f"{tag} {'PASS' if ok else 'FAIL'}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
