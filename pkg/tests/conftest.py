import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "repo", deadline=None, derandomize=True, max_examples=60,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("repo")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def vocab():
    from cascade_sgg.annotations import bundled_vocabulary
    return bundled_vocabulary()


def pytest_terminal_summary(terminalreporter):
    rows = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            props = dict(getattr(rep, "user_properties", []))
            if "criterion" in props and rep.when == "call":
                rows.append((props["criterion"], "PASS" if rep.passed else "FAIL"))
    if rows:
        terminalreporter.section("acceptance criteria")
        for title, verdict in sorted(rows, key=lambda r: int(r[0].split(".")[0])):
            terminalreporter.write_line(f"{verdict}  criterion {title}")
