import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", deadline=None, max_examples=40,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def population_reseeds():
    """Five reseeded population solutions at zeta = 0.25, S = 1, log-logistic,
    each solved with both w-update forms on the same population."""
    from coxrs.rs_solver import solve_rs
    from coxrs.survival import CensoringSpec, HazardSpec

    hazard, cens = HazardSpec.log_logistic(), CensoringSpec.uniform(4.0)
    out = []
    for k in range(5):
        ibp = solve_rs(0.25, 1.0, hazard, cens, m=100_000, rng=[2024, k], damping=1.0)
        snapshot = ibp.population.xi.copy()
        alt = solve_rs(0.25, 1.0, None, None, population=ibp.population, w_update="mean_y_xi",
                       init=(ibp.u_star, ibp.v_star, ibp.w_star), damping=1.0, max_sweeps=3000)
        ibp.population.xi = snapshot  # the xi of the integration-by-parts solution
        out.append((ibp, alt))
    return out


_CRITERIA = {}


@pytest.fixture(scope="session")
def criterion():
    """Record the verdict of an acceptance criterion for the final summary."""
    def record(number, passed, detail):
        _CRITERIA.setdefault(number, []).append((bool(passed), detail))
        return bool(passed)
    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        parts = _CRITERIA[number]
        verdict = "PASS" if all(ok for ok, _ in parts) else "FAIL"
        detail = "; ".join(d for _, d in parts)
        terminalreporter.write_line(f"criterion {number}: {verdict} | {detail}")
