import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from rocmlab.consistency import ConsistencyModel, DistillConfig, ModelConfig, distill
from rocmlab.diffusion import NoiseSchedule, preset

settings.register_profile("default", max_examples=30, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def sched():
    return NoiseSchedule(8)


@pytest.fixture(scope="session")
def gmm2():
    return preset("gmm2")


@pytest.fixture(scope="session")
def distilled_gmm2(gmm2, sched):
    """Default-config 8-step model distilled on gmm2 (shared, about 3 minutes)."""
    model = ConsistencyModel(ModelConfig(), seed=0)
    model, losses = distill(model, gmm2, sched, DistillConfig())
    return model, losses


@pytest.fixture
def small_model():
    cfg = ModelConfig(hidden=(8, 8), n_freq=2, cond_dim=3, K=4)
    return ConsistencyModel(cfg, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_AC_LINES = pytest.StashKey[list]()


@pytest.fixture
def ac_report(request):
    """Print one PASS/FAIL line for an acceptance criterion and echo it in the summary."""
    lines = request.config.stash.setdefault(_AC_LINES, [])

    def report(name: str, passed: bool, detail: str) -> bool:
        line = f"{name} {'PASS' if passed else 'FAIL'}: {detail}"
        print(line)
        lines.append(line)
        return passed

    return report


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_AC_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[0].split("-")[1])):
            terminalreporter.write_line(line)
