import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from drrpose.data import PhantomSpec, SequenceSpec, generate_phantom, simulate_sequence
from drrpose.geometry import RenderGeometry

torch.set_num_threads(1)

settings.register_profile(
    "default", max_examples=30, deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
settings.load_profile("default")


@pytest.fixture(scope="session")
def phantom():
    """The standard 64^3 skull phantom."""
    return generate_phantom(PhantomSpec())


@pytest.fixture(scope="session")
def small_phantom():
    """A coarse 24^3 version of the standard phantom for loop-heavy oracles."""
    return generate_phantom(PhantomSpec(dims=(24, 24, 24), supersample=1))


@pytest.fixture(scope="session")
def geom32(phantom):
    geom = RenderGeometry(sod=7.8125, sid=192.0, width=32, height=32, n_samples=64)
    seq = simulate_sequence(phantom, SequenceSpec.explicit([-90, -45, 0, 45, 90]), geom)
    return geom.with_(norm_scale=seq.scale)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ---------------------------------------------------------------- acceptance summary

_CRITERIA = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and rep.passed):
        return
    number, title = mark.args
    detail = dict(item.user_properties).get("detail", "")
    status = "PASS" if rep.passed else ("SKIP" if rep.skipped else "FAIL")
    _CRITERIA[number] = f"[{status}] criterion {number}: {title}" + (f" | {detail}" if detail else "")


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[number])
