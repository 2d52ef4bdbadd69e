import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", deadline=None, max_examples=40,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def fixture_dir(tmp_path_factory):
    """Small binaural planted-rule dataset shared by the slower tests."""
    from mambasip.data_io import FixtureSpec, gen_fixtures

    out = tmp_path_factory.mktemp("fixtures")
    gen_fixtures(out, seed=3, spec=FixtureSpec(n_train=24, n_val=8, n_test=12, layers=2, frames=12, d_in=8))
    return out


# --- acceptance summary -------------------------------------------------------

_CRITERIA: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by a test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when not in ("setup", "call"):
        return
    number, title = marker.args
    if report.failed or report.when == "call":
        status = "PASS" if report.passed else "FAIL"
        detail = dict(report.user_properties).get("detail", "")
        if _CRITERIA.get(number, ("",))[0] != "FAIL":
            _CRITERIA[number] = (status, title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        status, title, detail = _CRITERIA[number]
        line = f"criterion {number}: {status}  {title}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
