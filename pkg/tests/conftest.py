import numpy as np
import pytest

from graftlab.diffusion import NoiseSchedule, train_score_model
from graftlab.numerics import FieldModel, rng_stream
from graftlab.tasks import mixture_2d, two_mode_1d

ROOT_SEED = 20240601


@pytest.fixture
def rng():
    return np.random.default_rng(ROOT_SEED)


@pytest.fixture
def small_model():
    return FieldModel(2, hidden=(6, 5), time_dim=4, rng=3)


def _train(mix, dim, steps, seed):
    s = NoiseSchedule.linear(1000)
    data = mix.sample(20_000, rng_stream(seed, "data"))
    m = FieldModel(dim, (64, 64), rng=rng_stream(seed, "init"))
    train_score_model(m, data, s, steps, rng_stream(seed, "train"), batch_size=512, lr=2e-3,
                      final_lr=1e-5)
    return mix, s, m


@pytest.fixture(scope="session")
def trained_1d():
    """Score model for the symmetric two-mode 1D mixture."""
    return _train(two_mode_1d(), 1, 4000, ROOT_SEED)


@pytest.fixture(scope="session")
def trained_2d():
    """Score model for the four-component 2D mixture."""
    return _train(mixture_2d(), 2, 3000, ROOT_SEED)


# --------------------------------------------------------------------------
# One summary line per acceptance criterion
# --------------------------------------------------------------------------

_CRITERIA: dict[int, tuple[str, str]] = {}


def _criterion_number(nodeid: str):
    name = nodeid.rsplit("::", 1)[-1]
    if "test_acceptance.py" not in nodeid or not name.startswith("test_criterion_"):
        return None
    return int(name.split("_")[2])


def pytest_runtest_logreport(report):
    n = _criterion_number(report.nodeid)
    if n is None:
        return
    detail = dict(report.user_properties).get("detail", "")
    if report.when == "call" or report.outcome != "passed":
        status = "PASS" if report.outcome == "passed" else "FAIL"
        if report.outcome == "skipped":
            status = "SKIP"
        _CRITERIA[n] = (status, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        status, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {status}  {detail}")
