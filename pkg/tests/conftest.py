import time

import numpy as np
import pytest

from ldbn.lane import RowAnchorGrid
from ldbn.nn import build_reference_model
from ldbn.scenario import ScenarioSpec, render_batch
from ldbn.train import VAL_INDEX_OFFSET, PretrainConfig, pretrain

PRETRAIN_SEED = 7
TIMINGS = {}
CRITERIA = {}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def grid():
    return RowAnchorGrid()


@pytest.fixture
def model():
    return build_reference_model(seed=3)


@pytest.fixture(scope="session")
def pretrained(tmp_path_factory):
    """Reference model pretrained on pinned-seed source frames (about 30 s)."""
    cfg = PretrainConfig(seed=PRETRAIN_SEED)
    spec = ScenarioSpec(rng_seed=cfg.seed)
    train_x, train_y = render_batch(spec, range(cfg.train_frames))
    val_x, val_y = render_batch(spec, range(VAL_INDEX_OFFSET, VAL_INDEX_OFFSET + cfg.val_frames))
    start = time.perf_counter()
    result = pretrain(cfg, train_x, train_y, val_x, val_y, spec.grid)
    TIMINGS["pretrain_s"] = time.perf_counter() - start
    return result


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): numbered acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when not in ("setup", "call"):
        return
    if report.when == "setup" and report.passed:
        return
    n, title = marker.args
    detail = "; ".join(v for k, v in item.user_properties if k == "detail")
    CRITERIA[n] = ("PASS" if report.passed else "FAIL", title, detail)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        status, title, detail = CRITERIA[n]
        line = f"criterion {n:2d} {status}  {title}"
        terminalreporter.write_line(f"{line}  ({detail})" if detail else line)
