import numpy as np
import pytest

from ssctm import (AffineControlPolicy, HighwayConfig, MarkovCapacityModel, bundled_config_path,
                   load_config)


def two_cell_model():
    cfg = HighwayConfig.from_arrays(1.0, [100, 100], [25, 25], [200, 300], [0.75, 0.0],
                                    [4000, 1200], [3500, 600])
    mk = MarkovCapacityModel([[4000, 6000], [4000, 3000]], [[0, 0.9], [0.9, 0]])
    return cfg, mk


def three_cell_model():
    cfg = HighwayConfig.from_arrays(1.0, [100] * 3, [25] * 3, [200, 300, 300], [0.75, 0.6, 0.0],
                                    [4000, 1200, 1200], [3500, 600, 800])
    mk = MarkovCapacityModel([[4000, 6000, 6000], [4000, 3000, 2500]], [[0, 0.9], [0.9, 0]])
    return cfg, mk


@pytest.fixture
def two_cell():
    return two_cell_model()


@pytest.fixture
def three_cell():
    return three_cell_model()


@pytest.fixture
def reference_policy():
    return AffineControlPolicy((4750.0,), (25.0,))


@pytest.fixture(scope="session")
def i210_bundle():
    return load_config(bundled_config_path("i210"))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance verdict lines, echoed in the terminal summary so they survive output capture
_VERDICTS: dict[str, str] = {}


@pytest.fixture
def verdict():
    def record(criterion: int, ok: bool, detail: str) -> bool:
        line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'} - {detail}"
        print(line)
        _VERDICTS[f"{criterion:02d}"] = line
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for key in sorted(_VERDICTS):
            terminalreporter.write_line(_VERDICTS[key])
