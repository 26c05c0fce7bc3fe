import numpy as np
import pytest

from prlab import _kernels


def random_boxes(rng, n, size=100.0, min_side=1.0):
    """``n`` valid boxes inside a ``size`` x ``size`` canvas."""
    xy = rng.uniform(0, size - min_side, (n, 2))
    wh = rng.uniform(min_side, size / 2, (n, 2))
    return np.hstack([xy, np.minimum(xy + wh, size)])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(params=["numpy", "numba"])
def kernels(request, monkeypatch):
    """Run a test once per kernel backend by patching the dispatch names."""
    if request.param == "numpy":
        monkeypatch.setattr(_kernels, "pairwise_iou", _kernels.pairwise_iou_np)
        monkeypatch.setattr(_kernels, "nms", _kernels.nms_np)
        monkeypatch.setattr(_kernels, "greedy_match", _kernels.greedy_match_np)
        monkeypatch.setattr(_kernels, "mix_features", _kernels.mix_features_np)
    else:
        monkeypatch.setattr(_kernels, "pairwise_iou", _kernels._pairwise_iou_jit_wrapper)
        monkeypatch.setattr(_kernels, "nms", _kernels.nms_jit)
        monkeypatch.setattr(_kernels, "greedy_match", _kernels.greedy_match_jit)
        monkeypatch.setattr(_kernels, "mix_features", _kernels.mix_features_jit)
    return request.param


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def verdict():
    def record(criterion: int, ok: bool, detail: str) -> bool:
        line = f"criterion {criterion:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
