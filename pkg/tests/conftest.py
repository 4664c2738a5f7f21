import numpy as np
import pytest

from mmclip.network import LayerSpec, Network


def pinned_mlp() -> Network:
    """2-4-3 MLP with fixed weights (hidden layer clippable)."""
    W1 = np.array([[1.0, -0.5, 0.3, 2.0], [0.2, 1.5, -1.0, -0.4]])
    b1 = np.array([0.1, 0.0, 0.4, -0.2])
    W2 = np.array([[1.0, 0.0, -1.0], [0.5, 2.0, 0.0], [-0.3, 0.7, 1.2], [0.8, -1.1, 0.6]])
    b2 = np.array([0.0, 0.1, -0.1])
    layers = (LayerSpec("dense", 2, 4, activation="relu", clippable=True), LayerSpec("dense", 4, 3))
    return Network(layers, ({"W": W1, "b": b1}, {"W": W2, "b": b2}), (2,), 3)


@pytest.fixture
def net2():
    return pinned_mlp()


# criterion id -> (passed, detail); filled in by the acceptance module
ACCEPTANCE_RESULTS: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[cid]
        terminalreporter.write_line(f"C{cid:<2} {'PASS' if ok else 'FAIL'}  {detail}")
