import numpy as np
import pytest

from tsrbench import models as md
from tsrbench import synthgen as sg
from tsrbench.tensor import Graph, Tensor


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def numeric_grad(f, x: np.ndarray, step: float = 1e-3) -> np.ndarray:
    """Central differences of scalar ``f`` at float64 array ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + step
        hi = f(x)
        x[idx] = orig - step
        lo = f(x)
        x[idx] = orig
        g[idx] = (hi - lo) / (2 * step)
    return g


def analytic_grads(build, *arrays):
    """Gradients of scalar ``build(*tensors)`` for float64 leaf tensors."""
    leaves = [Tensor(a, requires_grad=True, dtype=np.float64) for a in arrays]
    with Graph() as g:
        loss = build(*leaves)
    g.backward(loss)
    return [leaf.grad for leaf in leaves]


def scalar_fn(build, arrays, k):
    """``x -> build(...)`` with the ``k``-th input replaced by ``x``."""

    def f(x):
        args = [Tensor(a, dtype=np.float64) for a in arrays]
        args[k] = Tensor(x, dtype=np.float64)
        return float(build(*args).data)

    return f


@pytest.fixture(scope="session")
def small_box():
    spec = sg.DatasetSpec.create("MIDDLE_BOX", "GAUSSIAN", N=10, T=12, n_train=160, n_test=60, seed=3)
    return sg.generate_dataset(spec)


@pytest.fixture(scope="session")
def small_tcn(small_box):
    train, test = small_box
    model = md.build_model(md.ModelSpec("TCN", 10, 12, hidden_size=16, kernel_size=3, seed=1))
    md.train(model, train, test, md.TrainConfig(epochs=5, seed=1))
    return model


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, passed: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
