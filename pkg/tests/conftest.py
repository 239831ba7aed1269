import numpy as np
import pytest

from convattn.tensor import Tensor


def numerical_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar-valued f at x (elementwise)."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-based relative error between analytic and numerical gradients."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    denom = np.linalg.norm(a) + np.linalg.norm(b)
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)


def check_grads(build_loss, arrays: dict, tol: float = 1e-5, h: float = 1e-5):
    """Gradient check: build_loss maps {name: Tensor} -> scalar Tensor.

    Analytic gradients from one backward pass are compared against central
    finite differences on each input array independently (float64).
    """
    tensors = {k: Tensor(v, dtype=np.float64) for k, v in arrays.items()}
    loss = build_loss(tensors)
    loss.backward()
    for name, arr in arrays.items():
        def f(x, _name=name):
            vals = dict(arrays)
            vals[_name] = x
            ts = {k: Tensor(v, dtype=np.float64) for k, v in vals.items()}
            return build_loss(ts).item()

        num = numerical_grad(f, np.asarray(arr, dtype=np.float64), h=h)
        ana = tensors[name].grad
        assert ana is not None, f"no gradient reached input {name!r}"
        err = rel_error(ana, num)
        assert err < tol, f"gradient mismatch for {name!r}: rel err {err:.3e} >= {tol:.0e}"


@pytest.fixture
def rng():
    return np.random.default_rng(20260823)


# ---------------------------------------------------------------------------
# Acceptance reporting: test_acceptance.py records one verdict per criterion
# and the terminal summary prints one PASS/FAIL line for each.

ACCEPTANCE_CRITERIA = {
    1: "parameter accounting",
    2: "window arithmetic",
    3: "gradient integrity",
    4: "masking independence",
    5: "equivariance dichotomy",
    6: "ablation trend",
    7: "scheduler",
    8: "determinism",
    9: "format round-trips",
}

_acceptance_results: dict = {}


def record_acceptance(num: int, ok: bool) -> None:
    _acceptance_results[num] = bool(ok)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _acceptance_results:
        return
    terminalreporter.ensure_newline()
    terminalreporter.section("acceptance criteria")
    for num, name in ACCEPTANCE_CRITERIA.items():
        status = "PASS" if _acceptance_results.get(num) else "FAIL"
        terminalreporter.write_line(f"criterion {num} ({name}): {status}")
