import numpy as np
import pytest
from hypothesis import settings

from abra import tensor as T

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


@pytest.fixture(autouse=True)
def float64_profile():
    """Tests run in the 64-bit profile unless they switch explicitly."""
    with T.profile("float64"):
        yield


def numeric_grad(f, arrays, idx, h=1e-3):
    """Central differences of scalar ``f(*arrays)`` w.r.t. ``arrays[idx]``."""
    x = arrays[idx]
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f(*arrays)
        x[i] = old - h
        fm = f(*arrays)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a, b):
    """‖a − b‖ / max(‖a‖, ‖b‖); zero when both vanish."""
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale == 0 else float(np.linalg.norm(a - b) / scale)


def gradcheck(build, arrays, rng, h=1e-3):
    """Compare backprop and finite-difference gradients of ``build``.

    ``build(*tensors)`` may return any shape; it is contracted with a fixed
    random weight so every output element contributes.  Returns the worst
    relative error over all inputs.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    probe = [T.Tensor(a) for a in arrays]
    with T.no_grad():
        out_shape = build(*probe).shape
    weight = rng.standard_normal(out_shape)

    def scalar(*arrs):
        with T.no_grad():
            return float((build(*[T.Tensor(a) for a in arrs]).data * weight).sum())

    ts = [T.Tensor(a, requires_grad=True) for a in arrays]
    out = build(*ts)
    T.backward(T.reduce_sum(out * weight))
    worst = 0.0
    for i, t in enumerate(ts):
        analytic = t.grad if t.grad is not None else np.zeros_like(arrays[i])
        worst = max(worst, rel_error(analytic, numeric_grad(scalar, arrays, i, h)))
    return worst


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {detail}")
