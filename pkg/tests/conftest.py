import numpy as np
import pytest

from optmsm import tensor as T


def numeric_grad(f, arrays, step=1e-6):
    """Central differences of scalar ``f(*arrays)`` w.r.t. every array."""
    out = []
    for a in arrays:
        g = np.zeros_like(a)
        for i in np.ndindex(a.shape):
            old = a[i]
            a[i] = old + step
            up = f(*arrays)
            a[i] = old - step
            down = f(*arrays)
            a[i] = old
            g[i] = (up - down) / (2 * step)
        out.append(g)
    return out


def tape_grad(build, arrays):
    """Gradients of ``build(*leaves)`` (a scalar Tensor) w.r.t. each array."""
    leaves = [T.parameter(a.copy(), name=str(i)) for i, a in enumerate(arrays)]
    with T.Tape() as tape:
        loss = build(*leaves)
        tape.backward(loss)
    return loss.item(), [tape.grad(t) for t in leaves]


def rel_err(a, b):
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12))


def check_grad(build, arrays, tol=1e-6, step=1e-6):
    """Assert tape gradients match central differences for a composed scalar."""
    _, analytic = tape_grad(build, arrays)

    def f(*xs):
        with T.no_grad():
            return build(*[T.Tensor(x.copy()) for x in xs]).item()

    numeric = numeric_grad(f, [a.copy() for a in arrays], step)
    for i, (a, n) in enumerate(zip(analytic, numeric)):
        assert rel_err(a, n) < tol, f"input {i}: rel err {rel_err(a, n):.3e}"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_CRITERIA = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """Record one pass/fail line per acceptance criterion; returns ``ok``."""
    store = request.config.stash.setdefault(_CRITERIA, {})

    def record(number: int, name: str, ok: bool, detail: str) -> bool:
        line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {name}: {detail}"
        store[number, name] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    store = terminalreporter.config.stash.get(_CRITERIA, {})
    if store:
        terminalreporter.section("acceptance criteria")
        for k in sorted(store):
            terminalreporter.write_line(store[k])
