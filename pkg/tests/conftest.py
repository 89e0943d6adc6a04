import numpy as np
import pytest

from upcycled_fl.data import SizeSpec, generate_synthetic, split_train_test


@pytest.fixture(scope="session")
def small_iid():
    ds = generate_synthetic(0.0, 0.0, True, 6, 5, 3, SizeSpec.fixed(40), seed=7)
    return split_train_test(ds, 0.2, 7)


@pytest.fixture(scope="session")
def small_noniid():
    ds = generate_synthetic(1.0, 1.0, False, 6, 5, 3, SizeSpec.fixed(40), seed=11)
    return split_train_test(ds, 0.2, 11)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_CRITERIA = range(1, 11)
_ACCEPTANCE_KEY = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """``criterion(n, ok, detail)`` logs one acceptance check, then asserts it."""
    log = request.config.stash.setdefault(_ACCEPTANCE_KEY, {})

    def check(n, ok, detail):
        log.setdefault(n, []).append((bool(ok), detail))
        assert ok, f"criterion {n}: {detail}"

    return check


def pytest_terminal_summary(terminalreporter, config):
    log = config.stash.get(_ACCEPTANCE_KEY, None)
    if not log:
        return
    terminalreporter.section("acceptance criteria")
    for n in ACCEPTANCE_CRITERIA:
        parts = log.get(n)
        if not parts:
            terminalreporter.write_line(f"criterion {n:2d}: FAIL (not evaluated)")
            continue
        status = "PASS" if all(ok for ok, _ in parts) else "FAIL"
        details = "; ".join(d for _, d in parts)
        terminalreporter.write_line(f"criterion {n:2d}: {status}  {details}")
