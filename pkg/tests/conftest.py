import mpmath
import numpy as np
import pytest

mpmath.mp.dps = 40


def mp_t_cdf(t, dof):
    """Student-t CDF by the regularized incomplete beta function, in mpmath."""
    t = mpmath.mpf(t)
    dof = mpmath.mpf(dof)
    x = dof / (dof + t * t)
    tail = mpmath.betainc(dof / 2, mpmath.mpf(1) / 2, 0, x, regularized=True) / 2
    return 1 - tail if t > 0 else tail


def mp_t_quantile(dof, c):
    """High-precision quantile; bisection on the mpmath CDF then a secant polish."""
    c = mpmath.mpf(c)
    lo, hi = mpmath.mpf(-1e6), mpmath.mpf(1e6)
    for _ in range(200):
        mid = (lo + hi) / 2
        if mp_t_cdf(mid, dof) < c:
            lo = mid
        else:
            hi = mid
        if hi - lo < mpmath.mpf(10) ** -30:
            break
    return float((lo + hi) / 2)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[num])
