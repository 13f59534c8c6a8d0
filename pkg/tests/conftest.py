import warnings

import numpy as np
import pytest
from scipy.stats import unitary_group

from renyi_qkd.matfun import PinchingMap
from renyi_qkd.protocol import CPMap, bb84_pm_instance


def random_hermitian(d, rng):
    x = rng.normal(size=(d, d)) + 1j * rng.normal(size=(d, d))
    return (x + x.conj().T) / 2


def random_density(d, rng, rank=None, min_eig=0.0):
    rank = d if rank is None else rank
    x = rng.normal(size=(d, rank)) + 1j * rng.normal(size=(d, rank))
    rho = x @ x.conj().T
    rho /= np.trace(rho).real
    if min_eig:
        rho = (1 - d * min_eig) * rho + min_eig * np.eye(d)
    return (rho + rho.conj().T) / 2


def random_unitary(d, rng):
    return unitary_group.rvs(d, random_state=rng)


def random_channel(d_in, d_out, rng, n_kraus=3, trace_scale=1.0):
    """Random CPTP map (times ``trace_scale``) from a Stinespring isometry."""
    v = unitary_group.rvs(d_out * n_kraus, random_state=rng)[:, :d_in]
    ks = [np.sqrt(trace_scale) * v[k * d_out:(k + 1) * d_out] for k in range(n_kraus)]
    return CPMap(tuple(ks))


def random_pinching(r, rest, rng):
    u = random_unitary(r, rng)
    return PinchingMap(tuple(np.outer(u[:, i], u[:, i].conj()) for i in range(r)), rest)


class FrobeniusQuadratic:
    """``f(rho) = ||rho - target||_F^2`` with gradient ``2 (rho - target)``."""

    def __init__(self, target):
        self.target = np.asarray(target, dtype=complex)

    def value(self, rho):
        return float(np.linalg.norm(rho - self.target) ** 2)

    def gradient(self, rho):
        return 2 * (rho - self.target)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def bb84():
    return bb84_pm_instance(0.01, 0.0)


@pytest.fixture(autouse=True)
def _quiet_solvers():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        yield


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
