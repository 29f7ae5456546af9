"""Shared fixtures and the brute-force first-quantized oracle.

The oracle builds the symmetrised two-particle input tensor explicitly and
pushes both particles through the transfer matrix with ``einsum``.  It shares
no code with the production kernels.
"""

import math

import numpy as np
import pytest

from homlab import core


def oracle_density(u, psi_u, psi_r, sign, unknown=0, reference=1):
    """Undivided density P[a, i, b, j] for a pure unknown state."""
    u = np.asarray(u, dtype=complex)
    m, n = u.shape[0], psi_u.size
    phi = np.zeros((m, n, m, n), dtype=complex)
    phi[unknown, :, reference, :] += np.outer(psi_u, psi_r)
    phi[reference, :, unknown, :] += sign * np.outer(psi_r, psi_u)
    amp = np.einsum("an,bm,nxmy->axby", u, u, phi)
    return np.abs(amp) ** 2


def oracle_mixed_density(u, rho, psi_r, sign, unknown=0, reference=1):
    """Average the pure-state oracle over the eigen-ensemble of ``rho``."""
    lam, vec = np.linalg.eigh(rho)
    out = 0.0
    for w, v in zip(lam, vec.T):
        out = out + w * oracle_density(u, v, psi_r, sign, unknown, reference)
    return out


def oracle_exclusive_total(P):
    """Sum of exclusive-event probabilities from an undivided density."""
    m, n = P.shape[0], P.shape[1]
    S = P.reshape(m * n, m * n)
    return float(np.sum(np.triu(S, 1)) + np.trace(S) / 2)


ETA_IM = math.sqrt(2) - 1
KAPPA = (1 - math.sqrt(2) / 2) ** 2


@pytest.fixture
def grid8():
    return core.Grid(8, -1.0, 1.0)


@pytest.fixture
def grid16():
    return core.Grid(16, -1.0, 1.0)


@pytest.fixture(params=[core.BOSON, core.FERMION], ids=["boson", "fermion"])
def statistics(request):
    return request.param


ACCEPTANCE_RESULTS = []


def record_acceptance(number, title, passed, detail):
    line = f"criterion {number:>2} {'PASS' if passed else 'FAIL'}  {title}: {detail}"
    ACCEPTANCE_RESULTS.append((number, line))
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(line)
