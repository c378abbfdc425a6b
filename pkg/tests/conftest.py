import sys

import numpy as np
import pytest

from mesocavity.model import CavitySpec, DriveSchedule, EnsembleSpec, SpinSpec, mhz


def random_complex(rng, *shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def random_density(rng, d):
    a = random_complex(rng, d, d)
    rho = a @ a.conj().T
    return rho / np.trace(rho)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def driven_trio(fock_dim=4, pulse_end=1.0):
    """Three inhomogeneous, lossy spins in a driven cavity (the workhorse fixture)."""
    spins = (
        SpinSpec(mhz(0.4), mhz(1.0), mhz(0.02)),
        SpinSpec(-mhz(0.3), mhz(0.8), mhz(0.05)),
        SpinSpec(mhz(0.1), mhz(0.6), mhz(0.01)),
    )
    return EnsembleSpec(spins, CavitySpec(mhz(0.05), mhz(0.2), fock_dim), DriveSchedule(mhz(0.3), 0.0, pulse_end))


@pytest.fixture
def trio():
    return driven_trio()


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(results):
        ok, detail, seconds = results[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'} ({seconds:.1f} s) {detail}")
