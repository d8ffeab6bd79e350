import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from photocert.symplectic import NetworkSpec, SymplecticTransform, beam_splitter, phase_shift, random_passive

settings.register_profile("default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def bs50():
    return beam_splitter(2, 0, 1, np.pi / 4)


@pytest.fixture
def heralded_network(bs50):
    """50:50 beam splitter acting on |1, 0>."""
    return NetworkSpec.lo(bs50, (1, 0))


def squeezed_network(m, seed, s_range=(1.0, 1.4), displace=0.3):
    rng = np.random.default_rng(seed)
    O = random_passive(m, 2, seed).O
    Op = random_passive(m, 2, seed + 1000).O
    s = rng.uniform(*s_range, size=m)
    x = rng.normal(scale=displace, size=2 * m)
    return NetworkSpec(SymplecticTransform.build(m, O=O, squeezing=s, Oprime=Op, x=x), (0,) * m)


def fixture_networks():
    """Desk-scale targets shared by the operator-identity checks."""
    return {
        "vacuum2": NetworkSpec(SymplecticTransform.identity(2), (0, 0)),
        "squeezed1": NetworkSpec(SymplecticTransform.build(1, squeezing=[1.3], x=[0.3, -0.2]), (0,)),
        "squeezed2": NetworkSpec(
            SymplecticTransform.build(2, O=beam_splitter(2, 0, 1, 0.5), squeezing=[1.2, 1.1], Oprime=phase_shift(2, 0, 0.3)),
            (0, 0),
        ),
        "bs11": NetworkSpec.lo(beam_splitter(2, 0, 1, np.pi / 4), (1, 1)),
        "bs10": NetworkSpec.lo(beam_splitter(2, 0, 1, np.pi / 4), (1, 0)),
        "brick110": NetworkSpec.lo(random_passive(3, 3, 1).O, (1, 1, 0)),
        "fock2": NetworkSpec.lo(phase_shift(1, 0, 0.4), (2,)),
        "fock3_bs": NetworkSpec.lo(beam_splitter(2, 0, 1, 0.7, 0.2), (3, 0)),
    }


# one line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES: dict = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
