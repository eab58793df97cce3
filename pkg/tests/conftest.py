import itertools

import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from hypothesis import strategies as st

from ctd_rals.ctd import Ctd

settings.register_profile(
    "default", deadline=None, suppress_health_check=[HealthCheck.too_slow], derandomize=True
)
settings.load_profile("default")


def loop_expand(a: Ctd) -> np.ndarray:
    """Entry-by-entry evaluation of a CTD; independent of the library's flattening."""
    out = np.zeros(a.mode_sizes)
    for idx in itertools.product(*(range(m) for m in a.mode_sizes)):
        total = 0.0
        for l in range(a.rank):
            term = a.s[l]
            for k, j in enumerate(idx):
                term *= a.factors[k][j, l]
            total += term
        out[idx] = total
    return out


def random_ctd(rng, mode_sizes, rank, s_scale=1.0):
    factors = [rng.standard_normal((m, rank)) for m in mode_sizes]
    return Ctd(factors, s_scale * rng.uniform(0.5, 2.0, rank))


@st.composite
def ctd_pairs(draw, max_d=3, max_m=4, max_r=3):
    """Two CTDs of equal shape, built from a seed so shrinking stays cheap."""
    d = draw(st.integers(1, max_d))
    sizes = tuple(draw(st.lists(st.integers(1, max_m), min_size=d, max_size=d)))
    ra = draw(st.integers(1, max_r))
    rb = draw(st.integers(1, max_r))
    rng = np.random.default_rng(draw(st.integers(0, 2**32 - 1)))
    return random_ctd(rng, sizes, ra), random_ctd(rng, sizes, rb)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
