import math

import numpy as np
import pytest

from kolmolab import bound_lab
from kolmolab.drift_catalog import MatrixSpec, sample_matrix
from kolmolab.errors import InputError, ResolutionError
from kolmolab.field_core import EllipticityWindow, GridSpec
from kolmolab.kernel_solver import assemble, fundamental_solution, geometric_ladder

C5_D1 = 2.22462177919845724831159272102      # sqrt(1.2) 6 e^{-13/12} (mpmath)
GRAD_D1 = 1 / math.sqrt(math.pi)             # sqrt(t) ||grad k_t||_1 in d = 1


@pytest.fixture(scope="module")
def heat1():
    g = GridSpec(1, 8.0, 513)
    a = sample_matrix(MatrixSpec.make("identity", 1), g)
    return fundamental_solution(assemble(a, None), g.center, geometric_ladder(0.05, 0.5, 41))


def test_c5_gaussian():
    assert bound_lab.c5_gaussian(1, 1.2) == pytest.approx(C5_D1, rel=1e-10)
    with pytest.raises(InputError):
        bound_lab.c5_gaussian(1, 1.0)


def test_fits_bracket_the_heat_kernel(heat1):
    up = bound_lab.fit_gaussian(heat1, "upper", 1.1)
    lo = bound_lab.fit_gaussian(heat1, "lower", 0.8)
    assert up.ok and lo.ok
    # k_1 <= c k_1.1 needs c >= sqrt(1.1); k_1 >= c k_0.8 near the origin needs c <= sqrt(0.8)
    assert up.multiplier * math.exp(up.rate * 0.5) >= math.sqrt(1.1) * (1 - 1e-3)
    assert lo.multiplier <= math.sqrt(0.8) * (1 + 1e-3)
    with pytest.raises(InputError):
        bound_lab.fit_gaussian(heat1, "upper", 0.9, window=EllipticityWindow(1.0, 1.0))


def test_mass_conservation(heat1):
    rep = bound_lab.mass_conservation(heat1)
    assert rep.ok and rep.max_deviation < 1e-10


def test_operator_norms(heat1):
    tr = bound_lab.operator_norms(heat1, c6=1.2)
    assert np.allclose(tr.scaled_gradient, GRAD_D1, rtol=2e-3)
    assert tr.c5 == pytest.approx(C5_D1, rel=0.02)


def test_time_derivative_needs_fine_ladder():
    g = GridSpec(1, 8.0, 257)
    a = sample_matrix(MatrixSpec.make("identity", 1), g)
    tab = fundamental_solution(assemble(a, None), g.center, [0.1, 0.2, 0.4])
    with pytest.raises(ResolutionError):
        bound_lab.time_derivative(tab, 0, 1)


def test_harnack_params():
    with pytest.raises(InputError):
        bound_lab.HarnackParams(alpha=0.9, beta=0.8)
    with pytest.raises(InputError):
        bound_lab.HarnackParams(R=2.0)


def test_harnack_heat_kernel(heat1):
    rep = bound_lab.harnack_scan(heat1, [0.0], float(heat1.times[-1]), bound_lab.HarnackParams())
    assert 1.0 <= rep.K < 10 and rep.stability < 0.05


def test_holder_smooth_solution(heat1):
    # off the peak the kernel is locally linear in the parabolic distance
    rep = bound_lab.holder_fit(heat1, [1.0], 0.8, float(heat1.times[-1]))
    assert rep.beta == pytest.approx(1.0, abs=0.05)
