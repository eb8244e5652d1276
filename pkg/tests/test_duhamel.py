import math

import numpy as np
import pytest

from kolmolab import duhamel
from kolmolab.drift_catalog import DriftSpec, MatrixSpec, sample_drift, sample_matrix
from kolmolab.errors import InputError, SmallnessError
from kolmolab.field_core import GridSpec
from kolmolab.kernel_solver import assemble, fundamental_solution, geometric_ladder, l1_error

PARAMS = dict(lam=4.0, delta=1.5, h=1.0, c0=0.4, c0_hat=0.062)


def _setup(c):
    g = GridSpec(1, 8.0, 513)
    a = sample_matrix(MatrixSpec.make("identity", 1), g)
    b = sample_drift(DriftSpec.make("constant", 1, amplitude=c), g)
    return g, assemble(a, b), geometric_ladder(4.5 * g.h ** 2, 1.0, 6)


def test_first_term_constant_drift():
    g, op, lad = _setup(0.5)
    S = duhamel.duhamel_series(op, g.center, lad, n_terms=2)
    X = g.coords()[..., 0]
    for k, t in enumerate(lad):
        ref = duhamel.u1_constant_drift(0.5, X, t)
        assert np.sum(np.abs(S.terms[1][k] - ref)) / np.sum(np.abs(ref)) < 0.01


def test_series_matches_solver():
    g, op, lad = _setup(0.5)
    S = duhamel.duhamel_series(op, g.center, lad, n_terms=8, envelope=4.0)
    tab = fundamental_solution(op, g.center, lad)
    for k in range(len(lad)):
        assert l1_error(S.partial_sum(k), tab.values[0][k], g) < 1e-3
    assert all(r2 < r1 for r1, r2 in zip(S.sup_ratios[1:], S.sup_ratios[2:]))


def test_contraction_homogeneous_and_composed():
    e1 = duhamel.contraction_estimate(DriftSpec.make("constant", 1, amplitude=1.0), 1.0, epsilon=0.9, **PARAMS)
    e3 = duhamel.contraction_estimate(DriftSpec.make("constant", 1, amplitude=3.0), 1.0, epsilon=0.9, **PARAMS)
    assert e3.C_hat == pytest.approx(3 * e1.C_hat, rel=1e-12)
    assert e1.C_hat == pytest.approx(e1.c_minus * e1.M_minus + e1.c_plus * e1.M_plus, rel=1e-14)
    assert e1.mu_minus == pytest.approx(4.0 * 1.5 / (4.0 - 3.0))
    assert duhamel.critical_amplitude(e1) == pytest.approx(1 / e1.C_hat)


def test_default_epsilon_window():
    assert duhamel.default_epsilon(4.0, 1.0) == pytest.approx(2 / 3 + 1e-3)
    assert duhamel.default_epsilon(4.0, 1.5) == pytest.approx(0.8 + 1e-3)
    with pytest.raises(InputError):
        duhamel.default_epsilon(4.0, 2.0)


def test_omega_h():
    assert duhamel.omega_h(1.0, 0.5, 0.5) == pytest.approx(2 * math.log(2), rel=1e-15)
    with pytest.raises(SmallnessError):
        duhamel.omega_h(1.0, 1.0, 1.0)
