import numpy as np
import pytest

from kolmolab import nash_lab
from kolmolab.drift_catalog import DriftSpec, MatrixSpec, sample_drift, sample_matrix
from kolmolab.errors import InputError
from kolmolab.field_core import GridSpec
from kolmolab.kernel_solver import assemble, fundamental_solution, geometric_ladder

# Closed forms checked against mpmath quadrature of the defining integrals (25 digits)
N_D3_DELTA2 = 1.539600717839002038691063
N_D1_DELTA15 = 0.397747564417432982475475
N_D2_DELTA2 = 0.8888888888888888888888889
NU_D1 = 0.8378457476828769257243114      # delta 1.5, c 0.5, tau 0.5
NHAT_D1 = 0.4272815191639856027988058    # delta 1.5, lam 4, t1 1, t2 0.5


@pytest.fixture(scope="module")
def table1():
    g = GridSpec(1, 8.0, 513)
    a = sample_matrix(MatrixSpec.make("identity", 1), g)
    lad = geometric_ladder(4.5 * g.h ** 2, 1.0, 6)
    return a, fundamental_solution(assemble(a, None), g.center, lad)


def test_closed_forms():
    assert nash_lab.nash_N_identity(3, 1.0, 2.0) == pytest.approx(N_D3_DELTA2, rel=1e-14)
    assert nash_lab.nash_N_identity(1, 1.0, 1.5) == pytest.approx(N_D1_DELTA15, rel=1e-14)
    assert nash_lab.nash_N_identity(2, 1.0, 2.0) == pytest.approx(N_D2_DELTA2, rel=1e-14)
    assert nash_lab.nash_N_u_constant_drift(1, 1.5, [0.5], 0.5) == pytest.approx(NU_D1, rel=1e-14)
    assert nash_lab.nash_N_hat_identity(1, 1.5, 4.0, 1.0, 0.5) == pytest.approx(NHAT_D1, rel=1e-14)
    with pytest.raises(InputError):
        nash_lab.nash_N_identity(1, 1.0, 0.4)


def test_gradient_fourth_order_exact():
    x = np.linspace(-1, 1, 41)
    h = x[1] - x[0]
    g = nash_lab.gradient(x ** 4 - 2 * x ** 3, h)[:, 0]
    assert np.allclose(g[2:-2], (4 * x ** 3 - 6 * x ** 2)[2:-2], atol=1e-12)
    q = nash_lab.gradient(x ** 2, h)[:, 0]
    assert np.allclose(q, 2 * x, atol=1e-12)


def test_nash_plateau_1d(table1):
    # every slice, including those where the peak node has an exactly zero gradient
    a, tab = table1
    tr = nash_lab.nash_N(tab, a, 1.5)
    assert np.max(np.abs(tr.scaled / N_D1_DELTA15 - 1)) < 0.01
    assert max(p["completion"] for p in tr.points) < 1e-6


def test_nash_u_needs_adjoint(table1):
    a, tab = table1
    with pytest.raises(InputError, match="adjoint"):
        nash_lab.nash_N_u(tab, a, 1.5)


def test_nash_u_constant_drift():
    g = GridSpec(1, 8.0, 513)
    a = sample_matrix(MatrixSpec.make("identity", 1), g)
    b = sample_drift(DriftSpec.make("constant", 1, amplitude=0.5), g)
    tab = fundamental_solution(assemble(a, b), g.center, [0.25, 0.5], adjoint=True)
    tr = nash_lab.nash_N_u(tab, a, 1.5)
    for p in tr.points:
        ref = nash_lab.nash_N_u_constant_drift(1, 1.5, [0.5], p["t"])
        assert p["value"] == pytest.approx(ref, rel=0.01)


def test_hat_on_diagonal(table1):
    a, tab = table1
    k = 4
    t1 = float(tab.times[k])
    t2 = 0.1 * t1
    tr = nash_lab.nash_N_hat(tab, a, 1.5, 4.0, 0.9, [(0, k, t2, None)])
    ref = nash_lab.nash_N_hat_identity(1, 1.5, 4.0, t1, t2) * t2
    assert tr.points[0]["scaled"] == pytest.approx(ref, rel=0.01)


def test_hat_window(table1):
    a, tab = table1
    with pytest.raises(InputError):
        nash_lab.nash_N_hat(tab, a, 2.5, 4.0, 0.5, [(0, 4, 0.01, None)])
    with pytest.raises(InputError):
        nash_lab.nash_N_hat(tab, a, 1.5, 4.0, 1.5, [(0, 4, 0.01, None)])


def test_identities_pass():
    reps = nash_lab.aux_identities(d=1, lam=4.0, delta=1.0, n_points=200, n_tuples=2000)
    assert all(r.ok for r in reps), [(r.name, r.max_error) for r in reps]


def test_c0_predicted():
    assert nash_lab.c0_predicted(3, 1.0, 1.0) == 3.5
