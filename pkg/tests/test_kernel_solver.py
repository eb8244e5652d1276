import numpy as np
import pytest
from scipy import sparse

from kolmolab.drift_catalog import DriftSpec, MatrixSpec, sample_drift, sample_matrix
from kolmolab.errors import InputError, ResolutionError
from kolmolab.field_core import GridSpec, SampledField, kernel_r2
from kolmolab.kernel_solver import (DtPolicy, KernelTable, apply_semigroup, assemble, fundamental_solution,
                                    geometric_ladder, initial_time, kernel_table, l1_error)


def _op(d=1, N=129, L=6.0, c=0.0, matrix="identity"):
    g = GridSpec(d, L, N)
    a = sample_matrix(MatrixSpec.make(matrix, d), g)
    b = sample_drift(DriftSpec.make("constant", d, amplitude=c), g) if c else None
    return g, assemble(a, b)


@pytest.mark.parametrize("c", [0.0, 0.5])
def test_heat_kernel_1d(c):
    g, op = _op(c=c)
    lad = geometric_ladder(4 * g.h ** 2, 0.5, 6)
    tab = fundamental_solution(op, g.center, lad)
    X = g.coords()[..., 0]
    for k, t in enumerate(lad):
        assert l1_error(tab.values[0][k], kernel_r2(1.0, t, (X - c * t) ** 2, 1), g) < 0.02
    assert max(abs(dg.mass + dg.leak - 1) for dg in tab.diagnostics) < 1e-10


def test_operator_is_m_matrix():
    g, op = _op(d=2, N=21, L=2.0, c=3.0)
    L = op.L.tocsr()
    off = L - sparse.diags(L.diagonal())
    assert off.max() <= 1e-14          # nonpositive off-diagonal entries
    assert np.all(L.diagonal() > 0)


def test_ladder_and_start_checks():
    g, op = _op()
    assert initial_time(op, g.center) == pytest.approx(2 * g.h ** 2)
    with pytest.raises(ResolutionError):
        fundamental_solution(op, g.center, [g.h ** 2, 1.0])
    lad = geometric_ladder(0.1, 1.0, 5)
    assert lad[0] == 0.1 and lad[-1] == pytest.approx(1.0) and np.allclose(lad[1:] / lad[:-1], 10 ** 0.25)
    with pytest.raises(InputError):
        DtPolicy(ratio=2.0)


def test_implicit_euler_close_to_cn():
    g, op = _op()
    lad = [0.1, 0.3]
    ie = fundamental_solution(op, g.center, lad, stepper="implicit_euler", policy=DtPolicy(ratio=0.02))
    cn = fundamental_solution(op, g.center, lad)
    assert l1_error(ie.values[0][1], cn.values[0][1], g) < 0.01


def test_table_roundtrip(tmp_path):
    g, op = _op(N=33, L=3.0)
    tab = kernel_table(op, [g.center, (10,)], [0.2, 0.4])
    tab.save(tmp_path / "t.bin")
    back = KernelTable.load(tmp_path / "t.bin")
    assert back.sources == tab.sources and np.array_equal(back.values[1][1], tab.values[1][1])
    assert np.allclose(back.times, tab.times)


def test_semigroup_of_gaussian():
    g, op = _op()
    X2 = g.radius2()
    f = SampledField(g, kernel_r2(1.0, 0.2, X2, 1))
    res = apply_semigroup(op, f, 0.3)
    assert l1_error(res.field.values, kernel_r2(1.0, 0.5, X2, 1), g) < 0.01
    assert res.contraction_ok and res.positivity_ok
