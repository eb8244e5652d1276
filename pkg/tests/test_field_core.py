import math

import numpy as np
import pytest
from scipy import integrate

from kolmolab.errors import InputError
from kolmolab.field_core import (CutoffParams, EllipticityWindow, GridSpec, SampledField, discrete_lp,
                                 heat_convolve, kernel_r2, log_kernel_r2, min_resolved_time, mollify,
                                 truncate)


def test_grid_invariants():
    g = GridSpec(2, 1.5, 7)
    assert g.h == 0.5
    assert np.array_equal(g.axis(), -1.5 + np.arange(7) * 0.5)
    assert g.node(g.center).tolist() == [0.0, 0.0]
    assert g.index_of((0.26, -1.4)) == (4, 0)
    assert g.distance_to_boundary((1, 3)) == 0.5


@pytest.mark.parametrize("kw", [dict(d=4, L=1.0, N=5), dict(d=1, L=1.0, N=4), dict(d=1, L=-1.0, N=5)])
def test_grid_rejects_bad_input(kw):
    with pytest.raises(InputError):
        GridSpec(**kw)


def test_memory_budget():
    with pytest.raises(InputError, match="memory budget"):
        GridSpec(3, 1.0, 101, memory_budget=1e6)


def test_matrix_field_packing(grid2):
    A = np.broadcast_to(np.array([[2.0, 0.5], [0.5, 1.0]]), grid2.shape + (2, 2))
    f = SampledField(grid2, A, "matrix")
    assert f.values.shape == grid2.shape + (3,)
    assert np.allclose(f.full_matrix(), A)
    bad = A.copy()
    bad[0, 0, 0, 1] = 3.0
    with pytest.raises(InputError, match="symmetric"):
        SampledField(grid2, bad, "matrix")


def test_container_roundtrip(grid2):
    f = SampledField(grid2, np.random.default_rng(0).normal(size=grid2.shape + (2,)), "vector")
    g = SampledField.from_bytes(f.to_bytes())
    assert g.grid == f.grid and np.array_equal(g.values, f.values)


def test_ellipticity_window(grid2):
    w = EllipticityWindow(1.0, 2.0)
    eye = SampledField(grid2, np.broadcast_to(1.5 * np.eye(2), grid2.shape + (2, 2)), "matrix")
    assert w.check(eye)
    big = SampledField(grid2, np.broadcast_to(3.0 * np.eye(2), grid2.shape + (2, 2)), "matrix")
    with pytest.raises(InputError, match="violated"):
        w.check(big)


def test_kernel_normalized_and_log_consistent():
    for d in (1, 2, 3):
        area = 2 * math.pi ** (d / 2) / math.gamma(d / 2)
        mass = integrate.quad(lambda r: area * r ** (d - 1) * kernel_r2(1.7, 0.6, r * r, d), 0, np.inf)[0]
        assert abs(mass - 1) < 1e-10
    assert np.allclose(np.log(kernel_r2(2.0, 0.3, 1.0, 2)), log_kernel_r2(2.0, 0.3, 1.0, 2))


def test_heat_convolve_gaussian_semigroup(grid1):
    x2 = grid1.radius2()
    f = SampledField(grid1, kernel_r2(1.0, 0.2, x2, 1))
    out = heat_convolve(f, 0.3)
    assert np.max(np.abs(out.values - kernel_r2(1.0, 0.5, x2, 1))) < 1e-6
    assert min_resolved_time(grid1) == pytest.approx(grid1.h ** 2 / 2)


def test_truncate_and_mollify(grid1):
    f = SampledField(grid1, np.where(np.abs(grid1.axis()) < 1e-12, 100.0, 1.0))
    t = truncate(f, CutoffParams(0.5))
    assert t.values.max() == 1.0 and t.values[0] == 0.0       # |x| = 4 > 2 and |f| = 100 > 2
    m = mollify(SampledField(grid1, np.ones(grid1.shape)), 0.1, tail="constant")
    assert np.allclose(m.values, 1.0)
    with pytest.raises(InputError):
        mollify(f, 0.0)


def test_discrete_lp(grid1):
    v = np.ones(grid1.shape)
    assert discrete_lp(v, grid1, 2) == pytest.approx(math.sqrt(grid1.N * grid1.h))
