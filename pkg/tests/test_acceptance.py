"""Acceptance battery, criteria 1 to 9.

Each test prints one ``criterion N [PASS|FAIL]`` line.  Oracle values are
frozen literals from independent computations (mpmath, 25+ digits), not
read back from the library.
"""
import pytest

from kolmolab import suite

N_D3_DELTA2 = 1.539600717839002038691063            # t N_2 for a = I, d = 3
NE_CONST = 0.989949493661166534161182106947         # 2 c sqrt(h), c = 0.7, h = 0.5

# criterion 9 sets worked out by hand with mpmath at 30 digits
HAND = [
    {"c0": 3.5, "eta": 1.0086241951401949, "threshold": 0.7559289460184545,
     "tan_theta": 1.3995011016827192, "omega_h": 0.7133498878774648},
    {"c0": 13.0, "eta": 0.198791403657007, "threshold": 0.5817744738827396,
     "tan_theta": 1.1474207576542914, "omega_h": 1.3862943611198906},
    {"c0": 2.0, "eta": 0.10005299198079223, "threshold": 0.7905694150420949,
     "tan_theta": 0.09548149934687146, "omega_h": 4.394449154672439},
]


def _report(capsys, res):
    with capsys.disabled():
        print(f"\n{res.line()}")
    return res


def test_criterion_1_gaussian_identities(capsys):
    res = _report(capsys, suite.criterion_1())
    assert res.ok, res.details
    assert set(res.details) == {"gradient_moment", "kernel_comparison", "square_ratio", "split_early", "split_late"}


def test_criterion_2_norm_oracles(capsys):
    res = _report(capsys, suite.criterion_2())
    assert res.ok, res.details
    assert res.details["constant_ne"][0] == pytest.approx(NE_CONST, abs=1e-6)


def test_criterion_3_solver_exactness(capsys):
    res = _report(capsys, suite.criterion_3())
    assert res.ok, res.details


def test_criterion_4_nash_plateau(capsys):
    res = _report(capsys, suite.criterion_4())
    assert res.ok, res.details
    assert res.details["target"] == pytest.approx(N_D3_DELTA2, rel=1e-14)


def test_criterion_5_duhamel(capsys):
    res = _report(capsys, suite.criterion_5())
    assert res.ok, res.details


def test_criterion_6_a_posteriori_bounds(capsys):
    res = _report(capsys, suite.criterion_6())
    assert res.ok, res.details


def test_criterion_7_mollifier_trend(capsys):
    res = _report(capsys, suite.criterion_7())
    assert res.ok, res.details


def test_criterion_8_convergence(capsys):
    res = _report(capsys, suite.criterion_8())
    assert res.ok, res.details


def test_criterion_9_derived_constants(capsys):
    res = _report(capsys, suite.criterion_9(expected=HAND))
    assert res.ok, res.details
    for errs in res.details["relative_errors"]:
        assert max(errs.values()) <= 1e-15
