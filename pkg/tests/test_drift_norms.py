import math

import pytest

from kolmolab.drift_catalog import DriftSpec, sample_drift
from kolmolab.drift_norms import (GenericConstants, TrialFamily, eta_bound, form_bound_estimate,
                                  holomorphy_angle, kato_norm_d, kato_norm_d1, nash_norm_e,
                                  pointwise_norm, smallness_threshold)
from kolmolab.errors import InputError, SmallnessError
from kolmolab.field_core import GridSpec

# 2 c sqrt(h) at c = 0.7, h = 0.5 (mpmath, 30 digits)
NE_CONST = 0.989949493661166534161182106947


def test_constant_drift_closed_forms():
    b = DriftSpec.make("constant", 2, amplitude=0.7)
    assert nash_norm_e(b, 0.5).value == pytest.approx(NE_CONST, abs=1e-12)
    assert kato_norm_d1(b, 0.5).value == pytest.approx(NE_CONST, abs=1e-12)
    assert kato_norm_d(b, 0.5).value == pytest.approx(0.245, abs=1e-12)
    assert pointwise_norm(DriftSpec.make("constant", 3, amplitude=0.7), "nash_e", 0.5, [0.3, 0, 0]) \
        == pytest.approx(NE_CONST, rel=1e-10)


def test_zero_drift_is_zero():
    rep = nash_norm_e(DriftSpec.make("zero", 1), 1.0)
    assert rep.value == 0.0 and rep.finite


def test_grid_backend_matches_analytic():
    g = GridSpec(2, 3.0, 61)
    b = sample_drift(DriftSpec.make("constant", 2, amplitude=0.7), g)
    # the box boundary loses a little heat mass at the sup point
    assert nash_norm_e(b, 0.5, grid=g).value == pytest.approx(NE_CONST, rel=1e-3)


def test_log_refined_verdicts():
    fin = nash_norm_e(DriftSpec.make("log_refined", 3, alpha=1.0), 0.25)
    div = nash_norm_e(DriftSpec.make("log_refined", 3, strict=False, alpha=0.4), 0.25)
    assert fin.verdict == "finite" and div.verdict == "numerically_divergent"


def test_hardy_is_divergent():
    assert not nash_norm_e(DriftSpec.make("hardy", 3, delta=0.5), 0.5).finite


def test_form_bound_hardy_approaches_delta():
    spec = DriftSpec.make("hardy", 3, delta=0.5)
    vals = [form_bound_estimate(spec, trial_set=TrialFamily(exponents=(s,))).delta_hat
            for s in (0.0, 0.2, 0.4, 0.49, 0.499)]
    assert all(a < b for a, b in zip(vals, vals[1:]))
    assert vals[-1] <= 0.5 * (1 + 1e-9) and vals[-1] > 0.99 * 0.5


def test_form_bound_constant_and_zero():
    f = form_bound_estimate(DriftSpec.make("constant", 3, amplitude=0.7))
    assert f.delta_hat < 1e-3 and f.c_hat == pytest.approx(0.49, rel=1e-3)
    z = form_bound_estimate(DriftSpec.make("zero", 3))
    assert z.delta_hat == 0.0 and z.c_hat == 0.0


def _consts(**kw):
    base = dict(d=3, sigma=1.0, xi=1.0, c1=1.0, c2=0.9, c3=1.0, c4=2.0, c5=1.0, c6=2.0, M=1.2)
    base.update(kw)
    return GenericConstants(**base)


def test_generic_constants():
    k = _consts()
    assert k.c0 == 3.5
    assert smallness_threshold(k) == pytest.approx(math.sqrt(2 / 3.5), rel=1e-15)
    with pytest.raises(InputError):
        _consts(c2=1.0)
    with pytest.raises(InputError):
        _consts(c4=0.5)


def test_eta_and_angle():
    k = _consts()
    eb = eta_bound(0.3, 0.5, 1.0, k)
    assert eb.eta_term == pytest.approx(math.sqrt(3.5 / 2) * 0.3, rel=1e-15)
    assert eb.eta == pytest.approx(eb.eta_term / (1 - math.exp(-0.5)), rel=1e-15)
    assert eb.small
    assert holomorphy_angle(0.5, 1.0).tan_theta == pytest.approx(math.sqrt(2), rel=1e-15)
    with pytest.raises(SmallnessError):
        holomorphy_angle(1.0, 1.0)
