import math

import numpy as np
import pytest

from kolmolab.drift_catalog import DriftSpec, MatrixSpec, catalog_listing, sample_drift, sample_matrix
from kolmolab.errors import InputError
from kolmolab.field_core import GridSpec


def test_unknown_kind_and_params():
    with pytest.raises(InputError, match="unknown drift kind"):
        DriftSpec.make("bogus", 2)
    with pytest.raises(InputError, match="unknown parameters"):
        DriftSpec.make("constant", 2, speed=1.0)
    with pytest.raises(InputError, match="requires d >= 3"):
        DriftSpec.make("hardy", 2)


def test_exponent_ranges():
    with pytest.raises(InputError):
        DriftSpec.make("log_refined", 3, alpha=0.4)
    assert DriftSpec.make("log_refined", 3, strict=False, alpha=0.4)["alpha"] == 0.4
    with pytest.raises(InputError):
        DriftSpec.make("lp_power", 2, alpha=1.0)


def test_constant_drift_samples():
    g = GridSpec(2, 1.0, 5)
    b = sample_drift(DriftSpec.make("constant", 2, amplitude=0.7, direction=(0, 2)), g)
    assert np.allclose(b.values[..., 0], 0) and np.allclose(b.values[..., 1], 0.7)


def test_lp_norm_closed_form():
    # |b| = |x|^{-1/2} on the unit ball of R^3: ||b||_4^4 = 4 pi
    spec = DriftSpec.make("lp_power", 3, amplitude=1.0, alpha=0.5, radius=1.0)
    assert spec.lp_norm(4) == pytest.approx((4 * math.pi) ** 0.25, rel=1e-8)


def test_hardy_magnitude():
    spec = DriftSpec.make("hardy", 3, delta=0.5)
    x = np.array([[0.5, 0.0, 0.0], [0.0, 2.0, 0.0]])
    mag = spec.magnitude(x)
    assert np.allclose(mag * np.linalg.norm(x, axis=1), mag[0] * 0.5)


def test_checkerboard_matrix():
    g = GridSpec(2, 3.5555555555555554, 129)
    a = sample_matrix(MatrixSpec.make("checkerboard", 2, sigma=1.0, xi=4.0, cell=0.5), g)
    vals = set(np.round(a.values[..., 0].ravel(), 12))
    assert vals <= {1.0, 4.0}
    with pytest.raises(InputError):
        MatrixSpec.make("checkerboard", 2, sigma=4.0, xi=1.0)


def test_listing_filters():
    kinds = {r["kind"] for r in catalog_listing()}
    assert {"hardy", "log_refined", "kato_slab", "checkerboard"} <= kinds
    low = {r["kind"] for r in catalog_listing(1)}
    assert "hardy" not in low and "constant" in low
