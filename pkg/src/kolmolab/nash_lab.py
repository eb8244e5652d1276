"""Nash functions of discrete kernels and the Gaussian identities behind their bounds.

Three weighted Dirichlet-type integrals are evaluated on kernel slices:

* ``N_delta(t, y) = <grad p . (a / k_delta) . grad p>`` for the drift-free kernel,
* the two-time version with weight ``a k_lambda(t - tau, x - .) / k_{2 delta}(tau - s, y - .)^2``,
* ``N^u_delta(tau, x)`` for the full kernel, differentiated in its second variable.

Gradients are fourth-order centered differences.  The part of each
integral outside the box, and where the slice is below the floating-point
noise floor, is replaced by a Gaussian estimate that is reported on its own.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, special

from .errors import InputError, ResolutionError
from .field_core import kernel_r2, log_kernel_r2
from .kernel_solver import KernelTable

NOISE_FLOOR = 1e-12     # slice values below this fraction of the max are dropped
GRADIENT_SCHEME = "centered4"


@dataclass
class NashFunctionTrace:
    variant: str
    params: dict
    points: list = field(default_factory=list)
    gradient_scheme: str = GRADIENT_SCHEME

    @property
    def values(self) -> np.ndarray:
        return np.array([p["value"] for p in self.points])

    @property
    def scaled(self) -> np.ndarray:
        """``time * value`` per point (the quantity bounded by a constant)."""
        return np.array([p["scaled"] for p in self.points])

    def empirical_constant(self) -> float:
        return float(np.max(self.scaled))

    def plateau(self) -> float:
        return float(np.median(self.scaled))

    def spread(self) -> float:
        s = self.scaled
        return float((s.max() - s.min()) / np.median(s))

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        keys = ["t", "time_scale", "source", "x", "value", "scaled", "completion"]
        w = csv.writer(buf)
        w.writerow(keys)
        for p in self.points:
            w.writerow([f"{p['t']:.17g}", f"{p['time_scale']:.17g}", json.dumps(p["source"]),
                        json.dumps(p["x"]), f"{p['value']:.17g}", f"{p['scaled']:.17g}",
                        f"{p['completion']:.17g}"])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text

    def summary(self) -> dict:
        return {"variant": self.variant, "params": self.params, "plateau": self.plateau(),
                "empirical_constant": self.empirical_constant(), "spread": self.spread(),
                "max_completion_fraction": max(p["completion"] / p["value"] if p["value"] else 0.0
                                               for p in self.points),
                "n_points": len(self.points), "gradient_scheme": self.gradient_scheme}

    def to_json(self, **kw) -> str:
        return json.dumps(self.summary(), **kw)


def gradient(values: np.ndarray, h: float) -> np.ndarray:
    """Fourth-order centered differences along every axis (second order in the
    two outermost layers); shape ``values.shape + (d,)``."""
    d = values.ndim
    out = np.empty(values.shape + (d,))
    for k in range(d):
        g = np.gradient(values, h, axis=k, edge_order=2)
        v = np.moveaxis(values, k, 0)
        gk = np.moveaxis(g, k, 0)
        if v.shape[0] >= 5:
            gk[2:-2] = (v[:-4] - 8 * v[1:-3] + 8 * v[3:-1] - v[4:]) / (12 * h)
        out[..., k] = np.moveaxis(gk, 0, k)
    return out


def _matrix(a, grid):
    if a is None:
        return None, 1.0
    if isinstance(a, (int, float)):
        return None, float(a)
    A = a.full_matrix()
    flat = A.reshape(-1, grid.d, grid.d)
    if np.allclose(flat, flat[0]) and np.allclose(flat[0], flat[0, 0, 0] * np.eye(grid.d)):
        return None, float(flat[0, 0, 0])
    return A, None


def _quad_form(gp, A, mu):
    if A is None:
        return mu * np.sum(gp * gp, axis=-1)
    return np.einsum("...i,...ij,...j->...", gp, A, gp)


def _sigma_min(a, grid):
    A, mu = _matrix(a, grid)
    if A is None:
        return mu
    return float(np.min(np.linalg.eigvalsh(A.reshape(-1, grid.d, grid.d))))


def _gate(grid, t, sigma):
    width = math.sqrt(2 * sigma * t)
    if width < 3 * grid.h:
        t_min = 9 * grid.h ** 2 / (2 * sigma)
        raise ResolutionError(f"kernel width {width:.4g} at t={t:.4g} is below 3 h; "
                              f"need t >= {t_min:.4g}", t_min=t_min)


def _box_moments(grid, c, var):
    """Per-axis mass and second moment of ``N(c, var)`` restricted to the box,
    measured from c."""
    s = math.sqrt(2 * var)
    m0, m2 = [], []
    for k in range(grid.d):
        lo, hi = (-grid.L - c[k]) / s, (grid.L - c[k]) / s
        mass = 0.5 * (special.erf(hi) - special.erf(lo))
        # int z^2 N(0,var) over [lo s, hi s] = var (mass - (hi e^{-hi^2} - lo e^{-lo^2}) / sqrt(pi))
        sec = var * (mass - (hi * math.exp(-hi * hi) - lo * math.exp(-lo * lo)) / math.sqrt(math.pi))
        m0.append(mass)
        m2.append(sec)
    return np.array(m0), np.array(m2)


def _gaussian_completion(grid, center, var, pref, radius):
    """``pref * int |z|^2 N(0, var)(z) dz`` over the outside of the box plus the
    outside of the ball of given radius (both around ``center``)."""
    d = grid.d
    total = d * var
    m0, m2 = _box_moments(grid, center, var)
    inside = sum(m2[k] * np.prod(np.delete(m0, k)) for k in range(d))
    out_box = max(total - inside, 0.0)
    out_ball = 0.0
    if radius is not None and math.isfinite(radius):
        out_ball = total * special.gammaincc(d / 2 + 1, radius ** 2 / (2 * var))
    return pref * (out_box + out_ball)


def _weighted_integral(p, gp, A, mu, log_w, grid):
    """``sum q exp(log_w) h^d`` with ``q = grad p . a . grad p``, skipping the noise floor.

    Returns the sum and the radius beyond which samples were dropped."""
    q = _quad_form(gp, A, mu)
    keep = p > NOISE_FLOOR * p.max()
    use = keep & (q > 0)
    vals = np.zeros_like(q)
    vals[use] = np.exp(np.log(q[use]) + log_w[use])
    return float(np.sum(vals) * grid.cell_volume), keep


def _drop_radius(grid, center, keep):
    X = grid.coords()
    r = np.sqrt(np.sum((X - center) ** 2, -1))
    if np.all(keep):
        return math.inf
    return float(np.min(r[~keep]))


def nash_N(table: KernelTable, a, delta: float, points=None, upper=None) -> NashFunctionTrace:
    """``N_delta(t, y) = <grad p(t, ., y) . (a / k_delta(t, . - y)) . grad p(t, ., y)>``.

    Parameters
    ----------
    table : KernelTable
        Drift-free kernel (either orientation; the kernel is symmetric).
    a : SampledField or float
        The matrix used to build the table (a float means ``a = mu I``).
    delta : float
        Weight diffusivity, must exceed the upper ellipticity of ``a``.
    points : list of (source index, time index), optional
        Defaults to every slice.
    upper : (c, mu), optional
        Gaussian bound ``p <= c k_mu`` for the completion estimate; defaults
        to ``(1, xi)``.
    """
    g = table.grid
    A, mu = _matrix(a, g)
    xi = mu if A is None else float(np.max(np.linalg.eigvalsh(A.reshape(-1, g.d, g.d))))
    if not delta > xi * (1 - 1e-12):
        raise InputError(f"delta={delta} must exceed the upper ellipticity {xi:.6g}")
    sigma = _sigma_min(a, g)
    cu, mu_u = upper or (1.0, xi)
    if not 2 * delta > mu_u:
        raise InputError("completion needs 2 delta > upper diffusivity")
    pts = points or [(j, k) for j in range(len(table)) for k in range(len(table.times))]
    X = g.coords()
    trace = NashFunctionTrace("elliptic", {"delta": delta, "upper": [cu, mu_u], "sigma": sigma, "xi": xi})
    for j, k in pts:
        t = float(table.times[k])
        _gate(g, t, sigma)
        y = table.source_point(j)
        p = table.values[j][k]
        gp = gradient(p, g.h)
        r2 = np.sum((X - y) ** 2, -1)
        log_w = -log_kernel_r2(delta, t, r2, g.d)
        val, keep = _weighted_integral(p, gp, A, mu, log_w, g)
        # completion: xi cu^2 |z|^2 / (2 mu_u t)^2 k_mu_u^2 / k_delta
        gam = mu_u * delta / (2 * delta - mu_u)
        pref = xi * cu ** 2 / (2 * mu_u * t) ** 2 * (delta ** 2 / ((2 * delta - mu_u) * mu_u)) ** (g.d / 2)
        comp = _gaussian_completion(g, y, 2 * gam * t, pref, _drop_radius(g, y, keep))
        total = val + comp
        trace.points.append({"t": t, "time_scale": t, "source": list(table.sources[j]),
                             "x": [float(c) for c in y], "value": total, "scaled": t * total,
                             "completion": comp})
    return trace


def nash_N_identity(d, mu, delta) -> float:
    """Closed form of ``t N_delta`` for ``a = mu I``: ``(delta gamma/mu^2)^{d/2} d gamma/(2 mu)``
    with ``gamma = mu delta / (2 delta - mu)``."""
    if not 2 * delta > mu:
        raise InputError("closed form needs 2 delta > mu")
    gam = mu * delta / (2 * delta - mu)
    return (delta * gam / mu ** 2) ** (d / 2) * d * gam / (2 * mu)


def _hat_window(delta, lam, eps, c4=None, c6=None):
    if not 0 < eps < 1:
        raise InputError("epsilon must lie in (0, 1)")
    if not 2 * delta < lam:
        raise InputError(f"need 2 delta < lambda, got delta={delta}, lambda={lam}")
    for name, c in (("c4", c4), ("c6", c6)):
        if c is not None and not c < 2 * delta:
            raise InputError(f"need {name} < 2 delta, got {name}={c}")


def nash_N_hat(table: KernelTable, a, delta, lam, eps, points, c4=None, c6=None,
               upper=None) -> NashFunctionTrace:
    """Two-time Nash function
    ``<grad p(tau-s, ., y) . a k_lam(t-tau, x - .) / k_{2 delta}(tau-s, y - .)^2 . grad p>``.

    ``points`` holds ``(source index, time index of tau - s, t - tau, x)``;
    ``x`` may be None for ``x = y``.  The window
    ``(t - s) eps < tau - s < t - s`` is enforced.
    The values are scaled by ``t - tau``.
    """
    _hat_window(delta, lam, eps, c4, c6)
    g = table.grid
    A, mu = _matrix(a, g)
    xi = mu if A is None else float(np.max(np.linalg.eigvalsh(A.reshape(-1, g.d, g.d))))
    sigma = _sigma_min(a, g)
    cu, mu_u = upper or (1.0, xi)
    X = g.coords()
    trace = NashFunctionTrace("hatted", {"delta": delta, "lambda": lam, "epsilon": eps,
                                         "c4": c4, "c6": c6})
    for j, k, t2, x in points:
        t1 = float(table.times[k])
        if not (t1 + t2) * eps < t1 < t1 + t2 or not t2 > 0:
            raise InputError(f"(tau-s, t-tau)=({t1:.4g}, {t2:.4g}) violates the window for eps={eps}")
        _gate(g, t1, sigma)
        y = table.source_point(j)
        x = y if x is None else np.asarray(x, dtype=float)
        p = table.values[j][k]
        gp = gradient(p, g.h)
        log_w = (log_kernel_r2(lam, t2, np.sum((X - x) ** 2, -1), g.d)
                 - 2 * log_kernel_r2(2 * delta, t1, np.sum((X - y) ** 2, -1), g.d))
        val, keep = _weighted_integral(p, gp, A, mu, log_w, g)
        # completion: k_lam <= (4 pi lam t2)^{-d/2}; the rest is Gaussian in z = . - y
        e = 1.0 / (2 * mu_u * t1) - 1.0 / (4 * delta * t1)
        if not e > 0:
            raise InputError("completion needs 2 delta > upper diffusivity")
        var = 1.0 / (2 * e)
        pref = (xi * cu ** 2 / (2 * mu_u * t1) ** 2 * (4 * math.pi * lam * t2) ** (-g.d / 2)
                * (4 * math.pi * mu_u * t1) ** (-g.d) * (8 * math.pi * delta * t1) ** g.d
                * (2 * math.pi * var) ** (g.d / 2))
        comp = _gaussian_completion(g, y, var, pref, _drop_radius(g, y, keep))
        total = val + comp
        trace.points.append({"t": t1, "time_scale": t2, "source": list(table.sources[j]),
                             "x": [float(c) for c in x], "value": total, "scaled": t2 * total,
                             "completion": comp})
    return trace


def nash_N_hat_identity(d, delta, lam, t1, t2) -> float:
    """``N_hat`` for ``a = I`` at ``x = y`` in closed form (``t1 = tau - s``, ``t2 = t - tau``)."""
    A = (1 - 1 / (2 * delta)) / (2 * t1) + 1 / (4 * lam * t2)
    return ((2 * delta) ** d * (4 * math.pi * lam * t2) ** (-d / 2) / (4 * t1 * t1)
            * d / (2 * A) * (math.pi / A) ** (d / 2))


def nash_N_u(table: KernelTable, a, delta, points=None, upper=None) -> NashFunctionTrace:
    """``N^u_delta(tau, x) = <grad u(tau, x, .) . (a / k_delta(tau, x - .)) . grad u(tau, x, .)>``.

    ``table`` must hold adjoint slices ``y -> u(tau, x_j, y)``.  For a
    drift-free table this coincides with :func:`nash_N`.
    """
    if not table.adjoint:
        raise InputError("N^u needs an adjoint table (slices in the second variable)")
    tr = nash_N(table, a, delta, points, upper)
    tr.variant = "perturbed"
    return tr


def nash_N_u_constant_drift(d, delta, c, tau) -> float:
    """``N^u_delta`` for ``a = I`` and constant drift ``c`` (vector) in closed form.

    Here ``u(tau, x, y) = k_1(tau, x - y - c tau)``.
    """
    v = np.asarray(c, dtype=float) * tau
    A = 1 / (2 * tau)
    B = 1 / (4 * delta * tau)
    C = A - B
    v2 = float(v @ v)
    m2 = (B / C) ** 2 * v2
    integral = math.exp(B * v2 + B * B * v2 / C) * (math.pi / C) ** (d / 2) * (d / (2 * C) + m2)
    return integral / (4 * tau ** 2) * (4 * math.pi * tau) ** (-d) * (4 * math.pi * delta * tau) ** (d / 2)


# --- Gaussian identities ----------------------------------------------------------------

def c_minus(d, lam, delta, eps) -> float:
    """``(1 - eps)^{-d/2} (lam / (lam - 2 delta))^{d/4}``."""
    return (1 - eps) ** (-d / 2) * (lam / (lam - 2 * delta)) ** (d / 4)


def r_plus(lam, delta, eps) -> float:
    return (2 * (lam - delta) * eps - lam) / (lam - 2 * delta * eps)


def c_plus(d, lam, delta, eps) -> float:
    """``eps^{-d/2} (lam / (2 delta))^{d/2} r^{-d/2}``."""
    r = r_plus(lam, delta, eps)
    return eps ** (-d / 2) * (lam / (2 * delta)) ** (d / 2) * r ** (-d / 2)


def check_window_minus(lam, delta, eps):
    if not (0 < 2 * delta < lam and 0 < eps < 1):
        raise InputError("early split window needs 0 < 2 delta < lambda and 0 < eps < 1")


def check_window_plus(lam, delta, eps):
    if not (0 < 2 * delta < lam and lam / (2 * (lam - delta)) < eps < 1):
        raise InputError("late split window needs 0 < 2 delta < lambda and lambda/(2(lambda - delta)) < eps < 1")


@dataclass
class IdentityReport:
    name: str
    samples: int
    max_error: float
    violations: int
    tolerance: float

    @property
    def ok(self) -> bool:
        return self.violations == 0


def _lk(mu, t, z):
    return log_kernel_r2(mu, t, np.sum(z * z, -1), z.shape[-1])


def check_gradient_moment(d, lam, T, rtol=1e-8) -> IdentityReport:
    """``<(grad k_lam)^2 / k_lam> = d / (2 lam T)`` by radial quadrature."""
    S = 2 * math.pi ** (d / 2) / math.gamma(d / 2)
    s = math.sqrt(4 * lam * T)

    def f(rho):       # r = s rho
        r = s * rho
        return (S * r ** (d - 1) * s * (r / (2 * lam * T)) ** 2
                * (4 * math.pi * lam * T) ** (-d / 2) * math.exp(-rho * rho))
    val, _ = integrate.quad(f, 0, np.inf, epsabs=0, epsrel=1e-13, limit=200)
    exact = d / (2 * lam * T)
    err = abs(val - exact) / exact
    return IdentityReport("gradient_moment", 1, err, int(err > rtol), rtol)


def _rng(seed):
    return np.random.default_rng(seed)


def check_kernel_comparison(d, n=10_000, seed=0) -> IdentityReport:
    """``k_lam <= (lam1/lam)^{d/2} k_lam1`` for ``lam < lam1`` at random tuples."""
    g = _rng(seed)
    lam = g.uniform(0.1, 5, n)
    lam1 = lam * g.uniform(1.0001, 4, n)
    t = g.uniform(0.01, 2, n)
    z = g.normal(size=(n, d)) * np.sqrt(2 * lam1 * t)[:, None] * g.uniform(0, 3, n)[:, None]
    r2 = np.sum(z * z, -1)
    lhs = log_kernel_r2(lam, t, r2, d)
    rhs = 0.5 * d * np.log(lam1 / lam) + log_kernel_r2(lam1, t, r2, d)
    excess = lhs - rhs
    return IdentityReport("kernel_comparison", n, float(max(excess.max(), 0.0)), int(np.sum(excess > 1e-12)), 1e-12)


def check_square_ratio(d, n=1000, seed=1, rtol=1e-12) -> IdentityReport:
    """``k_c4^2 / k_delta = (delta^2 / ((2 delta - c4) c4))^{d/2} k_{delta c4 / (2 delta - c4)}``."""
    g = _rng(seed)
    c4 = g.uniform(0.5, 4, n)
    delta = c4 * g.uniform(0.6, 3, n)
    t = g.uniform(0.05, 2, n)
    gam = delta * c4 / (2 * delta - c4)
    z = g.normal(size=(n, d)) * np.sqrt(2 * gam * t)[:, None]
    r2 = np.sum(z * z, -1)
    lhs = kernel_r2(c4, t, r2, d) ** 2 / kernel_r2(delta, t, r2, d)
    rhs = (delta ** 2 / ((2 * delta - c4) * c4)) ** (d / 2) * kernel_r2(gam, t, r2, d)
    err = np.abs(lhs - rhs) / rhs
    return IdentityReport("square_ratio", n, float(err.max()), int(np.sum(err > rtol)), rtol)


def _tuples(g, n, d, lo_frac, hi_frac):
    s = g.uniform(-1, 1, n)
    T = g.uniform(0.05, 2, n)
    t = s + T
    frac = g.uniform(lo_frac, hi_frac, n)
    tau = s + frac * T
    x = g.normal(size=(n, d))
    y = g.normal(size=(n, d))
    return s, t, tau, x, y


def check_split_early(d, lam, delta, eps, n=10_000, seed=2) -> IdentityReport:
    """``k_lam(t-tau, x-z)^2 k_delta(tau-s, y-z) <= c_-^2 k_{lam delta/(lam-2 delta)}(tau-s, y-z)
    k_lam(t-s, x-y)^2`` for ``tau - s < (t - s) eps``."""
    check_window_minus(lam, delta, eps)
    g = _rng(seed)
    s, t, tau, x, y = _tuples(g, n, d, 1e-3, eps)
    z = y + g.normal(size=(n, d)) * np.sqrt(2 * lam * (t - s))[:, None] * 1.5
    cm = c_minus(d, lam, delta, eps)
    lhs = 2 * _lk(lam, t - tau, x - z) + _lk(delta, tau - s, y - z)
    rhs = 2 * math.log(cm) + _lk(lam * delta / (lam - 2 * delta), tau - s, y - z) + 2 * _lk(lam, t - s, x - y)
    excess = lhs - rhs
    tol = 1e-12 * np.maximum(1.0, np.abs(rhs))
    return IdentityReport("split_early", n, float(max(excess.max(), 0.0)), int(np.sum(excess > tol)), 1e-12)


def check_split_late(d, lam, delta, eps, n=10_000, seed=3) -> IdentityReport:
    """``k_lam(t-tau, x-z) k_{2 delta}(tau-s, y-z)^2 <= c_+^2 k_{lam/r}(t-tau, x-z) k_lam(t-s, x-y)^2``
    for ``(t - s) eps < tau - s < t - s``."""
    check_window_plus(lam, delta, eps)
    g = _rng(seed)
    s, t, tau, x, y = _tuples(g, n, d, eps, 1 - 1e-3)
    z = x + g.normal(size=(n, d)) * np.sqrt(2 * lam * (t - s))[:, None] * 1.5
    r = r_plus(lam, delta, eps)
    cp = c_plus(d, lam, delta, eps)
    lhs = _lk(lam, t - tau, x - z) + 2 * _lk(2 * delta, tau - s, y - z)
    rhs = 2 * math.log(cp) + _lk(lam / r, t - tau, x - z) + 2 * _lk(lam, t - s, x - y)
    excess = lhs - rhs
    tol = 1e-12 * np.maximum(1.0, np.abs(rhs))
    return IdentityReport("split_late", n, float(max(excess.max(), 0.0)), int(np.sum(excess > tol)), 1e-12)


def aux_identities(d=3, lam=4.0, delta=1.0, eps_minus=0.5, eps_plus=None, moment_tuples=20,
                   n_points=1000, n_tuples=10_000, seed=0) -> list:
    """Run every identity check; returns a list of :class:`IdentityReport`.

    ``eps_plus`` defaults to the midpoint of the late split window.
    """
    if eps_plus is None:
        eps_plus = 0.5 * (lam / (2 * (lam - delta)) + 1)
    g = _rng(seed)
    out = []
    worst = 0.0
    bad = 0
    for _ in range(moment_tuples):
        lam_i = float(g.uniform(0.2, 5))
        T = float(g.uniform(0.05, 3))
        r = check_gradient_moment(d, lam_i, T)
        worst = max(worst, r.max_error)
        bad += r.violations
    out.append(IdentityReport("gradient_moment", moment_tuples, worst, bad, 1e-8))
    out.append(check_kernel_comparison(d, n_tuples, seed + 1))
    out.append(check_square_ratio(d, n_points, seed + 2))
    out.append(check_split_early(d, lam, delta, eps_minus, n_tuples, seed + 3))
    out.append(check_split_late(d, lam, delta, eps_plus, n_tuples, seed + 4))
    return out


# --- constants ---------------------------------------------------------------------------

def c0_predicted(d, c3, c5) -> float:
    """``2 c3 c5 + d/2``."""
    return 2 * c3 * c5 + d / 2


def c0_hat_predicted(d, c3, c4, c5, c6, delta, lam, eps, xi, last_term="stated") -> float:
    """Constant bounding ``(t - tau) N_hat``.

    ``last_term="stated"`` keeps the factor ``4 xi c4 (1-eps) / (delta (2 delta - c4) eps)``;
    ``"halved"`` uses the factor 2 that the intermediate moment bound gives.
    """
    _hat_window(delta, lam, eps, c4, c6)
    f = {"stated": 4.0, "halved": 2.0}[last_term]
    q = (1 - eps) / eps
    return (2 * c3 * c5 * ((2 * delta) ** 2 / (c4 * c6)) ** (d / 2) * q
            + c3 ** 2 * (2 * delta / c4) ** d
            * (xi * d / lam + f * xi * c4 * q / (delta * (2 * delta - c4))))


@dataclass
class ConstantCheck:
    empirical: float
    predicted: float
    tolerance: float

    @property
    def ok(self) -> bool:
        return self.empirical <= self.predicted + self.tolerance


def c0_check(trace: NashFunctionTrace, d, c3, c5, tol=1e-2) -> ConstantCheck:
    """Compare ``max t N_delta`` (computed at ``delta = c4``) with ``2 c3 c5 + d/2``."""
    return ConstantCheck(trace.empirical_constant(), c0_predicted(d, c3, c5), tol)


def hat_scan(table: KernelTable, a, delta, lam, eps, n_ratios=6, offsets=(0.0, 0.5, 1.0, 2.0),
             c4=None, c6=None) -> NashFunctionTrace:
    """``N_hat`` over the window: ``t - tau = rho (tau - s)`` for ``n_ratios`` values of
    ``rho`` up to the window edge ``(1 - eps) / eps``, and ``x = y + o sqrt(2 lam (t - tau)) e_1``.

    ``empirical_constant()`` of the result is the empirical ``c0_hat``.
    """
    _hat_window(delta, lam, eps, c4, c6)
    g = table.grid
    sigma = _sigma_min(a, g)
    edge = (1 - eps) / eps
    rhos = edge * np.linspace(1.0 / n_ratios, 1.0, n_ratios) * (1 - 1e-9)
    pts = []
    for j in range(len(table)):
        y = table.source_point(j)
        for k, t1 in enumerate(table.times):
            if math.sqrt(2 * sigma * t1) < 3 * g.h:
                continue
            for rho in rhos:
                t2 = float(rho * t1)
                for o in offsets:
                    x = y.copy()
                    x[0] += o * math.sqrt(2 * lam * t2)
                    pts.append((j, k, t2, x))
    return nash_N_hat(table, a, delta, lam, eps, pts, c4, c6)
