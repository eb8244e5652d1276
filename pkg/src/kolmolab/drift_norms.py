"""Drift-class functionals and the constants derived from them.

Each functional has the form ``sup_x int_0^T w(t) G(e^{t Delta}|b|^p(x)) dt``.
Two backends evaluate it:

``analytic``
    For a :class:`~kolmolab.drift_catalog.DriftSpec` the sup sits at the
    origin and the heat flow there is a closed form or a 1-D integral.  The
    t-integral runs in ``v = log(h/t)`` over geometric panels, pushed to
    deeper ``v`` (and deeper inner cut-offs for non-integrable profiles)
    level by level until the value settles or keeps growing.
``grid``
    For a :class:`~kolmolab.field_core.SampledField` the heat flow comes from
    :func:`~kolmolab.field_core.heat_convolve`.  Below the resolution time
    the sampled cell value is used, and the sup is the grid max plus a
    continuity margin.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy import integrate, special

from .drift_catalog import DriftSpec, MatrixSpec, sample_drift
from .errors import InputError, ResolutionError, SmallnessError
from .field_core import (CutoffParams, GridSpec, SampledField, discrete_lp, heat_convolve,
                         min_resolved_time, mollify)

FUNCTIONALS = ("nash_e", "kato_d1", "kato_d", "nash_phi", "nash_frac_alpha")


@dataclass(frozen=True)
class QuadraturePlan:
    """Knobs for the t-quadrature.

    nodes
        Gauss-Legendre nodes per log panel; the error estimate compares
        against half as many.
    rtol
        Relative change between refinement levels that counts as converged.
    v0, u0
        Initial depth in ``log(h/t)`` and initial inner cut-off ``log(1/r)``;
        level k uses ``v0 * 4**k`` and ``u0 * 1000**k``.
    growth_factor, growth_count, cap
        Divergence rule: ``growth_count`` consecutive level-to-level growths
        by more than ``growth_factor``, or a value above ``cap``.
    """

    nodes: int = 16
    rtol: float = 1e-6
    max_levels: int = 6
    v0: float = 8.0
    u0: float = 10.0
    growth_factor: float = 1.5
    growth_count: int = 3
    cap: float = 1e12
    grid_panel: float = 1.0

    def __post_init__(self):
        if self.nodes < 2 or self.max_levels < 1:
            raise InputError("quadrature plan needs nodes >= 2 and max_levels >= 1")
        if not (self.rtol > 0 and self.growth_factor > 1 and self.growth_count >= 1):
            raise InputError("invalid convergence or divergence settings")


DEFAULT_PLAN = QuadraturePlan()


@dataclass
class NormReport:
    functional: str
    value: float
    quadrature_error: float
    verdict: str
    parameters: dict = field(default_factory=dict)
    ladder: list = field(default_factory=list)
    backend: str = "analytic"
    converged: bool = True
    sup_margin: float = 0.0
    argmax: Optional[list] = None
    switch_time: Optional[float] = None

    @property
    def finite(self) -> bool:
        return self.verdict == "finite"

    def to_dict(self):
        return asdict(self)

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), default=_json_default, **kw)

    CSV_FIELDS = ("functional", "value", "quadrature_error", "verdict", "backend",
                  "converged", "sup_margin", "parameters")

    def csv_row(self) -> dict:
        row = {k: getattr(self, k) for k in self.CSV_FIELDS}
        row["value"] = f"{self.value:.17g}"
        row["quadrature_error"] = f"{self.quadrature_error:.17g}"
        row["sup_margin"] = f"{self.sup_margin:.17g}"
        row["parameters"] = json.dumps(self.parameters, default=_json_default, sort_keys=True)
        return row


def reports_to_csv(reports: Sequence[NormReport], path=None) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=NormReport.CSV_FIELDS)
    w.writeheader()
    for r in reports:
        w.writerow(r.csv_row())
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, float) and not math.isfinite(o):
        return repr(o)
    raise TypeError(f"not serializable: {type(o)}")


# --- weights -------------------------------------------------------------------

@dataclass(frozen=True)
class PhiWeight:
    """Weight ``phi(t) = t^theta |log t|^-beta`` (``beta = 0`` gives a pure power)."""

    theta: float
    beta: float = 0.0

    def __post_init__(self):
        if not 0 < self.theta <= 1:
            raise InputError(f"phi exponent theta must lie in (0, 1], got {self.theta}")
        if self.beta < 0:
            raise InputError("phi log exponent beta must be >= 0")

    @property
    def ident(self) -> str:
        return f"t^{self.theta:g}" + (f"|log t|^-{self.beta:g}" if self.beta else "")

    def log_value_log(self, lt):
        """``log phi`` as a function of ``log t``."""
        lt = np.asarray(lt, dtype=float)
        out = self.theta * lt
        if self.beta:
            out = out - self.beta * np.log(np.abs(lt))
        return out

    def check(self, h):
        if self.beta and h >= 1:
            raise InputError("phi with a log factor needs h < 1")
        val = phi_integral(self, h)
        if not math.isfinite(val):
            raise InputError(f"phi(t)/t is not integrable on (0, {h}]")


def phi_integral(phi: PhiWeight, h: float) -> float:
    """``int_0^h phi(t)/t dt``."""
    if not phi.beta:
        return h ** phi.theta / phi.theta
    # u = log(1/t)
    u_h = -math.log(h)
    val, _ = integrate.quad(lambda u: math.exp(-phi.theta * u) * u ** (-phi.beta),
                            u_h, np.inf, epsabs=0, epsrel=1e-12, limit=400)
    return val


def _setup(functional, h=None, phi=None, alpha=None, mu=None):
    """Returns (power, use_sqrt, log weight as a function of log t, T, params)."""
    if functional == "nash_e":
        return 2, True, lambda lt: -0.5 * lt, h, {"h": h}
    if functional == "kato_d1":
        return 1, False, lambda lt: -0.5 * lt, h, {"h": h}
    if functional == "kato_d":
        return 2, False, lambda lt: np.zeros_like(lt), h, {"h": h}
    if functional == "nash_phi":
        phi.check(h)
        return 2, False, lambda lt: -phi.log_value_log(lt), h, {"h": h, "phi": phi.ident}
    if functional == "nash_frac_alpha":
        if not 1 < alpha < 2:
            raise InputError(f"fractional order alpha must lie in (1, 2), got {alpha}")
        if not mu > 0:
            raise InputError("fractional norm rate mu must be positive")
        T = math.log(1e16) / mu
        g = (3 - alpha) / 2
        return 2, True, lambda lt: -mu * np.exp(lt) - g * lt, T, {"alpha": alpha, "mu": mu, "T": T}
    raise InputError(f"unknown functional {functional!r}")


def _check_h(h):
    if not (h is not None and h > 0 and math.isfinite(h)):
        raise InputError(f"h must be positive and finite, got {h}")


# --- analytic backend -------------------------------------------------------------

def _inner_convergent(spec: DriftSpec, power: int) -> bool:
    if spec.family == "flat":
        return True
    A, q, beta, R = spec._profile()
    d_eff = spec.d if spec.family == "radial" else 1
    k = d_eff - power * q
    return k > 0 or (k == 0 and power * beta > 1)


def _panels(V, first=1.0):
    edges = [0.0]
    w = first
    while edges[-1] < V:
        edges.append(min(V, edges[-1] + w))
        if edges[-1] >= first:
            w = edges[-1]
    return edges


class _PanelSum:
    """Panel-wise GL sums of ``exp(log integrand(v))``, cached per panel."""

    def __init__(self, log_g, n):
        self.log_g = log_g
        self.n = n
        self.x, self.w = np.polynomial.legendre.leggauss(n)
        self.x2, self.w2 = np.polynomial.legendre.leggauss(max(2, n // 2))
        self.cache = {}

    def panel(self, a, b):
        key = (a, b)
        if key not in self.cache:
            mid, half = (a + b) / 2, (b - a) / 2
            lv = self.log_g(mid + half * self.x)
            fine = half * float(np.sum(self.w * np.exp(lv)))
            lv2 = self.log_g(mid + half * self.x2)
            coarse = half * float(np.sum(self.w2 * np.exp(lv2)))
            self.cache[key] = (fine, abs(fine - coarse))
        return self.cache[key]

    def value(self, V):
        tot = err = 0.0
        for a, b in zip(_panels(V)[:-1], _panels(V)[1:]):
            f, e = self.panel(a, b)
            tot += f
            err += e
        return tot, err


def _analytic(spec: DriftSpec, functional, plan: QuadraturePlan, **kw):
    power, use_sqrt, log_w, T, params = _setup(functional, **kw)
    params = dict(params, kind=spec.kind, d=spec.d)
    if spec.kind == "zero" or (spec.family != "flat" and spec._profile()[0] == 0) or \
            (spec.kind == "constant" and spec.params["amplitude"] == 0):
        return NormReport(functional, 0.0, 0.0, "finite", params, [[0, 0.0]], "analytic")
    convergent = _inner_convergent(spec, power)
    history = []
    streak = 0
    stable = None
    conv = False
    sums = {}
    for k in range(plan.max_levels):
        V = plan.v0 * 4 ** k
        level = None if convergent else plan.u0 * 1000 ** k
        if level in sums:
            ps = sums[level]
        else:
            def log_g(v, level=level):
                lt = math.log(T) - v
                lf = spec.log_heat_origin(power, lt, level)
                if use_sqrt:
                    lf = 0.5 * lf
                return lf + log_w(lt) + lt   # dt = t dv
            ps = sums[level] = _PanelSum(log_g, plan.nodes)
        val, qerr = ps.value(V)
        if not math.isfinite(val):
            history.append([k, math.inf, math.inf])
            return NormReport(functional, stable or 0.0, math.inf, "numerically_divergent",
                              params, history, "analytic", False)
        # tail beyond V from the local decay of the integrand
        g_end = math.exp(ps.log_g(np.array([V]))[0])
        g_mid = math.exp(ps.log_g(np.array([V / 2]))[0])
        tail = _tail_bound(g_mid, g_end, V)
        history.append([k, val, qerr + tail])
        prev = history[-2][1] if len(history) > 1 else None
        if prev is not None and prev > 0 and val > plan.growth_factor * prev:
            streak += 1
        else:
            streak = 0
            stable = val
        if stable is None:
            stable = val
        if streak >= plan.growth_count or val > plan.cap:
            return NormReport(functional, stable, abs(val - stable), "numerically_divergent",
                              params, history, "analytic", False)
        if prev is not None and abs(val - prev) <= plan.rtol * abs(val) and tail <= plan.rtol * abs(val):
            conv = True
            break
    val, err = history[-1][1], history[-1][2]
    if len(history) > 1:
        err = max(err, abs(history[-1][1] - history[-2][1]))
    if functional == "nash_frac_alpha":
        # beyond T the weight is below 1e-16; the heat flow is nonincreasing in t
        lf = spec.log_heat_origin(power, math.log(T), None)[0]
        tr = math.exp(0.5 * lf + log_w(np.array([math.log(T)]))[0]) / kw["mu"]
        err += tr
        params["truncation_error"] = tr
    return NormReport(functional, val, err, "finite", params, history, "analytic", conv)


def _tail_bound(g_mid, g_end, V):
    """Bound for ``int_V^inf g`` assuming power-law decay between V/2 and V."""
    if g_end <= 0:
        return 0.0
    if g_mid <= g_end:
        return math.inf
    p = math.log(g_mid / g_end) / math.log(2.0)
    if p <= 1:
        return math.inf
    return g_end * V / (p - 1)


# --- grid backend ----------------------------------------------------------------

def _grid_powers(b, grid=None):
    """Sampled ``|b|`` and ``|b|^2`` arrays from a field or a catalog spec."""
    if isinstance(b, DriftSpec):
        if grid is None:
            raise InputError("grid backend for a DriftSpec needs a grid")
        return (sample_drift(b, grid, "abs").values, sample_drift(b, grid, "sq").values, grid)
    if not isinstance(b, SampledField):
        raise InputError("drift must be a DriftSpec or a SampledField")
    if b.rank == "vector":
        sq = b.magnitude_sq()
        return np.sqrt(sq), sq, b.grid
    if b.rank == "scalar":
        v = np.abs(b.values)
        return v, v * v, b.grid
    raise InputError("a matrix field is not a drift")


def _grid(b, functional, plan: QuadraturePlan, grid=None, sq=None, **kw):
    power, use_sqrt, log_w, T, params = _setup(functional, **kw)
    absb, sqb, g = _grid_powers(b, grid)
    if sq is not None:
        sqb = np.asarray(sq.values if isinstance(sq, SampledField) else sq, dtype=float)
    base = sqb if power == 2 else absb
    f = SampledField(g, base)
    t_min = min_resolved_time(g)
    params = dict(params, N=g.N, L=g.L, d=g.d)
    G = np.sqrt if use_sqrt else (lambda z: z)

    # [0, t_min]: the heat flow is replaced by the sampled cell value
    if t_min >= T:
        t_min = T
    w0, _ = integrate.quad(lambda t: math.exp(log_w(np.array([math.log(t)]))[0]) if t > 0 else 0.0, 0, t_min,
                           epsabs=0, epsrel=1e-12, limit=200)
    near = G(base) * w0

    V = math.log(T / t_min)

    def integrate_panels(n):
        x, w = np.polynomial.legendre.leggauss(n)
        tot = np.zeros(g.shape)
        edges = np.linspace(0.0, V, max(1, int(math.ceil(V / plan.grid_panel))) + 1)
        for a, c in zip(edges[:-1], edges[1:]):
            half, mid = (c - a) / 2, (c + a) / 2
            for xi, wi in zip(x, w):
                v = mid + half * xi
                t = T * math.exp(-v)
                F = heat_convolve(f, max(t, t_min)).values
                tot += half * wi * G(F) * math.exp(log_w(np.array([math.log(t)]))[0]) * t
        return tot
    if V > 0:
        far = integrate_panels(plan.nodes)
        coarse = integrate_panels(max(2, plan.nodes // 2))
    else:
        far = coarse = np.zeros(g.shape)
    vals = near + far
    idx = np.unravel_index(int(np.argmax(vals)), vals.shape)
    value = float(vals[idx])
    qerr = float(np.max(np.abs(far - coarse)))
    margin = 0.0
    for ax in range(g.d):
        for s in (-1, 1):
            j = list(idx)
            j[ax] += s
            if 0 <= j[ax] < g.N:
                margin = max(margin, abs(value - float(vals[tuple(j)])))
    verdict = "finite" if value <= plan.cap and math.isfinite(value) else "numerically_divergent"
    return NormReport(functional, value, qerr, verdict, params, [[0, value, qerr]], "grid", True,
                      margin, [float(c) for c in g.node(idx)], t_min)


def _dispatch(b, functional, h, plan, backend, grid, **kw):
    plan = plan or DEFAULT_PLAN
    if backend == "auto":
        backend = "analytic" if isinstance(b, DriftSpec) else "grid"
    if backend == "analytic":
        if not isinstance(b, DriftSpec):
            raise InputError("analytic backend needs a DriftSpec")
        return _analytic(b, functional, plan, h=h, **kw)
    return _grid(b, functional, plan, grid=grid, h=h, **kw)


def nash_norm_e(b, h, quad: QuadraturePlan = None, backend="auto", grid=None, sq=None):
    """Elliptic Nash norm ``sup_x int_0^h sqrt(e^{t Delta}|b|^2(x)) dt / sqrt(t)``.

    Parameters
    ----------
    b : DriftSpec or SampledField
        Catalog drift (analytic backend) or a sampled vector field.
    h : float
    quad : QuadraturePlan, optional
    backend : {"auto", "analytic", "grid"}
    grid : GridSpec, optional
        Grid used to sample a DriftSpec when ``backend="grid"``.
    sq : SampledField, optional
        Cell averages of ``|b|^2`` to use instead of ``|b|^2`` of the samples.

    Returns
    -------
    NormReport
    """
    _check_h(h)
    kw = {"sq": sq} if sq is not None else {}
    return _dispatch(b, "nash_e", h, quad, backend, grid, **kw)


def kato_norm_d1(b, h, quad=None, backend="auto", grid=None):
    """``sup_x int_0^h e^{t Delta}|b|(x) dt / sqrt(t)``."""
    _check_h(h)
    return _dispatch(b, "kato_d1", h, quad, backend, grid)


def kato_norm_d(b, h, quad=None, backend="auto", grid=None, sq=None):
    """``sup_x int_0^h e^{t Delta}|b|^2(x) dt``."""
    _check_h(h)
    kw = {"sq": sq} if sq is not None else {}
    return _dispatch(b, "kato_d", h, quad, backend, grid, **kw)


def nash_norm_phi(b, h, phi: PhiWeight, quad=None, backend="auto", grid=None, sq=None):
    """``sup_x int_0^h e^{t Delta}|b|^2(x) dt / phi(t)``."""
    _check_h(h)
    if not isinstance(phi, PhiWeight):
        raise InputError("phi must be a PhiWeight")
    kw = {"sq": sq} if sq is not None else {}
    return _dispatch(b, "nash_phi", h, quad, backend, grid, phi=phi, **kw)


def fractional_nash_norm(b, alpha, mu, quad=None, backend="auto", grid=None, sq=None):
    """``sup_y int_0^inf e^{-mu t} sqrt(e^{t Delta}|b|^2(y)) t^{-(3-alpha)/2} dt``.

    The t-range is cut where ``e^{-mu t}`` drops below 1e-16; the discarded
    part is bounded and added to the error.
    """
    kw = {"sq": sq} if sq is not None else {}
    return _dispatch(b, "nash_frac_alpha", None, quad, backend, grid, alpha=alpha, mu=mu, **kw)


def example_lp_bound(spec: DriftSpec, p: float, h: float) -> float:
    """Right-hand side ``C^{1/2} (2p/(p-d)) h^{(p-d)/(2p)} ||b||_p`` for ``p > d``.

    ``C`` is the sharp Young constant for ``||k(t) * f||_inf`` with
    ``f = |b|^2`` in ``L^{p/2}``.
    """
    d = spec.d
    if not p > d:
        raise InputError("the L^p bound needs p > d")
    r = p / 2
    rp = p / (p - 2)
    C = (4 * math.pi) ** (-d / (2 * r)) * rp ** (-d / (2 * rp))
    return math.sqrt(C) * (2 * p / (p - d)) * h ** ((p - d) / (2 * p)) * spec.lp_norm(p)


# --- derived constants --------------------------------------------------------------

@dataclass(frozen=True)
class GenericConstants:
    """Bound constants for a window ``(sigma, xi)`` in dimension d.

    ``c0 = 2 c3 c5 + d/2`` is derived and stored on construction.
    """

    d: int
    sigma: float
    xi: float
    c1: float
    c2: float
    c3: float
    c4: float
    c5: float
    c6: float
    M: float = 1.0
    mu0: float = 1.0
    lambda0: float = 1.0
    c0: float = field(init=False)

    def __post_init__(self):
        if not 0 < self.sigma <= self.xi:
            raise InputError("need 0 < sigma <= xi")
        if not 0 < self.c2 < self.sigma:
            raise InputError(f"need 0 < c2 < sigma, got c2={self.c2}")
        if not self.c4 > self.xi:
            raise InputError(f"need c4 > xi, got c4={self.c4}")
        if not self.c6 > self.xi:
            raise InputError(f"need c6 > xi, got c6={self.c6}")
        for k in ("c1", "c3", "c5", "M"):
            if not getattr(self, k) > 0:
                raise InputError(f"{k} must be positive")
        object.__setattr__(self, "c0", 2 * self.c3 * self.c5 + self.d / 2)

    def to_dict(self):
        return asdict(self)


def smallness_threshold(consts: GenericConstants) -> float:
    """``sqrt(sigma c4 / c0)``."""
    return math.sqrt(consts.sigma * consts.c4 / consts.c0)


@dataclass(frozen=True)
class EtaBound:
    eta: float
    eta_term: float
    threshold: float
    small: bool


def eta_bound(nash_value, h, mu, consts: GenericConstants) -> EtaBound:
    """``eta = sqrt(c0/(sigma c4)) n_e / (1 - e^{-mu h})``.

    ``nash_value`` is ``n_e(b, h c4)``.  The returned ``small`` flag tests
    ``n_e(b, h c4) < sqrt(sigma c4 / c0)``.
    """
    if not (mu > 0 and h > 0):
        raise InputError("eta bound needs mu > 0 and h > 0")
    if nash_value < 0:
        raise InputError("Nash value must be nonnegative")
    term = math.sqrt(consts.c0 / (consts.sigma * consts.c4)) * nash_value
    eta = term / (-math.expm1(-mu * h))
    thr = smallness_threshold(consts)
    return EtaBound(eta, term, thr, nash_value < thr)


@dataclass(frozen=True)
class HolomorphyAngle:
    tan_theta: float
    theta: float
    half_angle: float


def holomorphy_angle(eta_term, M) -> HolomorphyAngle:
    """``tan theta = sqrt(2) (M / (1 - eta_term) - 1)``.

    ``eta_term`` is ``sqrt(c0/(sigma c4)) n_e(b, h c4)``; the sector
    half-angle is ``pi/2 - theta``.
    """
    den = 1.0 - eta_term
    if not den > 0:
        raise SmallnessError(f"smallness violated: 1 - eta_term = {den:.6g} <= 0")
    tt = math.sqrt(2.0) * (M / den - 1.0)
    th = math.atan(tt)
    return HolomorphyAngle(tt, th, math.pi / 2 - th)


# --- form bound ------------------------------------------------------------------------

@dataclass(frozen=True)
class TrialFamily:
    """Trials ``f(x) = |x - x0|^-s exp(-|x - x0|^2 / (2 w^2))``."""

    widths: tuple = tuple(float(w) for w in np.geomspace(0.02, 2.0, 9))
    exponents: tuple = (0.0,)
    centers: tuple = ((),)

    def __post_init__(self):
        if not self.widths or min(self.widths) <= 0:
            raise InputError("trial widths must be positive and nonempty")
        if not self.exponents:
            raise InputError("trial exponents must be nonempty")


@dataclass
class FormBound:
    delta_hat: float
    c_hat: float
    ratios: list

    def to_dict(self):
        return asdict(self)


def _scalar_diffusivity(a):
    if a is None:
        return 1.0
    if isinstance(a, (int, float)):
        return float(a)
    if isinstance(a, MatrixSpec) and a.kind in ("identity", "scaled_identity"):
        return a.params.get("mu", 1.0)
    return None


def _radial_forms(spec: DriftSpec, mu, w, s):
    """(<b_a^2 f^2>, <a grad f . grad f>, <f^2>) for a centered radial trial."""
    d = spec.d
    S = 2 * math.pi ** (d / 2) / math.gamma(d / 2)
    A = 0.5 * w ** (d - 2 * s)    # int r^{d-1-2s+2k} e^{-r^2/w^2} dr = A w^{2k} Gamma(...)
    n2 = S * A * math.gamma(d / 2 - s)
    grad = S * A / w ** 2 * (s * s * math.gamma(d / 2 - s - 1) * (1 if d / 2 - s - 1 > 0 else math.nan)
                             + 2 * s * math.gamma(d / 2 - s) + math.gamma(d / 2 - s + 1)) \
        if s > 0 else S * A / w ** 2 * math.gamma(d / 2 + 1)
    grad *= mu
    if spec.family == "flat":
        qb = spec.params.get("amplitude", 0.0) ** 2 * n2
    else:
        Am, q, beta, R = spec._profile()

        def f(r):
            prof = r ** (-2 * q) * (abs(math.log(r)) ** (-2 * beta) if beta else 1.0)
            return prof * r ** (d - 1 - 2 * s) * math.exp(-r * r / w ** 2)
        top = min(R, 40 * w)
        val = 0.0
        lo = 0.0
        for hi in sorted({min(top, w), top}):
            v, _ = integrate.quad(f, lo, hi, epsabs=0, epsrel=1e-10, limit=400)
            val += v
            lo = hi
        qb = Am ** 2 * S * val
    return qb / mu, grad, n2


def form_bound_estimate(b, a=None, trial_set: TrialFamily = None, grid: GridSpec = None) -> FormBound:
    """Lower estimate of the form-bound pair over a family of trial functions.

    ``delta_hat`` is the largest ratio ``<b_a^2 f^2> / <a grad f . grad f>``
    over the narrowest trials, and ``c_hat`` the smallest constant making
    ``<b_a^2 f^2> <= delta_hat <a grad f . grad f> + c_hat <f^2>`` hold on
    every trial.  Both are lower estimates of the true constants.

    Centered trials against a radial or constant catalog drift with a
    scalar matrix are evaluated by 1-D quadrature; everything else uses grid
    sums and supports Gaussian trials only.
    """
    trials = trial_set or TrialFamily()
    rows = []
    mu = _scalar_diffusivity(a)
    analytic = isinstance(b, DriftSpec) and b.family in ("radial", "flat") and mu is not None
    for w in trials.widths:
        for s in trials.exponents:
            for c in trials.centers:
                if analytic and len(c) == 0:
                    if s >= b.d / 2 - 1 and s > 0:
                        raise InputError("trial exponent too large for a finite Dirichlet form")
                    qb, qa, n2 = _radial_forms(b, mu, w, s)
                else:
                    if s != 0:
                        raise InputError("singular trials need the radial analytic path")
                    qb, qa, n2 = _grid_forms(b, a, w, c, grid)
                rows.append({"width": w, "exponent": s, "center": list(c), "qb": qb, "qa": qa, "n2": n2})
    if not rows:
        raise InputError("empty trial set")
    qa = np.array([r["qa"] for r in rows])
    if not np.all(qa > 0):
        raise InputError("degenerate trial set: zero Dirichlet form")
    qb = np.array([r["qb"] for r in rows])
    n2 = np.array([r["n2"] for r in rows])
    wmin = min(trials.widths)
    narrow = np.array([r["width"] == wmin for r in rows])
    delta_hat = float(np.max(qb[narrow] / qa[narrow]))
    c_hat = float(max(0.0, np.max((qb - delta_hat * qa) / n2)))
    return FormBound(delta_hat, c_hat, rows)


def _grid_forms(b, a, w, center, grid):
    if isinstance(b, DriftSpec):
        if grid is None:
            raise InputError("grid needed to sample the drift")
        sq = sample_drift(b, grid, "sq").values
        g = grid
        bvec = None
    else:
        g = b.grid
        bvec = b.full_matrix() if b.rank == "matrix" else b.values
        sq = None
    X = g.coords()
    x0 = np.zeros(g.d) if len(center) == 0 else np.asarray(center, dtype=float)
    z = X - x0
    r2 = np.sum(z * z, -1)
    f = np.exp(-r2 / (2 * w * w))
    gradf = -z / (w * w) * f[..., None]
    if a is None or isinstance(a, (int, float)):
        A = (1.0 if a is None else float(a)) * np.eye(g.d)
        amat = np.broadcast_to(A, g.shape + (g.d, g.d))
    elif isinstance(a, MatrixSpec):
        amat = a.full(X)
    else:
        amat = a.full_matrix()
    if sq is not None:
        mu = _scalar_diffusivity(a)
        if mu is None:
            ainv = np.linalg.inv(amat)
            lam = 1.0 / np.linalg.eigvalsh(amat)[..., 0]
            ba2 = sq * lam        # |b|^2 / sigma_min(x) as the direction is not sampled
        else:
            ba2 = sq / mu
    else:
        ainv = np.linalg.inv(amat)
        ba2 = np.einsum("...i,...ij,...j->...", bvec, ainv, bvec)
    dv = g.cell_volume
    qb = float(np.sum(ba2 * f * f) * dv)
    qa = float(np.sum(np.einsum("...i,...ij,...j->...", gradf, amat, gradf)) * dv)
    n2 = float(np.sum(f * f) * dv)
    return qb, qa, n2


def inclusion_check(spec: DriftSpec, h: float, beta: float, c_beta: float, nodes: int = 64):
    """Pointwise check ``F <= sqrt(beta d/8 + c(beta) h) sqrt(F) / sqrt(t)`` along
    Gauss-Legendre nodes in ``(0, h]``, with ``F = e^{t Delta}|b|^2`` at the origin.

    Returns a dict with the nodes, both sides and the count of violations.
    """
    x, _ = np.polynomial.legendre.leggauss(nodes)
    v = 0.5 * (x + 1) * 20.0
    t = h * np.exp(-v)
    F = np.exp(spec.log_heat_origin(2, np.log(t)))
    rhs = math.sqrt(beta * spec.d / 8 + c_beta * h) * np.sqrt(F) / np.sqrt(t)
    bad = int(np.sum(F > rhs * (1 + 1e-12)))
    return {"t": t.tolist(), "lhs": F.tolist(), "rhs": rhs.tolist(), "violations": bad}


# --- mollifier lemma -------------------------------------------------------------------

@dataclass
class MollifierRung:
    eps: float
    nu: float
    g1: float
    g2: float
    ne_eps: float
    excess: float


@dataclass
class MollifierReport:
    h: float
    reference: float
    reference_analytic: Optional[dict]
    rungs: list
    slope: float
    tolerance: float
    within: list

    @property
    def ok(self) -> bool:
        return all(self.within)

    def to_dict(self):
        return asdict(self)


def choose_nu(b: SampledField, sq: np.ndarray, eps: float, q: float = None,
              nu_max: float = None, steps: int = 40):
    """Largest ``nu`` on a halving ladder with discrete ``||g1||_2 <= eps``
    and ``||g2||_q <= eps^2``.

    ``g1 = E_nu(1_eps b) - 1_eps b`` and ``g2 = |E_nu(1_eps |b|^2) - 1_eps |b|^2|``;
    sub-resolution ``nu`` uses the discrete-Laplacian heat kernel.
    """
    g = b.grid
    q = q or g.d
    cut = CutoffParams(eps)
    keep = (g.radius2() <= cut.cap ** 2) & (np.sqrt(b.magnitude_sq()) <= cut.cap)
    tb = b.replace(np.where(keep[..., None], b.values, 0.0))
    tsq = SampledField(g, np.where(keep, sq, 0.0))
    nu = nu_max or 4 * g.h ** 2
    for _ in range(steps):
        be = mollify(tb, nu, scheme="auto")
        g1 = discrete_lp(np.sqrt(np.sum((be.values - tb.values) ** 2, -1)), g, 2)
        se = mollify(tsq, nu, scheme="auto")
        g2 = discrete_lp(se.values - tsq.values, g, q)
        if g1 <= eps and g2 <= eps ** 2:
            return nu, be, g1, g2
        nu /= 2
    raise ResolutionError(f"no smoothing time on the ladder meets the schedule for eps={eps}")


def mollifier_stability_check(spec: DriftSpec, h, eps_ladder, grid: GridSpec,
                              quad: QuadraturePlan = None, tol=1e-3) -> MollifierReport:
    """Track ``n_e(b_eps, h) - n_e(b, h)`` along a decreasing eps ladder.

    Both norms use the grid backend on the sampled vector field, so the
    excess measures the smoothing and not the discretization.  The analytic
    value of ``n_e(b, h)`` and the grid value built from cell averages of
    ``|b|^2`` are reported alongside.  The slope is the least-squares
    fit of excess against eps through the origin.
    """
    eps_ladder = [float(e) for e in eps_ladder]
    if any(e < 0 for e in eps_ladder) or any(a <= b for a, b in zip(eps_ladder, eps_ladder[1:])):
        raise InputError("eps ladder must be nonnegative and strictly decreasing")
    quad = quad or DEFAULT_PLAN
    b = sample_drift(spec, grid, "vector")
    sq = sample_drift(spec, grid, "sq").values
    ref = nash_norm_e(b, h, quad, backend="grid").value
    an = nash_norm_e(spec, h, quad)
    an_d = {"value": an.value, "verdict": an.verdict,
            "grid_cell_average": nash_norm_e(b, h, quad, backend="grid",
                                             sq=SampledField(grid, sq)).value}
    rungs = []
    for e in eps_ladder:
        if e == 0:
            rungs.append(MollifierRung(0.0, 0.0, 0.0, 0.0, ref, 0.0))
            continue
        nu, be, g1, g2 = choose_nu(b, sq, e)
        ne = nash_norm_e(be, h, quad, backend="grid").value
        rungs.append(MollifierRung(e, nu, g1, g2, ne, ne - ref))
    E = np.array([r.eps for r in rungs])
    X = np.array([r.excess for r in rungs])
    slope = float(np.dot(E, X) / np.dot(E, E)) if np.dot(E, E) > 0 else 0.0
    slope = max(slope, 0.0)
    within = [bool(r.excess <= slope * r.eps + tol) for r in rungs]
    return MollifierReport(h, ref, an_d, [asdict(r) for r in rungs], slope, tol, within)


def pointwise_norm(spec: DriftSpec, functional: str, h: float, x) -> float:
    """The integral inside a norm at one point ``x`` instead of the sup.

    Useful where the sup is infinite but the integral converges away from
    the singular set.  Radial kinds only (see ``DriftSpec.heat_at``).
    """
    _check_h(h)
    power, use_sqrt, log_w, T, _ = _setup(functional, h=h)

    def g(s):
        if s == 0:
            return 0.0
        t = s * s
        F = spec.heat_at(power, t, x)
        G = math.sqrt(F) if use_sqrt else F
        return G * math.exp(log_w(math.log(t))) * 2 * s   # t = s^2
    val, _ = integrate.quad(g, 0, math.sqrt(T), epsabs=0, epsrel=1e-11, limit=400)
    return val
