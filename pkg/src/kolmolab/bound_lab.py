"""A posteriori checks on computed kernels: Gaussian envelopes, mass balance,
Harnack ratios, Hölder exponents, operator-norm traces and mollifier convergence.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy import optimize

from .drift_catalog import DriftSpec, MatrixSpec, sample_drift, sample_matrix
from .errors import FitFailure, InputError, ResolutionError
from .field_core import (CutoffParams, EllipticityWindow, GridSpec, SampledField, discrete_lp,
                         log_kernel_r2, mollify)
from .kernel_solver import DtPolicy, KernelTable, apply_semigroup, assemble
from .nash_lab import gradient


def _json(obj, **kw):
    return json.dumps(obj, default=lambda o: o.tolist() if hasattr(o, "tolist") else str(o), **kw)


# --- Gaussian envelopes ---------------------------------------------------------------------

@dataclass
class SampleSpec:
    """Which table samples enter a fit.

    ``t_min`` drops under-resolved slices (default: kernel width 3 h at the
    lower ellipticity).  ``margin`` is the boundary layer excluded, in units
    of ``sqrt(2 xi t)``.  ``radius_factor`` limits lower fits to
    ``|x - y|^2 <= radius_factor * mu * t``.  ``floor`` drops samples where
    ``k_mu`` is below that fraction of its peak.  ``stride`` thins the LP
    sample set; the certifying scan always uses every node.
    """

    t_min: Optional[float] = None
    margin: float = 3.0
    radius_factor: float = 8.0
    floor: float = 1e-12
    stride: int = 2


@dataclass
class GaussianFit:
    side: str
    multiplier: float
    diffusivity: float
    rate: float
    residual: float
    samples: dict = field(default_factory=dict)
    violations: int = 0

    @property
    def ok(self) -> bool:
        return self.violations == 0

    def envelope(self, t, r2, d):
        s = 1 if self.side == "upper" else -1
        return self.multiplier * math.exp(s * self.rate * t) * np.exp(log_kernel_r2(self.diffusivity, t, r2, d))

    def to_dict(self):
        d = asdict(self)
        d["ok"] = self.ok
        return d

    def to_json(self, **kw) -> str:
        return _json(self.to_dict(), **kw)


def _window(table, window):
    if window is not None:
        return window.sigma, window.xi
    return table.meta.get("sigma"), table.meta.get("xi")


def _fit_samples(table: KernelTable, side, mu, spec: SampleSpec, sigma, xi, full):
    """Arrays ``(t, g = log u - log k_mu, source, flat index)`` over the sample set."""
    g = table.grid
    X = g.coords()
    d = g.d
    t_min = spec.t_min
    if t_min is None:
        t_min = 9 * g.h ** 2 / (2 * (sigma or 1.0))
    ts, gs, js, ids = [], [], [], []
    stride = 1 if full else max(1, spec.stride)
    sl = tuple(slice(None, None, stride) for _ in range(d))
    for j in range(len(table)):
        y = table.source_point(j)
        dist_b = g.distance_to_boundary(tuple(table.sources[j]))
        r2 = np.sum((X - y) ** 2, -1)
        xmin = np.min(np.abs(np.abs(X) - g.L), axis=-1)   # distance of each node to the boundary
        for k, t in enumerate(table.times):
            if t < t_min * (1 - 1e-12):
                continue
            u = table.values[j][k]
            lk = log_kernel_r2(mu, t, r2, d)
            keep = lk - log_kernel_r2(mu, t, 0.0, d) >= math.log(spec.floor)
            keep &= xmin >= spec.margin * math.sqrt(2 * (xi or mu) * t)
            if side == "lower":
                keep &= r2 <= spec.radius_factor * mu * t
                keep &= r2 <= max(dist_b - spec.margin * math.sqrt(2 * (xi or mu) * t), 0.0) ** 2
            m = keep[sl]
            uu = u[sl][m]
            if side == "lower" and np.any(uu <= 0):
                bad = np.argwhere(m)[np.argmax(uu <= 0)]
                raise FitFailure("lower envelope infeasible: non-positive kernel sample",
                                 {"source": j, "t": float(t), "node": [int(i * stride) for i in bad]})
            pos = uu > 0
            ts.append(np.full(int(pos.sum()), t))
            gs.append(np.log(uu[pos]) - lk[sl][m][pos])
            js.append(np.full(int(pos.sum()), j))
            ids.append(np.flatnonzero(m.reshape(-1))[pos])
    if not ts:
        raise ResolutionError("no resolved slices to fit", t_min=t_min)
    return np.concatenate(ts), np.concatenate(gs), np.concatenate(js), np.concatenate(ids)


def fit_gaussian(table: KernelTable, side: str, mu: float, samples: SampleSpec = None,
                 window: EllipticityWindow = None, omega_max: float = None) -> GaussianFit:
    """Minimal envelope ``u <= c e^{omega t} k_mu`` (upper) or maximal
    ``u >= c e^{-omega t} k_mu`` (lower) with ``mu`` fixed.

    ``(log c, omega)`` solve a linear program on log-transformed samples
    whose objective is the log envelope multiplier at the last sampled time.
    A full scan afterwards certifies the result.

    Raises
    ------
    FitFailure
        A lower fit meets a non-positive sample, or degenerates to ``c = 0``.
    """
    if side not in ("upper", "lower"):
        raise InputError("side must be 'upper' or 'lower'")
    spec = samples or SampleSpec()
    sigma, xi = _window(table, window)
    if window is not None:
        if side == "upper" and not mu > window.xi:
            raise InputError(f"upper fit needs mu > xi = {window.xi}")
        if side == "lower" and not mu < window.sigma:
            raise InputError(f"lower fit needs mu < sigma = {window.sigma}")
    t, gv, _, _ = _fit_samples(table, side, mu, spec, sigma, xi, full=False)
    T = float(t.max())
    omega_max = omega_max if omega_max is not None else 50.0 / T
    if side == "upper":
        # min l + w T  s.t.  -l - w t_i <= -g_i
        A = np.column_stack([-np.ones_like(t), -t])
        res = optimize.linprog([1.0, T], A_ub=A, b_ub=-gv, bounds=[(None, None), (0, omega_max)],
                               method="highs")
    else:
        # max l - w T  s.t.  l - w t_i <= g_i
        A = np.column_stack([np.ones_like(t), -t])
        res = optimize.linprog([-1.0, T], A_ub=A, b_ub=gv, bounds=[(None, None), (0, omega_max)],
                               method="highs")
    if res.status != 0:
        raise FitFailure(f"envelope LP failed: {res.message}")
    ell, w = float(res.x[0]), float(res.x[1])
    # certifying scan on every node
    tf, gf, jf, idf = _fit_samples(table, side, mu, spec, sigma, xi, full=True)
    if side == "upper":
        gap = gf - ell - w * tf
        bump = max(float(gap.max()), 0.0)
        ell += bump
        residual = float((gf - ell - w * tf).max())
        viol = int(np.sum(gf - ell - w * tf > 1e-12))
    else:
        gap = gf - ell + w * tf
        bump = min(float(gap.min()), 0.0)
        ell += bump
        residual = float((gf - ell + w * tf).min())
        viol = int(np.sum(gf - ell + w * tf < -1e-12))
    c = math.exp(ell)
    if side == "lower" and c * math.exp(-w * T) < 1e-12:
        i = int(np.argmin(gf))
        raise FitFailure("lower envelope degenerates (c e^{-omega T} < 1e-12)",
                         {"source": int(jf[i]), "t": float(tf[i]), "flat_index": int(idf[i])})
    return GaussianFit(side, c, float(mu), w, residual,
                       {"lp_samples": int(t.size), "scan_samples": int(tf.size), "t_min": float(tf.min()),
                        "t_max": float(tf.max()), "scan_adjustment": bump, **asdict(spec)}, viol)


# --- mass ---------------------------------------------------------------------------------

@dataclass
class MassReport:
    rows: list
    tol: float

    @property
    def max_deviation(self) -> float:
        return max(r["deviation"] for r in self.rows)

    @property
    def ok(self) -> bool:
        return self.max_deviation < self.tol


def mass_conservation(table: KernelTable, tol=1e-3) -> MassReport:
    """Per slice ``|<u> h^d + leak - 1|`` (``deviation``) and, including the
    interior source of non-solenoidal drifts, ``|<u> h^d + leak + source - 1|``
    (``balance``).  Probability is conserved by adjoint slices ``u(t, x, .)``.
    """
    rows = []
    for dg in table.diagnostics:
        rows.append({"source": dg.source, "t": dg.t, "mass": dg.mass, "leak": dg.leak,
                     "interior_source": dg.interior_source,
                     "deviation": abs(dg.mass + dg.leak - 1.0),
                     "balance": abs(dg.mass + dg.leak + dg.interior_source - 1.0),
                     "min": dg.min})
    return MassReport(rows, tol)


# --- Harnack ------------------------------------------------------------------------------

@dataclass
class HarnackParams:
    alpha: float = 0.3
    beta: float = 0.8
    gamma: float = 0.5
    R: float = 0.5

    def __post_init__(self):
        if not 0 < self.alpha < self.beta < 1:
            raise InputError("need 0 < alpha < beta < 1")
        if not 0 < self.gamma < 1:
            raise InputError("need 0 < gamma < 1")
        if not 0 < self.R <= 1:
            raise InputError("need 0 < R <= 1")


@dataclass
class HarnackReport:
    params: dict
    K: float
    pairs: int
    K_doubled: Optional[float] = None
    pairs_doubled: Optional[int] = None

    @property
    def stability(self) -> Optional[float]:
        if self.K_doubled is None:
            return None
        return abs(self.K_doubled - self.K) / self.K

    def to_json(self, **kw):
        d = asdict(self)
        d["stability"] = self.stability
        return _json(d, **kw)


def _snapshots(u, grid=None):
    if isinstance(u, KernelTable):
        return u.grid, {float(t): u.values[0][k] for k, t in enumerate(u.times)}
    if grid is None:
        raise InputError("a grid is needed with a snapshot mapping")
    return grid, {float(t): np.asarray(v) for t, v in u.items()}


def _harnack_K(grid, snaps, x0, s, P: HarnackParams, stride, tstride):
    X = grid.coords()
    times = sorted(snaps)
    if not any(abs(t - s) <= 1e-12 * s for t in times):
        raise InputError(f"no snapshot at s = {s}")
    us = snaps[min(times, key=lambda t: abs(t - s))]
    lo, hi = s - P.beta * P.R ** 2, s - P.alpha ** 2 * P.R ** 2
    past = [t for t in times if lo - 1e-12 <= t <= hi + 1e-12][::tstride]
    if not past:
        raise InputError(f"no snapshots in the past window [{lo:.4g}, {hi:.4g}]")
    sl = tuple(slice(None, None, stride) for _ in range(grid.d))
    Xs = X[sl]
    K = 1.0
    pairs = 0
    # x ranges over the ball B(x0, gamma R); (t, y) over the past cylinder around x
    xs = np.argwhere(np.sum((Xs - x0) ** 2, -1) <= (P.gamma * P.R) ** 2)
    tol = 1e-12 * max(float(np.max(np.abs(v))) for v in snaps.values())
    for t in past:
        ut = snaps[t][sl]
        if np.any(ut < -tol) or np.any(us[sl] < -tol):
            raise InputError("u has negative samples beyond tolerance")
        for idx in xs:
            x = Xs[tuple(idx)]
            ball = np.sum((Xs - x) ** 2, -1) <= (P.gamma * P.R) ** 2
            den = us[sl][tuple(idx)]
            if den <= 0:
                return math.inf, pairs
            K = max(K, float(ut[ball].max()) / den)
            pairs += int(ball.sum())
    return K, pairs


def harnack_scan(u, x0, s, params: HarnackParams = None, stride=2, time_stride=2, grid=None,
                 doubling=True) -> HarnackReport:
    """Empirical ``K = max u(t, y) / u(s, x)`` over ``x in B(x0, gamma R)``,
    ``t in [s - beta R^2, s - alpha^2 R^2]`` and ``y in B(x, gamma R)``.

    ``u`` is a one-source KernelTable or a mapping ``t -> values``.  With
    ``doubling`` the scan is repeated at twice the sample density (half the
    spatial and temporal strides) and both values are reported.
    """
    P = params or HarnackParams()
    g, snaps = _snapshots(u, grid)
    x0 = np.asarray(x0, dtype=float)
    K, n = _harnack_K(g, snaps, x0, s, P, stride, time_stride)
    rep = HarnackReport(asdict(P) | {"x0": x0.tolist(), "s": s, "stride": stride,
                                     "time_stride": time_stride}, K, n)
    if doubling:
        if stride < 2 and time_stride < 2:
            raise InputError("doubling needs a stride of at least 2")
        K2, n2 = _harnack_K(g, snaps, x0, s, P, max(1, stride // 2), max(1, time_stride // 2))
        rep.K_doubled, rep.pairs_doubled = K2, n2
    return rep


# --- Hölder ---------------------------------------------------------------------------------

@dataclass
class HolderReport:
    window: dict
    beta: Optional[float]
    C: Optional[float]
    r2: Optional[float]
    defined: bool = True
    points: list = field(default_factory=list)

    def to_json(self, **kw):
        return _json(asdict(self), **kw)


def holder_fit(u, z, R, s, alpha=0.5, bins=8, grid=None, time_window=True) -> HolderReport:
    """Fit ``osc(rho) ~ C rho^beta`` with the parabolic distance
    ``rho = (|t - t'|^{1/2} + |x - x'|) / R`` on the window
    ``[s - (alpha R)^2, s] x B(z, alpha R)``.

    ``osc(rho)`` is the largest ``|u(t, x) - u(t', x')|`` over pairs at
    distance at most ``rho``; the exponent is the log-log slope on
    geometric bins between the grid scale and the window scale.
    """
    g, snaps = _snapshots(u, grid)
    z = np.asarray(z, dtype=float)
    X = g.coords()
    rad = alpha * R
    times = sorted(snaps)
    ts = [t for t in times if s - rad ** 2 - 1e-12 <= t <= s + 1e-12] if time_window else \
        [min(times, key=lambda t: abs(t - s))]
    if not ts:
        raise InputError("no snapshots in the time window")
    ball = np.sum((X - z) ** 2, -1) <= rad ** 2
    if ball.sum() < 4:
        raise ResolutionError("window holds fewer than four nodes", t_min=None)
    P = X[ball]
    vals = np.concatenate([snaps[t][ball] for t in ts])
    pts = np.concatenate([P for _ in ts])
    tt = np.concatenate([np.full(len(P), t) for t in ts])
    span = float(vals.max() - vals.min())
    window = {"z": z.tolist(), "R": R, "s": s, "alpha": alpha, "times": len(ts), "nodes": int(ball.sum())}
    if span <= 1e-14 * max(1.0, float(np.abs(vals).max())):
        return HolderReport(window, None, None, None, False)
    dx = np.sqrt(np.sum((pts[:, None, :] - pts[None, :, :]) ** 2, -1))
    dt = np.sqrt(np.abs(tt[:, None] - tt[None, :]))
    rho = (dt + dx) / R
    du = np.abs(vals[:, None] - vals[None, :])
    iu = np.triu_indices(len(vals), 1)
    rho, du = rho[iu], du[iu]
    lo = g.h / R
    hi = float(rho.max())
    edges = np.geomspace(lo, hi, bins + 1)
    order = np.argsort(rho)
    rs, ds = rho[order], np.maximum.accumulate(du[order])
    osc = []
    for e in edges[1:]:
        i = np.searchsorted(rs, e, side="right")
        if i > 0 and ds[i - 1] > 0:
            osc.append((e, ds[i - 1]))
    if len(osc) < 3:
        return HolderReport(window, None, None, None, False)
    lr = np.log([o[0] for o in osc])
    lo_ = np.log([o[1] for o in osc])
    slope, icpt = np.polyfit(lr, lo_, 1)
    pred = slope * lr + icpt
    ss = float(np.sum((lo_ - lo_.mean()) ** 2))
    r2 = 1 - float(np.sum((lo_ - pred) ** 2)) / ss if ss > 0 else 1.0
    return HolderReport(window, float(slope), float(math.exp(icpt)), r2, True,
                        [[float(a), float(b)] for a, b in osc])


# --- operator norms -------------------------------------------------------------------------

@dataclass
class NormTraces:
    times: list
    gradient_norm: list          # max over source columns of int |grad_x u|
    gradient_norm_half: list     # same over the first half of the columns
    scaled_gradient: list        # sqrt(t) * gradient_norm * exp(-omega2 t)
    omega2: float
    c5: Optional[float] = None
    c6: Optional[float] = None
    dt_times: list = field(default_factory=list)

    @property
    def ratio(self) -> float:
        v = np.array(self.scaled_gradient)
        return float(v.max() / v.min())

    @property
    def column_stability(self) -> float:
        a, b = np.array(self.gradient_norm), np.array(self.gradient_norm_half)
        return float(np.max(np.abs(a - b) / a))

    def to_json(self, **kw):
        d = asdict(self)
        d["ratio"] = self.ratio
        return _json(d, **kw)


def gradient_l1(u: np.ndarray, grid: GridSpec) -> float:
    """``int |grad u| dx`` with centered differences."""
    gp = gradient(u, grid.h)
    return float(np.sum(np.sqrt(np.sum(gp * gp, -1))) * grid.cell_volume)


def time_derivative(table: KernelTable, j, k, max_ratio=1.1) -> np.ndarray:
    """Centered (non-uniform) difference of slice k on the ladder."""
    ts = table.times
    if not 0 < k < len(ts) - 1:
        raise ResolutionError("time derivative needs interior ladder points", t_min=None)
    h1, h2 = ts[k] - ts[k - 1], ts[k + 1] - ts[k]
    if max(ts[k] / ts[k - 1], ts[k + 1] / ts[k]) > max_ratio * (1 + 1e-9):
        raise ResolutionError(f"ladder ratio near t={ts[k]:.4g} exceeds {max_ratio}", t_min=None)
    u0, u1, u2 = table.values[j][k - 1], table.values[j][k], table.values[j][k + 1]
    return (-h2 / (h1 * (h1 + h2)) * u0 + (h2 - h1) / (h1 * h2) * u1 + h1 / (h2 * (h1 + h2)) * u2)


def operator_norms(table: KernelTable, omega2=0.0, c6=None, dt_max_ratio=1.1, floor=1e-4) -> NormTraces:
    """Traces of ``||grad e^{-t L}||_{1->1}`` (a lower estimate: max over the
    table's source columns) and, with ``c6``, the fitted ``c5`` in
    ``t |d_t u| <= c5 k_{c6}``.  Columns are forward slices ``u(t, ., y)``.
    """
    g = table.grid
    X = g.coords()
    gn, gh, sc = [], [], []
    half = max(1, len(table) // 2)
    for k, t in enumerate(table.times):
        vals = [gradient_l1(table.values[j][k], g) for j in range(len(table))]
        gn.append(max(vals))
        gh.append(max(vals[:half]))
        sc.append(math.sqrt(t) * gn[-1] * math.exp(-omega2 * t))
    out = NormTraces([float(t) for t in table.times], gn, gh, sc, float(omega2))
    if c6 is not None:
        c5 = 0.0
        for j in range(len(table)):
            r2 = np.sum((X - table.source_point(j)) ** 2, -1)
            for k in range(1, len(table.times) - 1):
                t = table.times[k]
                du = np.abs(time_derivative(table, j, k, dt_max_ratio))
                lk = log_kernel_r2(c6, t, r2, g.d)
                keep = lk - log_kernel_r2(c6, t, 0.0, g.d) >= math.log(floor)
                ratio = t * du[keep] * np.exp(-lk[keep])
                c5 = max(c5, float(ratio.max()))
                out.dt_times.append(float(t))
        out.c5, out.c6 = c5, float(c6)
    return out


def c5_gaussian(d, c6) -> float:
    """``max_z t |d_t k_1| / k_c6 = c6^{d/2} max_rho |rho - d/2| e^{-rho (1 - 1/c6)}``."""
    if not c6 > 1:
        raise InputError("need c6 > 1")
    q = 1 - 1 / c6
    f = lambda rho: -abs(rho - d / 2) * math.exp(-q * rho)
    cands = [d / 2 + 1 / q, 0.0]
    best = max(-f(c) for c in cands)
    res = optimize.minimize_scalar(f, bounds=(d / 2, d / 2 + 50 / q), method="bounded",
                                   options={"xatol": 1e-12})
    return c6 ** (d / 2) * max(best, -res.fun)


# --- convergence ----------------------------------------------------------------------------

def default_test_functions(grid: GridSpec) -> dict:
    """Two Gaussians and two box indicators."""
    X = grid.coords()
    r2 = np.sum(X ** 2, -1)
    off = np.zeros(grid.d)
    off[0] = 0.3
    return {"gauss_center": np.exp(-r2 / 0.1),
            "gauss_offset": np.exp(-np.sum((X - off) ** 2, -1) / 0.05),
            "box_small": np.all(np.abs(X) <= 0.3, -1).astype(float),
            "box_offset": np.all(np.abs(X - off) <= 0.2, -1).astype(float)}


@dataclass
class ConvergenceReport:
    eps_ladder: list
    times: list
    distances: dict          # name -> t -> list over consecutive rungs
    noise: float
    verdicts: dict

    @property
    def ok(self) -> bool:
        return all(all(v.values()) for v in self.verdicts.values())

    def to_json(self, **kw):
        return _json(asdict(self) | {"ok": self.ok}, **kw)


def _monotone(seq, noise):
    return all(b <= a * (1 + noise) + 1e-14 for a, b in zip(seq, seq[1:]))


def convergence_study(matrix: MatrixSpec, drift: DriftSpec, grid: GridSpec, eps_ladder: Sequence[float],
                      times=(0.05, 0.1, 0.2), functions: Mapping = None, noise=0.05,
                      policy: DtPolicy = None) -> ConvergenceReport:
    """``||u_eps(t) - u_eps'(t)||_1`` along a decreasing mollifier ladder.

    Rung ``eps`` smooths ``a`` (constant tail, no cutoff) and ``1_eps b`` by
    the heat flow for ``nu = eps^2``.  The verdict per ``(f, t)`` is a
    monotone decrease of consecutive distances within relative ``noise``.
    """
    eps_ladder = [float(e) for e in eps_ladder]
    if len(eps_ladder) < 3 or any(a <= b for a, b in zip(eps_ladder, eps_ladder[1:])) or eps_ladder[-1] <= 0:
        raise InputError("need at least three strictly decreasing positive eps values")
    funcs = functions or default_test_functions(grid)
    a0 = sample_matrix(matrix, grid)
    b0 = sample_drift(drift, grid)
    times = sorted(float(t) for t in times)
    sols = []
    for e in eps_ladder:
        nu = e * e
        ae = mollify(a0, nu, scheme="auto", tail="constant")
        be = mollify(b0, nu, CutoffParams(e), scheme="auto")
        op = assemble(ae, be)
        per = {}
        for name, f in funcs.items():
            res = apply_semigroup(op, SampledField(grid, f), times[-1], policy=policy, times=times)
            per[name] = {t: res.snapshots[t].values for t in times}
        sols.append(per)
    dist, verdicts = {}, {}
    for name in funcs:
        dist[name], verdicts[name] = {}, {}
        for t in times:
            seq = [discrete_lp(s1[name][t] - s2[name][t], grid, 1) for s1, s2 in zip(sols, sols[1:])]
            dist[name][str(t)] = seq
            verdicts[name][str(t)] = _monotone(seq, noise)
    return ConvergenceReport(eps_ladder, times, dist, noise, verdicts)
