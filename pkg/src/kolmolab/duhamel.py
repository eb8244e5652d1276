"""Duhamel perturbation series of the drift kernel and the resulting bounds.

With ``p`` the kernel of the drift-free operator, the terms satisfy

    d/dt u_n = -D u_n + B u_{n-1},    u_n(0) = 0  (n >= 1),

where ``D`` is the discrete diffusion and ``B = L - D`` the discrete drift,
so ``u = sum_n (-1)^n u_n`` holds exactly for the discrete kernel.  The
terms are marched together with the step schedule of the kernel solver,
which replaces the tau-quadrature of the continuous formula.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .drift_catalog import DriftSpec, MatrixSpec, sample_drift, sample_matrix
from .drift_norms import QuadraturePlan, nash_norm_e
from .errors import InputError, ResolutionError, SmallnessError
from .field_core import GridSpec, SampledField, kernel_r2, log_kernel_r2
from .kernel_solver import (DiscreteOperator, DtPolicy, KernelTable, _LinearSolver, _schedule,
                            initial_time)
from .nash_lab import c_minus, c_plus, check_window_plus, gradient, r_plus

MAX_TERMS = 12
TAIL_FRACTION = 1e-3


@dataclass
class DuhamelSeries:
    """Terms ``u_0 .. u_n`` of the series for one source on a time ladder.

    ``terms[n][k]`` is the slice ``u_n(t_k, ., y)``.  ``sup_ratios[n]`` is the
    max of ``|u_n| / k_lam(t, . - y)`` over the sampled region, with ``lam``
    the envelope diffusivity.
    """

    grid: GridSpec
    source: tuple
    times: np.ndarray
    terms: list
    envelope: float
    sup_ratios: list = field(default_factory=list)
    C_hat: Optional[float] = None
    truncation: Optional[int] = None
    tail_bound: Optional[float] = None
    meta: dict = field(default_factory=dict)

    @property
    def n_terms(self) -> int:
        return len(self.terms)

    @property
    def c3(self) -> float:
        """``sup p / k_lam`` over the samples (the ``n = 0`` ratio)."""
        return self.sup_ratios[0]

    def partial_sum(self, k, n=None) -> np.ndarray:
        """``sum_{m <= n} (-1)^m u_m`` at ladder index k."""
        n = self.n_terms - 1 if n is None else n
        out = np.zeros(self.grid.shape)
        for m in range(n + 1):
            out += (-1) ** m * self.terms[m][k]
        return out

    def set_contraction(self, C_hat):
        """Attach a contraction estimate; fixes the truncation index and tail bound."""
        self.C_hat = float(C_hat)
        self.truncation = self.n_terms - 1
        self.tail_bound = None
        if self.C_hat < 1:
            scale = TAIL_FRACTION * self.c3
            for n, s in enumerate(self.sup_ratios):
                tail = s * self.C_hat / (1 - self.C_hat)
                if tail < scale or n == self.n_terms - 1:
                    self.truncation, self.tail_bound = n, tail
                    break
        return self

    def decay_check(self, C_hat=None, slack=1.1) -> list:
        """``sup |u_n| / k_lam <= c3 C_hat^n slack`` per term; list of booleans."""
        C = self.C_hat if C_hat is None else C_hat
        if C is None:
            raise InputError("no contraction estimate attached")
        return [s <= self.c3 * C ** n * slack for n, s in enumerate(self.sup_ratios)]

    def to_table(self, n=None) -> KernelTable:
        """Truncated sum as a one-source kernel table."""
        vals = [self.partial_sum(k, n) for k in range(len(self.times))]
        return KernelTable(self.grid, [self.source], self.times, [vals], [], False,
                           {"duhamel_terms": self.n_terms if n is None else n + 1})

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["n", "sup_ratio", "tail_bound"])
        for n, s in enumerate(self.sup_ratios):
            tail = "" if self.C_hat is None or self.C_hat >= 1 else f"{s * self.C_hat / (1 - self.C_hat):.17g}"
            w.writerow([n, f"{s:.17g}", tail])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text

    def summary(self) -> dict:
        return {"source": list(self.source), "times": [float(t) for t in self.times],
                "envelope": self.envelope, "sup_ratios": self.sup_ratios, "C_hat": self.C_hat,
                "truncation": self.truncation, "tail_bound": self.tail_bound, "meta": self.meta}


def _sample_mask(grid, y, t, lam, floor=1e-6, margin=3):
    """Interior nodes where ``k_lam(t, . - y)`` is above ``floor`` times its peak."""
    X = grid.coords()
    r2 = np.sum((X - grid.node(y)) ** 2, -1)
    mask = r2 <= -4 * lam * t * math.log(floor) if floor > 0 else np.ones(grid.shape, dtype=bool)
    inner = np.ones(grid.shape, dtype=bool)
    for ax in range(grid.d):
        sl = [slice(None)] * grid.d
        sl[ax] = slice(0, margin)
        inner[tuple(sl)] = False
        sl[ax] = slice(grid.N - margin, None)
        inner[tuple(sl)] = False
    return mask & inner, r2


def _sup_ratio(u, grid, y, t, lam):
    mask, r2 = _sample_mask(grid, y, t, lam)
    lk = log_kernel_r2(lam, t, r2[mask], grid.d)
    v = np.abs(u[mask])
    pos = v > 0
    if not np.any(pos):
        return 0.0
    return float(np.max(np.exp(np.log(v[pos]) - lk[pos])))


def _initial_terms(op, y, t0, n_terms):
    """Terms at the start time from the frozen-coefficient expansion
    ``k(t0, . - y - b(y) t0) = sum (-1)^n t0^n (b(y) . grad)^n k(t0, . - y) / n!``."""
    g = op.grid
    A = op.a.full_matrix()[y]
    mu = float(np.trace(A)) / g.d
    X = g.coords()
    u0 = kernel_r2(mu, t0, np.sum((X - g.node(y)) ** 2, -1), g.d)
    u0 = u0 / (np.sum(u0) * g.cell_volume)
    out = [u0]
    by = np.zeros(g.d) if op.b is None else np.asarray(op.b.values[y], dtype=float)
    for n in range(1, n_terms):
        if not np.any(by):
            out.append(np.zeros(g.shape))
            continue
        out.append(t0 / n * np.tensordot(gradient(out[-1], g.h), by, axes=([-1], [0])))
    return out


def duhamel_series(op: DiscreteOperator, y, ladder: Sequence[float], n_terms: int = MAX_TERMS,
                   envelope: float = None, policy: DtPolicy = None,
                   stepper="crank_nicolson") -> DuhamelSeries:
    """Build ``u_0 .. u_{n_terms-1}`` for source node ``y``.

    Parameters
    ----------
    op : DiscreteOperator
        Full operator; its diffusion part defines ``p``.
    envelope : float, optional
        Diffusivity ``lam`` of the comparison Gaussian in the sup ratios;
        defaults to 1.1 times the upper ellipticity of ``a``.
    """
    g = op.grid
    y = tuple(int(i) for i in y)
    if not 1 <= n_terms <= 64:
        raise InputError("n_terms must lie in [1, 64]")
    ladder = np.asarray(ladder, dtype=float)
    if ladder.ndim != 1 or ladder.size == 0 or np.any(np.diff(ladder) <= 0):
        raise InputError("ladder must be positive and strictly increasing")
    t0 = initial_time(op, y)
    if ladder[0] < t0:
        raise ResolutionError(f"first ladder time {ladder[0]:.4g} is below the start time {t0:.4g}", t_min=t0)
    if envelope is None:
        A = op.a.full_matrix().reshape(-1, g.d, g.d)
        envelope = 1.1 * float(np.max(np.linalg.eigvalsh(A)))
    policy = policy or DtPolicy()
    D = op.D.tocsr()
    B = op.B
    solvers = {}

    def solve(coef, r, x0):
        s = solvers.get(coef)
        if s is None:
            if len(solvers) > 32:
                solvers.clear()
            s = solvers[coef] = _LinearSolver(D, coef, True)
        return s.solve(r, x0=x0)

    u = [v.reshape(-1) for v in _initial_terms(op, y, t0, n_terms)]
    snaps = [[] for _ in range(n_terms)]
    nstep = 0
    for dt, kind in _schedule(t0, list(ladder), policy, stepper):
        if dt is None:
            for n in range(n_terms):
                snaps[n].append(u[n].reshape(g.shape).copy())
            continue
        new = []
        for n in range(n_terms):
            if kind == "implicit_euler":
                rhs = u[n] + (dt * (B @ new[n - 1]) if n else 0.0)
                x = solve(dt, rhs, u[n])
            else:
                rhs = u[n] - 0.5 * dt * (D @ u[n])
                if n:
                    rhs = rhs + 0.5 * dt * (B @ (u[n - 1] + new[n - 1]))
                x = solve(0.5 * dt, rhs, u[n])
            new.append(x)
        u = new
        nstep += 1
    ratios = [max(_sup_ratio(snaps[n][k], g, y, t, envelope) for k, t in enumerate(ladder))
              for n in range(n_terms)]
    return DuhamelSeries(g, y, ladder, snaps, float(envelope), ratios,
                         meta={"stepper": stepper, "steps": nstep, "t_start": t0,
                               "policy": asdict(policy)})


def duhamel_term(op: DiscreteOperator, y, ladder, n: int, **kw) -> list:
    """Slices of the single term ``u_n`` on the ladder."""
    return duhamel_series(op, y, ladder, n_terms=n + 1, **kw).terms[n]


def u1_constant_drift(c, x_minus_y, t):
    """``u_1(t, x, y) = -(c (x - y) / 2) k_1(t, x - y)`` for ``a = 1``, ``b = c`` in d = 1."""
    z = np.asarray(x_minus_y, dtype=float)
    return -(c * z / 2) * kernel_r2(1.0, t, z * z, 1)


# --- contraction constant -------------------------------------------------------------------

def default_epsilon(lam, delta) -> float:
    """Lower end of the late split window ``lam / (2 (lam - delta))`` plus 1e-3.

    The window always sits above 1/2, and ``M+`` grows with ``1 - eps``, so
    the default stays just inside its lower edge.
    """
    if not lam > 2 * delta:
        raise InputError(f"need lambda > 2 delta, got lambda={lam}, delta={delta}")
    lo = lam / (2 * (lam - delta))
    return lo + 1e-3


@dataclass
class ContractionEstimate:
    C_hat: float
    M_minus: float
    M_plus: float
    c_minus: float
    c_plus: float
    mu_minus: float
    mu_plus: float
    epsilon: float
    h: float
    c0: float
    c0_hat: float
    reports: dict = field(default_factory=dict)

    @property
    def small(self) -> bool:
        return self.C_hat < 1

    def to_dict(self):
        d = asdict(self)
        d["reports"] = {k: v.to_dict() for k, v in self.reports.items()}
        d["small"] = self.small
        return d

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)


def _scalar_a(a, d):
    if a is None:
        return 1.0
    if isinstance(a, (int, float)):
        return float(a)
    if isinstance(a, MatrixSpec):
        if a.kind == "identity":
            return 1.0
        if a.kind == "scaled_identity":
            return float(a.params["mu"])
        return None
    A = a.full_matrix().reshape(-1, d, d)
    if np.allclose(A, A[0]) and np.allclose(A[0], A[0, 0, 0] * np.eye(d)):
        return float(A[0, 0, 0])
    return None


def _xi(a, d):
    mu = _scalar_a(a, d)
    if mu is not None:
        return mu
    if isinstance(a, MatrixSpec):
        return a.window().xi
    return float(np.max(np.linalg.eigvalsh(a.full_matrix().reshape(-1, d, d))))


def b_a_squared(b: SampledField, a: SampledField) -> SampledField:
    """``b . a^{-1} . b`` at every node."""
    A = a.full_matrix()
    v = np.linalg.solve(A, b.values[..., None])[..., 0]
    return SampledField(b.grid, np.sum(b.values * v, -1))


def _weighted_ne(b, a, H, quad, backend, grid):
    """``n_e`` of ``b_a`` over ``[0, H]``."""
    d = b.d if isinstance(b, DriftSpec) else b.grid.d
    mu = _scalar_a(a, d)
    if isinstance(b, DriftSpec) and mu is not None and backend != "grid":
        rep = nash_norm_e(b, H, quad, backend="analytic")
        return rep.value / math.sqrt(mu), rep
    if isinstance(b, DriftSpec):
        if grid is None:
            raise InputError("a grid is needed to sample the drift against a variable matrix")
        bs = sample_drift(b, grid)
    else:
        bs = b
    g = bs.grid
    if isinstance(a, MatrixSpec):
        a = sample_matrix(a, g)
    if mu is not None:
        sq = SampledField(g, bs.magnitude_sq() / mu)
    else:
        sq = b_a_squared(bs, a)
    rep = nash_norm_e(bs, H, quad, backend="grid", sq=sq)
    return rep.value, rep


def contraction_estimate(b, a, lam, delta, h, c0, c0_hat, epsilon=None, c4=None,
                         quad: QuadraturePlan = None, backend="auto", grid=None) -> ContractionEstimate:
    """``C_hat = c_- M^- + c_+ M^+`` bounding the Duhamel step on ``(0, h]``.

    Parameters
    ----------
    b : DriftSpec or SampledField
    a : float, MatrixSpec or SampledField
    lam, delta : float
        Need ``lam > 2 delta > c4 > xi``.
    c0, c0_hat : float
        Constants of ``t N_delta <= c0`` and ``(t - tau) N_hat <= c0_hat``
        (empirical values from :mod:`kolmolab.nash_lab`).
    epsilon : float, optional
        Split point; defaults to :func:`default_epsilon`.

    Notes
    -----
    With ``s = mu tau`` the sup over the base point of
    ``int_0^{t eps} sqrt(<k_mu(tau) b_a^2>) dtau / sqrt(tau)`` is
    ``mu^{-1/2} n_e(b_a, mu t eps)``, so
    ``M^- <= sqrt(c0 / mu_-) n_e(b_a, mu_- eps h)`` and
    ``M^+ <= sqrt(c0_hat / mu_+) n_e(b_a, mu_+ (1 - eps) h)``.
    """
    d = b.d if isinstance(b, DriftSpec) else b.grid.d
    xi = _xi(a, d)
    if not lam > 2 * delta:
        raise InputError(f"need lambda > 2 delta, got lambda={lam}, delta={delta}")
    if c4 is not None and not 2 * delta > c4 > xi:
        raise InputError(f"need 2 delta > c4 > xi, got c4={c4}, delta={delta}, xi={xi}")
    if not 2 * delta > xi:
        raise InputError(f"need 2 delta > xi = {xi}")
    if not h > 0 or not c0 >= 0 or not c0_hat >= 0:
        raise InputError("h must be positive and c0, c0_hat non-negative")
    eps = default_epsilon(lam, delta) if epsilon is None else float(epsilon)
    check_window_plus(lam, delta, eps)
    mu_m = lam * delta / (lam - 2 * delta)
    mu_p = lam / r_plus(lam, delta, eps)
    cm = c_minus(d, lam, delta, eps)
    cp = c_plus(d, lam, delta, eps)
    ne_m, rep_m = _weighted_ne(b, a, mu_m * eps * h, quad, backend, grid)
    ne_p, rep_p = _weighted_ne(b, a, mu_p * (1 - eps) * h, quad, backend, grid)
    Mm = math.sqrt(c0 / mu_m) * ne_m
    Mp = math.sqrt(c0_hat / mu_p) * ne_p
    return ContractionEstimate(cm * Mm + cp * Mp, Mm, Mp, cm, cp, mu_m, mu_p, eps, float(h),
                               float(c0), float(c0_hat), {"minus": rep_m, "plus": rep_p})


def critical_amplitude(est: ContractionEstimate) -> float:
    """Drift amplitude factor at which ``C_hat = 1`` (``C_hat`` is 1-homogeneous)."""
    return math.inf if est.C_hat == 0 else 1.0 / est.C_hat


def critical_h(b, a, lam, delta, c0, c0_hat, h_lo, h_hi, rtol=1e-3, **kw) -> Optional[float]:
    """``h*`` with ``C_hat(h*) = 1`` by bisection in ``log h``; None if no crossing in the bracket."""
    f = lambda h: contraction_estimate(b, a, lam, delta, h, c0, c0_hat, **kw).C_hat - 1
    lo, hi = f(h_lo), f(h_hi)
    if lo >= 0 or hi < 0:
        return None
    a_, b_ = math.log(h_lo), math.log(h_hi)
    while b_ - a_ > rtol:
        m = 0.5 * (a_ + b_)
        if f(math.exp(m)) < 0:
            a_ = m
        else:
            b_ = m
    return math.exp(0.5 * (a_ + b_))


# --- certificates ---------------------------------------------------------------------------

def omega_h(c3, C_hat, h) -> float:
    """``(1/h) log(c3 / (1 - C_hat))``."""
    if not C_hat < 1:
        raise SmallnessError(f"C_hat = {C_hat} >= 1")
    return math.log(c3 / (1 - C_hat)) / h


def _table_scan(table, env_log, upper=True):
    """Largest signed violation ``log u - log env`` (upper) or reverse (lower) over
    slices; counts samples on the violating side."""
    g = table.grid
    worst = -math.inf
    count = 0
    total = 0
    for j in range(len(table)):
        y = table.source_point(j)
        for k, t in enumerate(table.times):
            u = table.values[j][k]
            mask, r2 = _sample_mask(g, tuple(table.sources[j]), t, 1.0, floor=0.0)
            keep = env_log(t, r2) > -600
            sel = mask & keep
            if upper:
                sel &= u > 0
                gap = np.log(u[sel]) - env_log(t, r2)[sel]
            else:
                gap = env_log(t, r2)[sel] - np.log(np.maximum(u[sel], 1e-300))
            total += int(sel.sum())
            if gap.size:
                worst = max(worst, float(gap.max()))
                count += int(np.sum(gap > 1e-12))
    return worst, count, total


def assemble_upper(C_hat, h, c3, c4, table: KernelTable = None):
    """Upper envelope ``(c3 / (1 - C_hat)) e^{t omega_h} k_{c4}`` checked against a table."""
    from .bound_lab import GaussianFit
    if not C_hat < 1:
        raise SmallnessError(f"no upper certificate: C_hat = {C_hat} >= 1")
    mult = c3 / (1 - C_hat)
    w = omega_h(c3, C_hat, h)
    fit = GaussianFit("upper", mult, c4, w, residual=float("nan"),
                      samples={"source": "duhamel", "C_hat": C_hat, "h": h})
    if table is not None:
        d = table.grid.d
        worst, count, total = _table_scan(
            table, lambda t, r2: math.log(mult) + w * t + log_kernel_r2(c4, t, r2, d), True)
        fit.residual = worst
        fit.violations = count
        fit.samples["n"] = total
    return fit


def critical_contraction(c1, c2, c3, c4, d) -> float:
    """``C_hat`` at which the near-diagonal lower constant ``r`` vanishes."""
    q = c1 / c3 * (c4 / c2) ** (d / 2) * math.exp(-1 / (4 * c2))
    return q / (1 + q)


@dataclass
class LowerCertificate:
    r: float
    C_hat: float
    h: float
    min_ratio: Optional[float] = None
    violations: int = 0
    pairs: int = 0

    @property
    def ok(self) -> bool:
        return self.r > 0 and self.violations == 0


def lower_r(c1, c2, c3, c4, C_hat, d) -> float:
    """``(c1 c2^{-d/2} e^{-1/(4 c2)} - (c3 C/(1-C)) c4^{-d/2}) (4 pi)^{-d/2}``."""
    if not 0 <= C_hat < 1:
        raise SmallnessError(f"C_hat = {C_hat} outside [0, 1)")
    return ((c1 * c2 ** (-d / 2) * math.exp(-1 / (4 * c2)) - c3 * C_hat / (1 - C_hat) * c4 ** (-d / 2))
            * (4 * math.pi) ** (-d / 2))


def lower_diagonal(C_hat, c1, c2, c3, c4, h, table: KernelTable = None) -> LowerCertificate:
    """Near-diagonal lower bound ``u(t, x, y) >= r t^{-d/2}`` for ``|x - y|^2 <= t <= h``."""
    d = table.grid.d if table is not None else None
    if d is None:
        raise InputError("lower_diagonal needs the kernel table (for the dimension and the check)")
    r = lower_r(c1, c2, c3, c4, C_hat, d)
    if r <= 0:
        Cc = critical_contraction(c1, c2, c3, c4, d)
        raise SmallnessError(f"r = {r:.6g} <= 0: need C/(1-C) < (c1/c3)(c4/c2)^(d/2) e^(-1/(4 c2)), "
                             f"i.e. C_hat < {Cc:.6g}, got {C_hat}")
    cert = LowerCertificate(r, float(C_hat), float(h))
    g = table.grid
    X = g.coords()
    worst = math.inf
    for j in range(len(table)):
        y = table.source_point(j)
        r2 = np.sum((X - y) ** 2, -1)
        for k, t in enumerate(table.times):
            if t > h:
                continue
            sel = r2 <= t
            ratio = table.values[j][k][sel] * t ** (d / 2) / r
            cert.pairs += int(sel.sum())
            cert.violations += int(np.sum(ratio < 1))
            if ratio.size:
                worst = min(worst, float(ratio.min()))
    cert.min_ratio = worst if math.isfinite(worst) else None
    return cert


def bracket_check(series: DuhamelSeries, table: KernelTable, j=0, n_max=None) -> dict:
    """Where ``|u_1| > |u_2|``, count samples with ``S_1 <= u <= S_0`` or ``S_0 <= u <= S_1``
    (consecutive partial sums on either side of the solver kernel)."""
    n_max = min(series.n_terms - 1, n_max or 3)
    ok = total = 0
    for k, t in enumerate(series.times):
        u = table.values[j][table.t_index(t)]
        mask, _ = _sample_mask(series.grid, series.source, t, series.envelope)
        sel = mask & (np.abs(series.terms[1][k]) > np.abs(series.terms[2][k])) if series.n_terms > 2 else mask
        s_prev = series.partial_sum(k, n_max - 1)
        s_last = series.partial_sum(k, n_max)
        lo, hi = np.minimum(s_prev, s_last), np.maximum(s_prev, s_last)
        tol = 1e-9 * np.max(np.abs(u))
        good = (u >= lo - tol) & (u <= hi + tol)
        ok += int(np.sum(good & sel))
        total += int(np.sum(sel))
    return {"bracketed": ok, "checked": total, "fraction": ok / total if total else float("nan")}
