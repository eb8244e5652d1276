"""The acceptance battery: nine desk-scale checks, each returning a CriterionResult.

Used by ``tests/test_acceptance.py`` and by the ``paper-suite`` CLI preset.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import special

from . import bound_lab, drift_norms, duhamel, nash_lab
from .drift_catalog import DriftSpec, MatrixSpec, sample_drift, sample_matrix
from .field_core import GridSpec, kernel_r2
from .kernel_solver import DtPolicy, assemble, fundamental_solution, geometric_ladder, l1_error


@dataclass
class CriterionResult:
    number: int
    name: str
    ok: bool
    details: dict = field(default_factory=dict)
    seconds: float = 0.0

    def line(self) -> str:
        return f"criterion {self.number} [{'PASS' if self.ok else 'FAIL'}] {self.name} ({self.seconds:.1f} s)"


def _timed(number, name):
    def wrap(fn):
        def run(*a, **kw):
            t0 = time.perf_counter()
            ok, details = fn(*a, **kw)
            return CriterionResult(number, name, bool(ok), details, time.perf_counter() - t0)
        run.__name__ = fn.__name__
        run.__doc__ = fn.__doc__
        return run
    return wrap


# 1 -----------------------------------------------------------------------------------------

@_timed(1, "Gaussian identities")
def criterion_1():
    reps = nash_lab.aux_identities(d=3, lam=4.0, delta=1.0, eps_minus=0.5)
    det = {r.name: {"samples": r.samples, "max_error": r.max_error, "violations": r.violations} for r in reps}
    return all(r.ok for r in reps), det


# 2 -----------------------------------------------------------------------------------------

@_timed(2, "norm oracles")
def criterion_2():
    det = {}
    ok = True
    c, h = 0.7, 0.5
    ne = drift_norms.nash_norm_e(DriftSpec.make("constant", 3, amplitude=c), h).value
    det["constant_ne"] = (ne, 2 * c * math.sqrt(h))
    ok &= abs(ne - 2 * c * math.sqrt(h)) <= 1e-6
    alpha, mu = 1.5, 2.0
    fr = drift_norms.fractional_nash_norm(DriftSpec.make("constant", 3, amplitude=c), alpha, mu).value
    ref = c * special.gamma((alpha - 1) / 2) * mu ** (-(alpha - 1) / 2)
    det["fractional"] = (fr, ref)
    ok &= abs(fr - ref) <= 1e-5
    for p, a in ((4, 0.5), (6, 0.4), (8, 0.3)):
        spec = DriftSpec.make("lp_power", 3, amplitude=1.0, alpha=a, radius=1.0)
        v = drift_norms.nash_norm_e(spec, h).value
        bound = drift_norms.example_lp_bound(spec, p, h)
        det[f"lp_p{p}"] = (v, bound)
        ok &= v <= bound
    fin = drift_norms.nash_norm_e(DriftSpec.make("log_refined", 3, alpha=1.0), 0.25)
    div = drift_norms.nash_norm_e(DriftSpec.make("log_refined", 3, strict=False, alpha=0.4), 0.25)
    det["log_refined"] = (fin.verdict, div.verdict)
    ok &= fin.verdict == "finite" and div.verdict == "numerically_divergent"
    return ok, det


# 3 -----------------------------------------------------------------------------------------

SOLVER_N = 129
SOLVER_L = 6.0


@lru_cache(maxsize=8)
def solver_table(d, drift_amplitude=0.0, N=SOLVER_N, L=SOLVER_L):
    """Kernel slices for ``a = I`` and constant drift on the ladder ``[4 h^2, 0.5]``."""
    g = GridSpec(d, L, N)
    a = sample_matrix(MatrixSpec.make("identity", d), g)
    b = sample_drift(DriftSpec.make("constant", d, amplitude=drift_amplitude), g) if drift_amplitude else None
    op = assemble(a, b)
    lad = geometric_ladder(4 * g.h ** 2, 0.5, 6)
    return a, fundamental_solution(op, tuple([N // 2] * d), lad)


@_timed(3, "solver exactness")
def criterion_3(dims=(1, 2, 3), c=0.5):
    det = {}
    ok = True
    for d in dims:
        for amp in (0.0, c):
            _, tab = solver_table(d, amp)
            g = tab.grid
            X = g.coords()
            shift = np.zeros(d)
            shift[0] = amp
            errs = [l1_error(tab.values[0][k], kernel_r2(1.0, t, np.sum((X - shift * t) ** 2, -1), d), g)
                    for k, t in enumerate(tab.times)]
            mass = max(abs(dg.mass + dg.leak - 1) for dg in tab.diagnostics)
            det[f"d{d}_c{amp}"] = {"max_l1": max(errs), "mass_deviation": mass}
            ok &= max(errs) < 0.02 and mass < 1e-3
    return ok, det


# 4 -----------------------------------------------------------------------------------------

CHECKER = dict(sigma=1.0, xi=4.0, cell=0.5)
CHECKER_H = 0.5 / 9                     # cell edges fall midway between nodes at N = 129
CHECKER_L = 64 * CHECKER_H


@_timed(4, "Nash function plateau")
def criterion_4():
    a, tab = solver_table(3, 0.0)
    g = tab.grid
    pts = [(0, k) for k, t in enumerate(tab.times) if t >= 6 * g.h ** 2]
    tr = nash_lab.nash_N(tab, a, 2.0, pts)
    target = nash_lab.nash_N_identity(3, 1.0, 2.0)
    rel = float(np.max(np.abs(tr.scaled / target - 1)))
    det = {"target": target, "scaled": tr.scaled.tolist(), "max_rel": rel}
    ok = rel < 0.01
    plateaus = []
    ms = MatrixSpec.make("checkerboard", 2, **CHECKER)
    for N in (129, 257):
        gc = GridSpec(2, CHECKER_L, N)
        ac = sample_matrix(ms, gc)
        tc = fundamental_solution(assemble(ac, None), (N // 2, N // 2), np.geomspace(0.03, 0.2, 6))
        trc = nash_lab.nash_N(tc, ac, 8.0)
        plateaus.append(trc.plateau())
        det[f"checkerboard_N{N}"] = {"scaled": trc.scaled.tolist(),
                                     "completion_fraction": max(p["completion"] / p["value"] for p in trc.points)}
    drift = abs(plateaus[1] - plateaus[0]) / plateaus[1]
    det["plateau_drift"] = drift
    ok &= drift < 0.10 and all(np.isfinite(plateaus))
    return ok, det


# 5 -----------------------------------------------------------------------------------------

DUH = dict(lam=4.0, delta=1.5, eps=0.9, h=1.0)


def _duhamel_operator(c, N=513, L=8.0):
    g = GridSpec(1, L, N)
    a = sample_matrix(MatrixSpec.make("identity", 1), g)
    b = sample_drift(DriftSpec.make("constant", 1, amplitude=c), g) if c else None
    return g, a, assemble(a, b)


def duhamel_constants(lad, N=513, L=8.0, lam=DUH["lam"], delta=DUH["delta"], eps=DUH["eps"]):
    """Empirical ``c0`` and ``c0_hat`` for ``a = I``, ``b = 0`` in d=1.

    ``c0`` is the largest scaled Nash value on the ladder; ``c0_hat`` is the
    maximum of the hat scan, which peaks off the diagonal.
    """
    g, a, op = _duhamel_operator(0.0, N, L)
    y = (g.N // 2,)
    tab = fundamental_solution(op, y, lad)
    c0 = nash_lab.nash_N(tab, a, delta).empirical_constant()
    c0h = nash_lab.hat_scan(tab, a, delta, lam, eps, offsets=(0, 0.25, 0.5, 1, 1.5, 2, 3)).empirical_constant()
    return c0, c0h


@_timed(5, "Duhamel series")
def criterion_5():
    det = {}
    c = 0.5
    g, a, op = _duhamel_operator(c)
    y = (g.N // 2,)
    lad = geometric_ladder(4.5 * g.h ** 2, DUH["h"], 6)
    S = duhamel.duhamel_series(op, y, lad, n_terms=2)
    X = g.coords()[..., 0] - g.node(y)[0]
    errs = [float(np.sum(np.abs(S.terms[1][k] - duhamel.u1_constant_drift(c, X, t)))
                  / np.sum(np.abs(duhamel.u1_constant_drift(c, X, t)))) for k, t in enumerate(lad)]
    det["u1_max_rel_l1"] = max(errs)
    ok = max(errs) < 0.01

    c0, c0h = duhamel_constants(lad)
    det["c0"], det["c0_hat"] = c0, c0h
    unit = DriftSpec.make("constant", 1, amplitude=1.0)
    est1 = duhamel.contraction_estimate(unit, 1.0, DUH["lam"], DUH["delta"], DUH["h"], c0, c0h, epsilon=DUH["eps"])
    est3 = duhamel.contraction_estimate(DriftSpec.make("constant", 1, amplitude=3.0), 1.0, DUH["lam"],
                                        DUH["delta"], DUH["h"], c0, c0h, epsilon=DUH["eps"])
    homog = abs(est3.C_hat - 3 * est1.C_hat) / (3 * est1.C_hat)
    det["homogeneity"] = homog
    ok &= homog <= 1e-12

    A_star = duhamel.critical_amplitude(est1)
    amp = A_star / 2
    g, a, op = _duhamel_operator(amp)
    S = duhamel.duhamel_series(op, y, lad, n_terms=duhamel.MAX_TERMS, envelope=DUH["lam"])
    C = est1.C_hat * amp
    S.set_contraction(C)
    decay = S.decay_check()[:7]
    det["C_hat"] = C
    det["sup_ratios"] = S.sup_ratios[:7]
    ok &= all(decay)
    tab = fundamental_solution(op, y, lad)
    n = S.truncation
    gaps = [l1_error(S.partial_sum(k, n), tab.values[0][k], g) for k in range(len(lad))]
    det["series_vs_solver"] = max(gaps)
    det["truncation"] = n
    ok &= max(gaps) <= 0.03
    return ok, det


# 6 -----------------------------------------------------------------------------------------

@lru_cache(maxsize=2)
def checker_drift_table(amplitude=0.2, N=129):
    g = GridSpec(2, CHECKER_L, N)
    ms = MatrixSpec.make("checkerboard", 2, **CHECKER)
    a = sample_matrix(ms, g)
    b = sample_drift(DriftSpec.make("log_refined", 2, amplitude=amplitude, alpha=1.0), g)
    op = assemble(a, b)
    lad = np.geomspace(0.02, 0.3, 30)
    return ms, op, fundamental_solution(op, (N // 2, N // 2), lad)


@_timed(6, "a posteriori bounds")
def criterion_6():
    ms, op, tab = checker_drift_table()
    W = ms.window()
    det = {}
    up = bound_lab.fit_gaussian(tab, "upper", 4.4, bound_lab.SampleSpec(t_min=0.02), window=W)
    # lower samples restricted to |x - y|^2 <= radius_factor * mu * t = 6.4 t
    lo = bound_lab.fit_gaussian(tab, "lower", 0.8, bound_lab.SampleSpec(t_min=0.02, radius_factor=8.0), window=W)
    det["upper"] = (up.multiplier, up.rate, up.violations)
    det["lower"] = (lo.multiplier, lo.rate, lo.violations)
    det["lower_region"] = lo.samples["radius_factor"] * lo.diffusivity
    ok = up.ok and lo.ok and abs(det["lower_region"] - 6.4) < 1e-12
    hr = bound_lab.harnack_scan(tab, [0.0, 0.0], float(tab.times[-1]), bound_lab.HarnackParams(0.3, 0.8, 0.5, 0.5))
    det["harnack"] = (hr.K, hr.K_doubled)
    ok &= math.isfinite(hr.K) and hr.stability < 0.10
    ho = bound_lab.holder_fit(tab, (0.75, 0.25), 0.8, float(tab.times[-1]), alpha=0.5)
    det["holder"] = (ho.beta, ho.r2)
    ok &= ho.defined and 0 < ho.beta < 1 and ho.r2 > 0.9
    nt = bound_lab.operator_norms(tab, omega2=up.rate, c6=4.4)
    det["gradient_ratio"] = nt.ratio
    det["c5"] = nt.c5
    ok &= nt.ratio < 3 and nt.c5 is not None and math.isfinite(nt.c5)
    return ok, det


# 7 -----------------------------------------------------------------------------------------

@_timed(7, "mollifier trend")
def criterion_7():
    g = GridSpec(3, 2.0, 41)
    det = {}
    ok = True
    for spec in (DriftSpec.make("log_refined", 3, amplitude=1.0, alpha=1.0), DriftSpec.make("hardy", 3, delta=0.5)):
        r = drift_norms.mollifier_stability_check(spec, 0.25, [0.4, 0.2, 0.1, 0.05], g)
        det[spec.kind] = {"slope": r.slope, "excess": [x["excess"] for x in r.rungs]}
        ok &= r.ok
    return ok, det


# 8 -----------------------------------------------------------------------------------------

@_timed(8, "convergence study")
def criterion_8():
    g = GridSpec(2, CHECKER_L, 129)
    r = bound_lab.convergence_study(MatrixSpec.make("checkerboard", 2, **CHECKER),
                                    DriftSpec.make("log_refined", 2, amplitude=0.2, alpha=1.0),
                                    g, [0.1, 0.05, 0.025, 0.0125], times=(0.05, 0.1, 0.2))
    return r.ok, {"distances": r.distances}


# 9 -----------------------------------------------------------------------------------------

# configured sets and their values worked out by hand (exact decimal arithmetic)
CONSTANT_SETS = [
    {"consts": dict(d=3, sigma=1.0, xi=1.0, c1=1.0, c2=0.9, c3=1.0, c4=2.0, c5=1.0, c6=2.0, M=1.2),
     "ne": 0.3, "h": 0.5, "mu": 1.0, "C": 0.3},
    {"consts": dict(d=2, sigma=1.0, xi=4.0, c1=0.5, c2=0.8, c3=3.0, c4=4.4, c5=2.0, c6=4.4, M=1.5),
     "ne": 0.1, "h": 1.0, "mu": 2.0, "C": 0.25},
    {"consts": dict(d=1, sigma=0.5, xi=2.0, c1=0.7, c2=0.25, c3=1.5, c4=2.5, c5=0.5, c6=3.0, M=1.0),
     "ne": 0.05, "h": 0.25, "mu": 4.0, "C": 0.5},
]


HAND_VALUES = [
    {"c0": 3.5, "eta": 1.0086241951401949, "threshold": 0.7559289460184545,
     "tan_theta": 1.3995011016827192, "omega_h": 0.7133498878774648},
    {"c0": 13.0, "eta": 0.198791403657007, "threshold": 0.5817744738827396,
     "tan_theta": 1.1474207576542914, "omega_h": 1.3862943611198906},
    {"c0": 2.0, "eta": 0.10005299198079223, "threshold": 0.7905694150420949,
     "tan_theta": 0.09548149934687146, "omega_h": 4.394449154672439},
]


def derived_values(s):
    """Package results for one configured set."""
    k = drift_norms.GenericConstants(**s["consts"])
    eb = drift_norms.eta_bound(s["ne"], s["h"], s["mu"], k)
    ang = drift_norms.holomorphy_angle(eb.eta_term, k.M)
    return {"c0": k.c0, "eta": eb.eta, "threshold": eb.threshold, "tan_theta": ang.tan_theta,
            "omega_h": duhamel.omega_h(k.c3, s["C"], s["h"])}


@_timed(9, "derived-constant arithmetic")
def criterion_9(expected=None):
    """``expected`` is a list (one per set) of dicts of hand-computed values."""
    expected = expected or HAND_VALUES
    det = []
    ok = True
    for s, ref in zip(CONSTANT_SETS, expected):
        got = derived_values(s)
        errs = {k: abs(got[k] - ref[k]) / max(abs(ref[k]), 1e-300) for k in ref}
        det.append(errs)
        ok &= all(e <= 1e-15 for e in errs.values())
    return ok, {"relative_errors": det}


ALL = [criterion_1, criterion_2, criterion_3, criterion_4, criterion_5, criterion_6, criterion_7,
       criterion_8, criterion_9]


def run_all(numbers=None, report=print):
    out = []
    for fn in ALL:
        num = int(fn.__name__.rsplit("_", 1)[1])
        if numbers and num not in numbers:
            continue
        res = fn()
        out.append(res)
        if report:
            report(res.line())
    return out
