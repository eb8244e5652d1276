"""Analytic coefficient fields: drifts with known singularities and test matrices.

Each drift kind knows three things about itself:

* point values of ``b`` and ``|b|``;
* cell averages near its singular set, used in place of point samples there;
* the free heat flow of ``|b|`` and ``|b|^2`` at the origin, as a closed
  form or a one-dimensional integral in a logarithmic variable.

Every catalog drift has a magnitude that is symmetric and nonincreasing in
each coordinate separately.  The heat semigroup preserves that property, so
``sup_x e^{t Delta}|b|^p(x)`` is attained at the origin.  The norm
evaluations in :mod:`kolmolab.drift_norms` rely on this.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Mapping

import numpy as np
from scipy import integrate, special

from .errors import InputError
from .field_core import EllipticityWindow, GridSpec, SampledField

E_INV = math.exp(-1.0)


def sphere_area(d: int) -> float:
    """Surface area of the unit sphere in R^d."""
    return 2 * math.pi ** (d / 2) / math.gamma(d / 2)


# --- parameter schemas -----------------------------------------------------
# name -> (default, check, message); the check receives (value, d)

def _pos(v, d):
    return v > 0


def _nonneg(v, d):
    return v >= 0


_DRIFT_SCHEMA = {
    "zero": {},
    "constant": {
        "amplitude": (1.0, _nonneg, "amplitude >= 0"),
        "direction": (None, None, "unit direction (defaults to e1)"),
    },
    "lp_power": {
        "amplitude": (1.0, _nonneg, "amplitude >= 0"),
        "alpha": (0.5, lambda v, d: 0 <= v < d / 2, "0 <= alpha < d/2 (|b|^2 locally integrable)"),
        "radius": (1.0, _pos, "radius > 0"),
        "sign": (1.0, lambda v, d: v in (-1, 1), "sign in {-1, +1}"),
    },
    "log_refined": {
        "amplitude": (1.0, _nonneg, "amplitude >= 0"),
        "alpha": (1.0, lambda v, d: v > 0.5, "alpha > 1/2"),
        "direction": (None, None, "unit direction (defaults to e1)"),
    },
    "hardy": {
        "delta": (1.0, _nonneg, "delta >= 0"),
        "sign": (1.0, lambda v, d: v in (-1, 1), "sign in {-1, +1}"),
    },
    "kato_slab": {
        "amplitude": (1.0, _nonneg, "amplitude >= 0"),
        "alpha_p": (0.75, lambda v, d: 0 < v < 1, "0 < alpha_p < 1"),
        "direction": (None, None, "unit direction (defaults to e1)"),
    },
    "logarithmic_d": {
        "amplitude": (1.0, _nonneg, "amplitude >= 0"),
        "alpha": (0.5, lambda v, d: v > 1.0 / d, "alpha > 1/d"),
        "sign": (1.0, lambda v, d: v in (-1, 1), "sign in {-1, +1}"),
    },
}

_DRIFT_DIMS = {"hardy": (3,), "logarithmic_d": (3,)}   # minimum dimension

DRIFT_DESCRIPTIONS = {
    "zero": "b = 0",
    "constant": "b = amplitude * direction",
    "lp_power": "|b| = A |x|^-alpha on |x| < radius, radial",
    "log_refined": "|b| = A 1{|x| < 1/e} |x1|^-1/2 |log|x1||^-alpha, alpha > 1/2",
    "hardy": "b = sign sqrt(delta) (d-2)/2 |x|^-2 x, d >= 3",
    "kato_slab": "|b| = A 1{|x| < 1} |x1|^-alpha_p, 0 < alpha_p < 1",
    "logarithmic_d": "|b| = A 1{|x| < 1/e} |x|^-1 |log|x||^-alpha, alpha > 1/d, d >= 3",
}


def _unit(vec, d):
    if vec is None:
        v = np.zeros(d)
        v[0] = 1.0
        return v
    v = np.asarray(vec, dtype=float).reshape(-1)
    if v.shape != (d,):
        raise InputError(f"direction must have {d} components, got {v.size}")
    n = np.linalg.norm(v)
    if not n > 0:
        raise InputError("direction must be a nonzero vector")
    return v / n


@dataclass(frozen=True)
class DriftSpec:
    """Catalog drift: ``kind`` plus parameters in dimension ``d``.

    ``strict=False`` skips the admissibility ranges of the exponents so that
    fields just outside the class can be sampled for divergence studies; the
    inner singular integrals are then cut at a finite logarithmic depth.
    """

    kind: str
    d: int
    params: Mapping = field(default_factory=dict)
    strict: bool = True

    def __post_init__(self):
        if self.kind not in _DRIFT_SCHEMA:
            raise InputError(f"unknown drift kind {self.kind!r}; known: {sorted(_DRIFT_SCHEMA)}")
        if int(self.d) != self.d or self.d < 1:
            raise InputError(f"dimension must be a positive integer, got {self.d}")
        dmin = _DRIFT_DIMS.get(self.kind, (1,))[0]
        if self.d < dmin:
            raise InputError(f"drift kind {self.kind!r} requires d >= {dmin}")
        schema = _DRIFT_SCHEMA[self.kind]
        unknown = set(self.params) - set(schema)
        if unknown:
            raise InputError(f"unknown parameters for {self.kind!r}: {sorted(unknown)}")
        full = {}
        for name, (default, check, msg) in schema.items():
            val = self.params.get(name, default)
            if name == "direction":
                full[name] = tuple(_unit(val, self.d))
                continue
            val = float(val)
            if not math.isfinite(val):
                raise InputError(f"{self.kind}.{name} must be finite")
            exponent = name in ("alpha", "alpha_p")
            if check is not None and not check(val, self.d) and (self.strict or not exponent):
                raise InputError(f"{self.kind}: parameter {name}={val} violates {msg}")
            full[name] = val
        object.__setattr__(self, "params", MappingProxyType(full))

    @classmethod
    def make(cls, kind, d, strict=True, **params):
        return cls(kind, d, dict(params), strict)

    def __hash__(self):
        return hash((self.kind, self.d, tuple(sorted(self.params.items())), self.strict))

    def __getitem__(self, key):
        return self.params[key]

    # --- structure --------------------------------------------------------
    @property
    def family(self) -> str:
        if self.kind in ("zero", "constant"):
            return "flat"
        if self.kind in ("log_refined", "kato_slab"):
            return "slab"
        return "radial"

    def _profile(self):
        """Profile data ``(amplitude, q1, beta1, support radius)`` with
        ``|b| = A r^-q1 |log r|^-beta1`` on ``r < R`` (r = |x| or |x1|)."""
        k, p = self.kind, self.params
        if k == "lp_power":
            return p["amplitude"], p["alpha"], 0.0, p["radius"]
        if k == "hardy":
            c = math.sqrt(p["delta"]) * (self.d - 2) / 2
            return c, 1.0, 0.0, math.inf
        if k == "logarithmic_d":
            return p["amplitude"], 1.0, p["alpha"], E_INV
        if k == "log_refined":
            return p["amplitude"], 0.5, p["alpha"], E_INV
        if k == "kato_slab":
            return p["amplitude"], p["alpha_p"], 0.0, 1.0
        raise InputError(f"{k} has no singular profile")

    def magnitude(self, x) -> np.ndarray:
        """Point values of ``|b|`` at points ``x`` (last axis of length d)."""
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.d:
            raise InputError(f"points must have {self.d} coordinates")
        if self.kind == "zero":
            return np.zeros(x.shape[:-1])
        if self.kind == "constant":
            return np.full(x.shape[:-1], self.params["amplitude"])
        A, q, beta, R = self._profile()
        r_all = np.sqrt(np.sum(x * x, axis=-1))
        r = r_all if self.family == "radial" else np.abs(x[..., 0]) if self.kind == "kato_slab" \
            else np.abs(x[..., 0])
        with np.errstate(divide="ignore", invalid="ignore"):
            val = A * r ** (-q)
            if beta:
                val = val * np.abs(np.log(r)) ** (-beta)
        inside = (r_all < R) if self.family == "slab" else (r < R)
        val = np.where(inside, val, 0.0)
        return np.where(r == 0, np.inf, val) if A > 0 else np.zeros_like(val)

    def vector(self, x) -> np.ndarray:
        """Point values of ``b``; infinite entries at singular points."""
        x = np.asarray(x, dtype=float)
        mag = self.magnitude(x)
        if self.family in ("flat", "slab"):
            e = np.asarray(self.params.get("direction", _unit(None, self.d)))
            return mag[..., None] * e
        r = np.sqrt(np.sum(x * x, axis=-1))
        sign = self.params["sign"]
        with np.errstate(divide="ignore", invalid="ignore"):
            out = sign * mag[..., None] * x / r[..., None]
        return np.where((r == 0)[..., None], 0.0, out)

    # --- cell averages ------------------------------------------------------
    def singular_distance(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.family == "radial":
            return np.sqrt(np.sum(x * x, axis=-1))
        if self.family == "slab":
            return np.abs(x[..., 0])
        return np.full(x.shape[:-1], np.inf)

    def singular_mask(self, grid: GridSpec, width: float = 1.5) -> np.ndarray:
        """Nodes within ``width * h`` of the singular set get cell averages."""
        if self.family == "flat":
            return np.zeros(grid.shape, dtype=bool)
        A = self._profile()[0]
        if A == 0:
            return np.zeros(grid.shape, dtype=bool)
        return self.singular_distance(grid.coords()) <= width * grid.h + 1e-12 * grid.h

    def cell_average(self, center, h, what="sq", inner_cutoff=None):
        """Average of ``|b|^2`` ("sq"), ``|b|`` ("abs") or ``b`` ("vector") over
        the cube of side h centered at ``center``."""
        center = np.asarray(center, dtype=float)
        power = {"sq": 2, "abs": 1, "vector": 1}[what]
        if self.family == "flat":
            c = self.params.get("amplitude", 0.0)
            if what == "vector":
                return self.vector(center[None])[0]
            return c ** power
        if self.family == "slab":
            return self._slab_cell(center, h, power, what, inner_cutoff)
        return self._radial_cell(center, h, power, what, inner_cutoff)

    def _slab_cell(self, center, h, power, what, inner_cutoff):
        A, q, beta, R = self._profile()
        if np.sum(center ** 2) >= R ** 2:
            val = 0.0
        else:
            a, b = center[0] - h / 2, center[0] + h / 2
            val = A ** power * _profile_interval(a, b, power * q, power * beta, R,
                                                 inner_cutoff) / h
        if what == "vector":
            return val * np.asarray(self.params["direction"])
        return val

    def _radial_cell(self, center, h, power, what, inner_cutoff, n_s=48, n_y=16):
        A, q, beta, R = self._profile()
        d = self.d
        qq, bb = power * q, power * beta
        contains = bool(np.all(np.abs(center) <= h / 2 + 1e-14 * h))
        if not contains:
            # smooth across the cell: tensor Gauss-Legendre
            xg, wg = np.polynomial.legendre.leggauss(12)
            pts = np.stack(np.meshgrid(*([xg * h / 2] * d), indexing="ij"), -1).reshape(-1, d)
            wts = np.prod(np.stack(np.meshgrid(*([wg / 2] * d), indexing="ij"), -1).reshape(-1, d), -1)
            y = center + pts
            if what == "vector":
                return np.sum(self.vector(y) * wts[:, None], axis=0)
            return float(np.sum(self.magnitude(y) ** power * wts))
        if what == "vector":
            return np.zeros(d)      # symmetric cell around the singular point
        # pyramids with apex at the origin over each of the 2d faces
        m = max(4, int(math.ceil(4.0 / max(d - qq, 1e-3))))
        w1, v1 = np.polynomial.legendre.leggauss(n_s)
        w = (w1 + 1) / 2
        s = w ** m
        jac_s = (v1 / 2) * m * w ** (m - 1)
        if d == 1:
            rho = np.array([h / 2])
            wy = np.array([1.0])
        else:
            yg, wyg = np.polynomial.legendre.leggauss(n_y)
            Y = np.stack(np.meshgrid(*([yg * h / 2] * (d - 1)), indexing="ij"), -1).reshape(-1, d - 1)
            wy = np.prod(np.stack(np.meshgrid(*([wyg * h / 2] * (d - 1)), indexing="ij"), -1)
                         .reshape(-1, d - 1), -1)
            rho = np.sqrt((h / 2) ** 2 + np.sum(Y ** 2, -1))
        r = s[None, :] * rho[:, None]
        with np.errstate(divide="ignore"):
            f = r ** (-qq)
            if bb:
                f = f * np.abs(np.log(r)) ** (-bb)
        f = np.where(r < R, f, 0.0)
        if inner_cutoff is not None:
            f = np.where(-np.log(r) <= inner_cutoff, f, 0.0)
        inner = np.sum(f * (s ** (d - 1) * jac_s)[None, :], axis=1) * (h / 2)
        total = 2 * d * np.sum(inner * wy)
        return float(A ** power * total / h ** d)

    # --- heat flow at the origin ---------------------------------------------
    def log_heat_origin(self, power: int, logt, level=None):
        """``log e^{t Delta}|b|^power (0)`` for arrays of ``log t``.

        ``level`` bounds the inner singular integral at logarithmic depth
        ``u <= level`` (``u = log(1/r)``); ``None`` means no cut.
        """
        logt = np.atleast_1d(np.asarray(logt, dtype=float))
        if self.kind == "zero":
            return np.full(logt.shape, -np.inf)
        if self.kind == "constant":
            c = self.params["amplitude"]
            return np.full(logt.shape, power * math.log(c) if c > 0 else -np.inf)
        A, q, beta, R = self._profile()
        if A == 0:
            return np.full(logt.shape, -np.inf)
        d = self.d
        qq, bb = power * q, power * beta
        if self.kind == "hardy" and level is None:
            if power == 2:
                return 2 * math.log(A) - math.log(2 * (d - 2)) - logt
            return (math.log(A) + math.lgamma((d - 1) / 2) - math.lgamma(d / 2)
                    - 0.5 * math.log(4.0) - 0.5 * logt)
        if self.kind == "lp_power" and level is None and qq < d:
            x = R ** 2 / (4 * np.exp(logt))
            a = (d - qq) / 2
            with np.errstate(divide="ignore"):
                lp = np.log(special.gammainc(a, x))
            return (power * math.log(A) + math.log(sphere_area(d)) - 0.5 * d * math.log(4 * math.pi)
                    - 0.5 * d * logt - math.log(2.0) + a * (math.log(4.0) + logt)
                    + math.lgamma(a) + lp)
        out = np.empty(logt.shape)
        for i, lt in enumerate(logt):
            if self.family == "radial":
                pref = (power * math.log(A) + math.log(sphere_area(d)) - 0.5 * d * math.log(math.pi)
                        - 0.5 * qq * (math.log(4.0) + lt))
                li = _log_w_integral(lt, d, qq, bb, R, level, None)
            else:
                pref = (power * math.log(A) + math.log(2.0) - 0.5 * math.log(math.pi)
                        - 0.5 * qq * (math.log(4.0) + lt))
                li = _log_w_integral(lt, 1, qq, bb, R, level, (d - 1) / 2 if d > 1 else None)
            out[i] = pref + li
        return out

    def heat_at(self, power: int, t: float, x) -> float:
        """``e^{t Delta}|b|^power (x)`` at one point, radial kinds only."""
        x = np.asarray(x, dtype=float).reshape(self.d)
        rho = float(np.linalg.norm(x))
        if self.family == "flat":
            return float(self.params.get("amplitude", 0.0) ** power)
        if rho == 0 or self.family != "radial":
            if rho == 0:
                return float(np.exp(self.log_heat_origin(power, math.log(t))[0]))
            raise InputError("pointwise heat flow is available for radial kinds only")
        A, q, beta, R = self._profile()
        d = self.d
        if self.kind == "hardy" and d == 3 and power == 2:
            u = rho / (2 * math.sqrt(t))
            return float(A ** 2 * special.dawsn(u) / (rho * math.sqrt(t)))
        nu = d / 2 - 1

        def f(r):
            prof = r ** (-power * q) * (abs(math.log(r)) ** (-power * beta) if beta else 1.0)
            return (r ** (d / 2) * prof * math.exp(-(r - rho) ** 2 / (4 * t))
                    * special.ive(nu, r * rho / (2 * t)))
        top = min(R, rho + 40 * math.sqrt(t))
        lo = max(0.0, rho - 40 * math.sqrt(t))
        pts = sorted({p for p in (lo, rho, top) if 0 <= p <= top})
        total = 0.0
        edges = [0.0] + [p for p in pts if p > 0]
        for a, b in zip(edges[:-1], edges[1:]):
            if b > a:
                val, _ = integrate.quad(f, a, b, epsabs=0, epsrel=1e-12, limit=400)
                total += val
        return float(A ** power * total * rho ** (1 - d / 2) / (2 * t))

    def lp_norm(self, p: float) -> float:
        """Continuum ``||b||_p`` for kinds with a closed profile."""
        if self.kind == "zero":
            return 0.0
        if self.kind in ("constant", "hardy"):
            return math.inf if self.params.get("amplitude", 1.0) or self.kind == "hardy" else 0.0
        A, q, beta, R = self._profile()
        d = self.d
        if self.kind == "lp_power":
            if q * p >= d:
                return math.inf
            return float(A * (sphere_area(d) * R ** (d - q * p) / (d - q * p)) ** (1 / p))
        if self.kind == "logarithmic_d":
            # r = e^{-u}: int_1^inf e^{-(d - p) u} u^{-p alpha} du
            k = d - p * q
            if k < 0 or (k == 0 and p * beta <= 1):
                return math.inf
            if k == 0:
                val = 1.0 / (p * beta - 1)
            else:
                val, _ = integrate.quad(lambda u: math.exp(-k * (u - 1)) * u ** (-p * beta),
                                        1, np.inf, epsrel=1e-12)
                val *= math.exp(-k)
            return float(A * (sphere_area(d) * val) ** (1 / p))
        raise InputError(f"no closed-form L^p norm for {self.kind}")


def _profile_interval(a, b, qq, bb, R, inner_cutoff=None):
    """``int_a^b s_prof(|s|) ds`` with ``s_prof(r) = r^-qq |log r|^-bb 1{r<R}``."""
    total = 0.0
    for lo, hi in ((a, min(b, 0.0)), (max(a, 0.0), b)):
        if hi <= lo:
            continue
        lo_abs, hi_abs = sorted((abs(lo), abs(hi)))
        hi_abs = min(hi_abs, R)
        if hi_abs <= lo_abs:
            continue
        total += _radial_1d(lo_abs, hi_abs, qq, bb, inner_cutoff)
    return total


def _radial_1d(lo, hi, qq, bb, inner_cutoff=None):
    """``int_lo^hi r^-qq |log r|^-bb dr`` in the variable u = log(1/r)."""
    u_hi = -math.log(hi)
    u_lo = math.inf if lo == 0 else -math.log(lo)
    if inner_cutoff is not None:
        u_lo = min(u_lo, inner_cutoff)
    if u_lo <= u_hi:
        return 0.0
    kappa = 1.0 - qq

    def g(u):
        return math.exp(-kappa * u) * (u ** (-bb) if bb else 1.0)
    if kappa == 0:
        if bb == 1:
            return math.log(u_lo / u_hi) if math.isfinite(u_lo) else math.inf
        if math.isinf(u_lo):
            return u_hi ** (1 - bb) / (bb - 1) if bb > 1 else math.inf
        return (u_lo ** (1 - bb) - u_hi ** (1 - bb)) / (1 - bb)
    if kappa < 0 and math.isinf(u_lo):
        return math.inf
    val, _ = integrate.quad(g, u_hi, u_lo, epsabs=0, epsrel=1e-11, limit=400)
    return val


def _log_w_integral(lt, d_eff, qq, bb, R, level, slab_a):
    """Log of ``int e^{-(d_eff - qq) w} u^{-bb} exp(-e^{-2w}) G(u) dw``.

    The variable is ``u = log(1/r) = u* + w`` with ``u* = log(1/(4t))/2``,
    so ``e^{-r^2/(4t)} = exp(-e^{-2w})``.  ``G`` is the transverse mass of the
    ball of radius R at height r (slab kinds, ``slab_a = (d-1)/2``).
    """
    ustar = 0.5 * (-lt - math.log(4.0))
    u_R = -math.log(R) if math.isfinite(R) else -math.inf
    w0 = u_R - ustar
    W = math.inf if level is None else level - ustar
    kappa = d_eff - qq
    wa = max(w0, -5.0)
    if W <= wa:
        return -math.inf
    wb = min(max(wa, 25.0), W)

    def G(u):
        if slab_a is None:
            return 1.0
        rem = R ** 2 - math.exp(-2 * u)
        if rem <= 0:
            return 0.0
        with np.errstate(over="ignore"):
            x = rem * math.exp(min(2 * ustar, 700.0))
        return float(special.gammainc(slab_a, x))

    def powlog(u):
        return u ** (-bb) if bb else 1.0

    def f(w):
        u = ustar + w
        return math.exp(-kappa * w - math.exp(-2 * w)) * powlog(u) * G(u)
    # breakpoints where the transverse factor switches on
    pts = [p for p in (0.0, w0 + 1e-9 if math.isfinite(w0) else None) if p is not None and wa < p < wb]
    main, _ = integrate.quad(f, wa, wb, points=pts or None, epsabs=0, epsrel=1e-11, limit=400)
    logs = [math.log(main) if main > 0 else -math.inf]
    if W > wb:
        c = ustar
        g_inf = G(ustar + wb) if slab_a is not None else 1.0
        if kappa > 0:
            span = min(W - wb, 80.0 / kappa)
            tail, _ = integrate.quad(lambda y: math.exp(-kappa * y) * powlog(c + wb + y),
                                     0, span, epsabs=0, epsrel=1e-11, limit=400)
            logs.append(-kappa * wb + math.log(tail * g_inf) if tail > 0 else -math.inf)
        elif kappa == 0:
            if bb == 1:
                val = math.inf if math.isinf(W) else math.log((c + W) / (c + wb))
            elif math.isinf(W):
                val = (c + wb) ** (1 - bb) / (bb - 1) if bb > 1 else math.inf
            else:
                val = ((c + W) ** (1 - bb) - (c + wb) ** (1 - bb)) / (1 - bb)
            logs.append(math.log(val * g_inf) if val > 0 else -math.inf)
        else:
            if bb:
                raise InputError("growing singular profile with a log factor is not supported")
            if math.isinf(W):
                return math.inf
            k = -kappa
            # (e^{kW} - e^{k wb}) / k, in logs
            logs.append(k * W + math.log(-math.expm1(-k * (W - wb))) - math.log(k) + math.log(g_inf))
    arr = np.array(logs)
    if np.any(np.isposinf(arr)):
        return math.inf
    return float(special.logsumexp(arr))


# --- sampling ----------------------------------------------------------------

def sample_drift(spec: DriftSpec, grid: GridSpec, what: str = "vector",
                 inner_cutoff=None) -> SampledField:
    """Sample a catalog drift on a grid.

    ``what="vector"`` returns ``b``; ``"abs"`` and ``"sq"`` return scalar fields of
    ``|b|`` and ``|b|^2``.  Nodes near the singular set carry cell averages
    of the requested quantity.
    """
    if spec.d != grid.d:
        raise InputError(f"drift dimension {spec.d} does not match grid dimension {grid.d}")
    if what not in ("vector", "abs", "sq"):
        raise InputError(f"unknown sample kind {what!r}")
    if spec.strict is False and inner_cutoff is None and spec.family != "flat":
        inner_cutoff = 30.0
    X = grid.coords()
    with np.errstate(invalid="ignore"):
        if what == "vector":
            vals = spec.vector(X)
        else:
            vals = spec.magnitude(X) ** (2 if what == "sq" else 1)
    mask = spec.singular_mask(grid)
    h = grid.h
    cache = {}
    for idx in map(tuple, np.argwhere(mask)):
        c = X[idx]
        # slab averages depend on x1 and on ball membership only
        key = (round(float(c[0]) / h), bool(np.sum(c ** 2) < spec._profile()[3] ** 2)) \
            if spec.family == "slab" else None
        if key is not None and key in cache and what != "vector":
            vals[idx] = cache[key]
            continue
        v = spec.cell_average(c, h, what, inner_cutoff)
        if key is not None:
            cache[key] = v
        vals[idx] = v
    vals = np.where(np.isfinite(vals), vals, 0.0)
    rank = "vector" if what == "vector" else "scalar"
    if rank == "scalar" and not np.all(np.isfinite(vals)):
        raise InputError("sampled drift is not finite")
    return SampledField(grid, vals, rank)


# --- matrices ------------------------------------------------------------------

_MATRIX_SCHEMA = {
    "identity": {},
    "scaled_identity": {"mu": 1.0},
    "checkerboard": {"sigma": 1.0, "xi": 4.0, "cell": 0.5},
    "smooth_anisotropic": {"sigma": 1.0, "xi": 2.0, "angle": 0.3, "wavelength": 2.0},
}

MATRIX_DESCRIPTIONS = {
    "identity": "a = I",
    "scaled_identity": "a = mu I",
    "checkerboard": "a = sigma I or xi I on alternating cubes of side `cell`, "
                    "cube faces at (k + 1/2) cell",
    "smooth_anisotropic": "a = Q(x) diag(lambda(x)) Q(x)^T with eigenvalues inside (sigma, xi)",
}


@dataclass(frozen=True)
class MatrixSpec:
    kind: str
    d: int
    params: Mapping = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in _MATRIX_SCHEMA:
            raise InputError(f"unknown matrix kind {self.kind!r}; known: {sorted(_MATRIX_SCHEMA)}")
        unknown = set(self.params) - set(_MATRIX_SCHEMA[self.kind])
        if unknown:
            raise InputError(f"unknown parameters for {self.kind!r}: {sorted(unknown)}")
        full = {k: float(self.params.get(k, v)) for k, v in _MATRIX_SCHEMA[self.kind].items()}
        if "mu" in full and not full["mu"] > 0:
            raise InputError("scaled_identity: mu must be positive")
        if "sigma" in full and not 0 < full["sigma"] < full["xi"]:
            raise InputError(f"{self.kind}: need 0 < sigma < xi")
        for k in ("cell", "wavelength"):
            if k in full and not full[k] > 0:
                raise InputError(f"{self.kind}: {k} must be positive")
        object.__setattr__(self, "params", MappingProxyType(full))

    @classmethod
    def make(cls, kind, d, **params):
        return cls(kind, d, dict(params))

    def __hash__(self):
        return hash((self.kind, self.d, tuple(sorted(self.params.items()))))

    def window(self) -> EllipticityWindow:
        p = self.params
        if self.kind == "identity":
            return EllipticityWindow(1.0, 1.0)
        if self.kind == "scaled_identity":
            return EllipticityWindow(p["mu"], p["mu"])
        return EllipticityWindow(p["sigma"], p["xi"])

    def full(self, x) -> np.ndarray:
        """Matrix values at points ``x``, shape ``x.shape[:-1] + (d, d)``."""
        x = np.asarray(x, dtype=float)
        d = self.d
        base = x.shape[:-1]
        p = self.params
        if self.kind in ("identity", "scaled_identity"):
            mu = p.get("mu", 1.0)
            return np.broadcast_to(mu * np.eye(d), base + (d, d)).copy()
        if self.kind == "checkerboard":
            k = np.floor(x / p["cell"] + 0.5).astype(int)
            odd = (np.sum(k, axis=-1) % 2) == 1
            lam = np.where(odd, p["xi"], p["sigma"])
            return lam[..., None, None] * np.eye(d)
        # smooth_anisotropic
        sig, xi, L = p["sigma"], p["xi"], p["wavelength"]
        lam = np.stack([sig + (xi - sig) * (0.5 + 0.45 * np.cos(2 * np.pi * x[..., k % d] / L + k))
                        for k in range(d)], axis=-1)
        out = lam[..., :, None] * np.eye(d)
        if d >= 2:
            th = p["angle"] + 0.5 * np.sin(2 * np.pi * x[..., 0] / L)
            Q = np.broadcast_to(np.eye(d), base + (d, d)).copy()
            Q[..., 0, 0] = np.cos(th)
            Q[..., 0, 1] = -np.sin(th)
            Q[..., 1, 0] = np.sin(th)
            Q[..., 1, 1] = np.cos(th)
            out = Q @ out @ np.swapaxes(Q, -1, -2)
            out = 0.5 * (out + np.swapaxes(out, -1, -2))
        return out


def sample_matrix(spec: MatrixSpec, grid: GridSpec) -> SampledField:
    """Sample a matrix field; the result passes the ellipticity probe check."""
    if spec.d != grid.d:
        raise InputError(f"matrix dimension {spec.d} does not match grid dimension {grid.d}")
    a = SampledField(grid, spec.full(grid.coords()), "matrix")
    spec.window().check(a)
    return a


def catalog_listing(dimension=None):
    """Rows describing every drift and matrix kind with its parameter ranges."""
    rows = []
    for kind, schema in _DRIFT_SCHEMA.items():
        dmin = _DRIFT_DIMS.get(kind, (1,))[0]
        if dimension is not None and dimension < dmin:
            continue
        rows.append({
            "family": "drift", "kind": kind, "min_dimension": dmin,
            "description": DRIFT_DESCRIPTIONS[kind],
            "parameters": {k: {"default": (None if v[0] is None else v[0]), "range": v[2]}
                           for k, v in schema.items()},
        })
    for kind, schema in _MATRIX_SCHEMA.items():
        rows.append({
            "family": "matrix", "kind": kind, "min_dimension": 1,
            "description": MATRIX_DESCRIPTIONS[kind],
            "parameters": {k: {"default": v, "range": "0 < sigma < xi" if k in ("sigma", "xi")
                               else "> 0"} for k, v in schema.items()},
        })
    return rows
