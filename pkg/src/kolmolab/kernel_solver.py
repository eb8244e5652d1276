"""Finite-volume discretization of ``-div(a grad) + b.grad`` and its heat kernel.

The grid nodes are the unknowns.  Diffusion uses two-point fluxes through
cell faces with the harmonic mean of the normal diffusivity ``a_kk`` on the
two sides (off-diagonal entries of ``a`` are not seen by this stencil).  The
drift term is a node-centered difference; when the local Peclet number
exceeds one, artificial diffusion ``a (Pe coth Pe - 1)`` is added, which is
exact for constant coefficients in 1-D and keeps all off-diagonal entries
nonpositive.  Outside the box the solution is zero (absorbing boundary).

Kernel slices come in two orientations.  ``u(t, ., y)`` evolves under the
operator ``L`` from a delta at ``y``.  ``u(t, x, .)`` evolves under ``L^T``
from a delta at ``x``; its grid mass is conserved up to boundary outflow,
which is the discrete version of probability conservation.
"""
from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import InputError, NumericalError, ResolutionError
from .field_core import EllipticityWindow, GridSpec, SampledField, kernel_r2

DIRECT_LIMIT = 250_000      # unknowns up to which sparse LU is used
TABLE_MAGIC = b"KTBL"
TABLE_VERSION = 1


@dataclass(frozen=True)
class DriftScheme:
    """``"auto"``: centered when ``|Pe| <= 1``, exponential fitting otherwise.
    ``"centered"`` and ``"fitted"`` force one branch everywhere."""

    kind: str = "auto"

    def __post_init__(self):
        if self.kind not in ("auto", "centered", "fitted"):
            raise InputError(f"unknown drift scheme {self.kind!r}")


def _coth_fit(pe):
    """``Pe coth Pe``, equal to 1 at 0."""
    pe = np.abs(pe)
    out = np.ones_like(pe)
    big = pe > 1e-8
    out[big] = pe[big] / np.tanh(pe[big])
    return out


class DiscreteOperator:
    """Sparse matrix ``L`` for ``-div(a grad) + b.grad`` on a grid.

    Attributes
    ----------
    L : csr_matrix
        Full operator.
    D : csr_matrix
        Diffusion part (the operator with ``b = 0``).
    faces : list of ndarray
        Harmonic face diffusivities per axis, shape ``(N+1,)`` along that axis.
    max_peclet : float
    """

    def __init__(self, grid, a, b, scheme, L, D, faces, max_peclet, boundary_mask):
        self.grid = grid
        self.a = a
        self.b = b
        self.scheme = scheme
        self.L = L
        self.D = D
        self.faces = faces
        self.max_peclet = max_peclet
        self.boundary_mask = boundary_mask
        self.has_drift = b is not None and bool(np.any(b.values != 0))
        self._solvers = {}

    @property
    def B(self):
        """Drift part ``L - D`` (includes any artificial diffusion)."""
        return (self.L - self.D).tocsr()

    @property
    def symmetric(self) -> bool:
        return not self.has_drift

    def apply(self, u: np.ndarray, transpose=False) -> np.ndarray:
        M = self._csr_T if transpose else self.L
        return (M @ u.reshape(-1)).reshape(self.grid.shape)

    def colsum(self, transpose=False):
        M = self.L.T if transpose else self.L
        return np.asarray(M.sum(axis=0)).reshape(-1)

    def solver(self, coef: float, transpose=False):
        """Solver for ``(I + coef L) x = r`` (or with ``L^T``).

        Sparse LU factorizations are cached by ``coef``; large systems use a
        Jacobi-preconditioned Krylov method on the shared matrix instead.
        """
        key = (float(coef), bool(transpose))
        s = self._solvers.get(key)
        if s is None:
            M = self._csr_T if transpose else self.L
            s = _LinearSolver(M, coef, self.symmetric)
            if s.direct:
                if len(self._solvers) > 32:
                    self._solvers.clear()
                self._solvers[key] = s
        return s

    @property
    def _csr_T(self):
        if getattr(self, "_LT", None) is None:
            self._LT = self.L.T.tocsr()
        return self._LT


class _LinearSolver:
    def __init__(self, M, coef, symmetric):
        self.symmetric = symmetric
        n = M.shape[0]
        self.direct = n <= DIRECT_LIMIT
        if self.direct:
            A = (sp.identity(n, format="csc") + coef * M).tocsc()
            self.lu = spla.splu(A)
        else:
            dinv = 1.0 / (1.0 + coef * M.diagonal())
            self.A = spla.LinearOperator((n, n), matvec=lambda x: x + coef * (M @ x), dtype=float)
            self.M = spla.LinearOperator((n, n), matvec=lambda x: dinv * x, dtype=float)

    def solve(self, r, x0=None, rtol=1e-10):
        if self.direct:
            return self.lu.solve(r)
        hist = []

        def cb(xk):
            hist.append(float(np.linalg.norm(r - self.A @ xk)))
        method = spla.cg if self.symmetric else spla.bicgstab
        x, info = method(self.A, r, x0=x0, rtol=rtol, atol=0.0, M=self.M, maxiter=5000)
        if info != 0:
            # rerun briefly to collect the residual trail for the report
            method(self.A, r, x0=x0, rtol=rtol, atol=0.0, M=self.M, maxiter=200, callback=cb)
            raise NumericalError(f"iterative solve did not converge (info={info})", hist)
        return x


def assemble(a: SampledField, b: Optional[SampledField], grid: GridSpec = None,
             scheme: DriftScheme = None, window: EllipticityWindow = None) -> DiscreteOperator:
    """Assemble the discrete operator.

    Parameters
    ----------
    a : SampledField
        Symmetric-matrix samples; only the diagonal enters the fluxes.
    b : SampledField or None
        Vector drift samples.
    grid : GridSpec, optional
        Must match the fields' grid when given.
    scheme : DriftScheme, optional
    window : EllipticityWindow, optional
        Checked against ``a`` when given.
    """
    grid = grid or a.grid
    scheme = scheme or DriftScheme()
    if a.rank != "matrix":
        raise InputError("a must be a symmetric-matrix field")
    if a.grid != grid or (b is not None and b.grid != grid):
        raise InputError("coefficient fields and grid do not match")
    if b is not None and b.rank != "vector":
        raise InputError("b must be a vector field")
    if window is not None:
        window.check(a)
    A = a.full_matrix()
    d, N, h = grid.d, grid.N, grid.h
    n = grid.size
    idx = np.arange(n).reshape(grid.shape)
    rows, cols, vals = [], [], []
    drows, dcols, dvals = [], [], []
    diag = np.zeros(grid.shape)
    ddiag = np.zeros(grid.shape)
    boundary = np.zeros(grid.shape, dtype=bool)
    faces = []
    max_pe = 0.0
    for k in range(d):
        akk = np.moveaxis(A[..., k, k], k, 0)
        if np.any(akk <= 0):
            raise InputError("diagonal of a must be positive")
        # interior faces between i and i+1, plus the two boundary faces
        inner = 2 * akk[1:] * akk[:-1] / (akk[1:] + akk[:-1])
        fplus = np.concatenate([inner, akk[-1:]], axis=0)    # face to i+1
        fminus = np.concatenate([akk[:1], inner], axis=0)   # face to i-1
        faces.append(np.concatenate([akk[:1], inner, akk[-1:]], axis=0))
        if b is not None:
            bk = np.moveaxis(b.values[..., k], k, 0)
        else:
            bk = np.zeros_like(akk)
        abar = np.minimum(fplus, fminus)
        pe = bk * h / (2 * abar)
        max_pe = max(max_pe, float(np.max(np.abs(pe))) if pe.size else 0.0)
        if scheme.kind == "centered":
            art = np.zeros_like(pe)
        else:
            rho = _coth_fit(pe)
            art = abar * (rho - 1)
            if scheme.kind == "auto":
                art = np.where(np.abs(pe) > 1, art, 0.0)
        up = -(fplus + art) / h ** 2 + bk / (2 * h)
        dn = -(fminus + art) / h ** 2 - bk / (2 * h)
        dg = (fplus + fminus + 2 * art) / h ** 2
        diag += np.moveaxis(dg, 0, k)
        ddiag += np.moveaxis((fplus + fminus) / h ** 2, 0, k)
        I = np.moveaxis(idx, k, 0)
        bd = np.zeros(akk.shape, dtype=bool)
        bd[0] = bd[-1] = True
        boundary |= np.moveaxis(bd, 0, k)
        # neighbor i+1
        src, dst = I[:-1].ravel(), I[1:].ravel()
        rows += [src, dst]
        cols += [dst, src]
        vals += [up[:-1].ravel(), dn[1:].ravel()]
        drows += [src, dst]
        dcols += [dst, src]
        dvals += [(-fplus[:-1] / h ** 2).ravel(), (-fminus[1:] / h ** 2).ravel()]
    rows.append(idx.ravel())
    cols.append(idx.ravel())
    vals.append(diag.ravel())
    drows.append(idx.ravel())
    dcols.append(idx.ravel())
    dvals.append(ddiag.ravel())
    L = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
    D = sp.csr_matrix((np.concatenate(dvals), (np.concatenate(drows), np.concatenate(dcols))),
                      shape=(n, n))
    return DiscreteOperator(grid, a, b, scheme, L, D, faces, max_pe, boundary)


# --- time stepping ---------------------------------------------------------------------

STEPPERS = ("implicit_euler", "crank_nicolson")


def _step_values(op, u, dt, stepper, transpose=False):
    if stepper == "implicit_euler":
        rhs = u.reshape(-1)
        x = op.solver(dt, transpose).solve(rhs, x0=rhs)
    elif stepper == "crank_nicolson":
        M = op._csr_T if transpose else op.L
        rhs = u.reshape(-1) - 0.5 * dt * (M @ u.reshape(-1))
        x = op.solver(0.5 * dt, transpose).solve(rhs, x0=u.reshape(-1))
    else:
        raise InputError(f"unknown stepper {stepper!r}; use one of {STEPPERS}")
    return x.reshape(op.grid.shape)


def step(op: DiscreteOperator, u: SampledField, dt: float, stepper="implicit_euler",
         transpose=False) -> SampledField:
    """One time step of ``du/dt = -L u``.

    Implicit Euler preserves positivity (M-matrix); Crank-Nicolson is
    second order but may produce small negative values.
    """
    if not dt > 0:
        raise InputError(f"dt must be positive, got {dt}")
    if u.grid != op.grid or u.rank != "scalar":
        raise InputError("u must be a scalar field on the operator grid")
    return SampledField(op.grid, _step_values(op, u.values, dt, stepper, transpose))


@dataclass(frozen=True)
class DtPolicy:
    """Geometric step sizes ``dt ~ ratio * t``, quantized to ``dt_min 2^(j/levels)``.

    Crank-Nicolson runs start with ``startup`` implicit Euler steps, shorter
    by ``startup_ratio``, to damp the non-smooth initial data.
    """

    ratio: float = 0.15
    dt_min: Optional[float] = None
    dt_max: float = math.inf
    levels: int = 4
    startup: int = 2
    startup_ratio: float = 0.1

    def __post_init__(self):
        if not 0 < self.ratio <= 1:
            raise InputError("dt ratio must lie in (0, 1]")

    def quantize(self, dt, dt_min):
        j = math.floor(self.levels * math.log2(max(dt, dt_min) / dt_min) + 1e-9)
        return min(dt_min * 2.0 ** (j / self.levels), self.dt_max)


def _schedule(t, targets, policy, stepper):
    """Step plan from time t through every target.

    Yields ``(dt, kind)`` for each step and ``(None, i)`` on reaching target i.
    """
    dt_min = policy.dt_min or max(targets[0] * 1e-3, 1e-14)
    nstep = 0
    for i, target in enumerate(targets):
        while t < target * (1 - 1e-13):
            kind = stepper
            ratio = policy.ratio
            if stepper == "crank_nicolson" and nstep < policy.startup:
                kind = "implicit_euler"
                ratio = policy.ratio * policy.startup_ratio
            dt = policy.quantize(ratio * t if t > 0 else dt_min, dt_min)
            if t + dt > target * (1 - 1e-9) or target - (t + dt) < 0.1 * dt:
                dt = target - t
            yield dt, kind
            t = t + dt
            nstep += 1
        yield None, i


def _march(op, u, t, targets, policy, stepper, transpose, on_step=None):
    """Advance ``u`` from time t through every target time; yields snapshots."""
    nstep = 0
    csum = op.colsum(transpose)
    bmask = op.boundary_mask.reshape(-1)
    leak = 0.0
    source = 0.0
    out = []
    for dt, kind in _schedule(t, targets, policy, stepper):
        if dt is None:
            out.append((targets[kind], u.copy(), leak * op.grid.cell_volume, source * op.grid.cell_volume))
            continue
        new = _step_values(op, u, dt, kind, transpose)
        # mass balance: loss = dt c.u+ (IE) or dt/2 c.(u + u+) (CN)
        flux = new.reshape(-1) if kind == "implicit_euler" else 0.5 * (new + u).reshape(-1)
        lost = dt * csum * flux
        leak += float(np.sum(lost[bmask]))
        source += float(np.sum(lost[~bmask]))
        if on_step is not None:
            on_step(u, new, dt, kind)
        u = new
        nstep += 1
    return out, nstep


@dataclass
class SliceDiagnostics:
    source: int
    t: float
    mass: float
    leak: float
    interior_source: float
    min: float
    max: float


class KernelTable:
    """Kernel slices for a set of source nodes on a common time ladder.

    ``values[j][k]`` is the slice at ``times[k]`` for ``sources[j]``; with
    ``adjoint=True`` slices are ``x -> ...`` replaced by ``y -> u(t, x_j, y)``.
    """

    def __init__(self, grid: GridSpec, sources, times, values, diagnostics, adjoint=False, meta=None):
        self.grid = grid
        self.sources = [tuple(int(i) for i in s) for s in sources]
        self.times = np.asarray(times, dtype=float)
        self.values = values
        self.diagnostics = diagnostics
        self.adjoint = bool(adjoint)
        self.meta = dict(meta or {})

    def __len__(self):
        return len(self.sources)

    def source_point(self, j) -> np.ndarray:
        return self.grid.node(self.sources[j])

    def slice(self, j, k) -> SampledField:
        return SampledField(self.grid, self.values[j][k])

    def t_index(self, t) -> int:
        k = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[k] - t) > 1e-12 * max(1.0, t):
            raise InputError(f"time {t} is not on the ladder")
        return k

    def mass(self, j, k) -> float:
        return float(np.sum(self.values[j][k]) * self.grid.cell_volume)

    def merge(self, other: "KernelTable") -> "KernelTable":
        if other.grid != self.grid or not np.array_equal(other.times, self.times) or \
                other.adjoint != self.adjoint:
            raise InputError("tables do not share grid, ladder and orientation")
        return KernelTable(self.grid, self.sources + other.sources, self.times,
                           self.values + other.values, self.diagnostics + other.diagnostics,
                           self.adjoint, self.meta)

    # serialization: magic, version, toc length, toc json, field containers
    def to_bytes(self) -> bytes:
        toc = {
            "grid": {"d": self.grid.d, "L": self.grid.L, "N": self.grid.N},
            "sources": self.sources, "times": self.times.tolist(), "adjoint": self.adjoint,
            "diagnostics": [asdict(x) for x in self.diagnostics], "meta": self.meta,
        }
        tb = json.dumps(toc, sort_keys=True).encode()
        parts = [TABLE_MAGIC, struct.pack("<II", TABLE_VERSION, len(tb)), tb]
        for row in self.values:
            for v in row:
                parts.append(SampledField(self.grid, v).to_bytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "KernelTable":
        if blob[:4] != TABLE_MAGIC:
            raise InputError("not a kernel table container")
        version, n = struct.unpack_from("<II", blob, 4)
        if version != TABLE_VERSION:
            raise InputError(f"unsupported table version {version}")
        toc = json.loads(blob[12:12 + n].decode())
        off = 12 + n
        g = GridSpec(**toc["grid"])
        values = []
        for _ in toc["sources"]:
            row = []
            for _ in toc["times"]:
                f, off = SampledField._read(blob, off)
                row.append(np.array(f.values))
            values.append(row)
        diags = [SliceDiagnostics(**x) for x in toc["diagnostics"]]
        return cls(g, toc["sources"], toc["times"], values, diags, toc["adjoint"], toc["meta"])

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "KernelTable":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())

    def diagnostics_csv(self, path=None) -> str:
        buf = io.StringIO()
        buf.write("source,t,mass,leak,interior_source,min,max\n")
        for x in self.diagnostics:
            buf.write(f"{x.source},{x.t:.17g},{x.mass:.17g},{x.leak:.17g},"
                      f"{x.interior_source:.17g},{x.min:.17g},{x.max:.17g}\n")
        text = buf.getvalue()
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text


def geometric_ladder(t_first, t_last, n) -> np.ndarray:
    if not 0 < t_first <= t_last or n < 1:
        raise InputError("ladder needs 0 < t_first <= t_last and n >= 1")
    return np.geomspace(t_first, t_last, n) if n > 1 else np.array([t_first])


def initial_time(op: DiscreteOperator, y) -> float:
    """Start time of the mollified delta: the Gaussian has width 2 h."""
    A = op.a.full_matrix()[tuple(y)]
    mu = float(np.trace(A)) / op.grid.d
    return 2 * op.grid.h ** 2 / mu


def fundamental_solution(op: DiscreteOperator, y, ladder: Sequence[float], policy: DtPolicy = None,
                         stepper="crank_nicolson", initial="mollified", adjoint=False) -> KernelTable:
    """Discrete kernel slices for one source node.

    Parameters
    ----------
    y : tuple of int
        Source node index.
    ladder : increasing times
    initial : {"mollified", "delta"}
        ``"delta"`` starts from ``1/h^d`` at t = 0.  ``"mollified"`` starts at
        ``t0 = 2 h^2 / mu_y`` from the normalized Gaussian ``k_{mu_y}(t0)``
        centered at ``y + b(y) t0`` (``-b(y) t0`` for adjoint tables), with
        ``mu_y`` the mean eigenvalue of ``a(y)``.  The Gaussian is the exact
        kernel for constant coefficients.
    adjoint : bool
        Evolve with ``L^T``: slices are ``u(t, y, .)`` for the row of ``y``.
    """
    g = op.grid
    y = tuple(int(i) for i in y)
    if len(y) != g.d or any(not 0 <= i < g.N for i in y):
        raise InputError(f"source {y} is not a grid node")
    ladder = np.asarray(ladder, dtype=float)
    if ladder.ndim != 1 or ladder.size == 0 or np.any(np.diff(ladder) <= 0) or ladder[0] <= 0:
        raise InputError("ladder must be positive and strictly increasing")
    policy = policy or DtPolicy()
    u = np.zeros(g.shape)
    if initial == "delta":
        u[y] = 1.0 / g.cell_volume
        t = 0.0
    elif initial == "mollified":
        t = initial_time(op, y)
        if ladder[0] < t:
            raise ResolutionError(f"first ladder time {ladder[0]:.4g} is below the mollified "
                                  f"start time {t:.4g}", t_min=t)
        A = op.a.full_matrix()[y]
        mu = float(np.trace(A)) / g.d
        shift = np.zeros(g.d) if op.b is None else op.b.values[y] * t
        c = g.node(y) + (-shift if adjoint else shift)
        X = g.coords()
        u = kernel_r2(mu, t, np.sum((X - c) ** 2, -1), g.d)
        u = u / (np.sum(u) * g.cell_volume)
    else:
        raise InputError(f"unknown initial condition {initial!r}")
    snaps, nstep = _march(op, u, t, list(ladder), policy, stepper, adjoint)
    values = [s[1] for s in snaps]
    diags = [SliceDiagnostics(0, float(tk), float(np.sum(v) * g.cell_volume), float(lk), float(src),
                              float(v.min()), float(v.max()))
             for (tk, v, lk, src) in snaps]
    meta = {"stepper": stepper, "initial": initial, "t_start": t, "steps": nstep,
            "policy": asdict(policy), "scheme": op.scheme.kind, "max_peclet": op.max_peclet}
    return KernelTable(g, [y], ladder, [values], diags, adjoint, meta)


def kernel_table(op, sources, ladder, **kw) -> KernelTable:
    """Several sources on one ladder (sequential; each source is independent)."""
    tabs = [fundamental_solution(op, y, ladder, **kw) for y in sources]
    out = tabs[0]
    for j, tb in enumerate(tabs[1:], start=1):
        for dg in tb.diagnostics:
            dg.source = j
        out = out.merge(tb)
    return out


@dataclass
class SemigroupResult:
    field: SampledField
    steps: int
    sup_history: list
    min_history: list
    contraction_ok: bool
    positivity_ok: bool


def apply_semigroup(op: DiscreteOperator, f: SampledField, t: float, policy: DtPolicy = None,
                    stepper="implicit_euler", transpose=False, times=None) -> SemigroupResult:
    """``e^{-t L} f`` by time stepping, checking the sup bound at every step.

    With ``times`` the returned ``field`` is the final state and the
    snapshots at those times are stored in ``sup_history`` order as
    ``result.snapshots``.
    """
    if not t > 0:
        raise InputError("t must be positive")
    if f.grid != op.grid or f.rank != "scalar":
        raise InputError("f must be a scalar field on the operator grid")
    policy = policy or DtPolicy(ratio=0.1, dt_min=min(t, op.grid.h ** 2) / 8)
    f0 = f.values
    fmax = float(np.max(np.abs(f0)))
    sups, mins = [], []

    def on_step(u, new, dt, kind):
        sups.append(float(np.max(np.abs(new))))
        mins.append(float(new.min()))
    targets = sorted(set(list(times or []) + [t]))
    snaps, nstep = _march(op, np.array(f0, dtype=float), 0.0, targets, policy, stepper, transpose, on_step)
    tol = 1e-10 * max(fmax, 1e-300)
    res = SemigroupResult(SampledField(op.grid, snaps[-1][1]), nstep, sups, mins,
                          all(s <= fmax + tol for s in sups),
                          bool(np.all(f0 >= 0)) and all(m >= -1e-12 * max(fmax, 1.0) for m in mins))
    res.snapshots = {float(tk): SampledField(op.grid, v) for tk, v, _, _ in snaps}
    return res


def reproduction_error(op: DiscreteOperator, table: KernelTable, j: int, k_from: int, k_to: int,
                       stepper=None, policy=None) -> float:
    """Relative L1 gap between the stored slice at ``t_to`` and the slice at
    ``t_from`` stepped forward by ``t_to - t_from``."""
    stepper = stepper or table.meta.get("stepper", "crank_nicolson")
    if policy is None:
        policy = DtPolicy(**table.meta["policy"]) if "policy" in table.meta else DtPolicy()
    t0, t1 = table.times[k_from], table.times[k_to]
    u = np.array(table.values[j][k_from])
    # continue the geometric schedule from t0, as in the original march
    snaps, _ = _march_from(op, u, t0, t1, policy, stepper, table.adjoint)
    ref = table.values[j][k_to]
    return float(np.sum(np.abs(snaps - ref)) / np.sum(np.abs(ref)))


def _march_from(op, u, t0, t1, policy, stepper, transpose):
    p = DtPolicy(policy.ratio, policy.dt_min, policy.dt_max, policy.levels, 0, policy.startup_ratio)
    snaps, n = _march(op, u, t0, [t1], p, stepper, transpose)
    return snaps[-1][1], n


def l1_error(u: np.ndarray, ref: np.ndarray, grid: GridSpec) -> float:
    """Relative discrete L1 error."""
    return float(np.sum(np.abs(u - ref)) / np.sum(np.abs(ref)))
