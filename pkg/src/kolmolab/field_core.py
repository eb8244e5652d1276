"""Uniform grids, sampled fields, Gaussian kernels and the free heat flow.

Everything here is immutable after construction.  The free heat semigroup
is applied as a separable convolution with the sampled 1-D Gaussian, one
axis at a time, on the truncated box ``[-L, L]^d``.  Mass that the kernel
would place outside the box is reported rather than hidden.
"""
from __future__ import annotations

import csv
import io
import math
import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import special

from .errors import InputError, ResolutionError

RANKS = ("scalar", "vector", "matrix")
MAGIC = b"KFLD"
CONTAINER_VERSION = 1
_HEADER = struct.Struct("<4sIIIdII")

# Rough number of float64 work arrays an operation keeps per node.
WORK_ARRAYS_PER_NODE = 16
DEFAULT_MEMORY_BUDGET = 4 * 2**30


@dataclass(frozen=True)
class GridSpec:
    """Uniform grid on the box ``[-L, L]^d`` with ``N`` nodes per axis.

    Parameters
    ----------
    d : int
        Dimension, 1 to 3.
    L : float
        Half width of the box.
    N : int
        Nodes per axis.  Must be odd so that the origin is a node.
    memory_budget : float, optional
        Bytes the grid may use; checked against ``N**d`` work arrays.
    """

    d: int
    L: float
    N: int
    memory_budget: Optional[float] = field(default=None, compare=False)

    def __post_init__(self):
        if int(self.d) != self.d or not 1 <= self.d <= 3:
            raise InputError(f"grid dimension must be 1, 2 or 3, got {self.d}")
        if int(self.N) != self.N or self.N < 3 or self.N % 2 == 0:
            raise InputError(f"points_per_axis must be an odd integer >= 3, got {self.N}")
        if not (math.isfinite(self.L) and self.L > 0):
            raise InputError(f"half_width must be positive and finite, got {self.L}")
        budget = DEFAULT_MEMORY_BUDGET if self.memory_budget is None else self.memory_budget
        need = float(self.N) ** self.d * 8 * WORK_ARRAYS_PER_NODE
        if need > budget:
            raise InputError(
                f"grid with {self.N}^{self.d} nodes needs ~{need:.3g} bytes, "
                f"over the memory budget {budget:.3g}")

    @property
    def h(self) -> float:
        return 2.0 * self.L / (self.N - 1)

    @property
    def shape(self):
        return (self.N,) * self.d

    @property
    def size(self) -> int:
        return self.N ** self.d

    @property
    def cell_volume(self) -> float:
        return self.h ** self.d

    @property
    def center(self):
        return (self.N // 2,) * self.d

    def axis(self) -> np.ndarray:
        # x_i = -L + i*h, evaluated exactly this way everywhere
        return -self.L + np.arange(self.N) * self.h

    def coords(self) -> np.ndarray:
        """Node coordinates, shape ``shape + (d,)``."""
        ax = self.axis()
        mesh = np.meshgrid(*([ax] * self.d), indexing="ij")
        return np.stack(mesh, axis=-1)

    def radius2(self) -> np.ndarray:
        ax2 = self.axis() ** 2
        out = np.zeros(self.shape)
        for k in range(self.d):
            sh = [1] * self.d
            sh[k] = self.N
            out = out + ax2.reshape(sh)
        return out

    def node(self, index) -> np.ndarray:
        index = np.asarray(index, dtype=int)
        return -self.L + index * self.h

    def index_of(self, point) -> tuple:
        """Nearest node to ``point`` (clipped to the box)."""
        p = np.asarray(point, dtype=float).reshape(self.d)
        idx = np.rint((p + self.L) / self.h).astype(int)
        return tuple(np.clip(idx, 0, self.N - 1).tolist())

    def distance_to_boundary(self, index) -> float:
        index = np.asarray(index)
        return float(self.h * np.min(np.minimum(index, self.N - 1 - index)))


def packed_index(d: int):
    """Component order of the packed symmetric layout (upper triangle, row major)."""
    return [(i, j) for i in range(d) for j in range(i, d)]


def _ncomp(rank: str, d: int) -> int:
    if rank == "scalar":
        return 1
    if rank == "vector":
        return d
    if rank == "matrix":
        return d * (d + 1) // 2
    raise InputError(f"unknown rank {rank!r}; expected one of {RANKS}")


class SampledField:
    """Values of a scalar, vector or symmetric-matrix field on a grid.

    Scalar values have shape ``grid.shape``; vector and matrix values carry a
    trailing component axis (``d`` and ``d(d+1)/2`` entries).  A full
    ``(..., d, d)`` matrix array is accepted and packed after a symmetry check.
    """

    __slots__ = ("grid", "rank", "values")

    def __init__(self, grid: GridSpec, values, rank: str = "scalar"):
        d = grid.d
        nc = _ncomp(rank, d)
        v = np.array(values, dtype=float)
        if rank == "matrix" and v.shape == grid.shape + (d, d):
            asym = np.max(np.abs(v - np.swapaxes(v, -1, -2))) if v.size else 0.0
            scale = max(1.0, float(np.max(np.abs(v))) if v.size else 1.0)
            if asym > 1e-12 * scale:
                raise InputError(f"matrix field is not symmetric (max asymmetry {asym:.3g})")
            v = np.stack([v[..., i, j] for i, j in packed_index(d)], axis=-1)
        want = grid.shape if rank == "scalar" else grid.shape + (nc,)
        if v.shape != want:
            if v.size != grid.size * nc:
                raise InputError(
                    f"value array has {v.size} entries, expected {grid.size * nc} "
                    f"for a {rank} field on {grid.N}^{d} nodes")
            v = v.reshape(want)
        if not np.all(np.isfinite(v)):
            raise InputError("sampled field contains NaN or Inf")
        v.setflags(write=False)
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "rank", rank)
        object.__setattr__(self, "values", v)

    def __setattr__(self, name, value):
        raise AttributeError("SampledField is immutable")

    def __repr__(self):
        g = self.grid
        return f"SampledField(rank={self.rank}, d={g.d}, N={g.N}, L={g.L})"

    @property
    def ncomp(self) -> int:
        return _ncomp(self.rank, self.grid.d)

    def component(self, k: int) -> np.ndarray:
        if self.rank == "scalar":
            return self.values
        return self.values[..., k]

    def full_matrix(self) -> np.ndarray:
        """Unpacked ``(..., d, d)`` array of a matrix field."""
        if self.rank != "matrix":
            raise InputError("full_matrix needs a matrix field")
        d = self.grid.d
        out = np.empty(self.grid.shape + (d, d))
        for k, (i, j) in enumerate(packed_index(d)):
            out[..., i, j] = self.values[..., k]
            out[..., j, i] = self.values[..., k]
        return out

    def magnitude_sq(self) -> np.ndarray:
        if self.rank == "scalar":
            return self.values ** 2
        if self.rank == "vector":
            return np.sum(self.values ** 2, axis=-1)
        return np.sum(self.full_matrix() ** 2, axis=(-1, -2))

    def magnitude(self) -> np.ndarray:
        return np.sqrt(self.magnitude_sq())

    def integral(self) -> np.ndarray:
        """Grid quadrature ``sum(values) * h^d`` (per component)."""
        axes = tuple(range(self.grid.d))
        return np.sum(self.values, axis=axes) * self.grid.cell_volume

    def replace(self, values) -> "SampledField":
        return SampledField(self.grid, values, self.rank)

    def scaled(self, c: float) -> "SampledField":
        return SampledField(self.grid, c * self.values, self.rank)

    # --- container -------------------------------------------------------
    def to_bytes(self) -> bytes:
        g = self.grid
        head = _HEADER.pack(MAGIC, CONTAINER_VERSION, g.d, g.N, float(g.L),
                            RANKS.index(self.rank), self.ncomp)
        body = np.ascontiguousarray(self.values, dtype="<f8").tobytes(order="C")
        return head + body

    @classmethod
    def from_bytes(cls, blob: bytes, memory_budget=None) -> "SampledField":
        field_, _ = cls._read(blob, 0, memory_budget)
        return field_

    @classmethod
    def _read(cls, blob, offset, memory_budget=None):
        if len(blob) - offset < _HEADER.size:
            raise InputError("truncated field container header")
        magic, ver, d, n, L, rank_id, nc = _HEADER.unpack_from(blob, offset)
        if magic != MAGIC:
            raise InputError("not a field container (bad magic)")
        if ver != CONTAINER_VERSION:
            raise InputError(f"unsupported container version {ver}")
        grid = GridSpec(d, L, n, memory_budget)
        rank = RANKS[rank_id]
        count = grid.size * nc
        start = offset + _HEADER.size
        stop = start + 8 * count
        if len(blob) < stop:
            raise InputError("truncated field container body")
        vals = np.frombuffer(blob, dtype="<f8", count=count, offset=start)
        return cls(grid, vals.astype(float), rank), stop

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path, memory_budget=None) -> "SampledField":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read(), memory_budget)

    def to_csv(self, path=None, max_nodes=200_000):
        """Node coordinates followed by components, 17 significant digits."""
        if self.grid.size > max_nodes:
            raise InputError(f"CSV export limited to {max_nodes} nodes")
        d = self.grid.d
        xs = self.grid.coords().reshape(-1, d)
        vals = self.values.reshape(self.grid.size, -1)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([f"x{k}" for k in range(d)] + [f"c{k}" for k in range(vals.shape[1])]
                   + [f"rank={self.rank}"])
        for row_x, row_v in zip(xs, vals):
            w.writerow([f"{v:.17g}" for v in row_x] + [f"{v:.17g}" for v in row_v])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_csv(cls, source) -> "SampledField":
        text = source if "\n" in str(source) else open(source).read()
        rows = list(csv.reader(io.StringIO(text)))
        head = rows[0]
        rank = head[-1].split("=", 1)[1]
        d = sum(1 for c in head if c.startswith("x"))
        data = np.array([[float(v) for v in r] for r in rows[1:] if r], dtype=float)
        n = round(len(data) ** (1.0 / d))
        L = float(np.max(data[:, 0]))
        grid = GridSpec(d, L, n)
        return cls(grid, data[:, d:], rank)


@dataclass(frozen=True)
class EllipticityWindow:
    """Uniform ellipticity bounds ``sigma |v|^2 <= v.a.v <= xi |v|^2``."""

    sigma: float
    xi: float

    def __post_init__(self):
        # sigma == xi is allowed for constant-coefficient matrices
        if not (0 < self.sigma <= self.xi < math.inf):
            raise InputError(f"need 0 < sigma <= xi < inf, got sigma={self.sigma}, xi={self.xi}")

    @staticmethod
    def probe_vectors(d: int) -> np.ndarray:
        vecs = [np.eye(d)[i] for i in range(d)]
        for i in range(d):
            for j in range(i + 1, d):
                v = np.zeros(d)
                v[i] = v[j] = 1 / math.sqrt(2)
                vecs.append(v)
        return np.array(vecs)

    def check(self, a: SampledField, tol: float = 1e-12) -> bool:
        """Raise InputError unless every node passes the probe set."""
        if a.rank != "matrix":
            raise InputError("ellipticity check needs a matrix field")
        A = a.full_matrix()
        probes = self.probe_vectors(a.grid.d)
        q = np.einsum("pi,...ij,pj->...p", probes, A, probes)
        slack = tol * max(1.0, self.xi)
        bad = (q < self.sigma - slack) | (q > self.xi + slack)
        if np.any(bad):
            where = np.argwhere(bad)[0]
            node = tuple(int(i) for i in where[:-1])
            raise InputError(
                f"ellipticity window [{self.sigma}, {self.xi}] violated at node {node} "
                f"(probe {int(where[-1])}, value {q[tuple(where)]:.6g}); "
                f"{int(bad.any(axis=-1).sum())} nodes fail")
        return True


@dataclass(frozen=True)
class GaussianKernelParams:
    mu: float
    t: float

    def __post_init__(self):
        if not (self.mu > 0 and math.isfinite(self.mu)):
            raise InputError(f"diffusivity mu must be positive, got {self.mu}")
        if not (self.t > 0 and math.isfinite(self.t)):
            raise InputError(f"time t must be positive, got {self.t}")


def kernel_r2(mu, t, r2, d):
    """``k_mu(t, z)`` as a function of ``|z|^2`` (vectorized)."""
    mt = np.asarray(mu, dtype=float) * np.asarray(t, dtype=float)
    return (4 * np.pi * mt) ** (-0.5 * d) * np.exp(-np.asarray(r2, dtype=float) / (4 * mt))


def log_kernel_r2(mu, t, r2, d):
    mt = np.asarray(mu, dtype=float) * np.asarray(t, dtype=float)
    return -0.5 * d * np.log(4 * np.pi * mt) - np.asarray(r2, dtype=float) / (4 * mt)


def gaussian_kernel(p: GaussianKernelParams, displacement):
    """Heat kernel ``(4 pi mu t)^{-d/2} exp(-|z|^2 / (4 mu t))``.

    ``displacement`` is a d-vector or an array whose last axis has length d;
    the dimension is read from that axis.
    """
    z = np.asarray(displacement, dtype=float)
    if z.ndim == 0:
        z = z.reshape(1)
    if not np.all(np.isfinite(z)):
        raise InputError("displacement must be finite")
    d = z.shape[-1]
    val = kernel_r2(p.mu, p.t, np.sum(z * z, axis=-1), d)
    return float(val) if np.ndim(val) == 0 else val


# --- free heat flow -------------------------------------------------------

def lattice_mass(h, mu, t):
    """``h * sum_m k_mu(t, m h)`` over all integers m (1-D lattice sum)."""
    sd = math.sqrt(2 * mu * t)
    M = int(math.ceil(40 * sd / h)) + 2
    m = np.arange(-M, M + 1)
    return float(h * np.sum(kernel_r2(mu, t, (m * h) ** 2, 1)))


def _axis_weights(grid: GridSpec, t, mu, scheme="gaussian"):
    """Per-axis convolution matrix and the weight each row loses to each side."""
    n, h = grid.N, grid.h
    if scheme == "gaussian":
        S = lattice_mass(h, mu, t)
        M = n - 1 + int(math.ceil(40 * math.sqrt(2 * mu * t) / h)) + 2
        m = np.arange(0, M + 1)
        g = h * kernel_r2(mu, t, (m * h) ** 2, 1) / S
    elif scheme == "lattice":
        # exact kernel of the discrete Laplacian; sums to one over the lattice
        r = mu * t / h ** 2
        M = n - 1 + int(math.ceil(12 * math.sqrt(2 * r) + 20))
        m = np.arange(0, M + 1)
        g = special.ive(m, 2 * r)
    else:
        raise InputError(f"unknown convolution scheme {scheme!r}")
    # tail[j] = sum_{m > j} g[m]; accumulate from the small end
    tail = np.cumsum(g[::-1])[::-1]
    tail = np.append(tail[1:], 0.0)
    i = np.arange(n)
    W = g[np.abs(i[:, None] - i[None, :])]
    left = tail[i]              # nodes beyond index 0
    right = tail[n - 1 - i]     # nodes beyond index N-1
    return W, left, right


def _apply_axes(W, values, d):
    out = values
    for ax in range(d):
        out = np.moveaxis(np.tensordot(W, out, axes=(1, ax)), 0, ax)
    return out


def min_resolved_time(grid: GridSpec, mu: float = 1.0) -> float:
    """Smallest t with kernel standard deviation sqrt(2 mu t) >= h."""
    return grid.h ** 2 / (2.0 * mu)


def heat_convolve(f: SampledField, t: float, mu: float = 1.0, tail: str = "zero",
                  return_leak: bool = False, scheme: str = "gaussian"):
    """Apply ``e^{t mu Delta}`` to a sampled field by separable quadrature.

    Parameters
    ----------
    f : SampledField
        Any rank; the convolution acts on the spatial axes only.
    t, mu : float
        Time and diffusivity; the kernel is ``k_mu(t, .)``.
    tail : {"zero", "constant"}
        ``"zero"`` treats the field as vanishing outside the box, so mass leaks
        through the boundary.  ``"constant"`` extends each boundary value
        outward, which preserves constants exactly.
    return_leak : bool
        Also return the per-node kernel mass that falls outside the box.
    scheme : {"gaussian", "lattice"}
        ``"gaussian"`` samples the continuum kernel and refuses when it is
        under-resolved.  ``"lattice"`` uses the heat kernel of the discrete
        Laplacian, which is defined for every t > 0.

    Returns
    -------
    SampledField, or (SampledField, ndarray) with ``return_leak``.
    """
    g = f.grid
    if not (t > 0 and math.isfinite(t)):
        raise InputError(f"convolution time must be positive, got {t}")
    if not mu > 0:
        raise InputError(f"diffusivity must be positive, got {mu}")
    if scheme == "gaussian":
        t_min = min_resolved_time(g, mu)
        if t < t_min * (1 - 1e-12):
            raise ResolutionError(
                f"kernel width sqrt(2*mu*t)={math.sqrt(2 * mu * t):.4g} is below the grid "
                f"spacing {g.h:.4g}; minimum admissible t is {t_min:.6g}", t_min=t_min)
    if tail not in ("zero", "constant"):
        raise InputError(f"tail must be 'zero' or 'constant', got {tail!r}")
    W, left, right = _axis_weights(g, t, mu, scheme)
    if tail == "constant":
        W = W.copy()
        W[:, 0] += left
        W[:, -1] += right
    out = _apply_axes(W, f.values, g.d)
    if tail == "zero" and np.all(f.values >= 0):
        out = np.maximum(out, 0.0)
    res = SampledField(g, out, f.rank)
    if not return_leak:
        return res
    keep = 1.0 - (left + right)
    inside = np.ones(g.shape)
    for ax in range(g.d):
        sh = [1] * g.d
        sh[ax] = g.N
        inside = inside * keep.reshape(sh)
    leak = 1.0 - inside if tail == "zero" else np.zeros(g.shape)
    return res, leak


@dataclass(frozen=True)
class CutoffParams:
    """Truncation ``1_eps``: keep nodes with ``|x| <= 1/eps`` and ``|b| <= 1/eps``."""

    eps: float

    def __post_init__(self):
        if not self.eps > 0:
            raise InputError(f"cutoff eps must be positive, got {self.eps}")

    @property
    def cap(self) -> float:
        return 1.0 / self.eps


def truncate(f: SampledField, cutoff: CutoffParams) -> SampledField:
    keep = (f.grid.radius2() <= cutoff.cap ** 2) & (np.abs(f.magnitude()) <= cutoff.cap)
    if f.rank == "scalar":
        return f.replace(np.where(keep, f.values, 0.0))
    return f.replace(np.where(keep[..., None], f.values, 0.0))


def mollify(f: SampledField, nu: float, cutoff: Optional[CutoffParams] = None,
            scheme: str = "gaussian", tail: str = "zero") -> SampledField:
    """Smoothing ``E_nu(1_eps f)``: truncate, then run the free heat flow for time nu.

    ``scheme="auto"`` switches to the discrete-Laplacian kernel when the
    Gaussian would be under-resolved.  Matrix fields are usually mollified
    without a cutoff and with ``tail="constant"`` so that the result stays a
    convex combination of the original samples.
    """
    if not nu > 0:
        raise InputError(f"smoothing time nu must be positive, got {nu}")
    src = truncate(f, cutoff) if cutoff is not None else f
    if scheme == "auto":
        scheme = "gaussian" if nu >= min_resolved_time(f.grid) else "lattice"
    return heat_convolve(src, nu, 1.0, tail=tail, scheme=scheme)


def second_difference_bound(f: SampledField) -> float:
    """Largest absolute centered second difference over interior nodes."""
    g = f.grid
    vals = f.values if f.rank == "scalar" else f.magnitude()
    worst = 0.0
    for ax in range(g.d):
        v = np.moveaxis(vals, ax, 0)
        dd = (v[2:] - 2 * v[1:-1] + v[:-2]) / g.h ** 2
        if dd.size:
            worst = max(worst, float(np.max(np.abs(dd))))
    return worst


def discrete_lp(values: np.ndarray, grid: GridSpec, p: float) -> float:
    """Discrete ``L^p`` norm ``(sum |v|^p h^d)^{1/p}``."""
    v = np.abs(np.asarray(values, dtype=float))
    if math.isinf(p):
        return float(np.max(v))
    return float((np.sum(v ** p) * grid.cell_volume) ** (1.0 / p))
