"""d-plane transforms on the grid: forward, exact discrete adjoint, normal operator.

Planes are sampled with step h/2 in-plane and offset spacing h.  Values are
obtained by multilinear interpolation, and the adjoint scatters with the very
same indices and weights, so the two are transposes of each other under

    <g1, g2>_sino = sum_A mu_A g1(A) g2(A),   mu_A = h^(n-d) / M,
    <f1, f2>      = h^n sum_x f1(x) f2(x).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property, lru_cache
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import DegeneratePhantoms, MarginTooSmall, NegativeExponentNonMeanZero, ShapeMismatch, SupportOutsideBall
from .io import write_csv, write_raw
from .spectral import (
    Field,
    Grid,
    bump_values,
    riesz_constant_formula,
    riesz_direct,
    riesz_spectral_unscaled,
)

SUPPORT_TOL = 1e-14
GOLDEN = math.pi * (3 - math.sqrt(5))


def fibonacci_hemisphere(M: int) -> np.ndarray:
    """M quasi-uniform unit vectors with z > 0 (one per antipodal pair)."""
    k = np.arange(M)
    z = 1 - (k + 0.5) / M
    r = np.sqrt(1 - z**2)
    phi = k * GOLDEN
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def _frame(v: np.ndarray) -> tuple:
    """Two unit vectors completing v to an orthonormal basis."""
    a = np.array([1.0, 0.0, 0.0]) if abs(v[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = np.cross(v, a)
    e1 /= np.linalg.norm(e1)
    return e1, np.cross(v, e1)


@dataclass(frozen=True, eq=False)
class PlaneGeometry:
    grid: Grid
    d: int
    M: int
    radius: float | None = None

    def __post_init__(self):
        n = self.grid.n
        if n not in (2, 3):
            raise ShapeMismatch(f"d-plane transforms need n in (2, 3), got {n}")
        if self.d not in (1, n - 1):
            raise ShapeMismatch(f"d must be 1 or n-1, got {self.d}")
        if self.radius is None:
            object.__setattr__(self, "radius", self.grid.L / 2)

    @property
    def n(self) -> int:
        return self.grid.n

    @cached_property
    def directions(self) -> np.ndarray:
        """Unit normals (hyperplanes) or unit directions (lines in 3D)."""
        if self.n == 2:
            th = math.pi * np.arange(self.M) / self.M
            return np.stack([np.cos(th), np.sin(th)], axis=1)
        return fibonacci_hemisphere(self.M)

    @cached_property
    def offsets(self) -> np.ndarray:
        h = self.grid.h
        K = int(math.floor(self.radius / h + 1e-9))
        return h * np.arange(-K, K + 1)

    @cached_property
    def steps(self) -> np.ndarray:
        h = self.grid.h
        K = int(math.floor(2 * self.radius / h + 1e-9))
        return 0.5 * h * np.arange(-K, K + 1)

    @property
    def offset_dims(self) -> int:
        return self.n - self.d

    @property
    def shape(self) -> tuple:
        return (self.M,) + (len(self.offsets),) * self.offset_dims

    @property
    def weight(self) -> float:
        """Measure of one sampled plane: h^(n-d) / M."""
        return self.grid.h**self.offset_dims / self.M

    def frames(self, m: int) -> tuple:
        """(offset axes, in-plane axes) for direction m."""
        v = self.directions[m]
        if self.n == 2:
            return [v], [np.array([-v[1], v[0]])]
        e1, e2 = _frame(v)
        if self.d == 2:
            return [v], [e1, e2]
        return [e1, e2], [v]

    def points(self, m: int) -> np.ndarray:
        """Sample points of every plane of direction m: shape (offsets..., samples..., n)."""
        oax, pax = self.frames(m)
        o = self.offsets
        t = self.steps
        grids = np.meshgrid(*([o] * len(oax) + [t] * len(pax)), indexing="ij")
        X = sum(gi[..., None] * a for gi, a in zip(grids, oax + pax))
        return X

    def meets(self, mask: np.ndarray) -> np.ndarray:
        """Boolean sinogram: planes passing through a grid cell of ``mask``."""
        out = np.zeros(self.shape, dtype=bool)
        g = self.grid
        grown = ndimage.binary_dilation(mask, iterations=1)
        for m in range(self.M):
            X = self.points(m)
            idx = np.rint((X + g.L) / g.h).astype(int)
            hit = grown[tuple(idx[..., k] for k in range(self.n))]
            out[m] = hit.reshape(hit.shape[: self.offset_dims] + (-1,)).any(axis=-1)
        return out

    def describe(self) -> dict:
        return {"n": self.n, "d": self.d, "M": self.M, "radius": self.radius, "offsets": len(self.offsets)}


def _interp_weights(X: np.ndarray, grid: Grid):
    """Flat corner indices and multilinear weights, each of shape (2^n, points)."""
    n = grid.n
    P = X.reshape(-1, n)
    s = (P + grid.L) / grid.h
    i0 = np.floor(s).astype(np.int64)
    fr = s - i0
    idx, wts = [], []
    for corner in range(2**n):
        bits = [(corner >> k) & 1 for k in range(n)]
        ii = [i0[:, k] + bits[k] for k in range(n)]
        w = np.ones(len(P))
        for k in range(n):
            w = w * (fr[:, k] if bits[k] else 1 - fr[:, k])
        idx.append(np.ravel_multi_index(ii, grid.shape))
        wts.append(w)
    return np.array(idx), np.array(wts)


@dataclass(frozen=True, eq=False)
class Sinogram:
    geometry: PlaneGeometry
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.shape != self.geometry.shape:
            raise ShapeMismatch(f"sinogram shape {v.shape} != geometry shape {self.geometry.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("sinogram has non-finite entries")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def inner(self, other: "Sinogram") -> float:
        return self.geometry.weight * float(np.sum(self.values * other.values))

    def norm(self) -> float:
        return math.sqrt(self.inner(self))

    def to_csv(self, path) -> Path:
        off = self.geometry.offsets
        rows = []
        for idx in np.ndindex(self.values.shape):
            rows.append([idx[0], ";".join(repr(float(off[k])) for k in idx[1:]), self.values[idx]])
        return write_csv(path, ["direction_id", "offset", "value"], rows)

    def to_raw(self, path) -> Path:
        geo = self.geometry
        g = geo.grid
        meta = {"kind": "sinogram", "n": g.n, "N": g.N, "L": g.L, "shape": list(self.values.shape), "offsets": geo.offsets.tolist()} | {
            k: v for k, v in geo.describe().items() if k != "offsets"
        }
        return write_raw(path, self.values, meta)


def ball_mask(grid: Grid, radius: float, center=None) -> np.ndarray:
    return grid.radius(center) <= radius + 1e-12


def forward_dplane(f: Field, geom: PlaneGeometry) -> Sinogram:
    """Integrals of f over the sampled d-planes."""
    g = f.grid
    if g != geom.grid:
        raise ShapeMismatch("field and geometry grids differ")
    outside = ~ball_mask(g, geom.radius)
    if np.any(np.abs(f.values[outside]) > SUPPORT_TOL * max(np.max(np.abs(f.values)), 1e-300)):
        raise SupportOutsideBall(f"field is not supported in the ball of radius {geom.radius}")
    fv = f.flat
    dt = (g.h / 2) ** geom.d
    out = np.empty(geom.shape)
    nO = len(geom.offsets) ** geom.offset_dims
    for m in range(geom.M):
        idx, w = _interp_weights(geom.points(m), g)
        vals = np.sum(w * fv[idx], axis=0)
        out[m] = dt * vals.reshape(nO, -1).sum(axis=1).reshape(geom.shape[1:])
    return Sinogram(geom, out)


def adjoint_dplane(sino: Sinogram, geom: PlaneGeometry | None = None) -> Field:
    """Backprojection: the exact transpose of forward_dplane for the weighted inner products."""
    if geom is not None and geom is not sino.geometry:
        if geom.shape != sino.values.shape:
            raise ShapeMismatch(f"sinogram shape {sino.values.shape} != geometry shape {geom.shape}")
    geom = sino.geometry
    g = geom.grid
    dt = (g.h / 2) ** geom.d
    acc = np.zeros(g.size)
    nO = len(geom.offsets) ** geom.offset_dims
    for m in range(geom.M):
        idx, w = _interp_weights(geom.points(m), g)
        per = sino.values[m].reshape(nO)
        ns = idx.shape[1] // nO
        gw = np.repeat(per, ns)
        acc += np.bincount(idx.ravel(), weights=(w * gw).ravel(), minlength=g.size)
    return Field(g, acc * dt * geom.weight / g.h**g.n)


# --- normal operator -------------------------------------------------------------


def expected_normal_constant(n: int, d: int) -> float:
    """|S^{d-1}| / |S^{n-1}|: the constant for a direction measure of total mass one."""
    sphere = lambda k: 2 * math.pi ** (k / 2) / math.gamma(k / 2)
    return sphere(d) / sphere(n)


def _compare_mask(geom: PlaneGeometry) -> np.ndarray:
    return ball_mask(geom.grid, 0.9 * geom.radius)


def convolution_image(f: Field, geom: PlaneGeometry) -> np.ndarray:
    """Free-space quadrature of f * |x|^-(n-d)."""
    return riesz_direct(f.values, f.grid, geom.n - geom.d)


def fit_normal_constant(geom: PlaneGeometry, phantoms: list) -> tuple[float, float]:
    """Least-squares c with R*R f ~ c (f * |x|^-(n-d)) on the inner ball; spread = max relative deviation."""
    if len(phantoms) < 5:
        raise DegeneratePhantoms(f"need at least 5 phantoms, got {len(phantoms)}")
    stack = np.stack([p.flat for p in phantoms])
    if np.linalg.matrix_rank(stack) < len(phantoms):
        raise DegeneratePhantoms("phantoms are linearly dependent")
    m = _compare_mask(geom)
    num = den = 0.0
    cs = []
    for p in phantoms:
        a = adjoint_dplane(forward_dplane(p, geom)).values[m]
        b = convolution_image(p, geom)[m]
        num += a @ b
        den += b @ b
        cs.append(a @ b / (b @ b))
    c = num / den
    return float(c), float(max(abs(ci / c - 1) for ci in cs))


@lru_cache(maxsize=8)
def _default_fit(n, N, L, d, M):
    geom = PlaneGeometry(Grid(n, N, L), d, M)
    return fit_normal_constant(geom, default_phantoms(geom.grid, geom.radius))


def fitted_constant(geom: PlaneGeometry) -> float:
    g = geom.grid
    if geom.radius != g.L / 2:
        return fit_normal_constant(geom, default_phantoms(g, geom.radius))[0]
    return _default_fit(g.n, g.N, g.L, geom.d, geom.M)[0]


def normal_operator(f: Field, geom: PlaneGeometry, backend: str = "composition", c: float | None = None, project_mean: bool = False) -> Field:
    """N_d f by R*R (composition), scaled free-space convolution, or scaled Fourier multiplier.

    The multiplier backend applies kappa |xi|^-d with kappa the Riesz constant
    of |x|^-(n-d); it needs mean-zero input (or ``project_mean``).
    """
    if backend == "composition":
        return adjoint_dplane(forward_dplane(f, geom))
    c = fitted_constant(geom) if c is None else c
    g = f.grid
    if backend == "convolution":
        return Field(g, c * convolution_image(f, geom))
    if backend == "multiplier":
        vals = f.values
        if project_mean:
            vals = vals - vals.mean()
        elif abs(vals.mean()) > 1e-12 * np.linalg.norm(vals):
            raise NegativeExponentNonMeanZero("multiplier backend needs mean-zero input")
        kappa = riesz_constant_formula(g.n, g.n - geom.d)
        return Field(g, c * kappa * riesz_spectral_unscaled(vals, g, g.n - geom.d))
    raise ValueError(f"unknown backend {backend!r}")


def backend_discrepancy(f: Field, geom: PlaneGeometry, c: float | None = None) -> float:
    """Relative L2 misfit between composition and convolution images on the inner ball."""
    m = _compare_mask(geom)
    a = normal_operator(f, geom, "composition").values[m]
    b = normal_operator(f, geom, "convolution", c).values[m]
    return float(np.linalg.norm(a - b) / np.linalg.norm(a))


# --- phantoms ----------------------------------------------------------------------


def phantom(grid: Grid, name: str, seed: int = 0, radius: float | None = None) -> Field:
    """Smooth phantoms supported inside the ball of ``radius`` (default L/2).

    ``bump``: centred bump; ``blobs``: seeded superposition of three bumps;
    ``ring``: radial annulus (difference of bumps); ``offset``: seeded
    off-centre bump.
    """
    R = (grid.L / 2 if radius is None else radius) - 2 * grid.h
    rng = np.random.default_rng(seed)
    n = grid.n
    if name == "bump":
        vals = bump_values(grid, np.zeros(n), 0.8 * R)
    elif name == "ring":
        vals = bump_values(grid, np.zeros(n), 0.9 * R) - 0.7 * bump_values(grid, np.zeros(n), 0.5 * R)
    elif name == "blobs":
        vals = np.zeros(grid.shape)
        for _ in range(3):
            rho = rng.uniform(0.25, 0.45) * R
            d = rng.normal(size=n)
            c = d / np.linalg.norm(d) * rng.uniform(0, R - rho)
            vals += rng.uniform(0.5, 1.5) * bump_values(grid, c, rho)
    elif name == "offset":
        rho = rng.uniform(0.3, 0.5) * R
        d = rng.normal(size=n)
        c = d / np.linalg.norm(d) * rng.uniform(0, R - rho)
        vals = bump_values(grid, c, rho)
    else:
        raise ValueError(f"unknown phantom {name!r}")
    return Field(grid, vals, f"{name}:{seed}")


def default_phantoms(grid: Grid, radius: float | None = None) -> list:
    names = [("bump", 0), ("ring", 0), ("blobs", 1), ("blobs", 2), ("offset", 3), ("offset", 4)]
    return [phantom(grid, nm, sd, radius) for nm, sd in names]


# --- ROI inversion --------------------------------------------------------------------


def neg_laplacian_h(values: np.ndarray, grid: Grid) -> np.ndarray:
    """(2n+1)-point -Delta_h; entries within one cell of the array edge are left at 0."""
    h2 = grid.h**2
    out = np.zeros_like(values)
    core = tuple(slice(1, -1) for _ in range(grid.n))
    acc = 2 * grid.n * values[core]
    for ax in range(grid.n):
        lo = tuple(slice(0, -2) if k == ax else slice(1, -1) for k in range(grid.n))
        hi = tuple(slice(2, None) if k == ax else slice(1, -1) for k in range(grid.n))
        acc = acc - values[lo] - values[hi]
    out[core] = acc / h2
    return out


def roi_invert_even_d(Ndf: Field, V: np.ndarray, d: int = 2, c: float | None = None, known: np.ndarray | None = None, geom: PlaneGeometry | None = None) -> Field:
    """f on V from N_d f known on a neighbourhood of V, via the local operator (-Delta_h)^{d/2}.

    N_d f = c f * |x|^-(n-d) = c kappa (-Delta)^{-d/2} f, so
    f = (-Delta_h)^{d/2} N_d f / (c kappa); only values within (d/2) cells of V are used.
    """
    g = Ndf.grid
    if g.n != 3 or d != 2:
        raise ValueError("even-d inversion is implemented for n = 3, d = 2")
    V = np.asarray(V, dtype=bool).reshape(g.shape)
    known = np.ones(g.shape, dtype=bool) if known is None else np.asarray(known, dtype=bool)
    need = ndimage.binary_dilation(V, iterations=3)
    edge = np.zeros(g.shape, dtype=bool)
    edge[tuple(slice(3, -3) for _ in range(g.n))] = True
    if np.any(need & ~(known & edge)):
        raise MarginTooSmall("N_d f must be known on a 3-cell neighbourhood of V")
    if c is None:
        c = fitted_constant(geom if geom is not None else PlaneGeometry(g, d, 256))
    kappa = riesz_constant_formula(g.n, g.n - d)
    vals = np.where(known, Ndf.values, 0.0)
    out = neg_laplacian_h(vals, g) / (c * kappa)
    return Field(g, np.where(V, out, 0.0), "roi")


# --- partial data -------------------------------------------------------------------------


def partial_data_residual(f: Field, V: np.ndarray, geom: PlaneGeometry) -> tuple[float, float]:
    """(max |R_d f| over planes meeting V, ||f||_{L2(V)})."""
    V = np.asarray(V, dtype=bool).reshape(f.grid.shape)
    sino = forward_dplane(f, geom)
    hit = geom.meets(V)
    sup = float(np.max(np.abs(sino.values[hit]))) if hit.any() else 0.0
    g = f.grid
    return sup, math.sqrt(g.h**g.n * float(np.sum(f.values[V] ** 2)))


@dataclass
class PartialDataExperiment:
    meeting: float
    avoiding: float
    planes: int

    @property
    def ratio(self) -> float:
        return self.meeting / max(self.avoiding, 1e-300)


def partial_data_minimization(geom: PlaneGeometry, V: np.ndarray, family: list, seed: int = 0) -> PartialDataExperiment:
    """min over unit-norm f in span(family) of ||f||^2_V + ||R f||^2 on a plane set.

    Compared for the planes meeting V and for an equally sized set of planes
    avoiding V (drawn with a fixed seed).
    """
    g = geom.grid
    V = np.asarray(V, dtype=bool).reshape(g.shape)
    F = np.stack([p.flat for p in family], axis=1)
    w = g.h**g.n
    G = w * F.T @ F
    GV = w * F[V.ravel()].T @ F[V.ravel()]
    sinos = np.stack([forward_dplane(p, geom).values.ravel() for p in family], axis=1)
    hit = geom.meets(V).ravel()
    miss = np.flatnonzero(~hit)
    rng = np.random.default_rng(seed)
    k = min(hit.sum(), len(miss))
    avoid = np.zeros_like(hit)
    avoid[rng.choice(miss, size=k, replace=False)] = True
    meet = np.zeros_like(hit)
    meet[rng.choice(np.flatnonzero(hit), size=k, replace=False)] = True

    def smallest(sel):
        R = sinos[sel]
        Q = GV + geom.weight * R.T @ R
        lam, U = np.linalg.eigh(G)
        keep = lam > lam.max() * 1e-12
        T = U[:, keep] / np.sqrt(lam[keep])
        return float(np.linalg.eigvalsh(T.T @ Q @ T)[0])

    return PartialDataExperiment(smallest(meet), smallest(avoid), int(k))
