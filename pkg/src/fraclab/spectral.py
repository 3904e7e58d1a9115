"""Periodic grid infrastructure and Fourier-multiplier operators.

The box [-L, L)^n with N points per axis stands in for R^n.  Compactly
supported data is expected to sit well inside the box so that wrap-around
effects stay small; they are measured by the tests rather than assumed away.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.special import gamma

from .errors import (
    AlphaOutOfRange,
    BumpOutsideBox,
    ExponentOutOfRange,
    GridMismatch,
    InvalidGrid,
    NegativeExponentNonMeanZero,
)

DEFAULT_CAP = 2**22
MEAN_TOL = 1e-12


@dataclass(frozen=True)
class Grid:
    n: int
    N: int
    L: float
    cap: int = DEFAULT_CAP

    def __post_init__(self):
        if self.n not in (1, 2, 3):
            raise InvalidGrid(f"dimension must be 1, 2 or 3, got {self.n}")
        if self.N < 8 or self.N & (self.N - 1):
            raise InvalidGrid(f"N must be a power of two >= 8, got {self.N}")
        if not self.L > 0:
            raise InvalidGrid(f"L must be positive, got {self.L}")
        if self.N**self.n > self.cap:
            raise InvalidGrid(f"{self.N}^{self.n} points exceed cap {self.cap}")
        object.__setattr__(self, "L", float(self.L))

    @property
    def h(self) -> float:
        return 2 * self.L / self.N

    @property
    def shape(self) -> tuple:
        return (self.N,) * self.n

    @property
    def size(self) -> int:
        return self.N**self.n

    @property
    def x(self) -> np.ndarray:
        return -self.L + self.h * np.arange(self.N)

    def coords(self) -> tuple:
        return tuple(np.meshgrid(*([self.x] * self.n), indexing="ij"))

    def radius(self, center=None) -> np.ndarray:
        c = np.zeros(self.n) if center is None else np.atleast_1d(center)
        return np.sqrt(sum((X - ci) ** 2 for X, ci in zip(self.coords(), c)))

    @property
    def freqs(self) -> np.ndarray:
        """Per-axis frequencies pi*k/L in FFT order; Nyquist sits at k = -N/2."""
        return np.pi * np.fft.fftfreq(self.N, 1.0 / self.N) / self.L

    def freq_grids(self) -> tuple:
        return tuple(np.meshgrid(*([self.freqs] * self.n), indexing="ij"))

    def kmag(self) -> np.ndarray:
        return _kmag(self.n, self.N, self.L)

    def zeros(self) -> "Field":
        return Field(self, np.zeros(self.shape))

    def inner_mask(self, frac: float = 0.5) -> np.ndarray:
        """Points with every coordinate inside [-frac*L, frac*L]."""
        m = np.ones(self.shape, dtype=bool)
        for X in self.coords():
            m &= np.abs(X) <= frac * self.L + 1e-12
        return m


@lru_cache(maxsize=32)
def _kmag(n, N, L):
    g = Grid(n, N, L)
    k = np.sqrt(sum(a**2 for a in g.freq_grids()))
    k.setflags(write=False)
    return k


@dataclass(frozen=True, eq=False)
class Field:
    grid: Grid
    values: np.ndarray
    name: str = field(default="")

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.size != self.grid.size:
            raise GridMismatch(f"{v.size} values for a grid of {self.grid.size} points")
        v = v.reshape(self.grid.shape)
        if not np.all(np.isfinite(v)):
            raise ValueError("field has non-finite entries")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def flat(self) -> np.ndarray:
        return self.values.ravel()

    def mean(self) -> float:
        return float(self.values.mean())

    def norm(self) -> float:
        return math.sqrt(self.grid.h**self.grid.n) * float(np.linalg.norm(self.values))

    def with_values(self, values, name: str | None = None) -> "Field":
        return Field(self.grid, values, self.name if name is None else name)

    def project_mean(self) -> "Field":
        return self.with_values(self.values - self.values.mean())

    def _other(self, other):
        if isinstance(other, Field):
            check_same_grid(self, other)
            return other.values
        return other

    def __add__(self, other):
        return self.with_values(self.values + self._other(other))

    __radd__ = __add__

    def __sub__(self, other):
        return self.with_values(self.values - self._other(other))

    def __rsub__(self, other):
        return self.with_values(self._other(other) - self.values)

    def __mul__(self, other):
        return self.with_values(self.values * self._other(other))

    __rmul__ = __mul__

    def __neg__(self):
        return self.with_values(-self.values)


@dataclass(frozen=True)
class Exponent:
    s: float

    @property
    def floor(self) -> int:
        return math.floor(self.s)

    @property
    def frac(self) -> float:
        return self.s - math.floor(self.s)

    @property
    def is_fractional(self) -> bool:
        return self.frac != 0.0

    def __float__(self):
        return float(self.s)


def as_exponent(s) -> Exponent:
    return s if isinstance(s, Exponent) else Exponent(float(s))


def check_same_grid(u: Field, v: Field):
    if u.grid != v.grid:
        raise GridMismatch(f"{u.grid} vs {v.grid}")


def is_mean_zero(values: np.ndarray) -> bool:
    return abs(values.mean()) <= MEAN_TOL * max(np.linalg.norm(values), np.finfo(float).tiny)


def apply_multiplier(values: np.ndarray, m: np.ndarray) -> np.ndarray:
    return np.real(np.fft.ifftn(m * np.fft.fftn(values)))


def symbol(grid: Grid, s: float) -> np.ndarray:
    """|xi|^(2s) with the zero mode set to 0."""
    k = grid.kmag()
    m = np.zeros_like(k)
    nz = k > 0
    m[nz] = k[nz] ** (2 * s)
    return m


def frac_laplacian(u: Field, s, project_mean: bool = False) -> Field:
    """(-Delta)^s u as the multiplier |xi|^(2s).

    For s < 0 the zero mode is undefined: the input must be mean-zero, or the
    caller passes ``project_mean=True`` to subtract the mean explicitly.
    """
    s = float(as_exponent(s))
    n = u.grid.n
    if s <= -n / 2:
        raise ExponentOutOfRange(f"s={s} must exceed -n/2={-n / 2}")
    vals = u.values
    if s < 0:
        if project_mean:
            vals = vals - vals.mean()
        elif not is_mean_zero(vals):
            raise NegativeExponentNonMeanZero(f"mean {vals.mean():.3e} with s={s} < 0")
    if s == 0:
        return u.with_values(vals)
    return u.with_values(apply_multiplier(vals, symbol(u.grid, s)))


def spectral_derivative(values: np.ndarray, grid: Grid, axis: int, order: int = 1) -> np.ndarray:
    """d^order/dx_axis^order by Fourier differentiation; odd orders drop the Nyquist mode."""
    if order == 0:
        return np.array(values, dtype=float)
    xi = grid.freqs
    m1 = (1j * xi) ** order
    if order % 2:
        m1[grid.N // 2] = 0.0
    shape = [1] * grid.n
    shape[axis] = grid.N
    return np.real(np.fft.ifftn(m1.reshape(shape) * np.fft.fftn(values)))


def sobolev_norm(u: Field, r: float, homogeneous: bool = False) -> float:
    """Parseval-weighted H^r (<xi>^r) or homogeneous H^r (|xi|^r) norm."""
    g = u.grid
    vals = u.values
    k = g.kmag()
    if homogeneous:
        if r < 0 and not is_mean_zero(vals):
            raise NegativeExponentNonMeanZero(f"homogeneous norm with r={r} needs mean-zero input")
        w = np.zeros_like(k)
        nz = k > 0
        w[nz] = k[nz] ** r
        if r == 0:
            w[~nz] = 1.0
    else:
        w = (1.0 + k**2) ** (r / 2)
    uh = np.fft.fftn(vals)
    total = np.sum((w * np.abs(uh)) ** 2) / g.size
    return math.sqrt(g.h**g.n * total)


def l2_inner(u: Field, v: Field) -> float:
    check_same_grid(u, v)
    return u.grid.h**u.grid.n * float(np.sum(u.values * v.values))


def bump_values(grid: Grid, center, radius: float) -> np.ndarray:
    t = grid.radius(center) ** 2 / radius**2
    out = np.zeros(grid.shape)
    inside = t < 1
    out[inside] = np.exp(-1.0 / (1.0 - t[inside]))
    return out


def make_bump(grid: Grid, center, radius: float, amplitude: float = 1.0) -> Field:
    """amplitude * exp(-1/(1-|x-c|^2/rho^2)) on the open ball, exactly zero elsewhere."""
    c = np.broadcast_to(np.asarray(center, dtype=float), (grid.n,))
    if radius <= 0:
        raise BumpOutsideBox(f"radius must be positive, got {radius}")
    reach = np.abs(c) + radius
    if np.any(reach > grid.L - 2 * grid.h):
        raise BumpOutsideBox(f"ball at {c.tolist()} radius {radius} leaves the box with margin 2h")
    return Field(grid, amplitude * bump_values(grid, c, radius), "bump")


# --- Riesz potential -------------------------------------------------------


def riesz_constant_formula(n: int, alpha: float) -> float:
    """Multiplier of |x|^-alpha: (|.|^-alpha)^ = kappa |xi|^(alpha-n)."""
    return math.pi ** (n / 2) * 2 ** (n - alpha) * gamma((n - alpha) / 2) / gamma(alpha / 2)


def _check_alpha(n, alpha):
    if not 0 < alpha < n:
        raise AlphaOutOfRange(f"alpha={alpha} outside (0, {n})")


def _mean_zero_values(u: Field, project_mean: bool) -> np.ndarray:
    vals = u.values
    if project_mean:
        return vals - vals.mean()
    if not is_mean_zero(vals):
        raise NegativeExponentNonMeanZero(f"Riesz potential needs mean-zero input, mean {vals.mean():.3e}")
    return vals


@lru_cache(maxsize=8)
def _riesz_kernel_hat(n, N, L, alpha):
    """FFT of the |x|^-alpha table on the doubled grid used for linear convolution."""
    h = 2 * L / N
    j = np.fft.fftfreq(2 * N, 1.0 / (2 * N)) * h
    r = np.sqrt(sum(a**2 for a in np.meshgrid(*([j] * n), indexing="ij")))
    K = np.zeros_like(r)
    nz = r > 0
    K[nz] = r[nz] ** (-alpha)
    # cell average over [-h/2,h/2]^n; by symmetry the positive orthant suffices
    # and keeps the Gauss nodes off the singularity
    gl, w = np.polynomial.legendre.leggauss(5)
    pts = np.meshgrid(*([(gl + 1) * h / 4] * n), indexing="ij")
    wts = np.prod(np.meshgrid(*([w / 2] * n), indexing="ij"), axis=0)
    K[(0,) * n] = np.sum(wts * np.sqrt(sum(p**2 for p in pts)) ** (-alpha))
    Kh = np.fft.fftn(K)
    Kh.setflags(write=False)
    return Kh


def riesz_direct(values: np.ndarray, grid: Grid, alpha: float) -> np.ndarray:
    """Free-space quadrature h^n sum_j |x_i - x_j|^-alpha u_j, diagonal by cell average."""
    N, n = grid.N, grid.n
    Kh = _riesz_kernel_hat(n, N, grid.L, float(alpha))
    pad = np.zeros((2 * N,) * n)
    pad[(slice(0, N),) * n] = values
    out = np.real(np.fft.ifftn(Kh * np.fft.fftn(pad)))[(slice(0, N),) * n]
    return out * grid.h**n


def riesz_spectral_unscaled(values: np.ndarray, grid: Grid, alpha: float) -> np.ndarray:
    return apply_multiplier(values, symbol(grid, -(grid.n - alpha) / 2))


def mean_zero_probe(grid: Grid, rng: np.random.Generator, nbumps: int = 4) -> np.ndarray:
    """Compactly supported mean-zero bump superposition inside the quarter box."""
    L = grid.L
    h = grid.h
    vals = np.zeros(grid.shape)
    for _ in range(nbumps):
        rho = rng.uniform(0.3, 0.6) * L / 4
        c = rng.uniform(-L / 4 + rho, L / 4 - rho, grid.n)
        vals += rng.normal() * bump_values(grid, c, rho)
    b0 = bump_values(grid, np.zeros(grid.n), L / 4 - 2 * h)
    vals -= vals.sum() / b0.sum() * b0
    return vals


def compare_inner(a: np.ndarray, b: np.ndarray, grid: Grid, frac: float = 0.5):
    """Least-squares scale and relative misfit of a ~ c*b on the inner box, means removed.

    The torus and free space differ by a constant plus a smooth far field, so
    only the region that carries data is compared and the (undefined) zero
    mode is discarded.
    """
    m = grid.inner_mask(frac)
    ai = a[m] - a[m].mean()
    bi = b[m] - b[m].mean()
    c = float(ai @ bi / (bi @ bi))
    err = float(np.linalg.norm(ai - c * bi) / np.linalg.norm(ai))
    return c, err


def fit_riesz_constant(grid: Grid, alpha: float, samples: int = 10, seed: int = 0):
    """Fit kappa in direct ~ kappa * |xi|^(alpha-n) over seeded probes; returns (kappa, spread)."""
    _check_alpha(grid.n, alpha)
    return _fit_riesz_cached(grid.n, grid.N, grid.L, float(alpha), samples, seed)


@lru_cache(maxsize=16)
def _fit_riesz_cached(n, N, L, alpha, samples, seed):
    grid = Grid(n, N, L)
    rng = np.random.default_rng(seed)
    m = grid.inner_mask()
    num = den = 0.0
    ks = []
    for _ in range(samples):
        u = mean_zero_probe(grid, rng)
        d = riesz_direct(u, grid, alpha)[m]
        s = riesz_spectral_unscaled(u, grid, alpha)[m]
        d = d - d.mean()
        s = s - s.mean()
        num += d @ s
        den += s @ s
        ks.append(d @ s / (s @ s))
    kappa = num / den
    spread = max(abs(k / kappa - 1) for k in ks)
    return float(kappa), float(spread)


def riesz_potential(
    u: Field,
    alpha: float,
    backend: str = "spectral",
    project_mean: bool = False,
    constant: float | None = None,
) -> Field:
    """Convolution with |x|^-alpha.

    ``spectral`` applies kappa * |xi|^(alpha-n) with kappa fitted against the
    direct quadrature (or ``constant`` if given); ``direct`` evaluates the
    free-space quadrature sum.
    """
    g = u.grid
    _check_alpha(g.n, alpha)
    vals = _mean_zero_values(u, project_mean)
    if backend == "direct":
        return u.with_values(riesz_direct(vals, g, alpha))
    if backend != "spectral":
        raise ValueError(f"unknown backend {backend!r}")
    kappa = fit_riesz_constant(g, alpha)[0] if constant is None else constant
    return u.with_values(kappa * riesz_spectral_unscaled(vals, g, alpha))


def multiplier_kernel(grid: Grid, s: float) -> np.ndarray:
    """Convolution kernel c with (-Delta)^s u = sum_j c[i-j] u_j (circulant rows)."""
    return np.real(np.fft.ifftn(symbol(grid, s)))


def restricted_matrix(grid: Grid, s: float, rows: np.ndarray, cols: np.ndarray | None = None) -> np.ndarray:
    """Dense block of the (-Delta)^s matrix between flat index sets."""
    cols = rows if cols is None else cols
    c = multiplier_kernel(grid, s)
    ri = np.unravel_index(rows, grid.shape)
    ci = np.unravel_index(cols, grid.shape)
    diff = tuple((a[:, None] - b[None, :]) % grid.N for a, b in zip(ri, ci))
    return c[diff]
