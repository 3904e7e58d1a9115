"""Fractional gradient, two-point tensor fields and the magnetic Schrodinger form.

Two-point fields are stored as arrays of shape (P, P) + tensor dims, with
P = N^n grid points; in one dimension every tensor index has extent one, so
the tensor dims are dropped and all orders are stored as scalars.

The fractional gradient is

    grad^s u(x, y) = (D u(x) - D u(y)) (x) alpha(x, y),
    alpha(x, y)    = sqrt(C/2) (y - x) / |y - x|^{n/2 + s' + 1},

with D = grad^{floor(s)}.  On the torus the kernel |z|^{-(n + 2s')} is
replaced by its periodization over all images, the diagonal cell y = x is
left out, and the nearest-neighbour weight carries a zeta-function correction
for the missing near-diagonal part of the integral.  C is calibrated once
per grid and s' so the energy identity holds exactly for a reference
Gaussian.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property, lru_cache

import mpmath
import numpy as np
import scipy.linalg as sla
from scipy.special import zeta as hurwitz

from .errors import (
    AssumptionWarning,
    ConfigMismatch,
    InvalidMask,
    NearSingular,
    OrderMismatch,
    UnsupportedConfig,
    UnsupportedFloor,
    warn,
)
from .schrodinger import NEAR_SINGULAR, DNMatrix, DomainMask, _basis_list
from .spectral import Exponent, Field, Grid, as_exponent, bump_values, check_same_grid, sobolev_norm, spectral_derivative

IMAGE_RANGE = 3


def tensor_dims(n: int, order: int) -> tuple:
    return () if n == 1 else (n,) * order


@dataclass(frozen=True, eq=False)
class BivariateField:
    grid: Grid
    order: int
    values: np.ndarray

    def __post_init__(self):
        P = self.grid.size
        shape = (P, P) + tensor_dims(self.grid.n, self.order)
        v = np.array(self.values, dtype=float).reshape(shape)
        if not np.all(np.isfinite(v)):
            raise ValueError("bivariate field has non-finite entries")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def tdims(self) -> tuple:
        return tensor_dims(self.grid.n, self.order)

    def swap(self) -> "BivariateField":
        """(x, y) -> (y, x)."""
        return BivariateField(self.grid, self.order, np.swapaxes(self.values, 0, 1))

    def sqnorm_pointwise(self) -> np.ndarray:
        v = self.values
        return (v**2).reshape(v.shape[0], v.shape[1], -1).sum(axis=2)

    def l2norm(self) -> float:
        return math.sqrt(self.grid.h ** (2 * self.grid.n) * float(self.sqnorm_pointwise().sum()))

    def l1norm(self) -> float:
        return self.grid.h ** (2 * self.grid.n) * float(np.abs(self.values).sum())

    def __add__(self, other):
        _compatible(self, other)
        return BivariateField(self.grid, self.order, self.values + other.values)

    def __sub__(self, other):
        _compatible(self, other)
        return BivariateField(self.grid, self.order, self.values - other.values)

    def __mul__(self, c: float):
        return BivariateField(self.grid, self.order, c * self.values)

    __rmul__ = __mul__

    def meta(self) -> dict:
        g = self.grid
        return {"kind": "bivariate", "n": g.n, "N": g.N, "L": g.L, "order": self.order}


def _compatible(a: BivariateField, b: BivariateField):
    if a.grid != b.grid:
        raise ConfigMismatch("bivariate fields live on different grids")
    if a.order != b.order:
        raise OrderMismatch(f"orders {a.order} and {b.order} differ")


def tensor_ops(A: BivariateField, B: BivariateField | None = None, mode: str = "tensor_product"):
    """Pointwise tensor algebra on two-point fields.

    ``tensor_product`` and ``contraction`` (last indices of A against B) need
    both arguments; ``sym``, ``antisym``, ``J1`` and ``J2`` act on A alone.
    """
    g = A.grid
    h = g.h**g.n
    P = g.size
    if mode == "sym":
        return BivariateField(g, A.order, 0.5 * (A.values + A.swap().values))
    if mode == "antisym":
        return BivariateField(g, A.order, 0.5 * (A.values - A.swap().values))
    if mode == "J2":
        return Field(g, np.sqrt(h * A.sqnorm_pointwise().sum(axis=1)))
    if mode == "J1":
        return Field(g, np.sqrt(h * A.sqnorm_pointwise().sum(axis=0)))
    if B is None:
        raise OrderMismatch(f"{mode} needs two operands")
    if A.grid != B.grid:
        raise ConfigMismatch("bivariate fields live on different grids")
    if mode == "tensor_product":
        if g.n == 1:
            return BivariateField(g, A.order + B.order, A.values * B.values)
        a = A.values.reshape(P, P, -1, 1)
        b = B.values.reshape(P, P, 1, -1)
        return BivariateField(g, A.order + B.order, (a * b).reshape((P, P) + tensor_dims(g.n, A.order + B.order)))
    if mode == "contraction":
        if A.order < B.order:
            raise OrderMismatch(f"contraction needs order(A) >= order(B), got {A.order} < {B.order}")
        k = A.order - B.order
        if g.n == 1:
            return BivariateField(g, k, A.values * B.values)
        a = A.values.reshape(P, P, g.n**k, g.n**B.order)
        b = B.values.reshape(P, P, g.n**B.order)
        return BivariateField(g, k, np.einsum("xyij,xyj->xyi", a, b).reshape((P, P) + tensor_dims(g.n, k)))
    raise ValueError(f"unknown mode {mode!r}")


def antisym_integral(A: BivariateField) -> np.ndarray:
    """h^{2n}-weighted double sum, component-wise."""
    g = A.grid
    return g.h ** (2 * g.n) * A.values.sum(axis=(0, 1))


# --- kernel ------------------------------------------------------------------


def _check_config(grid: Grid, s: Exponent):
    if not s.is_fractional or s.s <= 0:
        raise UnsupportedConfig(f"fractional gradient needs positive non-integer s, got {s.s}")
    if grid.n == 1 and s.floor <= 2:
        return
    if grid.n == 2 and s.floor == 0:
        return
    raise UnsupportedConfig(f"(n={grid.n}, floor(s)={s.floor}) is not supported")


def _displacements(grid: Grid):
    """Integer displacement index grids in (-N/2, N/2], FFT layout."""
    N = grid.N
    d = np.arange(N)
    dm = (d + N // 2) % N - N // 2
    return np.meshgrid(*([dm] * grid.n), indexing="ij")


def _epstein2(sigma: float) -> float:
    """sum over nonzero k in Z^2 of |k|^-sigma, analytically continued."""
    return float(4 * mpmath.zeta(sigma / 2) * mpmath.dirichlet(sigma / 2, [0, 1, 0, -1]))


def _tail_constant(a: float) -> float:
    """Integral of |v|^-a over |v|_inf > 1 in the plane."""
    t = np.polynomial.legendre.leggauss(20)
    x = 0.5 * (t[0] + 1)
    return 8.0 / (a - 2) * float(np.sum(0.5 * t[1] * (1 + x**2) ** (-a / 2)))


@lru_cache(maxsize=16)
def _kernel_table(n: int, N: int, L: float, sp: float) -> np.ndarray:
    """Periodized |z|^-(n+2s') on displacement indices, diagonal 0, nearest neighbours corrected."""
    h = 2 * L / N
    a = n + 2 * sp
    P = 2 * L
    D = _displacements(Grid(n, N, L))
    if n == 1:
        t = np.mod(D[0] * h, P) / P
        K = np.zeros(N)
        nz = D[0] != 0
        K[nz] = P ** (-a) * (hurwitz(a, t[nz]) + hurwitz(a, 1 - t[nz]))
        f = 1.0 - float(mpmath.zeta(2 * sp - 1))
        nn = np.abs(D[0]) == 1
    else:
        z = [Di * h for Di in D]
        K = np.zeros((N, N))
        for k1 in range(-IMAGE_RANGE, IMAGE_RANGE + 1):
            for k2 in range(-IMAGE_RANGE, IMAGE_RANGE + 1):
                r2 = (z[0] + P * k1) ** 2 + (z[1] + P * k2) ** 2
                with np.errstate(divide="ignore"):
                    K += np.where(r2 > 0, r2 ** (-a / 2), 0.0)
        R = (IMAGE_RANGE + 0.5) * P
        K += _tail_constant(a) * R ** (2 - a) / P**2
        K[0, 0] = 0.0
        f = 1.0 - _epstein2(2 * sp) / 4
        nn = (np.abs(D[0]) + np.abs(D[1])) == 1
    K[nn] += (f - 1.0) * h ** (-a)
    # exact evenness under z -> -z
    K = 0.5 * (K + K[np.ix_(*[(-np.arange(N)) % N] * n)])
    K.setflags(write=False)
    return K


def _pair_index(grid: Grid) -> tuple:
    """Per-axis displacement indices (j - i) mod N for all point pairs."""
    idx = np.unravel_index(np.arange(grid.size), grid.shape)
    return tuple((b[None, :] - a[:, None]) % grid.N for a, b in zip(idx, idx))


def _quad_energy_raw(values: np.ndarray, grid: Grid, sp: float) -> float:
    K = _kernel_table(grid.n, grid.N, grid.L, sp)[_pair_index(grid)]
    u = values.ravel()
    return 0.5 * grid.h ** (2 * grid.n) * float(np.sum((u[:, None] - u[None, :]) ** 2 * K))


@lru_cache(maxsize=16)
def calibration_constant(n: int, N: int, L: float, sp: float) -> float:
    """C with ||grad^s g||^2 = ||(-Delta)^{s'/2} g||^2 for the Gaussian exp(-|8x/L|^2)."""
    grid = Grid(n, N, L)
    r = grid.radius()
    g = Field(grid, np.exp(-((8 * r / L) ** 2)))
    return sobolev_norm(g, sp, homogeneous=True) ** 2 / _quad_energy_raw(g.values, grid, sp)


def analytic_normalization(n: int, sp: float) -> float:
    """4^s Gamma(n/2+s) / (pi^{n/2} |Gamma(-s)|), the usual singular-integral constant."""
    return 4**sp * math.gamma(n / 2 + sp) / (math.pi ** (n / 2) * abs(math.gamma(-sp)))


def alpha_field(grid: Grid, s) -> BivariateField:
    """alpha(x, y); zero on the diagonal and at exactly half-box displacements."""
    s = as_exponent(s)
    _check_config(grid, s)
    return _alpha_cached(grid.n, grid.N, grid.L, s.frac)


@lru_cache(maxsize=8)
def _alpha_cached(n, N, L, sp):
    grid = Grid(n, N, L)
    C = calibration_constant(n, N, L, sp)
    K = _kernel_table(n, N, L, sp)
    D = _displacements(grid)
    half = np.zeros(grid.shape, dtype=bool)
    for Di in D:
        half |= Di == -(N // 2)
    mag = np.sqrt(0.5 * C * K)
    r = np.sqrt(sum(Di.astype(float) ** 2 for Di in D))
    r[r == 0] = 1.0
    comps = [np.where(half, 0.0, mag * Di / r) for Di in D]
    pair = _pair_index(grid)
    if n == 1:
        vals = comps[0][pair]
    else:
        vals = np.stack([c[pair] for c in comps], axis=-1)
    return BivariateField(grid, 1, vals)


def _grad_floor(values: np.ndarray, grid: Grid, k: int) -> np.ndarray:
    """Flattened D^k u: scalar for n = 1, shape (P, n) for k = 1 in n = 2."""
    if k == 0:
        return values.ravel()
    if grid.n == 1:
        return spectral_derivative(values, grid, 0, k).ravel()
    raise UnsupportedConfig("higher gradients need n = 1")


def frac_gradient(u: Field, s) -> BivariateField:
    s = as_exponent(s)
    _check_config(u.grid, s)
    a = alpha_field(u.grid, s)
    du = _grad_floor(u.values, u.grid, s.floor)
    diff = du[:, None] - du[None, :]
    if u.grid.n == 1:
        return BivariateField(u.grid, s.floor + 1, diff * a.values)
    return BivariateField(u.grid, 1, diff[..., None] * a.values)


def bivariate_inner(A: BivariateField, B: BivariateField) -> float:
    _compatible(A, B)
    return A.grid.h ** (2 * A.grid.n) * float(np.sum(A.values * B.values))


# --- magnetic problem ---------------------------------------------------------


@dataclass(frozen=True, eq=False)
class MagneticProblem:
    mask: DomainMask
    s: Exponent
    A: BivariateField
    q: Field
    checks: dict = field(default_factory=dict)

    def __post_init__(self):
        s = as_exponent(self.s)
        object.__setattr__(self, "s", s)
        g = self.mask.grid
        _check_config(g, s)
        if self.A.grid != g or self.q.grid != g:
            raise ConfigMismatch("A, q and mask must share the grid")
        if self.A.order != s.floor + 1:
            raise OrderMismatch(f"A has order {self.A.order}, expected {s.floor + 1}")
        om = self.mask.omega.ravel()
        support = self.A.sqnorm_pointwise() > 0
        if np.any(support & ~(om[:, None] & om[None, :])):
            raise InvalidMask("A must be supported in Omega x Omega")
        self.checks.update(self._assumption_checks())

    def _assumption_checks(self) -> dict:
        J2 = tensor_ops(self.A, mode="J2")
        S = self.S
        env = np.abs(S.values).reshape(S.values.shape[0], S.values.shape[1], -1).max(axis=(0, 2))
        g = self.grid
        out = {
            "J2A_max": float(J2.values.max()),
            "S_envelope_l2": math.sqrt(g.h**g.n * float(np.sum(env**2))),
        }
        for k, v in out.items():
            if not np.isfinite(v):
                warn(AssumptionWarning, f"{k} is not finite")
        return out

    @property
    def grid(self) -> Grid:
        return self.mask.grid

    @cached_property
    def alpha(self) -> BivariateField:
        return alpha_field(self.grid, self.s)

    @cached_property
    def S(self) -> BivariateField:
        """S = A . alpha, of order floor(s)."""
        return tensor_ops(self.A, self.alpha, "contraction")

    @cached_property
    def Q(self) -> Field:
        """q + int |A(x, y)|^2 dy."""
        J2 = tensor_ops(self.A, mode="J2")
        return self.q + J2.values**2

    @cached_property
    def matrix(self) -> np.ndarray:
        """Dense matrix of the form: B(u, v) = u^T M v on the full grid."""
        g = self.grid
        h = g.h**g.n
        P = g.size
        W = self.alpha.sqnorm_pointwise()
        Phi = _derivative_matrix(g, self.s.floor)
        S = self.S.values.reshape(P, P)
        sigma = S.sum(axis=1)
        Pa = self.A.sqnorm_pointwise().sum(axis=1)
        K = 2 * h * h * Phi.T @ (np.diag(W.sum(axis=1)) - W) @ Phi
        C = h * h * (np.diag(sigma) - S) @ Phi
        M = K + C + C.T + h * h * np.diag(Pa) + h * np.diag(self.q.flat)
        M = 0.5 * (M + M.T)
        M.setflags(write=False)
        return M

    def with_potentials(self, A: BivariateField, q: Field) -> "MagneticProblem":
        return MagneticProblem(self.mask, self.s, A, q)


def _derivative_matrix(grid: Grid, k: int) -> np.ndarray:
    P = grid.size
    if k == 0:
        return np.eye(P)
    return np.stack([spectral_derivative(e.reshape(grid.shape), grid, 0, k).ravel() for e in np.eye(P)], axis=1)


def magnetic_gradient(u: Field, problem: MagneticProblem) -> BivariateField:
    """grad^s_A u = grad^s u + A(x, y) u(x)."""
    G = frac_gradient(u, problem.s)
    uA = problem.A.values * u.flat.reshape((-1, 1) + (1,) * len(problem.A.tdims))
    return BivariateField(u.grid, G.order, G.values + uA)


def magnetic_bilinear(u: Field, v: Field, problem: MagneticProblem) -> float:
    """Double sum of grad^s_A u . grad^s_A v plus <q u, v>, evaluated on the two-point fields."""
    check_same_grid(u, v)
    g = u.grid
    Gu = magnetic_gradient(u, problem)
    Gv = magnetic_gradient(v, problem)
    return bivariate_inner(Gu, Gv) + g.h**g.n * float(np.sum(problem.q.values * u.values * v.values))


def magnetic_operator_pairing(u: Field, v: Field, problem: MagneticProblem) -> float:
    """<(-Delta)^s_A u, v>, i.e. the form without the q term."""
    g = u.grid
    return magnetic_bilinear(u, v, problem) - g.h**g.n * float(np.sum(problem.q.values * u.values * v.values))


# --- gauge ---------------------------------------------------------------------


def gauge_operators(S: BivariateField, floor_s: int):
    """Return (N(S), {beta: M_beta(S)}).

    floor 0: N = -(S(x,y) + S(y,x)), M_0 = 2 int S(x,y) dy.
    floor 1 (n = 1): with sigma = int S(x,y) dy the first-order terms cancel,
    leaving M_0 = -sigma', M_1 = 0 and N = (d_2 S)(y,x) + (d_2 S)(x,y), where
    d_2 is the derivative in the second argument by centred differences.
    """
    g = S.grid
    h = g.h**g.n
    if floor_s == 0:
        if S.order != 0:
            raise OrderMismatch(f"floor 0 needs S of order 0, got {S.order}")
        Nv = -(S.values + S.swap().values)
        sigma = S.values.sum(axis=1) * h
        return BivariateField(g, 0, Nv), {(0,) * g.n: Field(g, 2 * sigma)}
    if floor_s == 1:
        if g.n != 1:
            raise UnsupportedFloor("floor 1 is supported for n = 1 only")
        if S.order != 1:
            raise OrderMismatch(f"floor 1 needs S of order 1, got {S.order}")
        d2 = np.gradient(S.values, g.h, axis=1, edge_order=2)
        Nv = d2 + d2.T
        sigma = S.values.sum(axis=1) * h
        m0 = -spectral_derivative(sigma.reshape(g.shape), g, 0, 1)
        return BivariateField(g, 0, Nv), {(0,): Field(g, m0), (1,): g.zeros()}
    raise UnsupportedFloor(f"floor_s must be 0 or 1, got {floor_s}")


@dataclass
class GaugeReport:
    n_residual: float
    m0_residual: float
    mbeta_residual: float
    tol: float

    @property
    def verdict(self) -> bool:
        return max(self.n_residual, self.m0_residual, self.mbeta_residual) <= self.tol

    def to_json(self) -> str:
        d = {
            "n_residual": self.n_residual,
            "m0_residual": self.m0_residual,
            "mbeta_residual": self.mbeta_residual,
            "tol": self.tol,
            "verdict": self.verdict,
        }
        return json.dumps(d, sort_keys=True, indent=1)


def gauge_equivalent(problem1: MagneticProblem, problem2: MagneticProblem, tol: float = 1e-6) -> GaugeReport:
    if problem1.grid != problem2.grid or problem1.s != problem2.s or not np.array_equal(problem1.mask.omega, problem2.mask.omega):
        raise ConfigMismatch("problems differ in grid, exponent or mask")
    fl = problem1.s.floor
    if fl > 1:
        raise UnsupportedFloor(f"gauge operators are available for floor(s) <= 1, got {fl}")
    dS = problem1.S - problem2.S
    Nf, M = gauge_operators(dS, fl)
    zero = (0,) * problem1.grid.n
    comp = M[zero] + (problem1.Q - problem1.q) - (problem2.Q - problem2.q) + problem1.q - problem2.q
    mb = max((M[b].norm() for b in M if b != zero), default=0.0)
    return GaugeReport(Nf.l2norm(), comp.norm(), mb, tol)


def potential_from_S(mask: DomainMask, s, S_values: np.ndarray) -> BivariateField:
    """A = S alpha / |alpha|^2 (order floor(s)+1), zero where alpha vanishes, restricted to Omega x Omega."""
    s = as_exponent(s)
    g = mask.grid
    a = alpha_field(g, s)
    W = a.sqnorm_pointwise()
    om = mask.omega.ravel()
    keep = (om[:, None] & om[None, :]) & (W > 0)
    inv = np.zeros_like(W)
    inv[keep] = 1.0 / W[keep]
    S2 = np.asarray(S_values, dtype=float).reshape(W.shape)
    if g.n == 1:
        vals = S2 * a.values * inv
    else:
        vals = (S2 * inv)[..., None] * a.values
    return BivariateField(g, s.floor + 1, vals)


def gauge_partner(problem: MagneticProblem, D: BivariateField) -> MagneticProblem:
    """(A + D, q') in gauge with (A, q) for symmetric D supported in Omega x Omega (floor 0).

    S_D = D . alpha is antisymmetric, so N vanishes, and q' = q - 2 int S_D dy
    + int (|A|^2 - |A + D|^2) dy balances the zeroth-order condition.
    """
    if problem.s.floor != 0:
        raise UnsupportedFloor("gauge partners are constructed for floor(s) = 0")
    if np.max(np.abs(D.values - D.swap().values)) > 0:
        raise ValueError("D must be symmetric in (x, y)")
    g = problem.grid
    h = g.h**g.n
    A2 = problem.A + D
    SD = tensor_ops(D, problem.alpha, "contraction").values
    q2 = problem.q.flat - 2 * h * SD.sum(axis=1) + h * (problem.A.sqnorm_pointwise().sum(axis=1) - A2.sqnorm_pointwise().sum(axis=1))
    return problem.with_potentials(A2, Field(g, q2))


def magnetic_dn_map(problem: MagneticProblem, basis, col_basis=None) -> DNMatrix:
    """Lambda[i][j] = B_{A,q}(u_i, g_j), u_i = f_i + v_i solving the form on Omega by dense solve."""
    fs, rdesc = _basis_list(basis)
    gs, cdesc = (fs, rdesc) if col_basis is None else _basis_list(col_basis)
    M = problem.matrix
    g = problem.grid
    idx = problem.mask.omega_idx
    Moo = M[np.ix_(idx, idx)]
    lam = np.min(np.abs(sla.eigvalsh(Moo / g.h**g.n)))
    if lam < NEAR_SINGULAR:
        raise NearSingular(f"0 is within {lam:.2e} of the magnetic Dirichlet spectrum")
    F = np.stack([f.flat for f in fs], axis=1)
    G = np.stack([f.flat for f in gs], axis=1)
    if np.any(F[idx] != 0) or np.any(G[idx] != 0):
        raise InvalidMask("exterior data must vanish on Omega")
    V = -sla.solve(Moo, M[idx] @ F, assume_a="sym")
    U = F.copy()
    U[idx] += V
    return DNMatrix(rdesc, cdesc, U.T @ M @ G, {"s": problem.s.s, "mask": problem.mask.describe(), "magnetic": True})


def magnetic_solve(f: Field, problem: MagneticProblem) -> Field:
    M = problem.matrix
    idx = problem.mask.omega_idx
    v = -sla.solve(M[np.ix_(idx, idx)], M[idx] @ f.flat, assume_a="sym")
    out = f.flat.copy()
    out[idx] += v
    return f.with_values(out)


def coercivity_fit(problem: MagneticProblem, samples: list, mu: float = 1.0, margin: float = 2.0) -> tuple[float, float]:
    """(mu', k') with B(u,u) + mu'<u,u> >= k'||u||^2_{H^s} on the samples.

    mu' is fixed; k' is the best constant over the samples divided by ``margin``.
    """
    M = problem.matrix
    best = min((float(u.flat @ M @ u.flat) + mu * u.norm() ** 2) / sobolev_norm(u, problem.s.s) ** 2 for u in samples)
    if best <= 0:
        raise ValueError(f"no positive k' for mu' = {mu}")
    return mu, best / margin


def coercivity_holds(problem: MagneticProblem, samples: list, mu: float, k: float) -> list:
    M = problem.matrix
    return [float(u.flat @ M @ u.flat) + mu * u.norm() ** 2 >= k * sobolev_norm(u, problem.s.s) ** 2 for u in samples]


def omega_samples(mask: DomainMask, count: int, seed: int, max_bumps: int = 3) -> list:
    """Seeded bump superpositions supported in Omega (n = 1)."""
    g = mask.grid
    x = g.x[mask.omega]
    lo, hi = float(x.min()), float(x.max())
    out = []
    for child in np.random.SeedSequence(seed).spawn(count):
        rng = np.random.default_rng(child)
        vals = np.zeros(g.shape)
        for _ in range(int(rng.integers(1, max_bumps + 1))):
            rho = rng.uniform(0.1, 0.45) * (hi - lo)
            c = rng.uniform(lo + rho, hi - rho)
            vals += rng.normal() * bump_values(g, c, rho)
        out.append(Field(g, vals * mask.omega))
    return out
