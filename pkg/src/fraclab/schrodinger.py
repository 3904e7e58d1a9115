"""Exterior-value problem for (-Delta)^s + q on a grid domain.

A solution with exterior data f is u = f + v, where v lives on the Omega
indices and satisfies B_q(u, w) = 0 for every w supported in Omega:

    (M_s)_{Omega,Omega} v + q_Omega v = -(M_s f)_Omega

with M_s the spectral (-Delta)^s matrix.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.linalg as sla
import scipy.sparse.linalg as spla
from scipy import ndimage

from .errors import (
    ApproximationTooCoarse,
    EigSolveFailure,
    IllConditioned,
    InvalidMask,
    NearSingular,
    NoConvergence,
    warn,
)
from .io import write_csv
from .spectral import (
    Exponent,
    Field,
    Grid,
    apply_multiplier,
    as_exponent,
    bump_values,
    check_same_grid,
    l2_inner,
    restricted_matrix,
    sobolev_norm,
    symbol,
)

RESIDUAL_TOL = 1e-10
NEAR_SINGULAR = 1e-8
DENSE_CAP = 2**14
COND_CAP = 1e12
RUNGE_DELTAS = tuple(10.0 ** -np.arange(2, 17))


def box_mask(grid: Grid, lo, hi, closed: bool = False) -> np.ndarray:
    """Grid points inside the box prod (lo_i, hi_i) (open unless ``closed``)."""
    lo = np.broadcast_to(np.asarray(lo, dtype=float), (grid.n,))
    hi = np.broadcast_to(np.asarray(hi, dtype=float), (grid.n,))
    m = np.ones(grid.shape, dtype=bool)
    for X, a, b in zip(grid.coords(), lo, hi):
        m &= (X >= a - 1e-12) & (X <= b + 1e-12) if closed else (X > a + 1e-12) & (X < b - 1e-12)
    return m


@dataclass(frozen=True, eq=False)
class DomainMask:
    grid: Grid
    omega: np.ndarray
    W1: np.ndarray
    W2: np.ndarray
    V: np.ndarray | None = None

    def __post_init__(self):
        for name in ("omega", "W1", "W2", "V"):
            m = getattr(self, name)
            if m is None:
                continue
            m = np.asarray(m, dtype=bool).reshape(self.grid.shape)
            m.setflags(write=False)
            object.__setattr__(self, name, m)
        if not self.omega.any():
            raise InvalidMask("Omega is empty")
        sets = [("omega", self.omega), ("W1", self.W1), ("W2", self.W2)]
        for i, (na, a) in enumerate(sets):
            for nb, b in sets[i + 1 :]:
                grown = ndimage.binary_dilation(a, iterations=2)
                if np.any(grown & b):
                    raise InvalidMask(f"{na} and {nb} are closer than 2 grid cells")
        inner = self.grid.inner_mask(0.5)
        for na, a in sets:
            if np.any(a & ~inner):
                raise InvalidMask(f"{na} leaves the padded region |x_i| <= L/2")

    @classmethod
    def interval(cls, grid: Grid, omega=(-1.0, 1.0), W1=(-2.0, -1.0625), W2=(1.0625, 2.0), V=None):
        """Boxes given by (lo, hi) pairs; scalars broadcast over all axes."""
        mk = lambda b: box_mask(grid, b[0], b[1])
        return cls(grid, mk(omega), box_mask(grid, *W1, closed=True), box_mask(grid, *W2, closed=True), None if V is None else mk(V))

    @cached_property
    def omega_idx(self) -> np.ndarray:
        return np.flatnonzero(self.omega.ravel())

    def describe(self) -> dict:
        g = self.grid
        return {k: int(getattr(self, k).sum()) for k in ("omega", "W1", "W2")} | {"n": g.n, "N": g.N, "L": g.L}


@dataclass(frozen=True, eq=False)
class SchrodingerProblem:
    mask: DomainMask
    s: Exponent
    q: Field

    def __post_init__(self):
        s = as_exponent(self.s)
        object.__setattr__(self, "s", s)
        if s.s <= 0 or not s.is_fractional:
            raise ValueError(f"s must be positive and non-integer, got {s.s}")
        check_same_grid(self.q, self.mask.grid.zeros())
        if np.any(self.q.values[~self.mask.omega] != 0):
            raise InvalidMask("q must vanish outside Omega")

    @property
    def grid(self) -> Grid:
        return self.mask.grid

    @cached_property
    def q_omega(self) -> np.ndarray:
        return self.q.flat[self.mask.omega_idx]

    @cached_property
    def matrix(self) -> np.ndarray:
        """Dense Omega-restricted operator (M_s)_{OO} + diag(q_O)."""
        idx = self.mask.omega_idx
        if len(idx) > DENSE_CAP:
            raise NoConvergence(f"{len(idx)} unknowns exceed the dense cap {DENSE_CAP}")
        A = restricted_matrix(self.grid, self.s.s, idx)
        A = 0.5 * (A + A.T)
        A[np.diag_indices_from(A)] += self.q_omega
        A.setflags(write=False)
        return A

    def extend(self, v: np.ndarray) -> np.ndarray:
        out = np.zeros(self.grid.size)
        out[self.mask.omega_idx] = v
        return out.reshape(self.grid.shape)

    def apply(self, v: np.ndarray) -> np.ndarray:
        """Matrix-free restrict(M_s extend(v)) + q v."""
        Mv = apply_multiplier(self.extend(v), symbol(self.grid, self.s.s)).ravel()
        return Mv[self.mask.omega_idx] + self.q_omega * v

    def rhs(self, f: Field) -> np.ndarray:
        return -apply_multiplier(f.values, symbol(self.grid, self.s.s)).ravel()[self.mask.omega_idx]

    @cached_property
    def rayleigh_positive(self) -> bool:
        rng = np.random.default_rng(12345)
        m = len(self.mask.omega_idx)
        for _ in range(10):
            z = rng.standard_normal(m)
            if z @ self.apply(z) <= 0:
                return False
        return True

    @cached_property
    def smallest_abs_eig(self) -> float:
        return float(np.min(np.abs(sla.eigvalsh(self.matrix))))

    def with_q(self, q: Field) -> "SchrodingerProblem":
        return SchrodingerProblem(self.mask, self.s, q)


def bilinear_form(v: Field, w: Field, problem: SchrodingerProblem) -> float:
    """<(-Delta)^{s/2} v, (-Delta)^{s/2} w> + <q v, w>."""
    check_same_grid(v, w)
    check_same_grid(v, problem.q)
    half = symbol(v.grid, problem.s.s / 2)
    a = apply_multiplier(v.values, half)
    b = apply_multiplier(w.values, half)
    h = v.grid.h**v.grid.n
    return h * float(np.sum(a * b)) + h * float(np.sum(problem.q.values * v.values * w.values))


def dual_residual(problem: SchrodingerProblem, r: np.ndarray) -> float:
    """H^{-s} norm of a residual vector living on the Omega indices."""
    return sobolev_norm(Field(problem.grid, problem.extend(r)), -problem.s.s)


@dataclass
class SolveInfo:
    path: str
    iterations: int
    residual: float


def _cg(problem, b, x0, tol_abs):
    m = len(b)
    op = spla.LinearOperator((m, m), matvec=problem.apply, dtype=float)
    its = [0]

    def cb(_):
        its[0] += 1

    x = x0
    for _ in range(4):
        r = b - problem.apply(x)
        if dual_residual(problem, r) <= tol_abs:
            return x, its[0]
        dx, info = spla.cg(op, r, rtol=1e-15, atol=0.0, maxiter=20 * m, callback=cb)
        x = x + dx
    r = b - problem.apply(x)
    if dual_residual(problem, r) <= tol_abs:
        return x, its[0]
    raise NoConvergence(f"CG residual {dual_residual(problem, r):.3e} above {tol_abs:.3e} after {its[0]} iterations")


def solve_dirichlet(
    f: Field,
    problem: SchrodingerProblem,
    source: np.ndarray | None = None,
    return_info: bool = False,
):
    """Solve for u = f + v with v on Omega.

    ``source`` adds a right-hand side F on the Omega indices, so that
    B_q(u, w) = <F, w> for w supported in Omega.
    """
    mask = problem.mask
    if np.any(f.values[mask.omega] != 0):
        raise InvalidMask("exterior data must vanish on Omega")
    b = problem.rhs(f)
    if source is not None:
        b = b + np.asarray(source, dtype=float).ravel()
    scale = max(f.norm(), sobolev_norm(Field(problem.grid, problem.extend(b)), -problem.s.s))
    if scale == 0:
        u = f.with_values(np.zeros(problem.grid.shape))
        info = SolveInfo("trivial", 0, 0.0)
        return (u, info) if return_info else u
    tol_abs = RESIDUAL_TOL * scale
    if problem.rayleigh_positive:
        v, its = _cg(problem, b, np.zeros_like(b), tol_abs)
        path = "cg"
    else:
        if problem.smallest_abs_eig < NEAR_SINGULAR:
            raise NearSingular(f"0 is within {problem.smallest_abs_eig:.2e} of the Dirichlet spectrum")
        v = sla.solve(problem.matrix, b, assume_a="sym")
        its = 0
        path = "dense"
        r = b - problem.apply(v)
        if dual_residual(problem, r) > tol_abs:
            v, its = _cg_refine_dense(problem, b, v, tol_abs)
    res = dual_residual(problem, b - problem.apply(v))
    u = f.with_values(f.values + problem.extend(v))
    info = SolveInfo(path, its, res / scale)
    return (u, info) if return_info else u


def _cg_refine_dense(problem, b, v, tol_abs):
    for k in range(3):
        r = b - problem.apply(v)
        if dual_residual(problem, r) <= tol_abs:
            return v, k
        v = v + sla.solve(problem.matrix, r, assume_a="sym")
    r = b - problem.apply(v)
    if dual_residual(problem, r) > tol_abs:
        raise NoConvergence(f"dense solve residual {dual_residual(problem, r):.3e} above {tol_abs:.3e}")
    return v, 3


def dirichlet_spectrum(problem: SchrodingerProblem, k: int) -> np.ndarray:
    """k smallest eigenvalues of the Omega-restricted operator, ascending."""
    A = problem.matrix
    k = min(k, A.shape[0])
    try:
        return sla.eigvalsh(A, subset_by_index=[0, k - 1])
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise EigSolveFailure(str(exc)) from exc


# --- exterior bases and DN maps ---------------------------------------------


def bit_reversal_order(m: int) -> np.ndarray:
    """Permutation of range(m) whose prefixes spread evenly over the range."""
    bits = max(1, math.ceil(math.log2(m)))
    keys = [int(format(i, f"0{bits}b")[::-1], 2) for i in range(2**bits)]
    order = [k for k in np.argsort(keys, kind="stable") if k < m]
    return np.asarray(order)


@dataclass(frozen=True, eq=False)
class ExteriorBasis:
    """Bumps of a common radius on a regular lattice inside a window box.

    Functions are ordered so every prefix is spread over the window; bases of
    different sizes built with the same lattice are nested.
    """

    grid: Grid
    lo: tuple
    hi: tuple
    count: int = 32
    radius: float = 0.1

    def __post_init__(self):
        n = self.grid.n
        object.__setattr__(self, "lo", tuple(np.broadcast_to(np.asarray(self.lo, float), (n,))))
        object.__setattr__(self, "hi", tuple(np.broadcast_to(np.asarray(self.hi, float), (n,))))

    @cached_property
    def centers(self) -> np.ndarray:
        n = self.grid.n
        per = round(self.count ** (1.0 / n))
        if per**n != self.count:
            raise ValueError(f"count {self.count} is not a perfect {n}-th power")
        axes = [np.linspace(a + self.radius, b - self.radius, per) for a, b in zip(self.lo, self.hi)]
        pts = np.stack([g.ravel() for g in np.meshgrid(*axes, indexing="ij")], axis=1)
        return pts[bit_reversal_order(len(pts))]

    def functions(self, k: int | None = None) -> list:
        k = self.count if k is None else k
        return [Field(self.grid, bump_values(self.grid, c, self.radius), f"basis{i}") for i, c in enumerate(self.centers[:k])]

    def matrix(self, k: int | None = None) -> np.ndarray:
        return np.stack([f.flat for f in self.functions(k)], axis=1)

    def describe(self) -> dict:
        return {"lo": list(self.lo), "hi": list(self.hi), "count": self.count, "radius": self.radius}


@dataclass
class DNMatrix:
    rows: dict
    cols: dict
    matrix: np.ndarray
    meta: dict = field(default_factory=dict)

    def asymmetry(self) -> float:
        return float(np.linalg.norm(self.matrix - self.matrix.T) / np.linalg.norm(self.matrix))

    def __sub__(self, other: "DNMatrix") -> "DNMatrix":
        return DNMatrix(self.rows, self.cols, self.matrix - other.matrix, dict(self.meta))

    def to_csv(self, path) -> Path:
        M = self.matrix
        rows = ((i, j, M[i, j]) for i in range(M.shape[0]) for j in range(M.shape[1]))
        return write_csv(path, ["i", "j", "value"], rows)

    def to_json(self, path) -> Path:
        path = Path(path)
        meta = dict(self.meta, rows=self.rows, cols=self.cols, shape=list(self.matrix.shape))
        path.write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")
        return path


def _basis_list(basis):
    if isinstance(basis, ExteriorBasis):
        return basis.functions(), basis.describe()
    return list(basis), {"count": len(basis)}


def dn_map(problem: SchrodingerProblem, basis, col_basis=None) -> DNMatrix:
    """Lambda[i][j] = B_q(u_{f_i}, g_j) with g from ``col_basis`` (default: same basis)."""
    fs, rdesc = _basis_list(basis)
    gs, cdesc = (fs, rdesc) if col_basis is None else _basis_list(col_basis)
    us = [solve_dirichlet(f, problem) for f in fs]
    M = np.array([[bilinear_form(u, g, problem) for g in gs] for u in us])
    return DNMatrix(rdesc, cdesc, M, {"s": problem.s.s, "mask": problem.mask.describe()})


def alessandrini_gap(problem1, problem2, f1: Field, f2: Field):
    """(lhs, rhs, |lhs - rhs|) of <(L1 - L2) f1, f2> = <(q1 - q2) u1, u2>."""
    if problem1.mask is not problem2.mask and problem1.grid != problem2.grid:
        raise InvalidMask("problems must share the mask")
    u1 = solve_dirichlet(f1, problem1)
    u1b = solve_dirichlet(f1, problem2)
    u2 = solve_dirichlet(f2, problem2)
    lhs = bilinear_form(u1, f2, problem1) - bilinear_form(u1b, f2, problem2)
    rhs = l2_inner((problem1.q - problem2.q) * u1, u2)
    return lhs, rhs, abs(lhs - rhs)


# --- Runge approximation ---------------------------------------------------


@dataclass
class RungeResult:
    f: Field
    coefficients: np.ndarray
    residual: float
    delta: float
    residual_history: list
    interior: np.ndarray


def interior_responses(problem: SchrodingerProblem, fs: list) -> np.ndarray:
    """Columns u_{f_i} restricted to Omega (equal to the interior correction since f_i = 0 there)."""
    return np.stack([solve_dirichlet(f, problem).flat[problem.mask.omega_idx] for f in fs], axis=1)


def _tikhonov(U, S, Wt, rhs, delta):
    return Wt.T @ ((S / (S**2 + delta)) * (U.T @ rhs))


def _lcurve_corner(res, sol):
    """Index of maximum curvature of the (log residual, log solution norm) curve."""
    x = np.log(np.maximum(res, 1e-300))
    y = np.log(np.maximum(sol, 1e-300))
    if len(x) < 3:
        return int(np.argmin(res))
    dx, dy = np.gradient(x), np.gradient(y)
    ddx, ddy = np.gradient(dx), np.gradient(dy)
    kappa = (dx * ddy - dy * ddx) / np.maximum((dx**2 + dy**2) ** 1.5, 1e-300)
    return int(np.argmax(np.abs(kappa)))


def runge_approximate(g: Field, basis, problem: SchrodingerProblem, delta="best", basis_size=None, responses=None) -> RungeResult:
    """Tikhonov fit of g on Omega by interior parts of exterior-driven solutions.

    Minimizes ||u_f|_O - g||^2_{L2(O)} + delta ||c||^2 over f = sum c_i f_i.
    ``delta`` is a number, ``"best"`` (smallest residual over the default sweep),
    ``"auto"`` (L-curve corner over the sweep) or a sequence to sweep.
    ``residual_history`` lists relative residuals for nested prefixes of size
    4, 8, ... up to ``basis_size`` at the chosen delta.
    """
    fs, _ = _basis_list(basis)
    k = len(fs) if basis_size is None else basis_size
    fs = fs[:k]
    V = interior_responses(problem, fs) if responses is None else responses[:, :k]
    idx = problem.mask.omega_idx
    gO = g.flat[idx]
    if np.any(np.delete(g.flat, idx) != 0):
        raise InvalidMask("Runge target must be supported in Omega")
    gnorm = np.linalg.norm(gO)
    w = math.sqrt(problem.grid.h**problem.grid.n)
    U, S, Wt = np.linalg.svd(w * V, full_matrices=False)
    if S[-1] == 0 or S[0] / S[-1] > COND_CAP:
        warn(IllConditioned, f"Runge system condition estimate {S[0] / max(S[-1], 1e-300):.2e} above {COND_CAP:.0e}")
    rhs = w * gO

    def fit(d):
        c = _tikhonov(U, S, Wt, rhs, d)
        return c, float(np.linalg.norm(V @ c - gO) / gnorm)

    if isinstance(delta, str):
        deltas = RUNGE_DELTAS
        fits = [fit(d) for d in deltas]
        res = np.array([r for _, r in fits])
        if delta == "best":
            i = int(np.argmin(res))
        elif delta == "auto":
            i = _lcurve_corner(res, np.array([np.linalg.norm(c) for c, _ in fits]))
        else:
            raise ValueError(f"unknown delta rule {delta!r}")
        chosen = deltas[i]
    elif np.ndim(delta):
        deltas = tuple(delta)
        res = [fit(d)[1] for d in deltas]
        chosen = deltas[int(np.argmin(res))]
    else:
        if not delta > 0:
            raise ValueError("delta must be positive")
        chosen = float(delta)
    c, r = fit(chosen)
    history = []
    size = 4
    while size < k:
        Uk, Sk, Wk = np.linalg.svd(w * V[:, :size], full_matrices=False)
        ck = _tikhonov(Uk, Sk, Wk, rhs, chosen)
        history.append((size, float(np.linalg.norm(V[:, :size] @ ck - gO) / gnorm)))
        size *= 2
    history.append((k, r))
    fvals = sum(ci * fi.values for ci, fi in zip(c, fs))
    return RungeResult(Field(problem.grid, fvals), c, r, chosen, history, V @ c)


@dataclass
class PairingData:
    """Cross DN difference (Lambda_{q1} - Lambda_{q2}) between bases in W1 and W2."""

    problem1: SchrodingerProblem
    problem2: SchrodingerProblem
    basis1: ExteriorBasis
    basis2: ExteriorBasis
    dn_difference: np.ndarray

    @classmethod
    def build(cls, problem1, problem2, basis1, basis2) -> "PairingData":
        d1 = dn_map(problem1, basis1, basis2).matrix
        d2 = dn_map(problem2, basis1, basis2).matrix
        return cls(problem1, problem2, basis1, basis2, d1 - d2)


def recover_pairings(data: PairingData, phi: Field, psi: Field, delta="best", max_residual: float = 0.2) -> float:
    """Estimate <q1 - q2, phi> from DN data.

    phi is approximated by solutions of problem1 driven from W1, psi (equal
    to 1 on the support of phi) by solutions of problem2 driven from W2; the
    DN difference paired with the two coefficient vectors gives
    <(q1 - q2) u1, u2> ~ <(q1 - q2) phi, psi> = <q1 - q2, phi>.
    """
    r1 = runge_approximate(phi, data.basis1, data.problem1, delta)
    r2 = runge_approximate(psi, data.basis2, data.problem2, delta)
    for name, r in (("phi", r1), ("psi", r2)):
        if r.residual > max_residual:
            raise ApproximationTooCoarse(f"Runge residual for {name} is {r.residual:.3f} > {max_residual}")
    return float(r1.coefficients @ data.dn_difference @ r2.coefficients)


def plateau(grid: Grid, inner: float, outer: float) -> Field:
    """Smooth radial cutoff: 1 for |x| <= inner, 0 for |x| >= outer."""
    r = grid.radius()
    t = (r - inner) / (outer - inner)

    def e(z):
        out = np.zeros_like(z)
        m = z > 0
        out[m] = np.exp(-1.0 / z[m])
        return out

    return Field(grid, e(1 - t) / (e(1 - t) + e(t)), "plateau")
