"""Fractional Poincare constants and their sampled verification.

Three constants bound ||(-Delta)^{t/2} u|| by ||(-Delta)^{s/2} u|| for u
supported in a compact set K:

* ``freq_split``: eps^-s / sqrt(1 - eps^n |K||B1|), optionally minimized over eps
* ``simple``:     sqrt(2) (2 |K||B1|)^{s/n}
* ``interp``:     C^{s-t}, C = 1/sqrt(lambda_1) the classical Dirichlet constant of K

The first two bound the t = 0 case.  For t > 0 they are lifted through
||u||_{H^t} <= ||u||_{H^s} <= 2^{(s+1)/2}(||u|| + ||u||_{dot H^s}), giving
2^{(s+1)/2}(c + 1).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import EpsTooLarge, InvalidExponentOrder, SupportViolation, ZeroField
from .io import write_csv
from .spectral import Field, Grid, bump_values, sobolev_norm

KINDS = ("freq_split", "simple", "interp")
SUPPORT_TOL = 1e-14
SLACK = 1e-9


def unit_ball_volume(n: int) -> float:
    return math.pi ** (n / 2) / math.gamma(n / 2 + 1)


@dataclass(frozen=True)
class Region:
    """A ball (``radius`` = radius) or axis-aligned box (``radius`` = half-width)."""

    n: int
    radius: float = 1.0
    shape: str = "ball"
    center: tuple = ()

    def __post_init__(self):
        if self.shape not in ("ball", "box"):
            raise ValueError(f"unknown region shape {self.shape!r}")
        c = tuple(float(v) for v in self.center) or (0.0,) * self.n
        object.__setattr__(self, "center", c)

    @property
    def volume(self) -> float:
        if self.shape == "ball":
            return unit_ball_volume(self.n) * self.radius**self.n
        return (2 * self.radius) ** self.n

    def mask(self, grid: Grid) -> np.ndarray:
        X = grid.coords()
        if self.shape == "ball":
            return sum((Xi - ci) ** 2 for Xi, ci in zip(X, self.center)) <= self.radius**2 + 1e-12
        m = np.ones(grid.shape, dtype=bool)
        for Xi, ci in zip(X, self.center):
            m &= np.abs(Xi - ci) <= self.radius + 1e-12
        return m


def classical_constant(K: Region, resolution: int | None = None) -> float:
    """1/sqrt(lambda_1) of the finite-difference Dirichlet Laplacian on K."""
    res = resolution or {1: 400, 2: 120, 3: 40}[K.n]
    return _classical(K.n, K.radius, K.shape, res)


@lru_cache(maxsize=32)
def _classical(n, radius, shape, res):
    h = 2 * radius / res
    x = -radius + h * np.arange(1, res)
    X = np.meshgrid(*([x] * n), indexing="ij")
    if shape == "ball":
        inside = sum(Xi**2 for Xi in X) < radius**2
    else:
        inside = np.ones(X[0].shape, dtype=bool)
    m = len(x)
    lap1 = sp.diags([-np.ones(m - 1), 2 * np.ones(m), -np.ones(m - 1)], [-1, 0, 1]) / h**2
    eye = sp.identity(m)
    A = sp.csr_matrix((m**n, m**n))
    for ax in range(n):
        ops = [eye] * n
        ops[ax] = lap1
        term = ops[0]
        for o in ops[1:]:
            term = sp.kron(term, o)
        A = A + term
    idx = np.flatnonzero(inside.ravel())
    A = A.tocsr()[idx][:, idx]
    lam = spla.eigsh(A, k=1, sigma=0, which="LM", return_eigenvectors=False)[0]
    return 1.0 / math.sqrt(lam)


def _check_order(s, t):
    if not s >= t >= 0:
        raise InvalidExponentOrder(f"need s >= t >= 0, got s={s}, t={t}")


def interp_valid(s: float, t: float) -> bool:
    return (s >= t >= 1) or (s >= 1 >= t >= 0) or s == t


def valid_kinds(s: float, t: float) -> list:
    kinds = ["freq_split", "simple"]
    if interp_valid(s, t):
        kinds.append("interp")
    return kinds


def eps_constant(K: Region, s: float, eps: float) -> float:
    a = K.volume * unit_ball_volume(K.n)
    eps_max = a ** (-1.0 / K.n)
    if not 0 < eps < eps_max:
        raise EpsTooLarge(f"eps={eps} must lie in (0, {eps_max:.6g})")
    return eps ** (-s) / math.sqrt(1 - eps**K.n * a)


def _lift(c: float, s: float, t: float) -> float:
    return c if t == 0 else 2 ** ((s + 1) / 2) * (c + 1)


def theoretical_constant(kind: str, K: Region, s: float, t: float = 0.0, eps: float | None = None) -> float:
    _check_order(s, t)
    if kind == "interp":
        if not interp_valid(s, t):
            raise InvalidExponentOrder(f"interp constant needs s>=t>=1 or s>=1>=t>=0, got ({s}, {t})")
        return classical_constant(K) ** (s - t)
    if kind == "simple":
        a = K.volume * unit_ball_volume(K.n)
        return _lift(math.sqrt(2) * (2 * a) ** (s / K.n), s, t)
    if kind == "freq_split":
        if eps is not None:
            return _lift(eps_constant(K, s, eps), s, t)
        a = K.volume * unit_ball_volume(K.n)
        eps_max = a ** (-1.0 / K.n)
        sweep = eps_max * np.linspace(0, 1, 1002)[1:-1]
        c = min(eps_constant(K, s, e) for e in sweep)
        return _lift(c, s, t)
    raise ValueError(f"unknown constant kind {kind!r}; expected one of {KINDS}")


@dataclass(frozen=True)
class PoincareConstants:
    K: Region
    s: float
    t: float

    @property
    def volK(self) -> float:
        return self.K.volume

    @property
    def volB(self) -> float:
        return unit_ball_volume(self.K.n)

    @property
    def classical_C(self) -> float:
        return classical_constant(self.K)

    def eps_constant(self, eps: float) -> float:
        return eps_constant(self.K, self.s, eps)

    @property
    def simple_constant(self) -> float:
        return theoretical_constant("simple", self.K, self.s, self.t)

    @property
    def interp_constant(self) -> float:
        return theoretical_constant("interp", self.K, self.s, self.t)


def check_support(u: Field, K: Region):
    outside = ~K.mask(u.grid)
    scale = np.max(np.abs(u.values))
    if scale == 0:
        raise ZeroField("field is identically zero")
    if np.any(np.abs(u.values[outside]) > SUPPORT_TOL * scale):
        raise SupportViolation("field is not supported in K")


def poincare_ratio(u: Field, s: float, t: float, K: Region | None = None) -> float:
    """||(-Delta)^{t/2} u|| / ||(-Delta)^{s/2} u||."""
    _check_order(s, t)
    if K is not None:
        check_support(u, K)
    den = sobolev_norm(u, s, homogeneous=True)
    if den == 0 or not np.any(u.values):
        raise ZeroField("field is identically zero")
    return sobolev_norm(u, t, homogeneous=True) / den


@dataclass(frozen=True)
class SamplerConfig:
    grid: Grid
    K: Region
    count: int = 100
    seed: int = 42
    max_bumps: int = 5

    def samples(self):
        """Seeded superpositions of up to max_bumps bumps inside K, L2-normalized."""
        R = self.K.radius
        h = self.grid.h
        for child in np.random.SeedSequence(self.seed).spawn(self.count):
            rng = np.random.default_rng(child)
            nb = int(rng.integers(1, self.max_bumps + 1))
            vals = np.zeros(self.grid.shape)
            for _ in range(nb):
                rho = rng.uniform(0.15, 1.0) * (R - h)
                if self.K.shape == "ball":
                    d = rng.normal(size=self.K.n)
                    d *= rng.uniform(0, R - h - rho) / max(np.linalg.norm(d), 1e-300)
                else:
                    d = rng.uniform(-(R - h - rho), R - h - rho, self.K.n) / math.sqrt(self.K.n)
                c = np.asarray(self.K.center) + d
                vals += rng.normal() * bump_values(self.grid, c, rho)
            u = Field(self.grid, vals)
            yield u * (1.0 / u.norm())


@dataclass
class ViolationReport:
    s: float
    t: float
    kind: str
    constant: float
    ratios: list = field(default_factory=list)
    min_freq_split: float | None = None

    @property
    def max_ratio(self) -> float:
        return max(self.ratios)

    @property
    def violated(self) -> list:
        return [r > self.constant + SLACK for r in self.ratios]

    @property
    def violations(self) -> int:
        return sum(self.violated)

    def summary(self) -> dict:
        return {
            "s": self.s,
            "t": self.t,
            "kind": self.kind,
            "constant": self.constant,
            "samples": len(self.ratios),
            "max_ratio": self.max_ratio,
            "violations": self.violations,
            "min_freq_split": self.min_freq_split,
        }

    def to_csv(self, path) -> Path:
        rows = [(i, r, self.constant, int(v)) for i, (r, v) in enumerate(zip(self.ratios, self.violated))]
        return write_csv(path, ["sample_id", "ratio", "constant", "violated"], rows)

    def to_json(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.summary(), sort_keys=True, indent=1) + "\n")
        return path


def verify_sweep(sampler, s: float, t: float, constant_kind: str = "simple", K: Region | None = None) -> ViolationReport:
    """Evaluate poincare_ratio over a sampler (SamplerConfig or iterable of Fields)."""
    if isinstance(sampler, SamplerConfig):
        K = sampler.K
        fields = sampler.samples()
    else:
        fields = sampler
        if K is None:
            raise ValueError("an explicit field list needs the support region K")
    const = theoretical_constant(constant_kind, K, s, t)
    rep = ViolationReport(s, t, constant_kind, const)
    rep.min_freq_split = theoretical_constant("freq_split", K, s, t)
    for u in fields:
        rep.ratios.append(poincare_ratio(u, s, t, K))
    if not rep.ratios:
        raise ValueError("sampler produced no fields")
    return rep


def interpolation_gap(u: Field, s0: float, s1: float, theta: float) -> tuple[float, float]:
    """(lhs, rhs) of ||u||_{dot H^r} <= ||u||^{1-theta}_{dot H^s0} ||u||^theta_{dot H^s1}."""
    r = (1 - theta) * s0 + theta * s1
    lhs = sobolev_norm(u, r, homogeneous=True)
    rhs = sobolev_norm(u, s0, homogeneous=True) ** (1 - theta) * sobolev_norm(u, s1, homogeneous=True) ** theta
    return lhs, rhs
