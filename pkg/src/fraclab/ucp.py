"""Extremal quadratic forms probing unique continuation.

Q_s(u) = ||u||^2_{L2(V)} + ||(-Delta)^s u||^2_{L2(V)} over unit-norm u in a
band-limited subspace.  For integer s the operator is local and Q_s can be
made (numerically) zero by functions living away from V; for fractional s it
stays positive.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import EigSolveFailure
from .io import write_csv
from .spectral import Exponent, Field, Grid, as_exponent, frac_laplacian, symbol


@dataclass(frozen=True, eq=False)
class ProbeDomain:
    grid: Grid
    mask: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.mask, dtype=bool).reshape(self.grid.shape)
        if not m.any():
            raise ValueError("V is empty")
        m.setflags(write=False)
        object.__setattr__(self, "mask", m)

    @classmethod
    def ball(cls, grid: Grid, radius: float, center=None) -> "ProbeDomain":
        return cls(grid, grid.radius(center) < radius - 1e-12)

    @property
    def volume(self) -> float:
        return float(self.mask.sum()) * self.grid.h**self.grid.n


def trig_basis(grid: Grid, dim: int, mean_zero: bool = False) -> np.ndarray:
    """First ``dim`` real Fourier modes ordered by |k|, orthonormal for h^n sum u v.

    Columns are flattened fields.  With ``mean_zero`` the constant is skipped.
    """
    n, N, L = grid.n, grid.N, grid.L
    kmax = N // 2 - 1
    ks = np.array(np.meshgrid(*([np.arange(-kmax, kmax + 1)] * n), indexing="ij")).reshape(n, -1).T
    # one representative per +-k pair, ordered by |k| then lexicographically
    first = np.array([next((c for c in k if c != 0), 0) > 0 or not k.any() for k in ks])
    ks = ks[first]
    order = np.lexsort(tuple(ks[:, ::-1].T) + ((ks**2).sum(axis=1),))
    ks = ks[order]
    X = np.stack([c.ravel() for c in grid.coords()], axis=1)
    vol = (2 * L) ** n
    cols = []
    for k in ks:
        phase = (np.pi / L) * X @ k
        if not k.any():
            if not mean_zero:
                cols.append(np.full(grid.size, 1 / math.sqrt(vol)))
        else:
            cols.append(np.cos(phase) * math.sqrt(2 / vol))
            cols.append(np.sin(phase) * math.sqrt(2 / vol))
        if len(cols) >= dim:
            break
    if len(cols) < dim:
        raise ValueError(f"grid supports fewer than {dim} modes")
    return np.stack(cols[:dim], axis=1)


@dataclass
class UcpSpectrumResult:
    s: Exponent
    V: ProbeDomain
    lambda_min: float
    witness: Field
    N: int
    subspace_dim: int

    def row(self) -> tuple:
        return (self.s.s, self.N, self.subspace_dim, self.V.volume, self.lambda_min)


def quadratic_value(u: Field, s, V: ProbeDomain) -> float:
    """Q_s(u) evaluated directly on a field."""
    s = as_exponent(s)
    h = u.grid.h**u.grid.n
    Lu = frac_laplacian(u, s.s, project_mean=s.s < 0).values
    m = V.mask
    return h * float(np.sum(u.values[m] ** 2) + np.sum(Lu[m] ** 2))


def ucp_quadratic_min(s, V: ProbeDomain, subspace_dim: int = 15) -> UcpSpectrumResult:
    """Smallest value of Q_s on the unit sphere of the band-limited subspace.

    Computed as the squared smallest singular value of the stacked operator
    [u|_V ; ((-Delta)^s u)|_V], which avoids squaring its condition number.
    """
    s = as_exponent(s)
    g = V.grid
    B = trig_basis(g, subspace_dim, mean_zero=s.s < 0)
    sym = symbol(g, s.s)
    MB = np.stack([np.real(np.fft.ifftn(sym * np.fft.fftn(b.reshape(g.shape)))).ravel() for b in B.T], axis=1)
    m = V.mask.ravel()
    w = math.sqrt(g.h**g.n)
    stacked = w * np.vstack([B[m], MB[m]])
    try:
        _, sv, Wt = np.linalg.svd(stacked, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise EigSolveFailure(str(exc), module="ucp_probe") from exc
    c = Wt[-1]
    u = B @ c
    u /= w * np.linalg.norm(u)
    return UcpSpectrumResult(s, V, float(sv[-1] ** 2), Field(g, u, "witness"), g.N, subspace_dim)


def locality_contrast(s_frac, s_int, V: ProbeDomain, subspace_dim: int = 15) -> float:
    a = ucp_quadratic_min(s_frac, V, subspace_dim).lambda_min
    b = ucp_quadratic_min(s_int, V, subspace_dim).lambda_min
    return a / max(b, 1e-16)


def refinement_trend(s, Ns, L: float = math.pi, radius_frac: float = 0.25, dim_rule=lambda N: N // 8 + 1) -> list:
    """UcpSpectrumResults on refining 1D grids with V = |x| < radius_frac * L and growing subspaces."""
    out = []
    for N in Ns:
        g = Grid(1, N, L)
        out.append(ucp_quadratic_min(s, ProbeDomain.ball(g, radius_frac * L), dim_rule(N)))
    return out


def write_rows(path, results: list):
    return write_csv(path, ["s", "N", "subspace_dim", "V_volume", "lambda_min"], [r.row() for r in results])
