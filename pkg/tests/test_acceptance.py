"""End-to-end acceptance criteria, one test and one PASS/FAIL line per criterion.

Each test collects its measured quantities, prints

    CRITERION k: PASS|FAIL  <name>  key=value ... time=...s/<budget>s

and then asserts every check, including the runtime budget.
"""

import itertools
import json
import os
import subprocess
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from conftest import band_limited
from fraclab.dplane import (
    PlaneGeometry,
    Sinogram,
    adjoint_dplane,
    backend_discrepancy,
    ball_mask,
    default_phantoms,
    expected_normal_constant,
    fit_normal_constant,
    forward_dplane,
    normal_operator,
    phantom,
    roi_invert_even_d,
)
from fraclab.errors import IllConditioned
from fraclab.magnetic import (
    BivariateField,
    MagneticProblem,
    antisym_integral,
    bivariate_inner,
    frac_gradient,
    gauge_equivalent,
    gauge_operators,
    gauge_partner,
    magnetic_dn_map,
    magnetic_operator_pairing,
    potential_from_S,
    tensor_ops,
)
from fraclab.poincare import Region, SamplerConfig, interpolation_gap, valid_kinds, verify_sweep
from fraclab.schrodinger import (
    DomainMask,
    ExteriorBasis,
    PairingData,
    SchrodingerProblem,
    alessandrini_gap,
    dirichlet_spectrum,
    dn_map,
    plateau,
    recover_pairings,
    runge_approximate,
    solve_dirichlet,
)
from fraclab.spectral import (
    Field,
    Grid,
    bump_values,
    compare_inner,
    frac_laplacian,
    l2_inner,
    make_bump,
    mean_zero_probe,
    riesz_potential,
    spectral_derivative,
)
from fraclab.ucp import ProbeDomain, locality_contrast, quadratic_value, ucp_quadratic_min
from oracles import dft_multiplier, freq_magnitudes

GOLDEN = json.loads((Path(__file__).parent / "golden" / "ucp_golden.json").read_text())


class Criterion:
    def __init__(self, k: int, name: str, budget: float):
        self.k, self.name, self.budget = k, name, budget
        self.checks = []
        self.t0 = time.perf_counter()

    def check(self, label: str, value, ok: bool):
        self.checks.append((label, value, bool(ok)))

    def le(self, label: str, value: float, bound: float):
        self.check(label, f"{value:.3g}<={bound:g}", value <= bound)

    def finish(self, capsys):
        elapsed = time.perf_counter() - self.t0
        self.check("time", f"{elapsed:.1f}s<{self.budget:g}s", elapsed < self.budget)
        ok = all(c[2] for c in self.checks)
        parts = " ".join(f"{label}={v}" + ("" if good else "!") for label, v, good in self.checks)
        with capsys.disabled():
            print(f"\nCRITERION {self.k}: {'PASS' if ok else 'FAIL'}  {self.name}  {parts}")
        failed = [c[0] for c in self.checks if not c[2]]
        assert not failed, f"criterion {self.k} failed: {failed}"


def rel(a, b):
    return float(np.linalg.norm(a - b) / np.linalg.norm(b))


def test_criterion_1_operator_identities(capsys):
    c = Criterion(1, "operator identities", 10)
    semi, adj = 0.0, 0.0
    rng = np.random.default_rng(1)
    cases = [(1, 256), (1, 128), (2, 64), (2, 256)]
    exps = [(0.3, 0.45), (0.7, 1.1), (1.2, 0.8), (-0.4, 0.9)]
    for (n, N), (s1, s2) in itertools.product(cases, exps):
        g = Grid(n, N, 3.0)
        u = band_limited(g, rng, mean_zero=min(s1, s2) < 0)
        a = frac_laplacian(frac_laplacian(u, s1), s2).values
        semi = max(semi, rel(a, frac_laplacian(u, s1 + s2).values))
        v = band_limited(g, rng, mean_zero=True)
        w = band_limited(g, rng, mean_zero=True)
        for s in (s1, s2):
            Lv = frac_laplacian(v, s)
            adj = max(adj, abs(l2_inner(Lv, w) - l2_inner(v, frac_laplacian(w, s))) / (Lv.norm() * w.norm()))
    c.le("semigroup_rel", semi, 1e-11)
    c.le("self_adjoint_rel", adj, 1e-11)
    c.finish(capsys)


def test_criterion_2_oracles(capsys):
    c = Criterion(2, "oracle equivalence", 120)
    rng = np.random.default_rng(2)
    worst = 0.0
    for n, N in ((1, 16), (1, 32), (2, 16), (2, 32)):
        g = Grid(n, N, 2.5)
        for s in (-0.3, 0.25, 0.5, 1.0, 1.7):
            u = Field(g, rng.normal(size=g.shape))
            if s < 0:
                u = u.with_values(u.values - u.mean())
            k = freq_magnitudes(n, N, 2.5)
            m = np.zeros_like(k)
            m[k > 0] = k[k > 0] ** (2 * s)
            ref = dft_multiplier(u.values, m)
            worst = max(worst, np.max(np.abs(frac_laplacian(u, s).values - ref)) / np.max(np.abs(ref)))
    c.le("dft_rel", worst, 1e-10)
    g = Grid(2, 128, 4.0)
    u = Field(g, mean_zero_probe(g, np.random.default_rng(99)))
    _, err = compare_inner(riesz_potential(u, 1.0, "direct").values, riesz_potential(u, 1.0, "spectral").values, g)
    c.le("riesz_backends", err, 0.05)
    c.finish(capsys)


def test_criterion_3_poincare(capsys):
    c = Criterion(3, "Poincare suite", 60)
    g = Grid(1, 256, 4.0)
    K = Region(1, 1.0)
    sampler = SamplerConfig(g, K, 100, 42)
    violations = sweeps = 0
    for s, t in ((0.5, 0.0), (1.5, 0.0), (1.5, 1.0), (2.5, 1.0)):
        for kind in valid_kinds(s, t):
            rep = verify_sweep(sampler, s, t, kind)
            violations += rep.violations
            sweeps += 1
    c.check("sweeps", sweeps, sweeps == 11)
    c.check("violations", violations, violations == 0)
    worst = 0.0
    for s0, r, s1 in itertools.combinations([0, 0.5, 1, 1.5, 2], 3):
        theta = (r - s0) / (s1 - s0)
        for u in SamplerConfig(g, K, 10, 8).samples():
            u = u.with_values(u.values - u.mean())
            lhs, rhs = interpolation_gap(u, s0, s1, theta)
            worst = max(worst, lhs / rhs - 1)
    c.le("interp_excess", worst, 1e-9)
    c.finish(capsys)


G1 = Grid(1, 256, 4.0)
MASK1 = DomainMask.interval(G1)


def default_problem():
    q = Field(G1, (0.3 + 0.5 * bump_values(G1, -0.3, 0.5)) * MASK1.omega)
    return SchrodingerProblem(MASK1, 1.5, q), ExteriorBasis(G1, -2.0, -1.0625), ExteriorBasis(G1, 1.0625, 2.0)


def test_criterion_4_schrodinger(capsys):
    c = Criterion(4, "Schrodinger suite", 120)
    P, B1, B2 = default_problem()
    rng = np.random.default_rng(4)
    vstar = rng.normal(size=len(MASK1.omega_idx))
    f = B1.functions(3)[2]
    u = solve_dirichlet(f, P, source=P.apply(vstar) - P.rhs(f))
    c.le("manufactured_rel", np.linalg.norm(u.flat[MASK1.omega_idx] - vstar) / np.linalg.norm(vstar), 1e-9)
    c.le("dn_asymmetry", dn_map(P, B1).asymmetry(), 1e-10)
    # 10 seeded potential pairs
    rng = np.random.default_rng(7)
    f1s, f2s = B1.functions(), B2.functions()

    def rand_q():
        vals = rng.uniform(0.0, 0.5) * np.ones(G1.shape)
        for _ in range(3):
            vals = vals + rng.uniform(0.2, 1.0) * bump_values(G1, rng.uniform(-0.5, 0.5), rng.uniform(0.2, 0.45))
        return Field(G1, vals * MASK1.omega)

    gap = 0.0
    for _ in range(10):
        Pa = SchrodingerProblem(MASK1, 0.7, rand_q())
        Pb = Pa.with_q(rand_q())
        lhs, rhs, gp = alessandrini_gap(Pa, Pb, f1s[rng.integers(32)], f2s[rng.integers(32)])
        gap = max(gap, gp / abs(rhs))
    c.le("alessandrini_rel", gap, 1e-8)
    lam = min(np.min(dirichlet_spectrum(SchrodingerProblem(MASK1, s, q), 5)) for s in (0.4, 1.5) for q in (G1.zeros(), P.q))
    c.check("min_eig_q>=0", f"{lam:.3g}>0", lam > 0)
    c.finish(capsys)


def test_criterion_5_runge_recovery(capsys):
    c = Criterion(5, "Runge and recovery", 300)
    P, B1, B2 = default_problem()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", IllConditioned)
        r = runge_approximate(make_bump(G1, 0.0, 0.9), B1, P)
        dq = Field(G1, bump_values(G1, 0.0, 0.8) * MASK1.omega)
        data = PairingData.build(P, P.with_q(P.q - dq), B1, B2)
        phi = make_bump(G1, 0.0, 0.5)
        est = recover_pairings(data, phi, plateau(G1, 0.55, 0.97))
    c.le("runge_residual", r.residual, 0.1)
    c.le("recovery_rel", abs(est / l2_inner(dq, phi) - 1), 0.15)
    c.finish(capsys)


def magnetic_problem(s):
    x = G1.x
    rng = np.random.default_rng(0)
    c1, c2 = rng.uniform(-0.3, 0.3, 2)
    Sv = 3 * np.outer(bump_values(G1, c1, 0.7), bump_values(G1, c2, 0.8)) * (x[:, None] - x[None, :]) ** 2
    return MagneticProblem(MASK1, s, potential_from_S(MASK1, s, Sv), Field(G1, 0.4 * bump_values(G1, 0.0, 0.9)))


def test_criterion_6_magnetic(capsys):
    c = Criterion(6, "magnetic suite", 300)
    u, v = make_bump(G1, 0.15, 0.9), make_bump(G1, -0.3, 0.7)
    en = pol = 0.0
    for s in (0.3, 0.7, 1.4):
        Gu, Gv = frac_gradient(u, s), frac_gradient(v, s)
        Lu, Lv = frac_laplacian(u, s / 2), frac_laplacian(v, s / 2)
        en = max(en, abs(Gu.l2norm() ** 2 / Lu.norm() ** 2 - 1))
        pol = max(pol, abs(bivariate_inner(Gu, Gv) - l2_inner(Lu, Lv)) / (Lu.norm() * Lv.norm()))
    c.le("energy_rel", en, 1e-2)
    c.le("polarization_rel", pol, 1e-2)
    rng = np.random.default_rng(6)
    anti = 0.0
    for g, order in ((Grid(1, 64, 2.0), 1), (Grid(2, 8, 1.0), 2)):
        shape = (g.size, g.size) + (() if g.n == 1 else (g.n,) * order)
        A = tensor_ops(BivariateField(g, order, rng.normal(size=shape)), mode="antisym")
        anti = max(anti, np.max(np.abs(antisym_integral(A))) / (g.h ** (2 * g.n) * np.abs(A.values).sum()))
    c.le("antisym_integral", anti, 1e-12)
    expanded = 0.0
    h = G1.h
    for s in (0.7, 1.4):
        P = magnetic_problem(s)
        Nf, M = gauge_operators(P.S, P.s.floor)
        for a, b in ((u, u), (u, v), (v, v)):
            lhs = magnetic_operator_pairing(a, b, P)
            D = [a.values, spectral_derivative(a.values, G1, 0, 1)]
            rhs = l2_inner(frac_laplacian(a, s), b)
            rhs += sum(h * np.sum(D[beta[0]] * M[beta].values * b.values) for beta in M)
            rhs += h * np.sum(b.values * (h * Nf.values @ a.values))
            rhs += h * np.sum(a.values * b.values * (P.Q - P.q).values)
            expanded = max(expanded, abs(lhs - rhs) / abs(lhs))
    c.le("expanded_rel", expanded, 3e-2)
    P = magnetic_problem(0.7)
    rng = np.random.default_rng(3)
    w = bump_values(G1, rng.uniform(-0.2, 0.2), 0.6)
    P2 = gauge_partner(P, BivariateField(G1, 1, 0.5 * np.outer(w, w)))
    P3 = P2.with_potentials(P2.A, P2.q + Field(G1, 0.5 * bump_values(G1, 0.1, 0.5)))
    B = ExteriorBasis(G1, -2.0, -1.0625, count=8, radius=0.2)
    D1, D2, D3 = (magnetic_dn_map(p, B).matrix for p in (P, P2, P3))
    c.le("gauge_dn_rel", rel(D2, D1), 1e-6)
    c.check("perturbed_dn_rel", f"{rel(D3, D1):.3g}>1e-6", rel(D3, D1) > 1e-6)
    c.check("gauge_verdicts", "pair=T,perturbed=F", gauge_equivalent(P, P2).verdict and not gauge_equivalent(P, P3).verdict)
    c.finish(capsys)


def test_criterion_7_dplane(capsys):
    c = Criterion(7, "d-plane suite", 300)
    rng = np.random.default_rng(7)
    adj = 0.0
    for n, N, d, M in ((2, 64, 1, 24), (3, 16, 2, 10), (3, 16, 1, 10)):
        g = Grid(n, N, 2.0)
        geo = PlaneGeometry(g, d, M)
        f = Field(g, rng.normal(size=g.shape) * ball_mask(g, 1.0 - 2 * g.h))
        s = Sinogram(geo, rng.normal(size=geo.shape))
        lhs = forward_dplane(f, geo).inner(s)
        rhs = g.h**n * float(np.sum(f.values * adjoint_dplane(s).values))
        adj = max(adj, abs(lhs - rhs) / (f.norm() * s.norm()))
    c.le("adjoint_rel", adj, 1e-9)
    g = Grid(2, 256, 2.0)
    geo = PlaneGeometry(g, 1, 360)
    cfit, spread = fit_normal_constant(geo, default_phantoms(g))
    c.le("backend_rel", backend_discrepancy(phantom(g, "blobs", 5), geo, cfit), 0.05)
    c.le("fit_spread", spread, 0.02)
    g3 = Grid(3, 64, 4.0)
    geo3 = PlaneGeometry(g3, 2, 128)
    c3 = expected_normal_constant(3, 2)
    f = phantom(g3, "blobs", 1)
    V = ball_mask(g3, 0.6)
    out = roi_invert_even_d(normal_operator(f, geo3, "convolution", c3), V, c=c3)
    inner = ball_mask(g3, 0.6 - 2 * g3.h)
    c.le("roi_rel", rel(out.values[inner], f.values[inner]), 0.05)
    c.finish(capsys)


def test_criterion_8_ucp(capsys):
    c = Criterion(8, "UCP contrast", 60)
    g = Grid(GOLDEN["grid"]["n"], GOLDEN["grid"]["N"], GOLDEN["grid"]["L"])
    V = ProbeDomain.ball(g, GOLDEN["V"]["radius"])
    dim = GOLDEN["subspace_dim"]
    r1 = ucp_quadratic_min(1, V, dim)
    r05 = ucp_quadratic_min(0.5, V, dim)
    c.le("lambda_s1", r1.lambda_min, GOLDEN["thresholds"]["integer_max"])
    c.le("witness_Q", quadratic_value(r1.witness, 1, V), GOLDEN["thresholds"]["integer_max"])
    c.check("lambda_s0.5", f"{r05.lambda_min:.3g}>0", r05.lambda_min > 0)
    ratio = locality_contrast(0.5, 1, V, dim)
    c.check("contrast", f"{ratio:.3g}>={GOLDEN['thresholds']['contrast_min']:g}", ratio >= GOLDEN["thresholds"]["contrast_min"])
    drift = abs(r05.lambda_min / GOLDEN["lambda_min"]["0.5"] - 1)
    c.le("golden_drift", drift, GOLDEN["thresholds"]["fractional_rel_tol"])
    c.finish(capsys)


EXPERIMENTS = ("poincare", "schrodinger-dn", "alessandrini", "runge", "recover-q", "magnetic-gauge", "dplane-roi", "ucp-scan")


def test_criterion_9_reproducible(capsys, tmp_path):
    c = Criterion(9, "byte-identical reruns", 600)
    env = dict(os.environ, OMP_NUM_THREADS="1", OPENBLAS_NUM_THREADS="1", MKL_NUM_THREADS="1")
    mismatched = []
    for name in EXPERIMENTS:
        seen = []
        for k in range(2):
            out = tmp_path / f"run{k}"
            r = subprocess.run(
                [sys.executable, "-m", "fraclab.cli", "run", name, "--threads", "1"],
                env=env | {"FRACLAB_OUT": str(out)},
                capture_output=True,
                text=True,
            )
            m = json.loads((out / name / "manifest.json").read_text()) if r.returncode == 0 else {}
            files = {a["path"]: (out / name / a["path"]).read_bytes() for a in m.get("artifacts", [])}
            seen.append((r.returncode, m.get("content_sha256"), [(a["path"], a["sha256"]) for a in m.get("artifacts", [])], files))
        if seen[0][0] != 0 or seen[0][1:] != seen[1][1:]:
            mismatched.append(name)
    c.check("experiments", len(EXPERIMENTS), True)
    c.check("mismatched", ",".join(mismatched) or "none", not mismatched)
    c.finish(capsys)
