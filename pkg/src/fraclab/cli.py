"""Command-line experiment driver.

    fraclab run <experiment> [--config path] [--threads k] [--seed n]
    fraclab export <artifact> --format csv|raw [--out path]

Exit codes: 0 success, 1 numerical failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import ast
import configparser
import hashlib
import json
import os
import sys
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from . import __version__
from .errors import ConfigError, FraclabError, NotFound, UnsupportedFormat

EXPERIMENTS = (
    "poincare",
    "schrodinger-dn",
    "alessandrini",
    "runge",
    "recover-q",
    "magnetic-gauge",
    "dplane-roi",
    "ucp-scan",
)
THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def _parse_value(raw: str):
    raw = raw.strip()
    try:
        return ast.literal_eval(raw)
    except (ValueError, SyntaxError):
        return raw


@dataclass
class ExperimentConfig:
    name: str
    grid: dict
    params: dict
    masks: dict
    seed: int
    output: Path
    digest: str
    text: str = field(repr=False, default="")

    @classmethod
    def load(cls, name: str, path=None, seed: int | None = None) -> "ExperimentConfig":
        if path is None:
            text = resources.files("fraclab").joinpath("configs", f"{name}.ini").read_text()
        else:
            p = Path(path)
            if not p.exists():
                raise ConfigError(f"config file {p} not found", module="cli")
            text = p.read_text()
        cp = configparser.ConfigParser()
        cp.optionxform = str
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse config: {exc}", module="cli") from exc
        sec = lambda s: {k: _parse_value(v) for k, v in cp[s].items()} if cp.has_section(s) else {}
        run = sec("run")
        if seed is not None:
            run["seed"] = seed
        if "seed" not in run or not isinstance(run["seed"], int):
            raise ConfigError("[run] seed = <int> is required", module="cli")
        grid = sec("grid")
        for k in ("n", "N", "L"):
            if k not in grid:
                raise ConfigError(f"[grid] {k} is missing", module="cli")
        out = os.environ.get("FRACLAB_OUT") or run.get("output") or "fraclab_out"
        # seed override is part of the effective configuration
        digest = hashlib.sha256((text + f"\nseed={run['seed']}").encode()).hexdigest()
        return cls(name, grid, sec("params"), sec("masks"), int(run["seed"]), Path(out) / name, digest, text)

    def make_grid(self):
        from .spectral import Grid

        try:
            return Grid(int(self.grid["n"]), int(self.grid["N"]), float(self.grid["L"]))
        except (ValueError, FraclabError) as exc:
            raise ConfigError(f"invalid grid: {exc}", module="cli") from exc

    def p(self, key, default=None):
        if key not in self.params:
            if default is None:
                raise ConfigError(f"[params] {key} is missing", module="cli")
            return default
        return self.params[key]


@dataclass
class Outcome:
    artifacts: list = field(default_factory=list)
    iterations: dict = field(default_factory=dict)
    results: dict = field(default_factory=dict)
    ok: bool = True
    message: str = ""


# --- experiments ------------------------------------------------------------------


def _mask(cfg, grid):
    from .errors import InvalidMask
    from .schrodinger import DomainMask

    m = cfg.masks
    try:
        return DomainMask.interval(grid, m.get("omega", (-1.0, 1.0)), m.get("W1", (-2.0, -1.0625)), m.get("W2", (1.0625, 2.0)))
    except InvalidMask as exc:
        raise ConfigError(str(exc), module="cli") from exc


def _potential(cfg, grid, mask):
    from .spectral import Field, bump_values

    vals = cfg.p("q_offset", 0.0) + cfg.p("q_amp", 0.0) * bump_values(grid, cfg.p("q_center", 0.0), cfg.p("q_radius", 0.5))
    return Field(grid, vals * mask.omega, "q")


def _schrodinger_setup(cfg):
    from .schrodinger import ExteriorBasis, SchrodingerProblem

    g = cfg.make_grid()
    mask = _mask(cfg, g)
    P = SchrodingerProblem(mask, cfg.p("s"), _potential(cfg, g, mask))
    W1, W2 = cfg.masks.get("W1", (-2.0, -1.0625)), cfg.masks.get("W2", (1.0625, 2.0))
    count, radius = cfg.p("basis_count", 32), cfg.p("basis_radius", 0.1)
    return g, mask, P, ExteriorBasis(g, W1[0], W1[1], count, radius), ExteriorBasis(g, W2[0], W2[1], count, radius)


def exp_poincare(cfg, out: Path) -> Outcome:
    from .poincare import Region, SamplerConfig, valid_kinds, verify_sweep

    g = cfg.make_grid()
    K = Region(g.n, cfg.p("region_radius", 1.0))
    sampler = SamplerConfig(g, K, cfg.p("samples", 100), cfg.seed)
    pairs = cfg.p("pairs")
    if isinstance(pairs, str):
        pairs = [tuple(float(v) for v in item.split(":")) for item in pairs.split(",")]
    res = Outcome()
    rows = []
    for s, t in pairs:
        for kind in valid_kinds(s, t):
            rep = verify_sweep(sampler, s, t, kind)
            res.artifacts.append(rep.to_csv(out / f"poincare_s{s}_t{t}_{kind}.csv"))
            rows.append(rep.summary())
            if rep.violations:
                res.ok = False
    res.results["sweeps"] = rows
    res.results["violations"] = sum(r["violations"] for r in rows)
    if not res.ok:
        res.message = f"{res.results['violations']} Poincare violations"
    return res


def exp_schrodinger_dn(cfg, out: Path) -> Outcome:
    from .io import write_raw
    from .schrodinger import dn_map, solve_dirichlet

    g, mask, P, B1, _ = _schrodinger_setup(cfg)
    D = dn_map(P, B1)
    _, info = solve_dirichlet(B1.functions(1)[0], P, return_info=True)
    res = Outcome()
    res.artifacts += [D.to_csv(out / "dn.csv"), write_raw(out / "dn", D.matrix, {"kind": "dnmatrix", "n": g.n, "N": g.N, "L": g.L, "shape": list(D.matrix.shape)})]
    res.iterations["dirichlet_solve"] = {"path": info.path, "iterations": info.iterations}
    res.results = {"asymmetry": D.asymmetry(), "shape": list(D.matrix.shape), "rayleigh_positive": bool(P.rayleigh_positive)}
    res.ok = D.asymmetry() <= 1e-10
    return res


def _random_potential(g, mask, rng):
    from .spectral import Field, bump_values

    vals = rng.uniform(0.0, 0.5) * mask.omega.astype(float)
    for _ in range(3):
        vals = vals + rng.uniform(0.2, 1.0) * bump_values(g, rng.uniform(-0.5, 0.5), rng.uniform(0.2, 0.45))
    return Field(g, vals * mask.omega)


def exp_alessandrini(cfg, out: Path) -> Outcome:
    import numpy as np

    from .io import write_csv
    from .schrodinger import ExteriorBasis, SchrodingerProblem, alessandrini_gap

    g = cfg.make_grid()
    mask = _mask(cfg, g)
    W1, W2 = cfg.masks.get("W1", (-2.0, -1.0625)), cfg.masks.get("W2", (1.0625, 2.0))
    B1 = ExteriorBasis(g, W1[0], W1[1], cfg.p("basis_count", 32), cfg.p("basis_radius", 0.1)).functions()
    B2 = ExteriorBasis(g, W2[0], W2[1], cfg.p("basis_count", 32), cfg.p("basis_radius", 0.1)).functions()
    rng = np.random.default_rng(cfg.seed)
    rows = []
    for k in range(cfg.p("pairs", 10)):
        P1 = SchrodingerProblem(mask, cfg.p("s"), _random_potential(g, mask, rng))
        P2 = P1.with_q(_random_potential(g, mask, rng))
        i, j = rng.integers(len(B1)), rng.integers(len(B2))
        lhs, rhs, gap = alessandrini_gap(P1, P2, B1[i], B2[j])
        rows.append((k, int(i), int(j), lhs, rhs, gap / max(abs(rhs), 1e-300)))
    res = Outcome()
    res.artifacts.append(write_csv(out / "alessandrini.csv", ["pair", "f1", "f2", "lhs", "rhs", "rel_gap"], rows))
    worst = max(r[-1] for r in rows)
    res.results = {"max_rel_gap": worst, "pairs": len(rows)}
    res.ok = worst <= 1e-8
    return res


def exp_runge(cfg, out: Path) -> Outcome:
    from .io import save_field, write_csv
    from .schrodinger import runge_approximate
    from .spectral import make_bump

    g, mask, P, B1, _ = _schrodinger_setup(cfg)
    target = make_bump(g, cfg.p("target_center", 0.0), cfg.p("target_radius", 0.9))
    r = runge_approximate(target, B1, P, cfg.p("delta", "best"))
    res = Outcome()
    res.artifacts += [
        write_csv(out / "runge_history.csv", ["basis_size", "relative_residual"], r.residual_history),
        save_field(out / "runge_exterior", r.f, "exterior_data"),
    ]
    res.results = {"residual": r.residual, "delta": r.delta, "history": r.residual_history}
    res.ok = r.residual <= 0.1
    return res


def exp_recover_q(cfg, out: Path) -> Outcome:
    from .schrodinger import PairingData, plateau, recover_pairings
    from .spectral import Field, bump_values, l2_inner, make_bump

    g, mask, P1, B1, B2 = _schrodinger_setup(cfg)
    dq = Field(g, cfg.p("dq_amp", 1.0) * bump_values(g, cfg.p("dq_center", 0.0), cfg.p("dq_radius", 0.8)) * mask.omega)
    P2 = P1.with_q(P1.q - dq)
    data = PairingData.build(P1, P2, B1, B2)
    phi = make_bump(g, 0.0, cfg.p("phi_radius", 0.5))
    psi = plateau(g, cfg.p("psi_inner", 0.55), cfg.p("psi_outer", 0.97))
    est = recover_pairings(data, phi, psi)
    truth = l2_inner(dq, phi)
    res = Outcome()
    res.results = {"estimate": est, "oracle": truth, "relative_error": abs(est / truth - 1)}
    res.ok = res.results["relative_error"] <= 0.15
    return res


def exp_magnetic_gauge(cfg, out: Path) -> Outcome:
    import numpy as np

    from .io import write_raw
    from .magnetic import BivariateField, MagneticProblem, gauge_equivalent, gauge_partner, magnetic_dn_map, potential_from_S
    from .schrodinger import ExteriorBasis
    from .spectral import Field, bump_values

    g = cfg.make_grid()
    if g.n != 1:
        raise ConfigError("magnetic-gauge runs on n = 1 grids", module="cli")
    mask = _mask(cfg, g)
    s = cfg.p("s")
    x = g.x
    rng = np.random.default_rng(cfg.seed)
    c1, c2 = rng.uniform(-0.3, 0.3, 2)
    a, b = bump_values(g, c1, 0.7), bump_values(g, c2, 0.8)
    A = potential_from_S(mask, s, 3 * np.outer(a, b) * (x[:, None] - x[None, :]) ** 2)
    q = Field(g, cfg.p("q_amp", 0.4) * bump_values(g, 0.0, 0.9))
    P = MagneticProblem(mask, s, A, q)
    w = bump_values(g, rng.uniform(-0.2, 0.2), 0.6)
    D = BivariateField(g, A.order, 0.5 * np.outer(w, w))
    P2 = gauge_partner(P, D)
    P3 = P2.with_potentials(P2.A, P2.q + Field(g, cfg.p("perturbation", 0.05) * bump_values(g, 0.1, 0.5)))
    W1 = cfg.masks.get("W1", (-2.0, -1.0625))
    basis = ExteriorBasis(g, W1[0], W1[1], cfg.p("basis_count", 8), cfg.p("basis_radius", 0.2))
    D1, D2, D3 = (magnetic_dn_map(p, basis).matrix for p in (P, P2, P3))
    rel = lambda X, Y: float(np.linalg.norm(X - Y) / np.linalg.norm(X))
    tol = cfg.p("tol", 1e-6)
    rep_pair, rep_pert = gauge_equivalent(P, P2, tol), gauge_equivalent(P, P3, tol)
    res = Outcome()
    meta = {"kind": "dnmatrix", "n": g.n, "N": g.N, "L": g.L, "shape": list(D1.shape)}
    res.artifacts += [write_raw(out / "dn_original", D1, meta), write_raw(out / "dn_partner", D2, meta), write_raw(out / "dn_perturbed", D3, meta)]
    res.results = {
        "dn_partner_rel": rel(D1, D2),
        "dn_perturbed_rel": rel(D1, D3),
        "gauge_partner": json.loads(rep_pair.to_json()),
        "gauge_perturbed": json.loads(rep_pert.to_json()),
        "checks": P.checks,
    }
    res.ok = rel(D1, D2) <= tol and rel(D1, D3) > tol and rep_pair.verdict and not rep_pert.verdict
    return res


def exp_dplane_roi(cfg, out: Path) -> Outcome:
    import numpy as np

    from .dplane import PlaneGeometry, ball_mask, expected_normal_constant, normal_operator, phantom, roi_invert_even_d
    from .io import save_field

    g = cfg.make_grid()
    d = cfg.p("d", 2)
    geom = PlaneGeometry(g, d, cfg.p("M", 128))
    f = phantom(g, cfg.p("phantom", "blobs"), cfg.seed)
    c = expected_normal_constant(g.n, d)
    source = cfg.p("data", "convolution")
    if source not in ("convolution", "composition"):
        raise ConfigError(f"data must be convolution or composition, got {source!r}", module="cli")
    Ndf = normal_operator(f, geom, source, c)
    R = cfg.p("roi_radius", 0.6)
    V = ball_mask(g, R)
    rec = roi_invert_even_d(Ndf, V, d, c)
    inner = ball_mask(g, R - 2 * g.h)
    err = float(np.linalg.norm((rec.values - f.values)[inner]) / np.linalg.norm(f.values[inner]))
    res = Outcome()
    res.artifacts.append(save_field(out / "roi_reconstruction", rec, "roi"))
    res.results = {"relative_error": err, "c": c, "data": source, "geometry": geom.describe()}
    res.ok = err <= 0.05
    return res


def exp_ucp_scan(cfg, out: Path) -> Outcome:
    from .io import save_field
    from .ucp import ProbeDomain, refinement_trend, ucp_quadratic_min, write_rows

    g = cfg.make_grid()
    V = ProbeDomain.ball(g, cfg.p("v_radius"))
    dim = cfg.p("subspace_dim", 15)
    exps = cfg.p("exponents")
    results = [ucp_quadratic_min(s, V, dim) for s in exps]
    trend = refinement_trend(0.5, cfg.p("trend_N", (32, 64, 128)), g.L, cfg.p("v_radius") / g.L)
    res = Outcome()
    res.artifacts += [write_rows(out / "ucp_scan.csv", results), write_rows(out / "ucp_trend.csv", trend)]
    lam = {r.s.s: r.lambda_min for r in results}
    for r in results:
        if r.s.s == 1.0:
            res.artifacts.append(save_field(out / "witness_s1", r.witness, "witness"))
    res.results = {"lambda_min": {repr(k): v for k, v in lam.items()}}
    if 1.0 in lam and 0.5 in lam:
        ratio = lam[0.5] / max(lam[1.0], 1e-16)
        res.results["contrast"] = ratio
        res.ok = lam[1.0] <= 1e-12 and lam[0.5] > 0 and ratio >= 1e4
    return res


RUNNERS = {
    "poincare": exp_poincare,
    "schrodinger-dn": exp_schrodinger_dn,
    "alessandrini": exp_alessandrini,
    "runge": exp_runge,
    "recover-q": exp_recover_q,
    "magnetic-gauge": exp_magnetic_gauge,
    "dplane-roi": exp_dplane_roi,
    "ucp-scan": exp_ucp_scan,
}


# --- manifest ---------------------------------------------------------------------


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if hasattr(obj, "item"):
        return obj.item()
    return obj


def build_manifest(cfg: ExperimentConfig, outcome: Outcome, threads: int, wall: float) -> dict:
    from .io import sha256_file

    arts = []
    for p in sorted({Path(a) for a in outcome.artifacts} | {Path(a).with_suffix(".json") for a in outcome.artifacts if Path(a).suffix == ".raw"}):
        arts.append({"path": p.name, "sha256": sha256_file(p), "bytes": p.stat().st_size})
    body = {
        "experiment": cfg.name,
        "config_sha256": cfg.digest,
        "seed": cfg.seed,
        "version": __version__,
        "threads": threads,
        "artifacts": arts,
        "solver_iterations": _jsonable(outcome.iterations),
        "results": _jsonable(outcome.results),
        "ok": outcome.ok,
    }
    # wall time stays outside the digested body
    body_digest = hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()
    return body | {"content_sha256": body_digest, "wall_time_s": round(wall, 3)}


def run(experiment: str, config_path=None, threads: int = 1, seed: int | None = None) -> int:
    if experiment not in RUNNERS:
        print(f"unknown experiment {experiment!r}; valid: {', '.join(EXPERIMENTS)}", file=sys.stderr)
        return 2
    try:
        cfg = ExperimentConfig.load(experiment, config_path, seed)
    except FraclabError as exc:
        print(str(exc), file=sys.stderr)
        return 2
    out = cfg.output
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    try:
        outcome = RUNNERS[experiment](cfg, out)
    except ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return 2
    except FraclabError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    manifest = build_manifest(cfg, outcome, threads, time.perf_counter() - t0)
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    print(json.dumps({"experiment": experiment, "ok": outcome.ok, "output": str(out)}, sort_keys=True))
    if not outcome.ok:
        print(f"[cli] NumericalFailure: {outcome.message or 'acceptance check failed'}", file=sys.stderr)
        return 1
    return 0


def export_artifact(artifact, fmt: str, out=None) -> int:
    from .io import export

    try:
        print(export(artifact, fmt, out))
    except (NotFound, UnsupportedFormat) as exc:
        print(str(exc), file=sys.stderr)
        return 2
    except FraclabError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fraclab", description="Fractional operator experiments")
    sub = ap.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run a named experiment")
    r.add_argument("experiment", choices=EXPERIMENTS, metavar="experiment", help="one of: " + ", ".join(EXPERIMENTS))
    r.add_argument("--config", default=None, help="INI file (default: shipped config)")
    r.add_argument("--threads", type=int, default=1)
    r.add_argument("--seed", type=int, default=None)
    e = sub.add_parser("export", help="convert a raw artifact")
    e.add_argument("artifact")
    e.add_argument("--format", required=True)
    e.add_argument("--out", default=None)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "run":
        if args.threads < 1:
            print("--threads must be >= 1", file=sys.stderr)
            return 2
        for var in THREAD_VARS:
            os.environ.setdefault(var, str(args.threads))
        return run(args.experiment, args.config, args.threads, args.seed)
    return export_artifact(args.artifact, args.format, args.out)


if __name__ == "__main__":
    sys.exit(main())
