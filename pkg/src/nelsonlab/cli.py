"""Command-line runner: scenarios, manifests and CSV exports."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import bogoliubov as bg
from . import checks as ck
from . import fock as fk
from . import meanfield as mf
from . import renorm as rn
from .config import SCENARIOS, ConfigError, ScenarioConfig, load_config
from .kernels import make_kernels
from .spectral import make_grid

log = logging.getLogger("nelsonlab")

EXIT_PASS, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


@dataclass
class ScenarioOutput:
    rows: list[dict]
    checks: list[ck.CheckResult]
    info: dict = field(default_factory=dict)


def _check(name: str, measured: float, tol: float, passed: bool | None = None, **details) -> ck.CheckResult:
    ok = measured <= tol if passed is None else passed
    return ck.CheckResult(name, 0, bool(ok), float(measured), float(tol), details)


def _grid(cfg: ScenarioConfig):
    g = make_grid(cfg.d, cfg.L, cfg.M)
    return g, make_kernels(g), mf.gaussian_state(g, alpha_amp=cfg.alpha_amp)


def _cutoff(cfg: ScenarioConfig, g) -> float:
    return g.k_max if cfg.cutoff is None else cfg.cutoff


def _require_tiny(cfg: ScenarioConfig) -> None:
    if (cfg.m_b, cfg.m_a) != (4, 3):
        raise ConfigError("oracle scenarios run the standard tiny instance: m_b = 4, m_a = 3")


# ---------------------------------------------------------------------------
# scenarios


def run_meanfield(cfg: ScenarioConfig) -> ScenarioOutput:
    g, ks, st = _grid(cfg)
    ks = ks.with_cutoff(cfg.cutoff)
    stride = max(1, int(round(0.01 / cfg.dt)))
    tr = mf.integrate(ks, st, mf.FlowSpec(theta=cfg.theta, dt=cfg.dt, t_final=cfg.t_final, stride=stride))
    n, e = np.array(tr.norm_u), np.array(tr.energy_theta)
    rows = [{"t": t, "norm": a, "energy": b} for t, a, b in zip(tr.times, n, e)]
    dn = float(np.max(np.abs(n - n[0])) / n[0])
    de = float(np.max(np.abs(e - e[0])) / max(abs(e[0]), 1e-300))
    return ScenarioOutput(rows, [_check("norm_drift", dn, 1e-7), _check("energy_drift", de, 1e-7)],
                          {"cutoff": _cutoff(cfg, g)})


def run_dressing(cfg: ScenarioConfig) -> ScenarioOutput:
    g, ks, st = _grid(cfg)
    ks = ks.with_cutoff(cfg.cutoff)
    rows, worst, mod = [], 0.0, 0.0
    for th in np.linspace(0.0, cfg.theta, 5)[1:]:
        ode = mf.dressing_flow_ode(ks, st, th, cfg.dt)
        closed = mf.dressing_flow_closed(ks, st, th)
        d = mf.state_distance(g, ode, closed)
        m = float(np.max(np.abs(np.abs(closed.u) - np.abs(st.u))))
        rows.append({"theta": th, "defect": d, "modulus_defect": m})
        worst, mod = max(worst, d), max(mod, m)
    return ScenarioOutput(rows, [_check("closed_form", worst, 1e-9), _check("modulus", mod, 1e-12)])


def run_commute(cfg: ScenarioConfig) -> ScenarioOutput:
    g, ks, st = _grid(cfg)
    ks = ks.with_cutoff(cfg.cutoff)
    t = cfg.t_final
    rows = [{"dt": h, "defect": mf.commuting_diagram_defect(ks, st, t, h, cfg.theta)}
            for h in (4 * cfg.dt, 2 * cfg.dt, cfg.dt)]
    for a, b in zip(rows, rows[1:]):
        b["order"] = ck._order(a["defect"], b["defect"])
    rows[0]["order"] = float("nan")
    return ScenarioOutput(rows, [_check("defect", rows[-1]["defect"], 1e-6)])


def run_bogoliubov(cfg: ScenarioConfig) -> ScenarioOutput:
    g, ks, st = _grid(cfg)
    lam = _cutoff(cfg, g)
    ks_L = make_kernels(g, lam)
    ms = bg.make_mode_space(g, lam)
    W = bg.BogMatrix.identity(ms.n)
    chunks = max(1, int(round(cfg.t_final / 0.05)))
    span = cfg.t_final / chunks
    rows = [{"t": 0.0, "symplectic": 0.0, "pairing": 0.0}]
    cur, pair = st, 0.0
    for i in range(chunks):
        r = bg.evolve_bog(ms, ks, ks_L, cur, cfg.theta, span, cfg.dt, monitor=True, abort_tol=1.0, W_init=None)
        W, cur = r.W @ W, r.state
        pair = max(pair, r.max_pairing)
        rows.append({"t": (i + 1) * span, "symplectic": bg.symplectic_defect(W), "pairing": r.max_pairing})
    sym = max(row["symplectic"] for row in rows) / max(cfg.t_final, 1e-300)
    return ScenarioOutput(rows, [_check("symplectic_per_time", sym, 1e-8), _check("pairing", pair, 1e-10)],
                          {"cutoff": lam, "n_b": ms.n_b, "n_a": ms.n_a})


def run_dressing_identity(cfg: ScenarioConfig) -> ScenarioOutput:
    g, ks, st = _grid(cfg)
    lam = _cutoff(cfg, g)
    ms = bg.make_mode_space(g, lam)
    r = bg.dressing_identity_report(ms, ks, make_kernels(g, lam), st, cfg.theta, cfg.t_final, cfg.dt)
    row = {"theta": r.theta, "cutoff": r.cutoff, "t": r.t, "dt": r.dt, "p_res": r.p_res,
           "defect": r.defect, "symplectic": r.symplectic}
    return ScenarioOutput([row], [_check("defect", r.defect, 1e-5)], {"cutoff": lam})


def run_renorm(cfg: ScenarioConfig) -> ScenarioOutput:
    cut = np.geomspace(1e2, 1e4, 9)
    rows = [rn.renorm_constant(c, cfg.theta).row() for c in cut]
    slope, intercept, res = rn.log_divergence_fit(cut, [r["E_pair"] for r in rows])
    target = 4 * math.pi * (2 * cfg.theta - cfg.theta**2)
    rel = abs(slope / target - 1) if target else abs(slope)
    fit = {"slope": slope, "intercept": intercept, "rms": res, "target_slope": target, "rel_err": rel}
    return ScenarioOutput(rows, [_check("slope", rel, 0.02)], {"fit": fit})


def run_oracle_beta(cfg: ScenarioConfig) -> ScenarioOutput:
    _require_tiny(cfg)
    rows = []
    for N in sorted({2, 4, 8, cfg.N}):
        r = fk.beta_trend_point(N, cfg.t_final, n_max=cfg.n_max, K=cfg.K, dt=cfg.dt)
        rows.append({"N": N, "beta_particle": r.beta_particle, "beta_field": r.beta_field, "beta": r.beta,
                     "beta_initial": r.beta_initial, "energy_gap": r.energy_gap, "saturation": r.saturation})
    b = [row["beta"] for row in rows if row["N"] in (2, 4, 8)]
    ok = b[0] > b[1] > b[2]
    return ScenarioOutput(rows, [_check("decreasing_in_N", b[-1], b[0], passed=ok)],
                          _oracle_info(cfg, rows[-1]["saturation"]))


def run_oracle_phase(cfg: ScenarioConfig) -> ScenarioOutput:
    r = fk.phase_defect(cfg.theta, cfg.t_final, n_max=cfg.n_max, dt=cfg.dt, dtheta=cfg.dt)
    row = {"theta": r.theta, "t": r.t, "n_max": r.n_max, "E": r.E, "overlap_abs": abs(r.overlap),
           "defect": r.defect, "saturation": r.saturation, "leak": r.leak}
    info = {"N": None, "m_b": 2, "m_a": 2, "n_max": r.n_max, "cutoff": r.cutoff, "dropped_weight": r.saturation}
    return ScenarioOutput([row], [_check("phase_defect", r.defect, 1e-6)], info)


def run_oracle_norm(cfg: ScenarioConfig) -> ScenarioOutput:
    _require_tiny(cfg)
    r = fk.norm_approximation_defect(cfg.N, cfg.t_final, n_max=cfg.n_max)
    z = fk.norm_approximation_defect(cfg.N, cfg.t_final, n_max=cfg.n_max, coupling=0.0)
    row = {"N": cfg.N, "t": r.t, "defect": r.defect, "zero_coupling": z.defect, "norm_exact": r.norm_exact,
           "norm_bog": r.norm_bog, "lost_weight": r.lost_weight}
    return ScenarioOutput([row], [_check("zero_coupling", z.defect, 1e-9)], _oracle_info(cfg, r.lost_weight))


def _oracle_info(cfg: ScenarioConfig, dropped: float) -> dict:
    return {"N": cfg.N, "m_b": cfg.m_b, "m_a": cfg.m_a, "n_max": cfg.n_max, "cutoff": 1.0, "dropped_weight": dropped}


def run_verify_all(cfg: ScenarioConfig) -> ScenarioOutput:
    crits = sorted(ck.CHECKS)
    settings = ck.CheckSettings(L=cfg.L, M=cfg.M, dt=cfg.dt, seed=cfg.seed)
    if cfg.threads > 1:
        with ProcessPoolExecutor(max_workers=cfg.threads) as pool:
            futs = [pool.submit(ck.run_check, c, settings) for c in crits]
            results = [f.result() for f in futs]
    else:
        results = [ck.run_check(c, settings) for c in crits]
    rows = [{"criterion": r.criterion, "name": r.name, "passed": r.passed, "measured": r.measured,
             "tolerance": r.tolerance} for r in results]
    return ScenarioOutput(rows, results)


RUNNERS = {
    "meanfield": run_meanfield,
    "dressing": run_dressing,
    "commute": run_commute,
    "bogoliubov": run_bogoliubov,
    "dressing-identity": run_dressing_identity,
    "renorm": run_renorm,
    "oracle-beta": run_oracle_beta,
    "oracle-phase": run_oracle_phase,
    "oracle-norm": run_oracle_norm,
    "verify-all": run_verify_all,
}


# ---------------------------------------------------------------------------
# outputs


def _clean(x):
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else str(x)
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, (np.bool_,)):
        return bool(x)
    if isinstance(x, complex):
        return [x.real, x.imag]
    return x


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return "" if v is None else str(v)


def write_csv(path: Path, rows: list[dict]) -> None:
    cols: list[str] = []
    for r in rows:
        cols += [k for k in r if k not in cols]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([_fmt(r.get(c)) for c in cols])


def run_scenario(cfg: ScenarioConfig, out_dir: str | Path | None = None) -> tuple[dict, int]:
    """Run the configured scenario, write <scenario>.csv and manifest.json; return (manifest, exit code)."""
    out = Path(cfg.out if out_dir is None else out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    error = None
    try:
        res = RUNNERS[cfg.scenario](cfg)
    except ConfigError:
        raise
    except Exception as exc:
        log.exception("scenario %s failed", cfg.scenario)
        error = f"{type(exc).__name__}: {exc}"
        res = ScenarioOutput([], [])
    wall = time.perf_counter() - t0
    checks = [c.as_dict() for c in res.checks]
    passed = error is None and all(c["passed"] for c in checks)
    manifest = {
        "scenario": cfg.scenario,
        "config": cfg.as_dict(),
        "seed": cfg.seed,
        "version": __version__,
        "wall_time_s": wall,
        "checks": checks,
        "instance": res.info,
        "error": error,
        "passed": passed,
    }
    csv_name = f"{cfg.scenario}.csv"
    write_csv(out / csv_name, res.rows)
    manifest["csv"] = csv_name
    (out / "manifest.json").write_text(json.dumps(_clean(manifest), indent=2, sort_keys=True) + "\n")
    return manifest, EXIT_PASS if passed else EXIT_FAIL


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nelsonlab", description="Nelson-model mean-field and Bogoliubov experiments.")
    p.add_argument("scenario", nargs="?", choices=SCENARIOS, help="scenario to run (default: config or verify-all)")
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int, help="random seed")
    p.add_argument("--threads", type=int, help="worker processes for verify-all")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: list[str] | None = None) -> int:
    p = _parser()
    try:
        args = p.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_PASS
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, scenario=args.scenario, out=args.out, seed=args.seed, threads=args.threads)
        manifest, code = run_scenario(cfg)
    except ConfigError as exc:
        print(f"nelsonlab: {exc}", file=sys.stderr)
        return EXIT_USAGE
    for c in manifest["checks"]:
        tag = "PASS" if c["passed"] else "FAIL"
        print(f"[{tag}] {c['name']}: measured={c['measured']:.3e} tol={c['tolerance']:.1e}")
    if manifest["error"]:
        print(f"error: {manifest['error']}", file=sys.stderr)
    print(f"{cfg.scenario}: {'pass' if code == EXIT_PASS else 'fail'} -> {Path(cfg.out) / 'manifest.json'}")
    return code


if __name__ == "__main__":
    sys.exit(main())
