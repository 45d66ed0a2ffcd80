"""Command line surface: run, sweep, embed, hpm, bounds, gen.

Exit codes: 0 pass, 1 bound violation, 2 precondition/validation failure,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import cascade as hpm
from . import embedding as emb
from . import measurement as meas
from .errors import BoundViolation, NumericalError, ValidationError
from .marching import choose_order
from .ode import compute_K, reference_solution, rescale
from .pipeline import (
    RunConfig,
    SWEEP_COLUMNS,
    build_ode,
    generate_instance,
    json_default,
    run,
    sweep,
)
from .sparse import write_triplets, write_vector

EXIT_PASS = 0
EXIT_BOUND = 1
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="hpmsim",
        description="Solve quadratic dissipative ODEs through the "
                    "homotopy-embedding pipeline and verify every bound.",
    )
    ap.add_argument("--config", type=Path, help="JSON run configuration")
    ap.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    ap.add_argument("--force", action="store_true",
                    help="downgrade precondition violations to warnings")
    ap.add_argument("--seed", type=int, default=None, help="override the config seed")
    sub = ap.add_subparsers(dest="command", required=True)

    rn = sub.add_parser("run", help="full pipeline with JSON report and CSV summary")
    rn.add_argument("--solver", choices=["forward", "iterative"], default=None)
    rn.add_argument("--tol", type=float, default=None,
                    help="override the solver residual target")
    rn.add_argument("--emit-blocks", type=Path, default=None,
                    help="write each per-step solution block to this directory")

    sw = sub.add_parser("sweep", help="one run per parameter value, CSV table")
    sw.add_argument("--param", required=True, choices=["c", "k", "T", "epsilon"])
    sw.add_argument("--values", required=True,
                    help="comma-separated list, e.g. 0,1,2,3,4")

    em = sub.add_parser("embed", help="write the embedding matrix and initial vector")
    em.add_argument("--order", type=int, default=None,
                    help="truncation order (defaults to the config/selection)")

    sub.add_parser("hpm", help="cascade order norms as CSV (t, i, norm, bound)")
    sub.add_parser("bounds", help="JSON report of every bound check")

    gen = sub.add_parser("gen", help="write a seeded random instance")
    gen.add_argument("--n", type=int, required=True)
    gen.add_argument("--s", type=int, required=True)
    gen.add_argument("--K", type=float, required=True)
    gen.add_argument("--T", type=float, default=1.0)
    gen.add_argument("--epsilon", type=float, default=1e-2)
    gen.add_argument("--u-norm", type=float, default=None)
    return ap


def _load_config(args) -> RunConfig:
    if args.config is None:
        raise ValidationError("this subcommand needs --config")
    cfg = RunConfig.from_json(args.config)
    if args.force:
        cfg.force = True
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _cmd_run(args) -> int:
    cfg = _load_config(args)
    if args.solver is not None:
        cfg.solver = args.solver
    if args.tol is not None:
        cfg.tol = args.tol
    if args.emit_blocks is not None:
        cfg.emit_blocks = str(args.emit_blocks)
    report = run(cfg, base_dir=args.config.parent)
    args.out.mkdir(parents=True, exist_ok=True)
    report.to_json(args.out / "report.json")
    with open(args.out / "summary.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["check", "precondition_ok", "measured", "bound", "pass"])
        for row in report.bound_checks:
            writer.writerow([row["check"], row["precondition_ok"],
                             row["measured"], row["bound"], row["pass"]])
    for row in report.bound_checks:
        state = "pass" if row["pass"] else "FAIL"
        gate = "" if row["precondition_ok"] else " (precondition not met)"
        print(f"{row['check']:>18}: {state}{gate}")
    err = report.errors
    print(f"final_error = {err['final_error']:.3e} vs epsilon = {err['epsilon']:.3e}")
    for w in report.warnings:
        print(f"warning: {w}")
    print(f"status: {report.status}")
    return report.exit_code


def _cmd_sweep(args) -> int:
    cfg = _load_config(args)
    values: list = []
    if args.values.strip():
        for tok in args.values.split(","):
            values.append(int(tok) if args.param in ("c", "k") else float(tok))
    rows = sweep(cfg, args.param, values, base_dir=args.config.parent)
    args.out.mkdir(parents=True, exist_ok=True)
    path = args.out / f"sweep_{args.param}.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    print(f"wrote {path} ({len(rows)} rows)")
    bad = [r for r in rows if str(r["status"]).startswith("error")
           or r["status"] == "bound_violation"]
    return EXIT_BOUND if bad else EXIT_PASS


def _cmd_embed(args) -> int:
    cfg = _load_config(args)
    ode = build_ode(cfg, args.config.parent)
    nl = compute_K(ode, cfg.dense_cap)
    zeta = cfg.zeta if cfg.zeta is not None else (nl.K / nl.norm_u_in if nl.K > 0 else 1.0)
    solved = rescale(ode, zeta) if zeta != 1.0 else ode
    if args.order is not None:
        c = args.order
    elif cfg.c is not None:
        c = cfg.c
    else:
        raise ValidationError("embed needs --order or a c override in the config")
    sys_ = emb.assemble_A(solved, c, cap=cfg.dimension_cap)
    args.out.mkdir(parents=True, exist_ok=True)
    write_triplets(sys_.A, args.out / "A.txt")
    write_vector(sys_.y_in, args.out / "y_in.txt")
    sidecar = {
        "c": c,
        "n": ode.n,
        "beta": sys_.index.beta,
        "N": sys_.index.N,
        "offsets": sys_.index.offsets,
        "zeta": zeta,
        "norm_A": sys_.norm_A,
    }
    (args.out / "embed.json").write_text(json.dumps(sidecar, indent=2) + "\n")
    print(f"wrote A ({sys_.A.nnz} nonzeros, N={sys_.index.N}) and y_in to {args.out}")
    return EXIT_PASS


def _cmd_hpm(args) -> int:
    cfg = _load_config(args)
    ode = build_ode(cfg, args.config.parent)
    nl = compute_K(ode, cfg.dense_cap)
    zeta = cfg.zeta if cfg.zeta is not None else (nl.K / nl.norm_u_in if nl.K > 0 else 1.0)
    solved = rescale(ode, zeta) if zeta != 1.0 else ode
    if cfg.c is not None:
        c = cfg.c
    elif nl.K > 0:
        nl_s = compute_K(solved, cfg.dense_cap) if zeta != 1.0 else nl
        ref = reference_solution(ode, cfg.T)
        eta = nl.norm_u_in / float(np.linalg.norm(ref.final()))
        c = choose_order(nl_s.K, cfg.epsilon, eta, nl_s.norm_u_in, nl_s.norm_F2,
                         nl_s.re_lambda1, force=True).c
    else:
        c = 0
    casc = hpm.solve_cascade(solved, c, cfg.T, K=nl.K)
    args.out.mkdir(parents=True, exist_ok=True)
    path = args.out / "hpm.csv"
    norm_u = float(np.linalg.norm(solved.u_in))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "i", "norm_nu_i", "bound_K_pow"])
        for ti, t in enumerate(casc.ts):
            norms = casc.norms_at(ti)
            for i in range(c + 1):
                bound = norm_u * nl.K ** i if nl.K > 0 else (norm_u if i == 0 else 0.0)
                writer.writerow([f"{t:.12g}", i, f"{norms[i]:.12g}", f"{bound:.12g}"])
    print(f"wrote {path}")
    return EXIT_PASS


def _cmd_bounds(args) -> int:
    cfg = _load_config(args)
    report = run(cfg, base_dir=args.config.parent)
    rows = list(report.bound_checks)
    rows.extend(_appendix_rows(cfg.seed))
    args.out.mkdir(parents=True, exist_ok=True)
    path = args.out / "bounds.json"
    path.write_text(json.dumps(rows, indent=2, sort_keys=True,
                               default=json_default) + "\n")
    for row in rows:
        state = "pass" if row["pass"] else "FAIL"
        gate = "" if row["precondition_ok"] else " (precondition not met)"
        print(f"{row['check']:>22}: {state}{gate}")
    bad = [r for r in rows if r["precondition_ok"] and not r["pass"]]
    return EXIT_BOUND if bad else report.exit_code


def _appendix_rows(seed: int) -> list[dict]:
    rows = []
    grid = np.linspace(0.0, 10.0, 250)
    for gamma, beta, m in [(1.0, 1.0, 3), (2.0, 1.0, 1), (1.5, 1.5, 5), (3.0, 0.5, 4)]:
        res = meas.scalar_decay_check(gamma, beta, m, grid)
        rows.append({
            "check": f"scalar_decay(g={gamma},b={beta},m={m})",
            "description": "sum_j (beta t)^j/j! e^(-gamma t) <= m",
            **res, "note": "",
        })
    rng = np.random.default_rng(seed)
    for trial in range(3):
        n = int(rng.integers(2, 6))
        evals = -rng.uniform(0.05, 1.0, size=n)
        q, r = np.linalg.qr(rng.normal(size=(n, n)))
        q = q * np.sign(np.diag(r))
        M = q @ np.diag(evals) @ q.T
        res = meas.taylor_power_error_check(M, Delta=1.0, k=4, steps=3)
        rows.append({
            "check": f"taylor_power_error(trial={trial})",
            "description": "||e^(M l) - T_k(M)^l|| <= 2 l Delta(Delta+1)/(k+1)!",
            **res, "note": "",
        })
    worst = 0.0
    for _ in range(200):
        dim = int(rng.integers(2, 8))
        psi = rng.normal(size=dim)
        phi = psi + rng.normal(size=dim) * 0.1
        alpha = np.linalg.norm(psi)
        beta_v = np.linalg.norm(psi - phi)
        lhs = np.linalg.norm(psi / np.linalg.norm(psi) - phi / np.linalg.norm(phi))
        bound = meas.normalized_difference_bound(alpha, beta_v)
        worst = max(worst, lhs / bound if bound > 0 else 0.0)
    rows.append({
        "check": "normalized_difference",
        "description": "|| psi/||psi|| - phi/||phi|| || <= 2 beta / alpha",
        "precondition_ok": True,
        "measured": worst,
        "bound": 1.0,
        "pass": worst <= 1.0,
        "note": "ratio of measured to bound over 200 seeded pairs",
    })
    return rows


def _cmd_gen(args) -> int:
    seed = args.seed if args.seed is not None else 0
    ode = generate_instance(args.n, args.s, args.K, seed, u_norm=args.u_norm)
    args.out.mkdir(parents=True, exist_ok=True)
    write_triplets(ode.F1, args.out / "F1.txt")
    write_triplets(ode.F2, args.out / "F2.txt")
    cfg = {
        "n": args.n,
        "T": args.T,
        "epsilon": args.epsilon,
        "u_in": ode.u_in.tolist(),
        "F1_path": "F1.txt",
        "F2_path": "F2.txt",
        "seed": seed,
    }
    (args.out / "instance.json").write_text(json.dumps(cfg, indent=2) + "\n")
    print(f"wrote instance (n={args.n}, s={args.s}, K={args.K}) to {args.out}")
    return EXIT_PASS


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    handlers = {
        "run": _cmd_run,
        "sweep": _cmd_sweep,
        "embed": _cmd_embed,
        "hpm": _cmd_hpm,
        "bounds": _cmd_bounds,
        "gen": _cmd_gen,
    }
    try:
        return handlers[args.command](args)
    except ValidationError as exc:
        print(f"validation failure: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except BoundViolation as exc:
        print(f"bound violation: {exc}", file=sys.stderr)
        return EXIT_BOUND
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
