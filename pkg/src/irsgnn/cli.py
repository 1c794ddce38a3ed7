"""Command-line front end.

Exit codes: 0 success, 2 configuration error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .config import ConfigError, load_yaml, stable_hash
from .experiments import (CSV_VERSION, METHODS, ExperimentSpec, array_response, empirical_cdf,
                          evaluate_methods, fit_lmmse, load_checkpoint_for, plan_for, run_sweep,
                          spec_from_dict, summary_row)
from .lmmse import save_statistics
from .training import TrainingConfig, TrainingDiverged, evaluate, load_checkpoint, train

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
log = logging.getLogger("irsgnn")


def write_csv(path: Path, kind: str, header: list[str], rows) -> None:
    """CSV with a schema line ``# irsgnn-<kind> v<N>`` ahead of the column header."""
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        fh.write(f"# irsgnn-{kind} v{CSV_VERSION}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([r[h] for h in header] if isinstance(r, dict) else r)
    tmp.replace(path)


def read_csv(path: str | Path) -> tuple[str, list[dict]]:
    """Inverse of :func:`write_csv`: returns the schema line and the rows."""
    with open(path, newline="") as fh:
        schema = fh.readline().strip()
        return schema, list(csv.DictReader(fh))


def output_dir(args, verb: str, spec: ExperimentSpec, extra: dict | None = None) -> Path:
    """Content-addressed output directory; refuses to reuse a populated one
    unless ``--force`` is given."""
    key = stable_hash({"verb": verb, "spec": spec.spec_hash(), **(extra or {})})
    d = Path(args.out or spec.out) / f"{verb}-{key}"
    if d.exists() and any(d.iterdir()) and not args.force:
        raise ConfigError(f"output directory {d} already exists; pass --force to overwrite")
    d.mkdir(parents=True, exist_ok=True)
    (d / "spec.json").write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True, default=str) + "\n")
    return d


def load_spec(args) -> ExperimentSpec:
    data = load_yaml(args.spec) if args.spec else {}
    return spec_from_dict(data, profile=args.profile, seed=args.seed)


# --- verbs --------------------------------------------------------------------------

def cmd_train(args) -> Path:
    spec = load_spec(args)
    tcfg = spec.training
    if args.estimator:
        # the explicit estimation network uses a smaller initial learning rate
        lr = (load_yaml(args.spec).get("training", {}).get("initial_lr") if args.spec else None) or 1e-4
        tcfg = TrainingConfig(**{**asdict(tcfg), "initial_lr": lr})
    if args.max_epochs:
        tcfg = TrainingConfig(**{**asdict(tcfg), "max_epochs": args.max_epochs})
    plan = plan_for(spec)
    out = output_dir(args, "train", spec, {"estimator": args.estimator, "training": asdict(tcfg)})

    def progress(row):
        print(f"epoch {row['epoch']:3d}  loss {row['train_loss']:.5f}  validation {row['validation_utility']:.5f}",
              flush=True)

    train(tcfg, spec.gnn, spec.system, plan, out_dir=out, fixed_locations=spec.locations,
          estimator=args.estimator, progress=progress)
    path = out / "best.npz"
    print(path)
    return path


def cmd_eval(args) -> Path:
    spec = load_spec(args)
    ckpt = load_checkpoint(args.checkpoint) if args.checkpoint else load_checkpoint_for(spec, "gnn")
    n = args.n or spec.n_realizations
    plan = plan_for(spec, Q=ckpt.Q)
    res = evaluate(ckpt, spec.system, plan, n, spec.seed, kind=spec.utility, strict=not args.allow_mismatch,
                   fixed_locations=spec.locations)
    out = output_dir(args, "eval", spec, {"checkpoint": _digest(ckpt), "n": n})
    write_csv(out / "eval.csv", "eval", ["index", "utility"], enumerate(res.samples.tolist()))
    print(f"mean {spec.utility} rate {res.mean:.6f} +- {res.stderr:.6f} (n={n})")
    return out / "eval.csv"


def _digest(ckpt) -> str:
    h = hashlib.sha256()
    for k in sorted(ckpt.params):
        h.update(k.encode())
        h.update(np.ascontiguousarray(ckpt.params[k]).tobytes())
    return h.hexdigest()[:16]


def _checkpoints(spec: ExperimentSpec, methods) -> dict:
    names = {"estgnn" if m == "estgnn+bcd" else m for m in methods if m in ("gnn", "gnn+locations", "estgnn+bcd")}
    return {n: load_checkpoint_for(spec, n) for n in names}


def cmd_sweep(args) -> Path:
    spec = load_spec(args)
    rows = run_sweep(spec, workers=args.workers)
    out = output_dir(args, "sweep", spec)
    write_csv(out / "sweep.csv", "sweep", ["axis_value", "method", "mean_utility", "standard_error", "n"], rows)
    for r in rows:
        print(f"{spec.axis}={r['axis_value']:g}  {r['method']:16s} {r['mean_utility']:.4f} +- {r['standard_error']:.4f}")
    return out / "sweep.csv"


def cmd_cdf(args) -> Path:
    spec = load_spec(args)
    methods = args.methods.split(",") if args.methods else ["gnn"]
    cks = _checkpoints(spec, methods)
    Q = next(iter(cks.values())).Q if cks else None
    plan = plan_for(spec, Q=Q)
    results = evaluate_methods(spec, spec.system, plan, methods, checkpoints=cks, workers=args.workers)
    out = output_dir(args, "cdf", spec, {"methods": methods})
    rows = []
    for m in methods:
        x, F = empirical_cdf(results[m])
        rows += [{"method": m, "rank": i + 1, "utility": float(a), "cdf": float(b)}
                 for i, (a, b) in enumerate(zip(x, F))]
    write_csv(out / "cdf.csv", "cdf", ["method", "rank", "utility", "cdf"], rows)
    if args.plot:
        _plot_cdf(out / "cdf.png", results)
    print(out / "cdf.csv")
    return out / "cdf.csv"


def _plot_cdf(path: Path, results: dict) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    fig, ax = plt.subplots(figsize=(5, 4))
    for m, s in results.items():
        x, F = empirical_cdf(s)
        ax.step(x, F, where="post", label=m)
    ax.set_xlabel("utility (bits/s/Hz)")
    ax.set_ylabel("empirical CDF")
    ax.legend()
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)


def _parse_grid(text: str) -> tuple[int, int]:
    try:
        a, b = text.lower().split("x")
        return int(a), int(b)
    except ValueError:
        raise ConfigError(f"grid must look like 181x91, got {text!r}") from None


def cmd_array_response(args) -> Path:
    spec = load_spec(args)
    ckpt = load_checkpoint(args.checkpoint) if args.checkpoint else load_checkpoint_for(spec, "gnn")
    if args.user:
        locs = np.asarray(args.user, dtype=float)
    elif spec.locations is not None:
        locs = spec.locations
    else:
        raise ConfigError("array-response needs --user x y z (or fixed_locations in the spec)")
    grid = _parse_grid(args.grid)
    resp = array_response(ckpt, spec.system, locs, seed=spec.seed, grid=grid, bs_points=grid[0])
    out = output_dir(args, "array-response", spec, {"checkpoint": _digest(ckpt), "user": locs.tolist(),
                                                   "grid": list(grid)})
    irs_rows = [{"phi3": float(p), "theta3": float(t), "response": float(resp.irs[0, i, j])}
                for i, p in enumerate(resp.phi3) for j, t in enumerate(resp.theta3)]
    write_csv(out / "irs_response.csv", "irs-response", ["phi3", "theta3", "response"], irs_rows)
    bs_rows = [{"user": k, "phi1": float(p), "response": float(resp.bs[k, i])}
               for k in range(resp.bs.shape[0]) for i, p in enumerate(resp.phi1)]
    write_csv(out / "bs_response.csv", "bs-response", ["user", "phi1", "response"], bs_rows)
    phi, theta = resp.irs_argmax()
    print(f"IRS response peak at (phi3, theta3) = ({phi:.3f}, {theta:.3f}); "
          f"users at {[(round(a, 3), round(b, 3)) for a, b in resp.target_irs]}")
    print(f"BS response peak at phi1 = {resp.bs_argmax():.3f}; IRS at {resp.target_bs:.3f}")
    return out


def cmd_fit_lmmse(args) -> Path:
    spec = load_spec(args)
    plan = plan_for(spec)
    stats = fit_lmmse(spec.system, plan, spec.lmmse_samples, spec.seed, spec.locations)
    out = output_dir(args, "fit-lmmse", spec)
    save_statistics(out / "lmmse.bin", stats)
    print(out / "lmmse.bin")
    return out / "lmmse.bin"


def cmd_baseline(args) -> Path:
    spec = load_spec(args)
    methods = args.methods.split(",") if args.methods else ["perfect-csi-bcd", "random-phase"]
    bad = [m for m in methods if m in ("gnn", "gnn+locations", "estgnn+bcd")]
    if bad:
        raise ConfigError(f"{bad} are learned methods; use 'eval' or 'sweep'")
    plan = plan_for(spec)
    results = evaluate_methods(spec, spec.system, plan, methods, workers=args.workers, n=args.n)
    out = output_dir(args, "baseline", spec, {"methods": methods, "n": args.n})
    n = len(next(iter(results.values())))
    write_csv(out / "baseline.csv", "baseline", ["index"] + methods,
              [[i] + [float(results[m][i]) for m in methods] for i in range(n)])
    write_csv(out / "summary.csv", "summary", ["axis_value", "method", "mean_utility", "standard_error", "n"],
              [summary_row("", m, results[m]) for m in methods])
    for m in methods:
        r = summary_row("", m, results[m])
        print(f"{m:16s} {r['mean_utility']:.4f} +- {r['standard_error']:.4f}")
    return out


# --- parser ------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--spec", help="YAML/JSON experiment spec")
    common.add_argument("--seed", type=int, default=None, help="override the spec seed")
    common.add_argument("--out", default=None, help="output root (default: spec 'out' or ./runs)")
    common.add_argument("--workers", type=int, default=1, help="worker processes for Monte-Carlo baselines")
    common.add_argument("--profile", choices=["desk", "paper", "interpretation", "maxmin"], default=None)
    common.add_argument("--force", action="store_true", help="overwrite an existing output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="irsgnn", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="verb", required=True)
    s = sub.add_parser("train", parents=[common], help="train the GNN policy")
    s.add_argument("--estimator", action="store_true", help="train the explicit channel-estimation network")
    s.add_argument("--max-epochs", type=int, default=None)
    s.set_defaults(func=cmd_train)
    s = sub.add_parser("eval", parents=[common], help="evaluate a policy checkpoint")
    s.add_argument("--checkpoint")
    s.add_argument("-n", type=int, default=None, help="number of test realizations")
    s.add_argument("--allow-mismatch", action="store_true",
                   help="evaluate under a system other than the training one (generalization)")
    s.set_defaults(func=cmd_eval)
    s = sub.add_parser("sweep", parents=[common], help="sweep L, P_d, P_u or K across methods")
    s.set_defaults(func=cmd_sweep)
    s = sub.add_parser("cdf", parents=[common], help="empirical CDF of per-realization utility")
    s.add_argument("--methods", help=f"comma-separated subset of {','.join(METHODS)}")
    s.add_argument("--plot", action="store_true", help="also render cdf.png (needs matplotlib)")
    s.set_defaults(func=cmd_cdf)
    s = sub.add_parser("array-response", parents=[common], help="learned BS and IRS array responses")
    s.add_argument("--checkpoint")
    s.add_argument("--user", nargs=3, type=float, action="append", metavar=("X", "Y", "Z"))
    s.add_argument("--grid", default="181x91")
    s.set_defaults(func=cmd_array_response)
    s = sub.add_parser("fit-lmmse", parents=[common], help="fit LMMSE statistics")
    s.set_defaults(func=cmd_fit_lmmse)
    s = sub.add_parser("baseline", parents=[common], help="model-based baselines only")
    s.add_argument("--methods", help="comma-separated: lmmse+bcd, perfect-csi-bcd, random-phase")
    s.add_argument("-n", type=int, default=None)
    s.set_defaults(func=cmd_baseline)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingDiverged, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
