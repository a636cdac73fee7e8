"""Command-line experiment runner.

Subcommands: train, rollout, eval-ood, oracle-check, gradcheck, report.
Exit codes: 0 success, 1 validation error, 2 runtime error, 3 acceptance
check failed. ``GECO_OUTPUT_ROOT`` overrides the configured output
directory and ``GECO_WORKERS`` sets the episode worker pool size.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import platform
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .baseline import analytic_point_field, euler_integrate
from .config import RunConfig, dump_config, load_config, with_overrides
from .errors import ConfigError, DimensionError, FormatError
from .experiments import GecoPolicy, RFPolicy, oracle_agreement, ood_report, rollout_summary, run_episodes
from .inference import InferConfig
from .net import (
    FieldParams,
    NetworkSpec,
    apply,
    backward,
    checkpoint_digest,
    finite_difference_grad,
    forward,
    init_network,
    load_checkpoint,
    max_relative_error,
)
from .rng import make_rng
from .tasks import ID, OOD, gen_mixture_dataset
from .trainer import Normalizer, train

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_ACCEPTANCE = 0, 1, 2, 3
GRAD_TOL = 1e-4

log = logging.getLogger("geco")


class AcceptanceFailure(Exception):
    pass


# --- run directories ---------------------------------------------------------


def resolve_config(path) -> RunConfig:
    return with_overrides(load_config(path), os.environ.get("GECO_OUTPUT_ROOT") or None)


def workers() -> int:
    raw = os.environ.get("GECO_WORKERS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"GECO_WORKERS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("GECO_WORKERS must be >= 1")
    return n


def version_stamp() -> dict:
    return {"geco": __version__, "python": platform.python_version(), "numpy": np.__version__}


def prepare_run_dir(cfg: RunConfig) -> Path:
    run = Path(cfg.output_dir) / cfg.run_name()
    try:
        run.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"output directory {run} is not writable: {exc}") from None
    write_text(run / "config.toml", dump_config(cfg))
    write_text(run / "seed.txt", f"{cfg.seed}\n")
    write_json(run / "version.json", version_stamp())
    return run


def write_text(path: Path, text: str):
    path.write_text(text)


def write_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_csv(path: Path, rows: Sequence[dict]):
    buf = io.StringIO()
    if rows:
        writer = csv.DictWriter(buf, fieldnames=list(rows[0].keys()), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    path.write_text(buf.getvalue())


def write_jsonl(path: Path, items):
    with path.open("w") as fh:
        for item in items:
            fh.write(json.dumps(item, sort_keys=True) + "\n")


def load_model(path, cfg: RunConfig, expect_head: Optional[str] = None):
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read checkpoint {path}: {exc}") from None
    params, spec, meta = load_checkpoint(blob)
    head = meta.get("head", "geco")
    if expect_head is not None and head != expect_head:
        raise DimensionError(f"checkpoint {path} holds a {head} model, expected {expect_head}")
    extra = 1 if head == "rectified_flow" else 0
    want_in = cfg.task.chunk_dim + cfg.task.cond_dim + extra
    if spec.input_dim != want_in or spec.output_dim != cfg.task.chunk_dim:
        raise DimensionError(
            f"checkpoint {path} maps {spec.input_dim}->{spec.output_dim}, "
            f"task needs {want_in}->{cfg.task.chunk_dim}"
        )
    normalizer = Normalizer.from_dict(meta["normalizer"]) if "normalizer" in meta else Normalizer.identity(spec.output_dim)
    return params, normalizer, head


def policy_for(params, normalizer, head: str, cfg: RunConfig, budget: Optional[int] = None):
    if head == "geco":
        infer = cfg.infer if budget is None else InferConfig(budget, cfg.infer.tau_opt, cfg.infer.table)
        return GecoPolicy(params, normalizer, infer)
    return RFPolicy(params, normalizer, cfg.eval.baseline_steps if budget is None else budget)


def _clean(row: dict) -> dict:
    return {k: (round(v, 12) if isinstance(v, float) else v) for k, v in row.items()}


# --- subcommands ------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = resolve_config(args.config)
    run = prepare_run_dir(cfg)
    dataset = gen_mixture_dataset(cfg.task, cfg.n_conditions, make_rng(cfg.seed, "dataset"))
    log.info("training %s for %d steps on %d samples", cfg.head, cfg.train.steps, len(dataset))
    result = train(cfg.train, dataset, {"run": cfg.run_name()})
    blob = result.checkpoint()
    (run / "checkpoint.bin").write_bytes(blob)
    write_text(run / "log.jsonl", result.log.to_jsonl())
    losses = result.log.losses
    summary = {
        "head": cfg.head,
        "steps": cfg.train.steps,
        "initial_loss": float(losses[0]) if losses.size else None,
        "final_loss": float(losses[-1]) if losses.size else None,
        "checkpoint_sha256": checkpoint_digest(blob),
        "parameters": result.params.parameter_count,
    }
    write_json(run / "train_summary.json", summary)
    print(json.dumps({"run_dir": str(run), **summary}, sort_keys=True))
    return EXIT_OK


def cmd_rollout(args) -> int:
    cfg = resolve_config(args.config)
    params, normalizer, head = load_model(args.checkpoint, cfg)
    run = prepare_run_dir(cfg)
    if args.budget is not None:
        budgets = [args.budget]
    elif head == "geco":
        budgets = list(cfg.eval.budgets)
    else:
        budgets = [cfg.eval.baseline_steps]
    n = cfg.eval.rollout_episodes if args.episodes is None else args.episodes
    if n < 0:
        raise ConfigError("--episodes must be >= 0")
    rows, out = [], run / f"rollout-{head}-{args.split}"
    out.mkdir(exist_ok=True)
    for budget in budgets:
        policy = policy_for(params, normalizer, head, cfg, budget)
        records = run_episodes(policy, cfg.task, args.split, n, cfg.seed, cfg.protocol, workers=workers())
        write_jsonl(out / f"episodes-K{budget}.jsonl", (r.to_dict() for r in records))
        summary = rollout_summary(records, head=head, split=args.split, budget=budget)
        rows.append(summary)
    write_json(out / "summary.json", rows)
    flat = [_clean({k: v for k, v in r.items() if k != "nfe_hist"} | {"nfe_hist": json.dumps(r["nfe_hist"])}) for r in rows]
    write_csv(out / "summary.csv", flat)
    for r in rows:
        print(json.dumps(r, sort_keys=True))
    return EXIT_OK


def cmd_eval_ood(args) -> int:
    cfg = resolve_config(args.config)
    gp, gn, _ = load_model(args.checkpoint, cfg, "geco")
    rp, rn, _ = load_model(args.baseline, cfg, "rectified_flow")
    run = prepare_run_dir(cfg)
    out = run / "eval-ood"
    out.mkdir(exist_ok=True)
    ev, proto, w = cfg.eval, cfg.protocol, workers()
    geco_pol = policy_for(gp, gn, "geco", cfg, ev.ood_budget)
    rf_pol = policy_for(rp, rn, "rectified_flow", cfg, ev.baseline_steps)
    recs = {}
    for name, pol in (("geco", geco_pol), ("fm_proxy", rf_pol)):
        for split, n in ((ID, ev.id_episodes), (OOD, ev.ood_episodes)):
            recs[name, split] = run_episodes(pol, cfg.task, split, n, cfg.seed, proto, workers=w)
            write_jsonl(out / f"episodes-{name}-{split}.jsonl", (r.to_dict() for r in recs[name, split]))
    rows = ood_report(
        recs["geco", ID], recs["geco", OOD], recs["fm_proxy", ID], recs["fm_proxy", OOD],
        cfg.filter, ev.tau_ood, ev.plans_per_episode, cfg.seed, ev.target_tpr, ev.scopes,
    )
    table = [_clean(r.row()) for r in rows]
    write_csv(out / "metrics.csv", table)
    checks = ood_checks(table)
    write_json(out / "summary.json", {"rows": table, "checks": checks})
    for r in table:
        print(json.dumps(r, sort_keys=True))
    print(json.dumps({"checks": checks}, sort_keys=True))
    if args.check and not all(c["passed"] for c in checks.values()):
        raise AcceptanceFailure("OOD separation checks failed")
    return EXIT_OK


def ood_checks(table: Sequence[dict], scope: str = "calls") -> dict:
    """Separation thresholds: filtered GeCO AUROC >= 0.90, margin over the proxy >= 0.15, Time Saved > 0.2."""
    rows = {(r["method"], r["detector"]): r for r in table if r["scope"] == scope}
    filters = ("moving_average", "leaky_bucket")
    geco = [rows[("geco", d)] for d in filters if ("geco", d) in rows]
    proxy = [rows[("fm_proxy", d)]["auroc"] for d in ("raw",) + filters if ("fm_proxy", d) in rows]
    best = max((r["auroc"] for r in geco), default=float("nan"))
    margin = best - max(proxy) if proxy else float("nan")
    saved = max((r["time_saved"] for r in geco), default=float("nan"))
    return {
        "geco_filtered_auroc": {"value": best, "threshold": 0.90, "passed": bool(best >= 0.90)},
        "auroc_margin_over_proxy": {"value": margin, "threshold": 0.15, "passed": bool(margin >= 0.15)},
        "time_saved": {"value": saved, "threshold": 0.2, "passed": bool(saved > 0.2)},
    }


def cmd_oracle_check(args) -> int:
    cfg = resolve_config(args.config)
    params, normalizer, head = load_model(args.checkpoint, cfg, "geco")
    run = prepare_run_dir(cfg)
    n = cfg.eval.oracle_points if args.points is None else args.points
    report = oracle_agreement(params, cfg.task, normalizer, cfg.train.decay, n, cfg.seed, cfg.eval.oracle_nodes)
    report["euler_max_error"] = euler_telescoping_error(cfg.seed)
    write_json(run / "oracle_check.json", report)
    print(json.dumps(report, sort_keys=True))
    if args.check and not (report["cosine_median"] > 0.95 and report["euler_max_error"] < 1e-9):
        raise AcceptanceFailure("oracle agreement below threshold")
    return EXIT_OK


def euler_telescoping_error(seed: int, starts: int = 100, dim: int = 4, steps=(1, 5, 20)) -> float:
    """Largest distance from a* after Euler on the analytic point field."""
    rng = make_rng(seed, "telescoping")
    worst = 0.0
    for _ in range(starts):
        a_star, x0 = rng.normal(size=dim), rng.normal(size=dim)
        for n in steps:
            x = euler_integrate(lambda x, g: analytic_point_field(x, g, a_star), x0, n)
            worst = max(worst, float(np.max(np.abs(x - a_star))))
    return worst


def gradcheck_net(params: FieldParams, seed: int, corrupt: bool = False) -> float:
    """Max relative error between backprop and central differences for one net."""
    rng = make_rng(seed, "gradcheck-data")
    x = rng.normal(size=params.spec.input_dim)
    g = rng.normal(size=params.spec.output_dim)
    _, cache = forward(params, x)
    analytic, _ = backward(params, cache, g)
    if corrupt:
        analytic = analytic.copy()
        analytic.weights[0] *= 1.5
    numeric = finite_difference_grad(params, lambda q: float(apply(q, x) @ g), 1e-4)
    return max_relative_error(analytic.flat(), numeric.flat())


def cmd_gradcheck(args) -> int:
    hidden = tuple(args.hidden) if args.hidden is not None else (16, 16)
    errors = []
    for i in range(args.nets):
        spec = NetworkSpec(args.input_dim, args.output_dim, hidden, args.activation)
        params = init_network(spec, args.seed + i)
        if args.zero:
            params = params.zeros_like()
        else:
            # non-zero biases so every parameter path is exercised
            brng = make_rng(args.seed, "gradcheck-bias", i)
            params = FieldParams(spec, params.weights, [brng.normal(0, 0.3, b.shape) for b in params.biases])
        errors.append(gradcheck_net(params, args.seed + i, corrupt=args.corrupt))
    worst = max(errors) if errors else 0.0
    passed = worst < GRAD_TOL
    print(json.dumps({"nets": len(errors), "max_relative_error": worst, "tolerance": GRAD_TOL, "passed": passed}))
    if not passed:
        raise AcceptanceFailure(f"gradient check failed: max relative error {worst:.3e}")
    return EXIT_OK


def cmd_report(args) -> int:
    """Collect every summary document under the given run directories into CSV tables."""
    rollout_rows, ood_rows = [], []
    for root in args.runs:
        root = Path(root)
        if not root.is_dir():
            raise ConfigError(f"{root} is not a run directory")
        for path in sorted(root.glob("rollout-*/summary.json")):
            for r in json.loads(path.read_text()):
                rollout_rows.append({"run": root.name, **{k: v for k, v in r.items() if k != "nfe_hist"}})
        for path in sorted(root.glob("eval-ood/summary.json")):
            for r in json.loads(path.read_text())["rows"]:
                ood_rows.append({"run": root.name, **r})
    out = Path(args.out) if args.out else None
    for name, rows in (("rollout", rollout_rows), ("ood", ood_rows)):
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            write_csv(out / f"{name}.csv", rows)
        else:
            buf = io.StringIO()
            if rows:
                writer = csv.DictWriter(buf, fieldnames=list(rows[0].keys()), lineterminator="\n")
                writer.writeheader()
                writer.writerows(rows)
            print(f"# {name}\n{buf.getvalue()}", end="")
    return EXIT_OK


# --- entry point ------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="geco", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model and write a checkpoint")
    t.add_argument("config")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("rollout", help="closed-loop episodes and NFE summary")
    r.add_argument("config")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--budget", type=int, help="K_max for GeCO or n_steps for the baseline (default: config sweep)")
    r.add_argument("--split", choices=(ID, OOD), default=ID)
    r.add_argument("--episodes", type=int)
    r.set_defaults(func=cmd_rollout)

    e = sub.add_parser("eval-ood", help="OOD detection metrics for GeCO and the baseline proxy")
    e.add_argument("config")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--baseline", required=True)
    e.add_argument("--check", action="store_true", help="exit 3 if separation thresholds are missed")
    e.set_defaults(func=cmd_eval_ood)

    o = sub.add_parser("oracle-check", help="compare a trained field with the quadrature oracle")
    o.add_argument("config")
    o.add_argument("--checkpoint", required=True)
    o.add_argument("--points", type=int)
    o.add_argument("--check", action="store_true", help="exit 3 if median cosine <= 0.95")
    o.set_defaults(func=cmd_oracle_check)

    g = sub.add_parser("gradcheck", help="backprop against central finite differences")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--nets", type=int, default=20)
    g.add_argument("--input-dim", type=int, default=6)
    g.add_argument("--output-dim", type=int, default=4)
    g.add_argument("--hidden", type=int, nargs="*")
    g.add_argument("--activation", choices=("tanh", "softplus"), default="tanh")
    g.add_argument("--zero", action="store_true", help="check an all-zero network")
    g.add_argument("--corrupt", action="store_true", help="negative control: perturb the backprop result")
    g.set_defaults(func=cmd_gradcheck)

    rep = sub.add_parser("report", help="aggregate run directories into comparison tables")
    rep.add_argument("runs", nargs="+")
    rep.add_argument("--out")
    rep.set_defaults(func=cmd_report)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_VALIDATION
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except AcceptanceFailure as exc:
        print(f"acceptance check failed: {exc}", file=sys.stderr)
        return EXIT_ACCEPTANCE
    except (ConfigError, DimensionError, FormatError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
