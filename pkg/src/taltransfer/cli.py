"""Command-line entry point: ``taltransfer <subcommand> ...``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from .data import DataError, Dataset, compute_feature_stats, load_csv, write_csv
from .generator import GeneratorConfig, WeatherParams, default_task_params, generate_from_config
from .harness import ExperimentConfig, HarnessError, audit_holdout, prepare_seasons, run_loco, sweep
from .models import ModelError, load_bundle, save_bundle
from .plots import emit_plots
from .tal import TalConfig, TalError, build_task_set, transfer
from .training import TrainConfig, TrainingError, gradcheck_model, train

logger = logging.getLogger("taltransfer")


def _read_json(path: str | None) -> dict:
    return {} if path is None else json.loads(Path(path).read_text())


def _overrides(args: argparse.Namespace, names: tuple[str, ...]) -> dict:
    return {n: getattr(args, n) for n in names if getattr(args, n, None) is not None}


def cmd_generate(args: argparse.Namespace) -> int:
    if args.config:
        cfg = GeneratorConfig.load(args.config)
    else:
        cfg = GeneratorConfig(
            tuple(default_task_params(args.tasks, seed=args.seed)),
            WeatherParams(seed=args.seed, missing_rate=args.missing_rate),
            args.seasons,
            args.start_year,
        )
    ds = generate_from_config(cfg)
    write_csv(ds, args.out)
    if args.save_config:
        cfg.save(args.save_config)
    print(f"wrote {len(ds)} seasons of {len(ds.task_ids)} tasks to {args.out}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    cfg = TrainConfig.from_dict({**_read_json(args.config), **_overrides(args, ("variant", "epochs", "rng_seed"))})
    ds = load_csv(args.data)
    tasks = args.tasks.split(",") if args.tasks else ds.task_ids
    raw = [s for t in tasks for s in ds.tasks.get(t, [])]
    if not raw:
        raise TrainingError("no training seasons for the requested tasks")
    stats = compute_feature_stats(raw)
    prepared = Dataset({t: prepare_seasons(ds.tasks[t], stats) for t in tasks if t in ds.tasks}, stats)
    model = train(prepared, tasks, cfg, log_path=args.log)
    save_bundle(model, args.out)
    print(f"trained {cfg.variant} on {len(raw)} seasons of {len(tasks)} tasks; bundle {args.out} ({model.fingerprint()})")
    return 0


def cmd_transfer(args: argparse.Namespace) -> int:
    model = load_bundle(args.bundle)
    if model.feature_stats is None:
        raise ModelError(f"{args.bundle}: bundle carries no feature statistics")
    weight_model = load_bundle(args.weight_bundle) if args.weight_bundle else None
    cfg = TalConfig.from_dict(
        {**_read_json(args.config), **_overrides(args, ("scheme", "task_set", "weighting", "tau", "rng_seed"))}
    )
    target = load_csv(args.target, require_lte=False)
    if args.task is None and len(target.task_ids) > 1:
        raise DataError(f"{args.target} holds {len(target.task_ids)} tasks; pick the target with --task")
    seasons = target.seasons([args.task] if args.task else None)
    if not seasons:
        raise DataError(f"{args.target}: no usable target seasons")
    aux = [s.without_lte() for s in prepare_seasons(seasons, model.feature_stats)]
    res = transfer(model, aux, cfg, weight_model)
    preds = res.predict(model, [s.weather for s in aux])
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "predictions.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["task_id", "season", "date", "lte10", "lte50", "lte90"])
        for s, p in zip(aux, preds):
            for d, row in zip(s.dates, p):
                w.writerow([s.task_id, s.season_label, d.isoformat()] + [repr(float(v)) for v in row])
    (out / "manifest.json").write_text(res.manifest_text())
    print(f"{cfg.name}: predictions for {len(aux)} seasons in {out}")
    return 0


def _experiment(args: argparse.Namespace) -> ExperimentConfig:
    d = _read_json(args.config)
    if args.master_seed is not None:
        d["master_seed"] = args.master_seed
    if args.out_dir is not None:
        d["output_dir"] = args.out_dir
    return ExperimentConfig.from_dict(d)


def cmd_evaluate(args: argparse.Namespace) -> int:
    cfg = _experiment(args)
    report = run_loco(cfg)
    print(report.render(), end="")
    audit = audit_holdout(report.audit)
    if not audit.ok:
        for v in audit.violations:
            print(f"holdout violation: {v}", file=sys.stderr)
        return 1
    print(f"holdout audit: {audit.checked} runs clean")
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    cfg = _experiment(args)
    values = None
    if args.values:
        conv = {"n_random": int, "tau": float}.get(args.axis, str)
        values = [conv(v) for v in args.values.split(",")]
    res = sweep(cfg, args.axis, values, task_set=args.task_set)
    print(res.table, end="")
    return 0


def cmd_gradcheck(args: argparse.Namespace) -> int:
    variants = ("multihead", "embedding") if args.variant == "both" else (args.variant,)
    worst = 0.0
    for v in variants:
        for seed in range(args.seeds):
            r = gradcheck_model(v, seed=seed)
            worst = max(worst, r.max_rel_error)
            print(f"{v} seed {seed}: max rel error {r.max_rel_error:.2e} ({r.checked} checked, {r.skipped} skipped)")
    ok = worst < args.tol
    print(f"{'PASS' if ok else 'FAIL'}: worst {worst:.2e} vs tolerance {args.tol:.0e}")
    return 0 if ok else 1


def cmd_plot(args: argparse.Namespace) -> int:
    model = load_bundle(args.bundle)
    if model.feature_stats is None:
        raise ModelError(f"{args.bundle}: bundle carries no feature statistics")
    ds = load_csv(args.data, require_lte=False)
    matches = [s for s in ds.seasons() if s.task_id == args.task and s.season_label == args.season]
    if not matches:
        raise DataError(f"no season {args.season} for task {args.task} in {args.data}")
    season = prepare_seasons(matches, model.feature_stats)[0]
    sets = {}
    for name in args.sets.split(","):
        sets[name] = build_task_set(model, TalConfig(task_set=name, n_random=args.n_random, rng_seed=args.rng_seed))
    for p in emit_plots(model, sets, season, args.out_dir):
        print(p)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="taltransfer", description="Transfer of cold-hardiness models via phenology labels.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic multi-task dataset as CSV")
    g.add_argument("--out", required=True)
    g.add_argument("--config", help="generator config JSON (overrides the roster options)")
    g.add_argument("--tasks", type=int, default=6)
    g.add_argument("--seasons", type=int, default=8)
    g.add_argument("--start-year", type=int, default=2000)
    g.add_argument("--missing-rate", type=float, default=0.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--save-config", help="also write the generator config used")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a model bundle on a CSV dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="bundle path (.npz)")
    t.add_argument("--config", help="training config JSON")
    t.add_argument("--variant", choices=("multihead", "embedding"))
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", dest="rng_seed", type=int)
    t.add_argument("--tasks", help="comma-separated source tasks (default: all)")
    t.add_argument("--log", help="per-epoch training log CSV")
    t.set_defaults(func=cmd_train)

    x = sub.add_parser("transfer", help="predict LTE for a target from its phenology-only CSV")
    x.add_argument("--bundle", required=True)
    x.add_argument("--target", required=True, help="CSV in the dataset schema; LTE columns are ignored")
    x.add_argument("--out-dir", required=True)
    x.add_argument("--task", help="target task id when the CSV holds several")
    x.add_argument("--config", help="TAL config JSON")
    x.add_argument("--scheme", choices=("best_source", "opt_embedding", "averaging"))
    x.add_argument("--task-set", dest="task_set")
    x.add_argument("--weighting", choices=("uniform", "linear", "exp"))
    x.add_argument("--tau", type=float)
    x.add_argument("--seed", dest="rng_seed", type=int)
    x.add_argument("--weight-bundle", help="take weights from this second model (source-only sets)")
    x.set_defaults(func=cmd_transfer)

    for name, helptext, fn in (
        ("evaluate", "leave-one-task-out benchmark report", cmd_evaluate),
        ("sweep", "ablation sweep over one axis", cmd_sweep),
    ):
        e = sub.add_parser(name, help=helptext)
        e.add_argument("--config", help="experiment config JSON (default: synthetic desk benchmark)")
        e.add_argument("--out-dir")
        e.add_argument("--master-seed", type=int)
        if name == "sweep":
            e.add_argument("--axis", required=True, choices=("set", "n_random", "tau", "weighting"))
            e.add_argument("--values", help="comma-separated axis values (default: the standard grid)")
            e.add_argument("--task-set", default="S+CR")
        e.set_defaults(func=fn)

    c = sub.add_parser("gradcheck", help="finite-difference check of model gradients")
    c.add_argument("--variant", choices=("multihead", "embedding", "both"), default="both")
    c.add_argument("--seeds", type=int, default=5)
    c.add_argument("--tol", type=float, default=1e-4)
    c.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("plot", help="SVG plots of per-entry LTE50 curves for one season")
    p.add_argument("--bundle", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--task", required=True)
    p.add_argument("--season", required=True, help="season label, e.g. 2005-2006")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--sets", default="S", help="comma-separated task sets, e.g. S,S+CR")
    p.add_argument("--n-random", type=int)
    p.add_argument("--seed", dest="rng_seed", type=int, default=0)
    p.set_defaults(func=cmd_plot)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (DataError, ModelError, TrainingError, TalError, HarnessError, OSError, ValueError, KeyError) as exc:
        print(f"taltransfer {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
