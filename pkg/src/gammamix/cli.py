"""Batch command-line entry points.

Subcommands: datagen, train, predict, evaluate-cv, gridsearch, gradcheck,
report-groups. Stdout carries a human-readable summary; files carry
everything machine-readable. Exit codes: 0 ok, 2 usage, 3 data/parse
error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import DATA_FORMAT_VERSION, __version__
from .autodiff import DomainError, GradCheckError, Tape, grad_check
from .evaluation import (
    LoadedModel,
    OutOfDomain,
    SearchSpace,
    evaluate_cv,
    formula_search_space,
    gnn_search_space,
    group_by_category,
    group_by_frequency,
    load_labels,
    load_report,
    mle_search_space,
    random_grid_search,
    write_report,
)
from .model import DataFormatError, load_dataset, save_vstate
from .molecules import FormulaCounts, MoleculeError, load_molecules, parse_formula, parse_smiles
from .synthetic import WorldSpec, generate
from .training import (
    ConfigError,
    ModelRuntime,
    NonFiniteGradient,
    TrainConfig,
    load_config,
    save_checkpoint,
    train_mle,
    train_vem,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

_OVERRIDE_KEYS = [f.name for f in fields(TrainConfig) if f.name != "seed"]


def _add_config_overrides(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("config overrides")
    for key in _OVERRIDE_KEYS:
        group.add_argument(f"--{key.replace('_', '-')}", dest=f"cfg_{key}", default=None)


def _collect_overrides(args) -> dict:
    overrides = {}
    for key in _OVERRIDE_KEYS:
        value = getattr(args, f"cfg_{key}", None)
        if value is not None:
            overrides[key] = value
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    return overrides


def _load_cfg(args) -> TrainConfig:
    return load_config(args.config, overrides=_collect_overrides(args))


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_datagen(args) -> int:
    spec = WorldSpec(
        latent_dim=args.latent_dim,
        density=args.density,
        noise=args.noise,
        anomaly_fraction=args.anomaly_fraction,
        min_heavy=args.min_heavy,
        max_heavy=args.max_heavy,
    )
    paths, world = generate(spec, args.solutes, args.solvents, args.seed, args.out)
    data = load_dataset(paths["molecules"], paths["observations"])
    print(f"wrote {paths['molecules']}")
    print(f"wrote {paths['observations']} ({data.table.n_obs} observations)")
    print(f"wrote {paths['ground_truth']}")
    print(
        f"planted world: {args.solutes} solutes x {args.solvents} solvents, "
        f"latent_dim={spec.latent_dim}, noise={spec.noise}, "
        f"anomalous={world.anomalous_solutes.size}+{world.anomalous_solvents.size}"
    )
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    data = load_dataset(args.molecules, args.data)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    if cfg.mode == "vem":
        result = train_vem(cfg, data)
    else:
        # MLE needs held-out validation for early stopping: seeded 90/10 split
        rng = np.random.default_rng([cfg.seed, 99])
        order = rng.permutation(data.table.n_obs)
        n_val = max(1, data.table.n_obs // 10)
        val_table = data.table.subset(order[:n_val])
        train_table = data.table.subset(order[n_val:])
        result = train_mle(cfg, data.with_table(train_table), val_table)

    ckpt = out_dir / "checkpoint.npz"
    save_checkpoint(ckpt, result)
    print(f"wrote {ckpt}")
    if cfg.mode == "vem":
        vstate_path = out_dir / "vstate.npz"
        save_vstate(vstate_path, result.vstate(), data.solute_ids, data.solvent_ids)
        print(f"wrote {vstate_path}")
    log_path = out_dir / "log.jsonl"
    with open(log_path, "w", encoding="utf-8") as handle:
        for row in result.log:
            handle.write(json.dumps(row, sort_keys=True) + "\n")
    print(f"wrote {log_path}")
    if result.log:
        last = result.log[-1]
        print(
            f"finished after {result.final_epoch} epochs: "
            f"objective={last['elbo_or_nll']:.4f} "
            f"train_mae={last['train_mae']:.4f} train_mse={last['train_mse']:.4f}"
        )
    if result.best_val_mse is not None:
        print(f"best validation MSE: {result.best_val_mse:.6f}")
    return EXIT_OK


def _resolve_component(model: LoadedModel, records, text: str, role: str):
    if text.startswith("SMILES:"):
        return OutOfDomain(parse_smiles(text[len("SMILES:"):]))
    if text.startswith("FORMULA:"):
        counts = FormulaCounts.from_atom_counts(parse_formula(text[len("FORMULA:"):]))
        return OutOfDomain(counts)
    try:
        return model.status_for(text, role)
    except KeyError:
        if records is not None and text in records:
            return OutOfDomain(records[text])
        raise DataFormatError(f"unknown component id {text!r}") from None


def cmd_predict(args) -> int:
    model = LoadedModel.load(Path(args.model) / "checkpoint.npz")
    records = load_molecules(args.molecules) if args.molecules else None
    solute = _resolve_component(model, records, args.solute, "solute")
    solvent = _resolve_component(model, records, args.solvent, "solvent")
    ln_hat, gamma_hat = model.predict_pair(solute, solvent)
    print(f"ln_gamma = {ln_hat:.6f}")
    print(f"gamma    = {gamma_hat:.6f}")
    record = {
        "solute": args.solute,
        "solvent": args.solvent,
        "solute_domain": "in" if not isinstance(solute, OutOfDomain) else "out",
        "solvent_domain": "in" if not isinstance(solvent, OutOfDomain) else "out",
        "ln_gamma_pred": ln_hat,
        "gamma_pred": gamma_hat,
    }
    Path(args.out).write_text(json.dumps(record, sort_keys=True) + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_evaluate_cv(args) -> int:
    cfg = _load_cfg(args)
    data = load_dataset(args.molecules, args.data)
    methods = tuple(m.strip() for m in args.methods.split(",") if m.strip())
    result = evaluate_cv(
        cfg, data, methods=methods, split_mode=args.split_mode, jobs=args.jobs
    )
    for method in methods:
        path = f"{args.out}.{method}.jsonl"
        write_report(path, result.rows[method], result.summaries[method])
        print(f"wrote {path}")
        for summary in result.summaries[method]:
            if summary["n"]:
                print(
                    f"  {method:9s} {summary['split']:3s}: "
                    f"MAE={summary['MAE']:.4f} MSE={summary['MSE']:.4f} n={summary['n']}"
                )
            else:
                print(f"  {method:9s} {summary['split']:3s}: no entries")
    return EXIT_OK


def _space_from_file(path) -> SearchSpace:
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    valid = {f.name for f in fields(SearchSpace)}
    unknown = set(raw) - valid
    if unknown:
        raise ConfigError(f"unknown search space fields: {sorted(unknown)}")
    return SearchSpace(**{k: tuple(v) for k, v in raw.items()})


def cmd_gridsearch(args) -> int:
    cfg = _load_cfg(args)
    data = load_dataset(args.molecules, args.data)
    if args.space:
        space = _space_from_file(args.space)
    elif cfg.mode == "mle":
        space = mle_search_space()
    elif cfg.prior == "gnn":
        space = gnn_search_space()
    else:
        space = formula_search_space()
    best, trials = random_grid_search(
        space, data, cfg, trials=args.trials, seed=args.seed, jobs=args.jobs
    )
    trials_path = f"{args.out}.trials.jsonl"
    with open(trials_path, "w", encoding="utf-8") as handle:
        for row in trials:
            handle.write(json.dumps(row, sort_keys=True) + "\n")
    print(f"wrote {trials_path}")
    if best is None:
        print("no trial finished successfully")
        return EXIT_NUMERIC
    best_path = f"{args.out}.best.json"
    Path(best_path).write_text(json.dumps(best.to_dict(), sort_keys=True) + "\n", encoding="utf-8")
    print(f"wrote {best_path}")
    best_row = min(
        (r for r in trials if r["status"] == "ok"), key=lambda r: r["mse"]
    )
    print(f"best config (test MSE {best_row['mse']:.4f}): lr={best.lr} "
          f"latent_dim={best.latent_dim} schedule={best.schedule}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = _load_cfg(args)
    data = load_dataset(args.molecules, args.data)
    runtime = ModelRuntime(cfg, data)
    rng = np.random.default_rng([cfg.seed, 7])
    n = data.table.n_obs
    batch = rng.choice(n, size=min(cfg.batch_size, n), replace=False)
    eps_u, eps_v = runtime.draw_noise(batch)

    # cap the finite-difference sweep: whole parameter tensors, in name
    # order, until the scalar budget is reached
    names = []
    budget = args.max_params
    for name in sorted(runtime.params.names()):
        size = runtime.params.value(name).size
        if budget - size < 0 and names:
            continue
        names.append(name)
        budget -= size

    def term_fn(term):
        def fn(tape):
            value, parts = runtime.objective_t(tape, batch, eps_u, eps_v, training=False)
            return value if term == "total" else parts[term]

        return fn

    probe = Tape(runtime.params)
    _, parts = runtime.objective_t(probe, batch, eps_u, eps_v, training=False)
    terms = ["total", *sorted(parts)]
    report = {}
    worst = 0.0
    for term in terms:
        err = grad_check(term_fn(term), runtime.params, h=args.step, names=names)
        report[term] = err
        worst = max(worst, err)
        print(f"{term:22s} max_rel_err = {err:.3e}")
    if args.out:
        Path(args.out).write_text(json.dumps(report, sort_keys=True) + "\n", encoding="utf-8")
        print(f"wrote {args.out}")
    print(f"checked {sum(runtime.params.value(n).size for n in names)} parameters")
    return EXIT_OK


def cmd_report_groups(args) -> int:
    rows, _ = load_report(args.report)
    baseline_rows, _ = load_report(args.baseline)
    labels = load_labels(args.labels)
    data = load_dataset(args.molecules, args.data)
    output = {}
    for role in ("solute", "solvent"):
        output[f"by_category_{role}"] = group_by_category(rows, labels, baseline_rows, role=role)
        output[f"by_frequency_{role}"] = group_by_frequency(
            rows, data, role=role, baseline_rows=baseline_rows
        )
    Path(args.out).write_text(json.dumps(output, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    print(f"wrote {args.out}")
    for row in output["by_category_solute"]:
        flag = " (small sample)" if row["small_sample"] else ""
        delta = "n/a" if row["delta_mae"] is None else f"{row['delta_mae']:+.4f}"
        print(f"  solute {row['category']:12s} n={row['n']:4d} dMAE={delta}{flag}")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gammamix",
        description="Hybrid structure-prior / matrix-completion activity coefficient model",
    )
    parser.add_argument(
        "--version",
        action="version",
        version=f"gammamix {__version__} (data format v{DATA_FORMAT_VERSION})",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("datagen", help="generate a synthetic planted corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--solutes", type=int, default=60)
    p.add_argument("--solvents", type=int, default=60)
    p.add_argument("--density", type=float, default=0.3)
    p.add_argument("--noise", type=float, default=0.15)
    p.add_argument("--anomaly-fraction", type=float, default=0.1)
    p.add_argument("--latent-dim", type=int, default=4)
    p.add_argument("--min-heavy", type=int, default=2)
    p.add_argument("--max-heavy", type=int, default=12)
    p.set_defaults(func=cmd_datagen)

    p = sub.add_parser("train", help="train one model")
    p.add_argument("--config", required=True)
    p.add_argument("--molecules", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    _add_config_overrides(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="predict one mixture from a trained model")
    p.add_argument("--model", required=True, help="training output directory")
    p.add_argument("--molecules", default=None)
    p.add_argument("--solute", required=True, help="id, SMILES:<s> or FORMULA:<f>")
    p.add_argument("--solvent", required=True, help="id, SMILES:<s> or FORMULA:<f>")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate-cv", help="10-fold cross-validated evaluation")
    p.add_argument("--config", required=True)
    p.add_argument("--molecules", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="report path prefix")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--methods", default="vem,ablation1")
    p.add_argument("--split-mode", default="entry", choices=("entry", "solute"))
    p.add_argument("--jobs", type=int, default=1)
    _add_config_overrides(p)
    p.set_defaults(func=cmd_evaluate_cv)

    p = sub.add_parser("gridsearch", help="random hyperparameter search")
    p.add_argument("--config", required=True)
    p.add_argument("--molecules", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output path prefix")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--trials", type=int, default=30)
    p.add_argument("--space", default=None, help="JSON file overriding the search space")
    p.add_argument("--jobs", type=int, default=1)
    _add_config_overrides(p)
    p.set_defaults(func=cmd_gridsearch)

    p = sub.add_parser("gradcheck", help="finite-difference check of the objective")
    p.add_argument("--config", required=True)
    p.add_argument("--molecules", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--step", type=float, default=1e-6)
    p.add_argument("--max-params", type=int, default=1500)
    _add_config_overrides(p)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("report-groups", help="grouped error analyses of reports")
    p.add_argument("--report", required=True)
    p.add_argument("--baseline", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--molecules", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report_groups)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (MoleculeError, DataFormatError, ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NonFiniteGradient, DomainError, GradCheckError, ArithmeticError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def entry() -> None:  # console_scripts hook
    sys.exit(main())


if __name__ == "__main__":
    entry()
