"""Evaluation protocol: mode-based prediction, metrics, 10-fold
cross-validation with an in/out-of-domain split of every test entry,
grouped error analyses, and a random hyperparameter grid search.

A test mixture is out-of-domain when its solute or its solvent never
occurs in the fold's training entries; in-domain components predict from
their fitted posterior mean, out-of-domain components from the prior mean
of their structure.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .autodiff import ParamStore
from .model import Dataset, DataFormatError, ObservationTable, VariationalState
from .priors import PriorNetwork
from .training import (
    ConfigError,
    TrainConfig,
    TrainResult,
    _prior_config,
    load_checkpoint,
    train_mle,
    train_vem,
)

DOMAIN_IN = "in"
DOMAIN_OUT = "out"

METHOD_VEM = "vem"
METHOD_ABLATION1 = "ablation1"
METHOD_MLE = "mle"
METHODS = (METHOD_VEM, METHOD_ABLATION1, METHOD_MLE)

SMALL_SAMPLE_THRESHOLD = 10


# --------------------------------------------------------------------------
# split plans
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Fold:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray


@dataclass(frozen=True)
class SplitPlan:
    folds: list[Fold]
    hyper: Fold

    def check_invariants(self, n_obs: int) -> None:
        all_test = np.concatenate([f.test for f in self.folds])
        if len(np.unique(all_test)) != all_test.size:
            raise AssertionError("test folds overlap")
        if sorted(all_test.tolist()) != list(range(n_obs)):
            raise AssertionError("test folds do not cover the dataset")
        for fold in list(self.folds) + [self.hyper]:
            combined = np.concatenate([fold.train, fold.val, fold.test])
            if sorted(combined.tolist()) != list(range(n_obs)):
                raise AssertionError("fold parts do not partition the dataset")


def _split_rest(rest: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n_val = rest.size // 9  # 10 percent of the full set, within one entry
    return rest[n_val:], rest[:n_val]


def make_splits(table: ObservationTable, seed: int, n_folds: int = 10,
                mode: str = "entry") -> SplitPlan:
    """Seeded split plan: `n_folds` folds plus one hyperparameter split.

    ``entry`` mode shuffles observations and assigns contiguous test
    deciles; the remaining 90 percent splits 8:1 into train:validation.
    ``solute`` mode partitions solute indices instead, so every test entry
    is out-of-domain by construction (stress-test option).
    """
    n = table.n_obs
    if n < n_folds:
        raise DataFormatError(f"need at least {n_folds} observations, have {n}")
    rng = np.random.default_rng([seed, 77])

    folds: list[Fold] = []
    if mode == "entry":
        perm = rng.permutation(n)
        bounds = [(k * n) // n_folds for k in range(n_folds + 1)]
        for k in range(n_folds):
            test = perm[bounds[k] : bounds[k + 1]]
            rest = np.concatenate([perm[: bounds[k]], perm[bounds[k + 1] :]])
            train, val = _split_rest(rest)
            folds.append(Fold(train=train, val=val, test=test))
    elif mode == "solute":
        solutes = rng.permutation(table.n_solutes)
        bounds = [(k * solutes.size) // n_folds for k in range(n_folds + 1)]
        order = rng.permutation(n)
        for k in range(n_folds):
            held = set(solutes[bounds[k] : bounds[k + 1]].tolist())
            mask = np.array([table.solute_idx[e] in held for e in order])
            test = order[mask]
            rest = order[~mask]
            train, val = _split_rest(rest)
            folds.append(Fold(train=train, val=val, test=test))
    else:
        raise ConfigError(f"unknown split mode {mode!r}")

    hperm = rng.permutation(n)
    h_test = hperm[: n // n_folds]
    h_train, h_val = _split_rest(hperm[n // n_folds :])
    return SplitPlan(folds=folds, hyper=Fold(train=h_train, val=h_val, test=h_test))


def tag_domain(fold: Fold, table: ObservationTable) -> np.ndarray:
    """Per test entry: "out" iff its solute or solvent misses the training entries."""
    train_solutes = set(np.unique(table.solute_idx[fold.train]).tolist())
    train_solvents = set(np.unique(table.solvent_idx[fold.train]).tolist())
    tags = [
        DOMAIN_OUT
        if (table.solute_idx[e] not in train_solutes or table.solvent_idx[e] not in train_solvents)
        else DOMAIN_IN
        for e in fold.test
    ]
    return np.array(tags)


# --------------------------------------------------------------------------
# prediction
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class InDomain:
    index: int


@dataclass(frozen=True)
class OutOfDomain:
    structure: object  # ComponentRecord, MoleculeGraph or FormulaCounts


def predict(
    solute_status,
    solvent_status,
    nets: tuple[PriorNetwork, PriorNetwork],
    vstate: VariationalState | None,
) -> tuple[float, float]:
    """Mode-based point prediction -> (ln gamma_hat, gamma_hat).

    In-domain components use the posterior mean, out-of-domain components
    the prior mean of their structure; the prediction is the dot product.
    """
    solute_net, solvent_net = nets

    def resolve(status, net, means, size):
        if isinstance(status, InDomain):
            if vstate is None:
                raise ValueError("in-domain prediction needs a variational state")
            if not 0 <= status.index < size:
                raise IndexError(f"component index {status.index} out of range")
            return means[status.index]
        if isinstance(status, OutOfDomain):
            return net.predict_mean(status.structure)
        raise TypeError("status must be InDomain or OutOfDomain")

    u_hat = resolve(
        solute_status,
        solute_net,
        vstate.solute_mean if vstate is not None else None,
        vstate.n_solutes if vstate is not None else 0,
    )
    v_hat = resolve(
        solvent_status,
        solvent_net,
        vstate.solvent_mean if vstate is not None else None,
        vstate.n_solvents if vstate is not None else 0,
    )
    ln_hat = float(u_hat @ v_hat)
    return ln_hat, math.exp(ln_hat)


def metrics(pairs) -> tuple[float, float]:
    """(MAE, MSE) over (ln gamma true, ln gamma predicted) pairs."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("metrics need at least one pair")
    delta = np.array([true - pred for true, pred in pairs], dtype=np.float64)
    return float(np.mean(np.abs(delta))), float(np.mean(delta * delta))


# --------------------------------------------------------------------------
# cross-validation harness
# --------------------------------------------------------------------------


def _fold_seed(seed: int, fold_index: int) -> int:
    return int(np.random.SeedSequence([seed, fold_index]).generate_state(1)[0])


def _method_predictions(
    result: TrainResult, table: ObservationTable, entries: np.ndarray, method: str
) -> np.ndarray:
    """Point predictions for entry indices, resolving domain per component."""
    runtime = result.runtime
    prior_u, _ = runtime.solute_net.prior_params(runtime.solute_inputs)
    prior_v, _ = runtime.solvent_net.prior_params(runtime.solvent_inputs)
    if method in (METHOD_ABLATION1, METHOD_MLE):
        u, v = prior_u, prior_v
    else:
        u, v = prior_u.copy(), prior_v.copy()
        vstate = result.vstate()
        trained_i = result.trained_solutes()
        trained_j = result.trained_solvents()
        u[trained_i] = vstate.solute_mean[trained_i]
        v[trained_j] = vstate.solvent_mean[trained_j]
    si = table.solute_idx[entries]
    sj = table.solvent_idx[entries]
    return np.einsum("ij,ij->i", u[si], v[sj])


def _summaries(rows: list[dict]) -> list[dict]:
    out = []
    for split in (DOMAIN_IN, DOMAIN_OUT):
        deltas = [
            r["ln_gamma_true"] - r["ln_gamma_pred"] for r in rows if r["domain_tag"] == split
        ]
        if deltas:
            arr = np.array(deltas)
            out.append(
                {
                    "split": split,
                    "MAE": float(np.mean(np.abs(arr))),
                    "MSE": float(np.mean(arr * arr)),
                    "n": len(deltas),
                }
            )
        else:
            out.append({"split": split, "MAE": None, "MSE": None, "n": 0})
    return out


def _run_fold(payload) -> dict:
    cfg, mle_cfg, data, fold, fold_index, excluded, methods = payload
    table = data.table
    train_data = data.with_table(table.subset(fold.train))
    eval_entries = np.array([e for e in fold.test if e not in excluded], dtype=np.intp)
    tags_all = tag_domain(fold, table)
    keep = np.array([e not in excluded for e in fold.test], dtype=bool)
    tags = tags_all[keep]

    results: dict[str, TrainResult] = {}
    vem_cfg = replace(cfg, seed=_fold_seed(cfg.seed, fold_index))
    if METHOD_VEM in methods or METHOD_ABLATION1 in methods:
        results[METHOD_VEM] = train_vem(vem_cfg, train_data)
    if METHOD_MLE in methods:
        cfg_m = replace(mle_cfg, seed=_fold_seed(mle_cfg.seed, fold_index))
        results[METHOD_MLE] = train_mle(cfg_m, train_data, table.subset(fold.val))

    fold_rows: dict[str, list[dict]] = {}
    for method in methods:
        source = results[METHOD_MLE if method == METHOD_MLE else METHOD_VEM]
        preds = _method_predictions(source, table, eval_entries, method)
        rows = []
        for pos, entry in enumerate(eval_entries):
            rows.append(
                {
                    "fold": fold_index,
                    "entry_index": int(entry),
                    "solute_id": data.solute_ids[table.solute_idx[entry]],
                    "solvent_id": data.solvent_ids[table.solvent_idx[entry]],
                    "domain_tag": str(tags[pos]),
                    "ln_gamma_true": float(table.ln_gamma[entry]),
                    "ln_gamma_pred": float(preds[pos]),
                }
            )
        fold_rows[method] = rows
    return {"fold": fold_index, "rows": fold_rows}


@dataclass
class CvResult:
    rows: dict[str, list[dict]]
    summaries: dict[str, list[dict]]
    per_fold: dict[str, list[dict]] = field(default_factory=dict)

    def report_paths(self, prefix: str) -> dict[str, Path]:
        return {m: Path(f"{prefix}.{m}.jsonl") for m in self.rows}


def evaluate_cv(
    cfg: TrainConfig,
    data: Dataset,
    *,
    plan: SplitPlan | None = None,
    methods: tuple[str, ...] = (METHOD_VEM, METHOD_ABLATION1),
    mle_cfg: TrainConfig | None = None,
    split_mode: str = "entry",
    jobs: int = 1,
) -> CvResult:
    """Train and evaluate every fold; returns per-entry rows and summaries.

    Test entries that belong to the hyperparameter split's test part are
    excluded from all reports. The ablation re-predicts the same trained
    model using prior means only; MLE (when requested) trains its own
    mean-only networks with validation early stopping.
    """
    for method in methods:
        if method not in METHODS:
            raise ConfigError(f"unknown method {method!r}")
    if METHOD_MLE in methods:
        mle_cfg = mle_cfg or replace(cfg, mode="mle")
        if mle_cfg.mode != "mle":
            raise ConfigError("mle_cfg must have mode = mle")
    plan = plan or make_splits(data.table, cfg.seed, mode=split_mode)
    excluded = frozenset(plan.hyper.test.tolist())

    payloads = [
        (cfg, mle_cfg, data, fold, k, excluded, tuple(methods))
        for k, fold in enumerate(plan.folds)
    ]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_run_fold, payloads))
    else:
        outcomes = [_run_fold(p) for p in payloads]
    outcomes.sort(key=lambda o: o["fold"])

    rows = {m: [r for o in outcomes for r in o["rows"][m]] for m in methods}
    summaries = {m: _summaries(rows[m]) for m in methods}
    per_fold = {
        m: [
            {"fold": o["fold"], **s}
            for o in outcomes
            for s in _summaries(o["rows"][m])
            if s["n"] > 0
        ]
        for m in methods
    }
    return CvResult(rows=rows, summaries=summaries, per_fold=per_fold)


def write_report(path, rows: list[dict], summaries: list[dict]) -> None:
    """Line-delimited JSON: entry records, then the summary block."""
    with open(path, "w", encoding="utf-8") as handle:
        for row in rows:
            handle.write(json.dumps(row, sort_keys=True) + "\n")
        for summary in summaries:
            handle.write(json.dumps(summary, sort_keys=True) + "\n")


def load_report(path) -> tuple[list[dict], list[dict]]:
    rows, summaries = [], []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        record = json.loads(line)
        (summaries if "split" in record else rows).append(record)
    return rows, summaries


# --------------------------------------------------------------------------
# grouped analyses
# --------------------------------------------------------------------------


def _component_key(row: dict, role: str) -> str:
    return row["solute_id"] if role == "solute" else row["solvent_id"]


def _mae(rows: list[dict]) -> float:
    return float(np.mean([abs(r["ln_gamma_true"] - r["ln_gamma_pred"]) for r in rows]))


def group_by_category(
    rows: list[dict],
    labels: dict[str, str],
    baseline_rows: list[dict],
    role: str = "solute",
) -> list[dict]:
    """Per-category MAE improvement of `rows` over `baseline_rows`.

    Components without a label fall into "UNLABELED"; categories with few
    test entries carry a small-sample flag.
    """
    if role not in ("solute", "solvent"):
        raise ValueError("role must be 'solute' or 'solvent'")

    def bucket(rws):
        grouped: dict[str, list[dict]] = {}
        for row in rws:
            category = labels.get(_component_key(row, role), "UNLABELED")
            grouped.setdefault(category, []).append(row)
        return grouped

    ours = bucket(rows)
    base = bucket(baseline_rows)
    out = []
    for category in sorted(set(ours) | set(base)):
        mine = ours.get(category, [])
        theirs = base.get(category, [])
        mae_method = _mae(mine) if mine else None
        mae_baseline = _mae(theirs) if theirs else None
        delta = (
            mae_baseline - mae_method
            if mae_method is not None and mae_baseline is not None
            else None
        )
        out.append(
            {
                "category": category,
                "n": len(mine),
                "mae": mae_method,
                "baseline_mae": mae_baseline,
                "delta_mae": delta,
                "small_sample": len(mine) < SMALL_SAMPLE_THRESHOLD,
            }
        )
    return out


def group_by_frequency(
    rows: list[dict],
    data: Dataset,
    role: str = "solute",
    baseline_rows: list[dict] | None = None,
) -> list[dict]:
    """Error as a function of how often a component occurs in the dataset.

    The frequency n counts appearances in the full observation table; each
    report row lands in the bucket of its solute's (resp. solvent's) n.
    """
    if role == "solute":
        counts = np.bincount(data.table.solute_idx, minlength=len(data.solute_ids))
        index = {cid: k for k, cid in enumerate(data.solute_ids)}
    elif role == "solvent":
        counts = np.bincount(data.table.solvent_idx, minlength=len(data.solvent_ids))
        index = {cid: k for k, cid in enumerate(data.solvent_ids)}
    else:
        raise ValueError("role must be 'solute' or 'solvent'")

    def bucket(rws):
        grouped: dict[int, list[dict]] = {}
        for row in rws:
            cid = _component_key(row, role)
            if cid not in index:
                raise DataFormatError(f"report references unknown component {cid!r}")
            grouped.setdefault(int(counts[index[cid]]), []).append(row)
        return grouped

    ours = bucket(rows)
    base = bucket(baseline_rows) if baseline_rows is not None else {}
    out = []
    for n in sorted(set(ours) | set(base)):
        mine = ours.get(n, [])
        entry = {"n": n, "count": len(mine), "mae": _mae(mine) if mine else None}
        if baseline_rows is not None:
            theirs = base.get(n, [])
            entry["baseline_mae"] = _mae(theirs) if theirs else None
            entry["delta_mae"] = (
                entry["baseline_mae"] - entry["mae"]
                if entry["mae"] is not None and entry["baseline_mae"] is not None
                else None
            )
        out.append(entry)
    return out


def load_labels(path) -> dict[str, str]:
    """Category labels CSV: component_id,category (optional header)."""
    labels: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 2:
            raise DataFormatError(f"labels line {lineno}: expected component_id,category")
        if lineno == 1 and parts == ["component_id", "category"]:
            continue
        labels[parts[0]] = parts[1]
    return labels


# --------------------------------------------------------------------------
# random grid search
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SearchSpace:
    """Discrete per-hyperparameter value lists, sampled independently."""

    loss_variant: tuple = ("kl", "entropy")
    lr: tuple = (0.005, 0.001, 0.0005, 0.0001)
    latent_dim: tuple = (4, 8, 16)
    schedule: tuple = tuple(str(k) for k in range(9))
    dropout: tuple = (0.0, 0.1)
    embed_dim: tuple = (16, 32, 64, 128)
    aggregation: tuple = ("sum",)
    n_layers: tuple = (1, 2, 4, 6, 8)
    skip_period: tuple = (0, 1, 2)
    bias: tuple = (True,)

    def __post_init__(self):
        for f in fields(self):
            if not getattr(self, f.name):
                raise ConfigError(f"search space field {f.name!r} is empty")


def gnn_search_space() -> SearchSpace:
    return SearchSpace(aggregation=("sum", "mean"), bias=(True, False))


def formula_search_space() -> SearchSpace:
    return SearchSpace(schedule=tuple(str(k) for k in range(10)))


def mle_search_space() -> SearchSpace:
    return SearchSpace(
        loss_variant=("kl",),  # unused by MLE training
        lr=(1e-2, 1e-3, 1e-4, 5e-4, 5e-5),
        schedule=tuple(str(k) for k in range(9)),
    )


def sample_config(space: SearchSpace, base: TrainConfig, rng) -> TrainConfig:
    draws = {}
    for f in fields(space):
        values = getattr(space, f.name)
        draws[f.name] = values[int(rng.integers(0, len(values)))]
    return replace(base, **draws)


def _score_config(cfg: TrainConfig, data: Dataset, hyper: Fold) -> tuple[float, float]:
    table = data.table
    train_data = data.with_table(table.subset(hyper.train))
    if cfg.mode == "mle":
        result = train_mle(cfg, train_data, table.subset(hyper.val))
        method = METHOD_MLE
    else:
        result = train_vem(cfg, train_data)
        method = METHOD_VEM
    preds = _method_predictions(result, table, hyper.test, method)
    delta = preds - table.ln_gamma[hyper.test]
    return float(np.mean(np.abs(delta))), float(np.mean(delta * delta))


def _grid_task(payload):
    key, cfg, data, hyper = payload
    try:
        mae, mse = _score_config(cfg, data, hyper)
        return key, {"status": "ok", "mae": mae, "mse": mse}
    except Exception as exc:  # recorded, not fatal
        return key, {"status": f"error: {exc}", "mae": None, "mse": None}


def random_grid_search(
    space: SearchSpace,
    data: Dataset,
    base_cfg: TrainConfig,
    *,
    plan: SplitPlan | None = None,
    trials: int = 30,
    seed: int = 0,
    jobs: int = 1,
) -> tuple[TrainConfig | None, list[dict]]:
    """Uniform independent sampling per hyperparameter; best test-MSE config.

    Duplicate samples are deduplicated before training (each distinct
    config trains once); failed trials are recorded in the table and
    skipped by the argmin.
    """
    plan = plan or make_splits(data.table, seed)
    rng = np.random.default_rng([seed, 55])
    sampled = [sample_config(space, base_cfg, rng) for _ in range(trials)]

    distinct: dict[tuple, TrainConfig] = {}
    for cfg in sampled:
        key = tuple(sorted(cfg.to_dict().items()))
        distinct.setdefault(key, cfg)
    payloads = [(key, cfg, data, plan.hyper) for key, cfg in distinct.items()]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = dict(pool.map(_grid_task, payloads))
    else:
        outcomes = dict(_grid_task(p) for p in payloads)

    table_rows = []
    best_cfg = None
    best_mse = math.inf
    for trial, cfg in enumerate(sampled):
        key = tuple(sorted(cfg.to_dict().items()))
        outcome = outcomes[key]
        table_rows.append({"trial": trial, "config": cfg.to_dict(), **outcome})
        if outcome["status"] == "ok" and outcome["mse"] < best_mse:
            best_mse = outcome["mse"]
            best_cfg = cfg
    return best_cfg, table_rows


# --------------------------------------------------------------------------
# loading a trained model for prediction
# --------------------------------------------------------------------------


@dataclass
class LoadedModel:
    """Networks + posterior state rebuilt from files, ready for `predict`."""

    config: TrainConfig
    store: ParamStore
    solute_net: PriorNetwork
    solvent_net: PriorNetwork
    vstate: VariationalState | None
    solute_ids: list[str]
    solvent_ids: list[str]
    trained_solute_ids: frozenset[str]
    trained_solvent_ids: frozenset[str]

    @classmethod
    def load(cls, checkpoint_path) -> "LoadedModel":
        bundle = load_checkpoint(checkpoint_path)
        cfg = bundle.config
        store = ParamStore()
        for name, value in bundle.param_values.items():
            store.add(name, value)
        prior_cfg = _prior_config(cfg)
        solute_net = PriorNetwork(cfg.prior, prior_cfg, store, "sol.", register=False)
        solvent_net = PriorNetwork(cfg.prior, prior_cfg, store, "svt.", register=False)
        vstate = None
        if cfg.mode == "vem":
            vstate = VariationalState(
                solute_mean=store.value("q.sol_mean").copy(),
                solute_logstd=store.value("q.sol_logstd").copy(),
                solvent_mean=store.value("q.svt_mean").copy(),
                solvent_logstd=store.value("q.svt_logstd").copy(),
            )
        meta = bundle.meta
        solute_ids = list(meta["solute_ids"])
        solvent_ids = list(meta["solvent_ids"])
        return cls(
            config=cfg,
            store=store,
            solute_net=solute_net,
            solvent_net=solvent_net,
            vstate=vstate,
            solute_ids=solute_ids,
            solvent_ids=solvent_ids,
            trained_solute_ids=frozenset(solute_ids[i] for i in meta["trained_solutes"]),
            trained_solvent_ids=frozenset(solvent_ids[j] for j in meta["trained_solvents"]),
        )

    def status_for(self, component_id_or_structure, role: str):
        """Resolve an id (or parsed structure) to a prediction status."""
        ids = self.solute_ids if role == "solute" else self.solvent_ids
        trained = self.trained_solute_ids if role == "solute" else self.trained_solvent_ids
        if isinstance(component_id_or_structure, str):
            cid = component_id_or_structure
            if cid in trained and self.vstate is not None:
                return InDomain(ids.index(cid))
            raise KeyError(cid)
        return OutOfDomain(component_id_or_structure)

    def predict_pair(self, solute_status, solvent_status) -> tuple[float, float]:
        return predict(
            solute_status, solvent_status, (self.solute_net, self.solvent_net), self.vstate
        )
