"""Training loops and optimization plumbing.

Two modes share one runtime: variational EM jointly ascends prior-network
weights and per-component posterior parameters on the minibatch ELBO;
the maximum-likelihood ablation drops the posteriors, trains mean-only
networks on the plain likelihood, and keeps the checkpoint with the best
validation MSE (evaluated every ``eval_every`` epochs).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .autodiff import ParamStore, Tape, Var
from .model import (
    DEFAULT_LAMBDA,
    Dataset,
    ObservationTable,
    VariationalState,
    elbo_parts_t,
)
from .priors import FormulaPriorConfig, GnnPriorConfig, PriorNetwork

CHECKPOINT_FORMAT_VERSION = 1

MODES = ("vem", "mle")
PRIOR_KINDS = ("gnn", "formula")
LOSS_VARIANTS = ("kl", "entropy")


class NonFiniteGradient(RuntimeError):
    """An update step saw a non-finite gradient and was aborted."""


class ConfigError(ValueError):
    """Bad training configuration or config file."""


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "vem"
    prior: str = "gnn"
    latent_dim: int = 8
    embed_dim: int = 16
    n_layers: int = 2
    aggregation: str = "sum"
    skip_period: int = 0
    dropout: float = 0.0
    bias: bool = True
    loss_variant: str = "kl"
    lr: float = 0.001
    schedule: str = "constant"
    batch_size: int = 512
    epochs: int = 15000
    seed: int = 0
    eval_every: int = 10
    log_every: int = 100
    n_samples: int = 1
    sample_with_replacement: bool = False
    clip_norm: float = 0.0
    plateau_patience: int = 0
    plateau_tol: float = 1e-4
    lam: float = DEFAULT_LAMBDA

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if self.prior not in PRIOR_KINDS:
            raise ConfigError(f"prior must be one of {PRIOR_KINDS}")
        if self.loss_variant not in LOSS_VARIANTS:
            raise ConfigError(f"loss_variant must be one of {LOSS_VARIANTS}")
        if self.latent_dim < 1 or self.embed_dim < 1:
            raise ConfigError("latent_dim and embed_dim must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.eval_every < 1 or self.log_every < 1 or self.n_samples < 1:
            raise ConfigError("eval_every, log_every and n_samples must be >= 1")
        if self.lam <= 0:
            raise ConfigError("lam must be positive")
        parse_schedule(self.schedule)  # fail fast on bad specs

    def run_id(self) -> str:
        return f"{self.mode}-{self.prior}-s{self.seed}"

    def to_dict(self) -> dict:
        return asdict(self)


_BOOL_KEYS = {"bias", "sample_with_replacement"}
_INT_KEYS = {
    "latent_dim", "embed_dim", "n_layers", "skip_period", "batch_size",
    "epochs", "seed", "eval_every", "log_every", "n_samples", "plateau_patience",
}
_FLOAT_KEYS = {"dropout", "lr", "clip_norm", "plateau_tol", "lam"}


def _coerce(key: str, raw) -> object:
    if isinstance(raw, str):
        raw = raw.strip()
    if key in _BOOL_KEYS:
        if isinstance(raw, bool):
            return raw
        if str(raw).lower() in ("true", "1", "yes"):
            return True
        if str(raw).lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"{key} expects a boolean, got {raw!r}")
    if key in _INT_KEYS:
        return int(raw)
    if key in _FLOAT_KEYS:
        return float(raw)
    return str(raw)


def config_from_mapping(mapping: dict, base: TrainConfig | None = None) -> TrainConfig:
    base = base or TrainConfig()
    known = set(asdict(base))
    updates = {}
    for key, raw in mapping.items():
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        updates[key] = _coerce(key, raw)
    return replace(base, **updates)


def parse_config_file(path) -> dict[str, str]:
    """Flat ``key = value`` file; '#' starts a comment."""
    mapping: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = text.split("=", 1)
        key = key.strip()
        if key in mapping:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        mapping[key] = value.strip()
    return mapping


def load_config(path, overrides: dict | None = None) -> TrainConfig:
    cfg = config_from_mapping(parse_config_file(path))
    if overrides:
        cfg = config_from_mapping(overrides, base=cfg)
    return cfg


# --------------------------------------------------------------------------
# learning-rate schedules
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Schedule:
    kind: str  # constant | robbins_monro | cyclical | step
    params: tuple = ()


SCHEDULER_PRESETS: dict[int, Schedule] = {
    0: Schedule("constant"),
    1: Schedule("robbins_monro", (1500.0, 0.5, 1.0, 150.0)),
    2: Schedule("robbins_monro", (1500.0, 0.6, 1.0, 300.0)),
    3: Schedule("robbins_monro", (1500.0, 0.8, 1.0, 900.0)),
    4: Schedule("cyclical", (1.0,)),
    5: Schedule("cyclical", (2.0,)),
    6: Schedule("cyclical", (4.0,)),
    7: Schedule("step", (0.8, 1500.0)),
    8: Schedule("step", (0.45, 3750.0)),
    9: Schedule("step", (0.1, 7500.0)),
}


def parse_schedule(spec: str | Schedule) -> Schedule:
    """Accepts 'constant', a preset id '0'..'9' (also 'id:N'), or
    'robbins_monro:Tw,gamma,a,b' / 'cyclical:Tc' / 'step:gamma,Te'."""
    if isinstance(spec, Schedule):
        return spec
    text = str(spec).strip()
    if text == "constant":
        return Schedule("constant")
    if text.startswith("id:"):
        text = text[3:]
    if text.isdigit():
        ident = int(text)
        if ident not in SCHEDULER_PRESETS:
            raise ConfigError(f"unknown scheduler id {ident}")
        return SCHEDULER_PRESETS[ident]
    if ":" not in text:
        raise ConfigError(f"cannot parse schedule {spec!r}")
    kind, arg_text = text.split(":", 1)
    try:
        args = tuple(float(a) for a in arg_text.split(","))
    except ValueError as exc:
        raise ConfigError(f"bad schedule arguments in {spec!r}") from exc
    if kind == "robbins_monro" and len(args) == 4:
        return Schedule(kind, args)
    if kind == "cyclical" and len(args) == 1 and args[0] >= 1:
        return Schedule(kind, args)
    if kind == "step" and len(args) == 2 and 0 < args[0] <= 1 and args[1] >= 1:
        return Schedule(kind, args)
    raise ConfigError(f"cannot parse schedule {spec!r}")


def lr_at(schedule: Schedule | str, epoch: int, epochs_total: int, lr0: float) -> float:
    """Learning rate at `epoch` (0-based) for a run of `epochs_total` epochs."""
    schedule = parse_schedule(schedule)
    if epoch < 0:
        raise ValueError("epoch must be nonnegative")
    if schedule.kind == "constant":
        return lr0
    if schedule.kind == "robbins_monro":
        warmup, gamma, a, b = schedule.params
        if epoch <= warmup:
            return lr0
        return lr0 / (((epoch - warmup) / b + a) ** gamma)
    if schedule.kind == "cyclical":
        (n_cycles,) = schedule.params
        lo = 0.1 * lr0
        cycle = epochs_total / n_cycles
        position = (epoch % cycle) / cycle
        triangle = 1.0 - abs(2.0 * position - 1.0)
        return lo + (lr0 - lo) * triangle
    if schedule.kind == "step":
        gamma, every = schedule.params
        return lr0 * gamma ** (epoch // int(every))
    raise ConfigError(f"unknown schedule kind {schedule.kind!r}")  # pragma: no cover


# --------------------------------------------------------------------------
# Adam (ascent convention: parameters move along the gradient)
# --------------------------------------------------------------------------


class AdamState:
    def __init__(self, store: ParamStore):
        self.m = {n: np.zeros_like(store.value(n)) for n in store.names()}
        self.v = {n: np.zeros_like(store.value(n)) for n in store.names()}
        self.t = 0


def adam_step(
    store: ParamStore,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected ascent step using the gradients in `store`."""
    if not store.grads_finite():
        raise NonFiniteGradient(
            f"non-finite gradient in {store.nonfinite_grad_names()[:3]}"
        )
    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    for name in store.names():
        g = store.grad(name)
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        store.value(name)[...] += lr * (m / c1) / (np.sqrt(v / c2) + eps)


# --------------------------------------------------------------------------
# runtime shared by both training modes
# --------------------------------------------------------------------------


def _prior_config(cfg: TrainConfig):
    mean_only = cfg.mode == "mle"
    if cfg.prior == "formula":
        return FormulaPriorConfig(
            latent_dim=cfg.latent_dim,
            hidden_dim=cfg.embed_dim,
            n_layers=cfg.n_layers,
            dropout=cfg.dropout,
            skip_period=cfg.skip_period,
            mean_only=mean_only,
        )
    return GnnPriorConfig(
        latent_dim=cfg.latent_dim,
        embed_dim=cfg.embed_dim,
        n_layers=cfg.n_layers,
        aggregation=cfg.aggregation,
        skip_period=cfg.skip_period,
        dropout=cfg.dropout,
        bias=cfg.bias,
        mean_only=mean_only,
    )


class ModelRuntime:
    """Parameter store, both prior networks, and precomputed batched inputs."""

    def __init__(self, cfg: TrainConfig, data: Dataset):
        if data.table.n_obs == 0:
            raise ConfigError("training table has no observations")
        self.cfg = cfg
        self.data = data
        self.params = ParamStore()
        init_rng = np.random.default_rng([cfg.seed, 11])
        prior_cfg = _prior_config(cfg)
        self.solute_net = PriorNetwork(cfg.prior, prior_cfg, self.params, "sol.", init_rng)
        self.solvent_net = PriorNetwork(cfg.prior, prior_cfg, self.params, "svt.", init_rng)
        self.solute_inputs = self.solute_net.batch_inputs(data.solutes)
        self.solvent_inputs = self.solvent_net.batch_inputs(data.solvents)
        # scaling constants of the stochastic objective: distinct components
        # appearing in the (training) table
        self.n_distinct_solutes = int(data.table.distinct_solutes().size)
        self.n_distinct_solvents = int(data.table.distinct_solvents().size)
        if cfg.mode == "vem":
            phi_rng = np.random.default_rng([cfg.seed, 22])
            n_sol, n_svt = len(data.solutes), len(data.solvents)
            init = VariationalState.initial(n_sol, n_svt, cfg.latent_dim, phi_rng)
            self.params.add("q.sol_mean", init.solute_mean)
            self.params.add("q.sol_logstd", init.solute_logstd)
            self.params.add("q.svt_mean", init.solvent_mean)
            self.params.add("q.svt_logstd", init.solvent_logstd)
        self.rng = np.random.default_rng([cfg.seed, 33])

    # -- batching ------------------------------------------------------------

    def batch_index_sets(self, batch: np.ndarray):
        table = self.data.table
        distinct_i, inv_i = np.unique(table.solute_idx[batch], return_inverse=True)
        distinct_j, inv_j = np.unique(table.solvent_idx[batch], return_inverse=True)
        return distinct_i, inv_i, distinct_j, inv_j

    def draw_noise(self, batch: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        distinct_i, _, distinct_j, _ = self.batch_index_sets(batch)
        shape_u = (self.cfg.n_samples, distinct_i.size, self.cfg.latent_dim)
        shape_v = (self.cfg.n_samples, distinct_j.size, self.cfg.latent_dim)
        return self.rng.standard_normal(shape_u), self.rng.standard_normal(shape_v)

    # -- objectives ------------------------------------------------------------

    def objective_t(
        self,
        tape: Tape,
        batch: np.ndarray,
        eps_u: np.ndarray | None = None,
        eps_v: np.ndarray | None = None,
        training: bool = True,
    ) -> tuple[Var, dict[str, Var]]:
        if self.cfg.mode == "vem":
            return self._elbo_t(tape, batch, eps_u, eps_v, training)
        return self._mle_t(tape, batch, training)

    def _elbo_t(self, tape, batch, eps_u, eps_v, training):
        cfg = self.cfg
        table = self.data.table
        rng = self.rng if training else None
        pu_mean, pu_var = self.solute_net.forward_t(
            tape, self.solute_inputs, training=training, rng=rng
        )
        pv_mean, pv_var = self.solvent_net.forward_t(
            tape, self.solvent_inputs, training=training, rng=rng
        )
        distinct_i, inv_i, distinct_j, inv_j = self.batch_index_sets(batch)
        return elbo_parts_t(
            tape,
            ln_gamma=table.ln_gamma[batch],
            batch_iu=inv_i,
            batch_jv=inv_j,
            qu_mean=tape.gather_rows(tape.param("q.sol_mean"), distinct_i),
            qu_logstd=tape.gather_rows(tape.param("q.sol_logstd"), distinct_i),
            qv_mean=tape.gather_rows(tape.param("q.svt_mean"), distinct_j),
            qv_logstd=tape.gather_rows(tape.param("q.svt_logstd"), distinct_j),
            pu_mean=tape.gather_rows(pu_mean, distinct_i),
            pu_var=tape.gather_rows(pu_var, distinct_i),
            pv_mean=tape.gather_rows(pv_mean, distinct_j),
            pv_var=tape.gather_rows(pv_var, distinct_j),
            eps_u=eps_u,
            eps_v=eps_v,
            n_obs_total=table.n_obs,
            n_solutes=self.n_distinct_solutes,
            n_solvents=self.n_distinct_solvents,
            lam=cfg.lam,
            variant=cfg.loss_variant,
        )

    def _mle_t(self, tape, batch, training):
        cfg = self.cfg
        table = self.data.table
        rng = self.rng if training else None
        u_all, _ = self.solute_net.forward_t(tape, self.solute_inputs, training=training, rng=rng)
        v_all, _ = self.solvent_net.forward_t(tape, self.solvent_inputs, training=training, rng=rng)
        u_b = tape.gather_rows(u_all, table.solute_idx[batch])
        v_b = tape.gather_rows(v_all, table.solvent_idx[batch])
        dots = tape.row_sum(u_b * v_b)
        m = batch.size
        sum_sq = tape.sum(tape.square(tape.const(table.ln_gamma[batch]) - dots))
        scale = table.n_obs / m
        loglik = scale * (
            (-0.5 / cfg.lam**2) * sum_sq
            + m * (-math.log(cfg.lam) - 0.5 * math.log(2.0 * math.pi))
        )
        return loglik, {"likelihood": loglik}

    # -- evaluation helpers ------------------------------------------------------

    def latent_means(self) -> tuple[np.ndarray, np.ndarray]:
        """Representation vectors used for point prediction during training."""
        if self.cfg.mode == "vem":
            return (
                self.params.value("q.sol_mean").copy(),
                self.params.value("q.svt_mean").copy(),
            )
        u, _ = self.solute_net.prior_params(self.solute_inputs)
        v, _ = self.solvent_net.prior_params(self.solvent_inputs)
        return u, v

    def predictions(self, table: ObservationTable | None = None) -> np.ndarray:
        table = table if table is not None else self.data.table
        u, v = self.latent_means()
        return np.einsum("ij,ij->i", u[table.solute_idx], v[table.solvent_idx])

    def prior_mean_predictions(self, table: ObservationTable) -> np.ndarray:
        u, _ = self.solute_net.prior_params(self.solute_inputs)
        v, _ = self.solvent_net.prior_params(self.solvent_inputs)
        return np.einsum("ij,ij->i", u[table.solute_idx], v[table.solvent_idx])

    def vstate(self) -> VariationalState:
        if self.cfg.mode != "vem":
            raise ValueError("MLE runs have no variational state")
        return VariationalState(
            solute_mean=self.params.value("q.sol_mean").copy(),
            solute_logstd=self.params.value("q.sol_logstd").copy(),
            solvent_mean=self.params.value("q.svt_mean").copy(),
            solvent_logstd=self.params.value("q.svt_logstd").copy(),
        )


def _mae_mse(pred: np.ndarray, truth: np.ndarray) -> tuple[float, float]:
    delta = pred - truth
    return float(np.mean(np.abs(delta))), float(np.mean(delta * delta))


# --------------------------------------------------------------------------
# results and checkpointing
# --------------------------------------------------------------------------


@dataclass
class TrainResult:
    config: TrainConfig
    runtime: ModelRuntime
    adam: AdamState
    log: list[dict] = field(default_factory=list)
    final_epoch: int = 0
    best_val_mse: float | None = None
    val_history: list[tuple[int, float]] = field(default_factory=list)

    @property
    def params(self) -> ParamStore:
        return self.runtime.params

    def vstate(self) -> VariationalState:
        return self.runtime.vstate()

    def trained_solutes(self) -> np.ndarray:
        return self.runtime.data.table.distinct_solutes()

    def trained_solvents(self) -> np.ndarray:
        return self.runtime.data.table.distinct_solvents()


def save_checkpoint(path, result: TrainResult) -> None:
    """Persist parameters, optimizer state, rng state and config; exact."""
    arrays = {}
    for name in result.params.names():
        arrays["p/" + name] = result.params.value(name)
        arrays["am/" + name] = result.adam.m[name]
        arrays["av/" + name] = result.adam.v[name]
    meta = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": result.config.to_dict(),
        "final_epoch": result.final_epoch,
        "adam_t": result.adam.t,
        "rng_state": result.runtime.rng.bit_generator.state,
        "solute_ids": result.runtime.data.solute_ids,
        "solvent_ids": result.runtime.data.solvent_ids,
        "trained_solutes": [int(i) for i in result.trained_solutes()],
        "trained_solvents": [int(j) for j in result.trained_solvents()],
    }
    np.savez(path, __meta__=np.array(json.dumps(meta)), **arrays)


@dataclass
class CheckpointBundle:
    config: TrainConfig
    param_values: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]
    meta: dict


def load_checkpoint(path) -> CheckpointBundle:
    with np.load(path, allow_pickle=False) as blob:
        meta = json.loads(str(blob["__meta__"]))
        if meta.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise ConfigError("unsupported checkpoint format version")
        params, adam_m, adam_v = {}, {}, {}
        for key in blob.files:
            if key.startswith("p/"):
                params[key[2:]] = blob[key]
            elif key.startswith("am/"):
                adam_m[key[3:]] = blob[key]
            elif key.startswith("av/"):
                adam_v[key[3:]] = blob[key]
    return CheckpointBundle(
        config=config_from_mapping(meta["config"]),
        param_values=params,
        adam_m=adam_m,
        adam_v=adam_v,
        meta=meta,
    )


_RESUME_MATCH_KEYS = (
    "mode", "prior", "latent_dim", "embed_dim", "n_layers", "aggregation",
    "skip_period", "bias", "loss_variant", "seed", "batch_size", "n_samples",
)


def _restore_from_bundle(runtime: ModelRuntime, adam: AdamState, bundle: CheckpointBundle) -> int:
    mine = runtime.cfg.to_dict()
    theirs = bundle.config.to_dict()
    for key in _RESUME_MATCH_KEYS:
        if mine[key] != theirs[key]:
            raise ConfigError(f"checkpoint mismatch on {key!r}: {theirs[key]} != {mine[key]}")
    if set(bundle.param_values) != set(runtime.params.names()):
        raise ConfigError("checkpoint parameter names do not match this model")
    for name, value in bundle.param_values.items():
        runtime.params.set_value(name, value)
        adam.m[name][...] = bundle.adam_m[name]
        adam.v[name][...] = bundle.adam_v[name]
    adam.t = int(bundle.meta["adam_t"])
    runtime.rng.bit_generator.state = bundle.meta["rng_state"]
    return int(bundle.meta["final_epoch"])


# --------------------------------------------------------------------------
# training loops
# --------------------------------------------------------------------------


def _epoch_batches(runtime: ModelRuntime) -> list[np.ndarray]:
    n = runtime.data.table.n_obs
    m = min(runtime.cfg.batch_size, n)
    n_steps = math.ceil(n / m)
    if runtime.cfg.sample_with_replacement:
        order = runtime.rng.integers(0, n, size=n_steps * m)
    else:
        order = runtime.rng.permutation(n)
    return [order[s * m : (s + 1) * m] for s in range(n_steps)]


def _clip(params: ParamStore, clip_norm: float) -> None:
    if clip_norm > 0:
        norm = params.grad_norm()
        if norm > clip_norm:
            params.scale_grads(clip_norm / norm)


def train_vem(
    cfg: TrainConfig,
    data: Dataset,
    *,
    resume: CheckpointBundle | None = None,
) -> TrainResult:
    """Joint stochastic ascent on the minibatch ELBO over theta and phi.

    Runs a fixed epoch budget; when ``plateau_patience`` is set, stops once
    the window-100 smoothed per-epoch ELBO has not improved by more than
    ``plateau_tol`` (relative) for that many epochs.
    """
    if cfg.mode != "vem":
        raise ConfigError("train_vem requires mode = vem")
    runtime = ModelRuntime(cfg, data)
    adam = AdamState(runtime.params)
    start_epoch = _restore_from_bundle(runtime, adam, resume) if resume else 0
    schedule = parse_schedule(cfg.schedule)
    result = TrainResult(cfg, runtime, adam)

    history: list[float] = []
    best_smoothed = -math.inf
    best_epoch = start_epoch
    epoch = start_epoch
    for epoch in range(start_epoch, cfg.epochs):
        lr = lr_at(schedule, epoch, cfg.epochs, cfg.lr)
        epoch_elbo = 0.0
        batches = _epoch_batches(runtime)
        for batch in batches:
            eps_u, eps_v = runtime.draw_noise(batch)
            tape = Tape(runtime.params)
            elbo, _ = runtime.objective_t(tape, batch, eps_u, eps_v, training=True)
            tape.output = elbo
            runtime.params.zero_grads()
            tape.backward()
            _clip(runtime.params, cfg.clip_norm)
            adam_step(runtime.params, adam, lr)
            epoch_elbo += float(elbo.value)
        epoch_elbo /= len(batches)
        history.append(epoch_elbo)

        if (epoch + 1) % cfg.log_every == 0 or epoch + 1 == cfg.epochs:
            mae, mse = _mae_mse(runtime.predictions(), data.table.ln_gamma)
            result.log.append(
                {
                    "run_id": cfg.run_id(),
                    "epoch": epoch,
                    "elbo_or_nll": epoch_elbo,
                    "train_mae": mae,
                    "train_mse": mse,
                    "lr": lr,
                }
            )
        if cfg.plateau_patience:
            smoothed = float(np.mean(history[-100:]))
            margin = cfg.plateau_tol * max(1.0, abs(best_smoothed))
            if not math.isfinite(best_smoothed) or smoothed > best_smoothed + margin:
                best_smoothed = smoothed
                best_epoch = epoch
            elif epoch - best_epoch >= cfg.plateau_patience:
                break
    result.final_epoch = epoch + 1
    return result


def train_mle(cfg: TrainConfig, data: Dataset, validation: ObservationTable) -> TrainResult:
    """Maximum-likelihood training of mean-only networks with early stopping.

    Validation MSE is computed every ``eval_every`` epochs (and at the final
    epoch); the returned parameters are the snapshot with the lowest value.
    """
    if cfg.mode != "mle":
        raise ConfigError("train_mle requires mode = mle")
    if validation.n_obs == 0:
        raise ConfigError("validation table is empty")
    runtime = ModelRuntime(cfg, data)
    adam = AdamState(runtime.params)
    schedule = parse_schedule(cfg.schedule)
    result = TrainResult(cfg, runtime, adam)

    best_mse = math.inf
    best_params: ParamStore | None = None
    epoch = 0
    for epoch in range(cfg.epochs):
        lr = lr_at(schedule, epoch, cfg.epochs, cfg.lr)
        epoch_obj = 0.0
        batches = _epoch_batches(runtime)
        for batch in batches:
            tape = Tape(runtime.params)
            loglik, _ = runtime.objective_t(tape, batch, training=True)
            tape.output = loglik
            runtime.params.zero_grads()
            tape.backward()
            _clip(runtime.params, cfg.clip_norm)
            adam_step(runtime.params, adam, lr)
            epoch_obj += float(loglik.value)
        epoch_obj /= len(batches)

        evaluated = (epoch + 1) % cfg.eval_every == 0 or epoch + 1 == cfg.epochs
        if evaluated:
            val_mse = _mae_mse(runtime.predictions(validation), validation.ln_gamma)[1]
            result.val_history.append((epoch, val_mse))
            if val_mse < best_mse:
                best_mse = val_mse
                best_params = runtime.params.copy()
        if (epoch + 1) % cfg.log_every == 0 or epoch + 1 == cfg.epochs:
            mae, mse = _mae_mse(runtime.predictions(), data.table.ln_gamma)
            result.log.append(
                {
                    "run_id": cfg.run_id(),
                    "epoch": epoch,
                    "elbo_or_nll": -epoch_obj,
                    "train_mae": mae,
                    "train_mse": mse,
                    "lr": lr,
                }
            )

    if best_params is not None:
        for name in runtime.params.names():
            runtime.params.set_value(name, best_params.value(name))
    result.final_epoch = epoch + 1
    result.best_val_mse = best_mse
    return result


def train(cfg: TrainConfig, data: Dataset, validation: ObservationTable | None = None) -> TrainResult:
    """Dispatch on config mode; MLE requires a validation table."""
    if cfg.mode == "vem":
        return train_vem(cfg, data)
    if validation is None:
        raise ConfigError("MLE training needs a validation table")
    return train_mle(cfg, data, validation)
