"""Probabilistic core: Gaussian likelihood over latent dot products,
diagonal-Gaussian KL, reparameterized sampling, and two algebraically
equivalent minibatch objective estimators ("kl" and "entropy" forms).

Conventions: a mixture observation is ln(gamma) for solute i in solvent j;
its likelihood is N(ln gamma; u_i . v_j, lambda^2) with lambda fixed at
0.15. Posterior scales are carried as log standard deviations so
positivity is structural.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .autodiff import ParamStore, Tape, Var
from .molecules import ComponentRecord, load_molecules

LOG_TWO_PI = math.log(2.0 * math.pi)
DEFAULT_LAMBDA = 0.15

ELBO_VARIANTS = ("kl", "entropy")


class DataFormatError(ValueError):
    """Malformed observations / state files or mismatched identifiers."""


# --------------------------------------------------------------------------
# distributions and tables
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class DiagGaussian:
    """Mean and strictly positive variance vectors in R^K."""

    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        var = np.asarray(self.var, dtype=np.float64)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "var", var)
        if mean.ndim != 1 or var.shape != mean.shape:
            raise ValueError("mean and var must be 1-d vectors of equal length")
        if not np.all(np.isfinite(mean)) or not np.all(np.isfinite(var)):
            raise ValueError("mean and var must be finite")
        if np.any(var <= 0.0):
            raise ValueError("variances must be strictly positive")

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(self.var)


@dataclass(frozen=True)
class ObservationTable:
    """Sparse ln(gamma) measurements over n_solutes x n_solvents.

    Duplicate (i, j) pairs are allowed and treated as independent
    likelihood terms.
    """

    n_solutes: int
    n_solvents: int
    solute_idx: np.ndarray
    solvent_idx: np.ndarray
    ln_gamma: np.ndarray

    def __post_init__(self):
        si = np.asarray(self.solute_idx, dtype=np.intp)
        sj = np.asarray(self.solvent_idx, dtype=np.intp)
        y = np.asarray(self.ln_gamma, dtype=np.float64)
        object.__setattr__(self, "solute_idx", si)
        object.__setattr__(self, "solvent_idx", sj)
        object.__setattr__(self, "ln_gamma", y)
        if not (si.shape == sj.shape == y.shape) or si.ndim != 1:
            raise DataFormatError("index and value arrays must be 1-d and aligned")
        if self.n_solutes < 1 or self.n_solvents < 1:
            raise DataFormatError("table needs at least one solute and one solvent")
        if si.size and (si.min() < 0 or si.max() >= self.n_solutes):
            raise DataFormatError("solute index out of range")
        if sj.size and (sj.min() < 0 or sj.max() >= self.n_solvents):
            raise DataFormatError("solvent index out of range")
        if not np.all(np.isfinite(y)):
            raise DataFormatError("ln_gamma values must be finite")

    @property
    def n_obs(self) -> int:
        return self.ln_gamma.shape[0]

    def subset(self, indices) -> "ObservationTable":
        idx = np.asarray(indices, dtype=np.intp)
        return ObservationTable(
            self.n_solutes,
            self.n_solvents,
            self.solute_idx[idx],
            self.solvent_idx[idx],
            self.ln_gamma[idx],
        )

    def distinct_solutes(self) -> np.ndarray:
        return np.unique(self.solute_idx)

    def distinct_solvents(self) -> np.ndarray:
        return np.unique(self.solvent_idx)

    @classmethod
    def from_entries(cls, n_solutes: int, n_solvents: int, entries) -> "ObservationTable":
        entries = list(entries)
        si = np.array([e[0] for e in entries], dtype=np.intp)
        sj = np.array([e[1] for e in entries], dtype=np.intp)
        y = np.array([e[2] for e in entries], dtype=np.float64)
        return cls(n_solutes, n_solvents, si, sj, y)


@dataclass
class VariationalState:
    """Per-component posterior parameters: means and log standard deviations."""

    solute_mean: np.ndarray
    solute_logstd: np.ndarray
    solvent_mean: np.ndarray
    solvent_logstd: np.ndarray

    def __post_init__(self):
        if self.solute_mean.shape != self.solute_logstd.shape:
            raise ValueError("solute mean/logstd shape mismatch")
        if self.solvent_mean.shape != self.solvent_logstd.shape:
            raise ValueError("solvent mean/logstd shape mismatch")
        if self.solute_mean.shape[1] != self.solvent_mean.shape[1]:
            raise ValueError("solute and solvent latent dimensions differ")

    @classmethod
    def initial(cls, n_solutes: int, n_solvents: int, latent_dim: int, rng) -> "VariationalState":
        # broad unit-variance start lets the priors dominate early training
        return cls(
            solute_mean=rng.normal(0.0, 0.1, size=(n_solutes, latent_dim)),
            solute_logstd=np.zeros((n_solutes, latent_dim)),
            solvent_mean=rng.normal(0.0, 0.1, size=(n_solvents, latent_dim)),
            solvent_logstd=np.zeros((n_solvents, latent_dim)),
        )

    @property
    def n_solutes(self) -> int:
        return self.solute_mean.shape[0]

    @property
    def n_solvents(self) -> int:
        return self.solvent_mean.shape[0]

    @property
    def latent_dim(self) -> int:
        return self.solute_mean.shape[1]

    def solute(self, i: int) -> DiagGaussian:
        return DiagGaussian(self.solute_mean[i], np.exp(2.0 * self.solute_logstd[i]))

    def solvent(self, j: int) -> DiagGaussian:
        return DiagGaussian(self.solvent_mean[j], np.exp(2.0 * self.solvent_logstd[j]))


# --------------------------------------------------------------------------
# pointwise densities
# --------------------------------------------------------------------------


def log_likelihood(ln_gamma: float, u, v, lam: float = DEFAULT_LAMBDA) -> float:
    """Gaussian log density of ln_gamma at mean u.v with std lam."""
    if lam <= 0:
        raise ValueError("lam must be positive")
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    resid = ln_gamma - float(u @ v)
    return -0.5 * (resid / lam) ** 2 - math.log(lam) - 0.5 * LOG_TWO_PI


def kl_diag_gaussian(q: DiagGaussian, p: DiagGaussian) -> float:
    """Closed-form KL(q || p) for diagonal Gaussians."""
    if q.dim != p.dim:
        raise ValueError("dimension mismatch")
    delta = q.mean - p.mean
    terms = delta * delta / p.var + q.var / p.var + np.log(p.var) - np.log(q.var) - 1.0
    return 0.5 * float(terms.sum())


def gaussian_entropy(q: DiagGaussian) -> float:
    return 0.5 * float(np.sum(LOG_TWO_PI + 1.0 + np.log(q.var)))


def gaussian_cross_entropy(q: DiagGaussian, p: DiagGaussian) -> float:
    """-E_q[ln p], closed form."""
    delta = q.mean - p.mean
    return 0.5 * float(np.sum(LOG_TWO_PI + np.log(p.var) + (q.var + delta * delta) / p.var))


def reparam_sample(q: DiagGaussian, eps) -> np.ndarray:
    """mean + std * eps for a caller-provided standard normal draw."""
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != q.mean.shape:
        raise ValueError("eps shape must match the distribution")
    return q.mean + q.std * eps


# --------------------------------------------------------------------------
# tape building blocks
# --------------------------------------------------------------------------


def kl_rows_t(tape: Tape, q_mean: Var, q_logstd: Var, p_mean: Var, p_var: Var) -> Var:
    """Row-wise KL(q || p); rows are distinct components, columns latent dims."""
    q_var = tape.exp(2.0 * q_logstd)
    delta_sq = tape.square(q_mean - p_mean)
    inner = delta_sq / p_var + q_var / p_var + tape.log(p_var) - 2.0 * q_logstd - 1.0
    return 0.5 * tape.row_sum(inner)


def log_prior_expectation_rows_t(
    tape: Tape, q_mean: Var, q_logstd: Var, p_mean: Var, p_var: Var
) -> Var:
    """Row-wise E_q[ln p], closed form."""
    q_var = tape.exp(2.0 * q_logstd)
    delta_sq = tape.square(q_mean - p_mean)
    inner = tape.log(p_var) + (q_var + delta_sq) / p_var + LOG_TWO_PI
    return -0.5 * tape.row_sum(inner)


def entropy_rows_t(tape: Tape, q_logstd: Var) -> Var:
    """Row-wise Gaussian entropy."""
    latent_dim = q_logstd.value.shape[1]
    return tape.row_sum(q_logstd) + 0.5 * latent_dim * (LOG_TWO_PI + 1.0)


def elbo_parts_t(
    tape: Tape,
    *,
    ln_gamma: np.ndarray,
    batch_iu: np.ndarray,
    batch_jv: np.ndarray,
    qu_mean: Var,
    qu_logstd: Var,
    qv_mean: Var,
    qv_logstd: Var,
    pu_mean: Var,
    pu_var: Var,
    pv_mean: Var,
    pv_var: Var,
    eps_u: np.ndarray,
    eps_v: np.ndarray,
    n_obs_total: int,
    n_solutes: int,
    n_solvents: int,
    lam: float = DEFAULT_LAMBDA,
    variant: str = "kl",
) -> tuple[Var, dict[str, Var]]:
    """Minibatch objective estimate on the tape.

    Index arrays ``batch_iu`` / ``batch_jv`` map batch rows to rows of the
    deduplicated posterior/prior blocks, so one reparameterized sample per
    distinct component is shared across all its batch entries. Scaling:
    likelihood by |D|/m, solute terms by M/|I|, solvent terms by N/|J|.
    """
    if variant not in ELBO_VARIANTS:
        raise ValueError(f"unknown ELBO variant {variant!r}")
    m = ln_gamma.shape[0]
    if m == 0:
        raise ValueError("empty batch")
    n_i = qu_mean.value.shape[0]
    n_j = qv_mean.value.shape[0]
    scale_lik = n_obs_total / m
    scale_u = n_solutes / n_i
    scale_v = n_solvents / n_j

    if eps_u.ndim == 2:
        eps_u = eps_u[None]
    if eps_v.ndim == 2:
        eps_v = eps_v[None]
    n_samples = eps_u.shape[0]

    y = tape.const(ln_gamma)
    ll_total: Var | None = None
    for s in range(n_samples):
        u = qu_mean + tape.exp(qu_logstd) * tape.const(eps_u[s])
        v = qv_mean + tape.exp(qv_logstd) * tape.const(eps_v[s])
        dots = tape.row_sum(tape.gather_rows(u, batch_iu) * tape.gather_rows(v, batch_jv))
        sum_sq = tape.sum(tape.square(y - dots))
        ll = (-0.5 / lam**2) * sum_sq + m * (-math.log(lam) - 0.5 * LOG_TWO_PI)
        ll_total = ll if ll_total is None else ll_total + ll
    likelihood = (scale_lik / n_samples) * ll_total

    parts: dict[str, Var] = {"likelihood": likelihood}
    if variant == "kl":
        kl_u = scale_u * tape.sum(kl_rows_t(tape, qu_mean, qu_logstd, pu_mean, pu_var))
        kl_v = scale_v * tape.sum(kl_rows_t(tape, qv_mean, qv_logstd, pv_mean, pv_var))
        elbo = likelihood - kl_u - kl_v
        parts["kl_solutes"] = kl_u
        parts["kl_solvents"] = kl_v
    else:
        lp_u = scale_u * tape.sum(log_prior_expectation_rows_t(tape, qu_mean, qu_logstd, pu_mean, pu_var))
        lp_v = scale_v * tape.sum(log_prior_expectation_rows_t(tape, qv_mean, qv_logstd, pv_mean, pv_var))
        ent_u = scale_u * tape.sum(entropy_rows_t(tape, qu_logstd))
        ent_v = scale_v * tape.sum(entropy_rows_t(tape, qv_logstd))
        elbo = likelihood + lp_u + lp_v + ent_u + ent_v
        parts["log_prior_solutes"] = lp_u
        parts["log_prior_solvents"] = lp_v
        parts["entropy_solutes"] = ent_u
        parts["entropy_solvents"] = ent_v
    return elbo, parts


def elbo_minibatch(
    batch,
    table: ObservationTable,
    prior_solutes,
    prior_solvents,
    vstate: VariationalState,
    eps_u: np.ndarray,
    eps_v: np.ndarray,
    variant: str = "kl",
    lam: float = DEFAULT_LAMBDA,
) -> tuple[float, dict[str, float], Tape]:
    """Standalone minibatch objective for fixed priors.

    ``prior_solutes`` / ``prior_solvents`` are indexable by global component
    index and yield :class:`DiagGaussian`. Posterior parameters for the
    touched components become tape parameters (names ``q.*``), so the
    returned tape supports a backward pass for phi gradients. eps arrays
    cover the deduplicated index sets, shape (|I|, K) or (S, |I|, K).
    """
    batch = np.asarray(batch, dtype=np.intp)
    if batch.size == 0:
        raise ValueError("empty batch")
    distinct_i, batch_iu = np.unique(table.solute_idx[batch], return_inverse=True)
    distinct_j, batch_jv = np.unique(table.solvent_idx[batch], return_inverse=True)

    params = ParamStore()
    params.add("q.sol_mean", vstate.solute_mean[distinct_i])
    params.add("q.sol_logstd", vstate.solute_logstd[distinct_i])
    params.add("q.svt_mean", vstate.solvent_mean[distinct_j])
    params.add("q.svt_logstd", vstate.solvent_logstd[distinct_j])
    tape = Tape(params)

    pu = [prior_solutes[i] for i in distinct_i]
    pv = [prior_solvents[j] for j in distinct_j]
    elbo, parts = elbo_parts_t(
        tape,
        ln_gamma=table.ln_gamma[batch],
        batch_iu=batch_iu,
        batch_jv=batch_jv,
        qu_mean=tape.param("q.sol_mean"),
        qu_logstd=tape.param("q.sol_logstd"),
        qv_mean=tape.param("q.svt_mean"),
        qv_logstd=tape.param("q.svt_logstd"),
        pu_mean=tape.const(np.stack([p.mean for p in pu])),
        pu_var=tape.const(np.stack([p.var for p in pu])),
        pv_mean=tape.const(np.stack([p.mean for p in pv])),
        pv_var=tape.const(np.stack([p.var for p in pv])),
        eps_u=np.asarray(eps_u, dtype=np.float64),
        eps_v=np.asarray(eps_v, dtype=np.float64),
        n_obs_total=table.n_obs,
        n_solutes=table.distinct_solutes().size,
        n_solvents=table.distinct_solvents().size,
        lam=lam,
        variant=variant,
    )
    tape.output = elbo
    return float(elbo.value), {k: float(v.value) for k, v in parts.items()}, tape


# --------------------------------------------------------------------------
# exact tiny-model quantities (oracle route for the bound checks)
# --------------------------------------------------------------------------


def expected_log_likelihood_exact(ln_gammas, q_u: DiagGaussian, q_v: DiagGaussian,
                                  lam: float = DEFAULT_LAMBDA) -> float:
    """E_q[sum_k ln N(y_k; u.v, lam^2)] in closed form for one (i, j) pair.

    Uses E[(y - u.v)^2] = (y - mu_u.mu_v)^2 + sum_a (mu_u^2 var_v +
    mu_v^2 var_u + var_u var_v)_a for independent diagonal Gaussians.
    """
    y = np.asarray(ln_gammas, dtype=np.float64)
    mu_dot = float(q_u.mean @ q_v.mean)
    var_dot = float(
        np.sum(q_u.mean**2 * q_v.var + q_v.mean**2 * q_u.var + q_u.var * q_v.var)
    )
    total = 0.0
    for yk in np.atleast_1d(y):
        esr = (yk - mu_dot) ** 2 + var_dot
        total += -0.5 * esr / lam**2 - math.log(lam) - 0.5 * LOG_TWO_PI
    return total


def singleton_elbo_exact(ln_gammas, prior_u: DiagGaussian, prior_v: DiagGaussian,
                         q_u: DiagGaussian, q_v: DiagGaussian,
                         lam: float = DEFAULT_LAMBDA) -> float:
    """Exact ELBO for the one-solute / one-solvent model (no sampling)."""
    return (
        expected_log_likelihood_exact(ln_gammas, q_u, q_v, lam)
        - kl_diag_gaussian(q_u, prior_u)
        - kl_diag_gaussian(q_v, prior_v)
    )


def singleton_elbo_t(tape: Tape, ln_gammas, prior_u: DiagGaussian, prior_v: DiagGaussian,
                     lam: float = DEFAULT_LAMBDA) -> Var:
    """Exact singleton ELBO on tape; phi lives in params q.u_*/q.v_* (1, K)."""
    y = tape.const(np.atleast_1d(np.asarray(ln_gammas, dtype=np.float64)))
    n_obs = y.value.shape[0]
    mu_u, ls_u = tape.param("q.u_mean"), tape.param("q.u_logstd")
    mu_v, ls_v = tape.param("q.v_mean"), tape.param("q.v_logstd")
    var_u = tape.exp(2.0 * ls_u)
    var_v = tape.exp(2.0 * ls_v)
    mu_dot = tape.row_sum(mu_u * mu_v)  # shape (1,)
    var_dot = tape.sum(
        tape.square(mu_u) * var_v + tape.square(mu_v) * var_u + var_u * var_v
    )
    sum_sq = tape.sum(tape.square(y - mu_dot))
    ell = (-0.5 / lam**2) * (sum_sq + n_obs * var_dot) + n_obs * (
        -math.log(lam) - 0.5 * LOG_TWO_PI
    )
    kl_u = tape.sum(
        kl_rows_t(tape, mu_u, ls_u, tape.const(prior_u.mean[None]), tape.const(prior_u.var[None]))
    )
    kl_v = tape.sum(
        kl_rows_t(tape, mu_v, ls_v, tape.const(prior_v.mean[None]), tape.const(prior_v.var[None]))
    )
    return ell - kl_u - kl_v


def log_marginal_likelihood_bruteforce(ln_gammas, prior_u: DiagGaussian,
                                       prior_v: DiagGaussian,
                                       lam: float = DEFAULT_LAMBDA) -> float:
    """ln integral of prior_u(u) prior_v(v) prod_k N(y_k; u v, lam^2) du dv.

    Only feasible (and only supported) for K = 1 with a single mixture;
    adaptive quadrature over +-8 prior standard deviations, computed in
    log space with a max shift against underflow.
    """
    from scipy import integrate

    if prior_u.dim != 1 or prior_v.dim != 1:
        raise ValueError("brute-force marginal likelihood supports K = 1 only")
    y = np.atleast_1d(np.asarray(ln_gammas, dtype=np.float64))
    mu_u, s_u = float(prior_u.mean[0]), float(prior_u.std[0])
    mu_v, s_v = float(prior_v.mean[0]), float(prior_v.std[0])
    u_lo, u_hi = mu_u - 8.0 * s_u, mu_u + 8.0 * s_u
    v_lo, v_hi = mu_v - 8.0 * s_v, mu_v + 8.0 * s_v

    def log_joint(u, v):
        out = (
            -0.5 * ((u - mu_u) / s_u) ** 2
            - math.log(s_u)
            - 0.5 * LOG_TWO_PI
            - 0.5 * ((v - mu_v) / s_v) ** 2
            - math.log(s_v)
            - 0.5 * LOG_TWO_PI
        )
        for yk in y:
            out = out - 0.5 * ((yk - u * v) / lam) ** 2 - math.log(lam) - 0.5 * LOG_TWO_PI
        return out

    grid_u = np.linspace(u_lo, u_hi, 201)
    grid_v = np.linspace(v_lo, v_hi, 201)
    shift = float(np.max(log_joint(grid_u[:, None], grid_v[None, :])))

    value, _ = integrate.dblquad(
        lambda v, u: math.exp(log_joint(u, v) - shift),
        u_lo,
        u_hi,
        v_lo,
        v_hi,
        epsabs=1e-12,
        epsrel=1e-9,
    )
    if value <= 0.0:
        raise ArithmeticError("marginal likelihood integral underflowed to zero")
    return math.log(value) + shift


# --------------------------------------------------------------------------
# dataset loading
# --------------------------------------------------------------------------

OBSERVATIONS_HEADER = ["solute_id", "solvent_id", "ln_gamma"]


@dataclass
class Dataset:
    """Observation table plus the component records its indices refer to."""

    table: ObservationTable
    solute_ids: list[str]
    solvent_ids: list[str]
    solutes: list[ComponentRecord]
    solvents: list[ComponentRecord]

    def with_table(self, table: ObservationTable) -> "Dataset":
        return replace(self, table=table)


def load_observations(path) -> list[tuple[str, str, float]]:
    """Read the observations CSV: header solute_id,solvent_id,ln_gamma."""
    rows: list[tuple[str, str, float]] = []
    with open(path, newline="", encoding="utf-8") as handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != OBSERVATIONS_HEADER:
            raise DataFormatError(
                f"observations file must start with header {','.join(OBSERVATIONS_HEADER)}"
            )
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise DataFormatError(f"line {lineno}: expected 3 columns")
            try:
                value = float(row[2])
            except ValueError as exc:
                raise DataFormatError(f"line {lineno}: bad ln_gamma {row[2]!r}") from exc
            if not math.isfinite(value):
                raise DataFormatError(f"line {lineno}: ln_gamma must be finite")
            rows.append((row[0].strip(), row[1].strip(), value))
    if not rows:
        raise DataFormatError("observations file contains no data rows")
    return rows


def load_dataset(molecules_path, observations_path) -> Dataset:
    """Resolve observation ids against the molecules file.

    Solute/solvent indices are assigned by order of first appearance in
    the observations file, which makes loading deterministic.
    """
    records = load_molecules(molecules_path)
    rows = load_observations(observations_path)
    solute_ids: list[str] = []
    solvent_ids: list[str] = []
    solute_index: dict[str, int] = {}
    solvent_index: dict[str, int] = {}
    entries = []
    for sid, vid, value in rows:
        for cid in (sid, vid):
            if cid not in records:
                raise DataFormatError(f"component {cid!r} missing from molecules file")
        if sid not in solute_index:
            solute_index[sid] = len(solute_ids)
            solute_ids.append(sid)
        if vid not in solvent_index:
            solvent_index[vid] = len(solvent_ids)
            solvent_ids.append(vid)
        entries.append((solute_index[sid], solvent_index[vid], value))
    table = ObservationTable.from_entries(len(solute_ids), len(solvent_ids), entries)
    return Dataset(
        table=table,
        solute_ids=solute_ids,
        solvent_ids=solvent_ids,
        solutes=[records[s] for s in solute_ids],
        solvents=[records[s] for s in solvent_ids],
    )


def save_vstate(path, vstate: VariationalState, solute_ids, solvent_ids) -> None:
    """Persist posterior parameters with the component ids they belong to."""
    np.savez(
        path,
        solute_mean=vstate.solute_mean,
        solute_logstd=vstate.solute_logstd,
        solvent_mean=vstate.solvent_mean,
        solvent_logstd=vstate.solvent_logstd,
        solute_ids=np.array(list(solute_ids), dtype=np.str_),
        solvent_ids=np.array(list(solvent_ids), dtype=np.str_),
    )


def load_vstate(path) -> tuple[VariationalState, list[str], list[str]]:
    with np.load(path, allow_pickle=False) as blob:
        vstate = VariationalState(
            solute_mean=blob["solute_mean"],
            solute_logstd=blob["solute_logstd"],
            solvent_mean=blob["solvent_mean"],
            solvent_logstd=blob["solvent_logstd"],
        )
        return vstate, [str(s) for s in blob["solute_ids"]], [str(s) for s in blob["solvent_ids"]]
