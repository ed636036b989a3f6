import itertools
import math

import numpy as np
import pytest
from scipy import integrate, stats

from gammamix.autodiff import backward
from gammamix.model import (
    DataFormatError,
    Dataset,
    DiagGaussian,
    ObservationTable,
    VariationalState,
    elbo_minibatch,
    gaussian_cross_entropy,
    gaussian_entropy,
    kl_diag_gaussian,
    load_dataset,
    load_observations,
    load_vstate,
    log_likelihood,
    log_marginal_likelihood_bruteforce,
    reparam_sample,
    save_vstate,
    singleton_elbo_exact,
)


def random_gaussian(rng, dim):
    return DiagGaussian(rng.normal(size=dim), np.exp(rng.normal(scale=0.7, size=dim)))


class TestLogLikelihood:
    def test_value_at_mode(self):
        # -ln(0.15 sqrt(2 pi)), cross-checked against scipy.stats.norm
        u = np.array([1.0, 2.0])
        v = np.array([0.25, 0.5])
        got = log_likelihood(float(u @ v), u, v, lam=0.15)
        assert got == pytest.approx(0.9781814516812086, abs=1e-12)
        assert got == pytest.approx(stats.norm.logpdf(0.0, 0.0, 0.15), abs=1e-12)

    def test_hand_value_off_mode(self):
        # residual 0.3 at lam 0.15: mode value minus 0.09 / (2 * 0.0225) = -2
        got = log_likelihood(1.0, np.array([0.7]), np.array([1.0]), lam=0.15)
        assert got == pytest.approx(0.9781814516812086 - 2.0, abs=1e-12)

    def test_symmetric_residuals(self):
        u = np.array([0.3, -0.2])
        v = np.array([1.0, 0.4])
        mode = float(u @ v)
        assert log_likelihood(mode + 0.37, u, v) == pytest.approx(
            log_likelihood(mode - 0.37, u, v), abs=1e-14
        )

    def test_matches_scipy_on_random_inputs(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            u = rng.normal(size=3)
            v = rng.normal(size=3)
            y = rng.normal()
            lam = float(rng.uniform(0.05, 2.0))
            assert log_likelihood(y, u, v, lam) == pytest.approx(
                float(stats.norm.logpdf(y, u @ v, lam)), abs=1e-10
            )

    def test_rejects_bad_lambda(self):
        with pytest.raises(ValueError):
            log_likelihood(0.0, np.ones(2), np.ones(2), lam=0.0)


class TestKlDiagGaussian:
    def test_identical_is_zero(self):
        q = DiagGaussian(np.array([0.3, -1.0]), np.array([0.5, 2.0]))
        assert kl_diag_gaussian(q, q) == pytest.approx(0.0, abs=1e-14)

    def test_unit_mean_shift(self):
        q = DiagGaussian(np.zeros(1), np.ones(1))
        p = DiagGaussian(np.ones(1), np.ones(1))
        assert kl_diag_gaussian(q, p) == pytest.approx(0.5, abs=1e-14)

    def test_variance_quarter(self):
        q = DiagGaussian(np.zeros(1), np.array([0.25]))
        p = DiagGaussian(np.zeros(1), np.ones(1))
        assert kl_diag_gaussian(q, p) == pytest.approx(0.3181471805599453, abs=1e-12)

    def test_against_numeric_integration(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            q = random_gaussian(rng, 1)
            p = random_gaussian(rng, 1)

            def integrand(x):
                lq = stats.norm.logpdf(x, q.mean[0], q.std[0])
                lp = stats.norm.logpdf(x, p.mean[0], p.std[0])
                return np.exp(lq) * (lq - lp)

            lo = q.mean[0] - 12 * q.std[0]
            hi = q.mean[0] + 12 * q.std[0]
            numeric, _ = integrate.quad(integrand, lo, hi, limit=200)
            assert kl_diag_gaussian(q, p) == pytest.approx(numeric, abs=1e-6)

    def test_against_monte_carlo(self):
        rng = np.random.default_rng(2)
        q = random_gaussian(rng, 4)
        p = random_gaussian(rng, 4)
        draws = rng.normal(size=(100_000, 4)) * q.std + q.mean
        log_ratio = stats.norm.logpdf(draws, q.mean, q.std).sum(axis=1) - stats.norm.logpdf(
            draws, p.mean, p.std
        ).sum(axis=1)
        mc = log_ratio.mean()
        se = log_ratio.std(ddof=1) / math.sqrt(draws.shape[0])
        assert abs(kl_diag_gaussian(q, p) - mc) < 3.0 * se

    def test_nonnegative_and_zero_iff_equal(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            q = random_gaussian(rng, 3)
            p = random_gaussian(rng, 3)
            kl = kl_diag_gaussian(q, p)
            assert kl >= 0.0
            assert kl > 1e-8  # random pairs are distinct with probability 1
        q = random_gaussian(rng, 3)
        assert kl_diag_gaussian(q, DiagGaussian(q.mean.copy(), q.var.copy())) == pytest.approx(
            0.0, abs=1e-14
        )

    def test_cross_entropy_identity(self):
        # KL = cross-entropy - entropy, the identity behind the entropy variant
        rng = np.random.default_rng(4)
        q = random_gaussian(rng, 5)
        p = random_gaussian(rng, 5)
        assert kl_diag_gaussian(q, p) == pytest.approx(
            gaussian_cross_entropy(q, p) - gaussian_entropy(q), abs=1e-10
        )


class TestReparamSample:
    def test_zero_noise_returns_mean(self):
        q = DiagGaussian(np.array([1.0, -2.0]), np.array([4.0, 0.25]))
        np.testing.assert_array_equal(reparam_sample(q, np.zeros(2)), q.mean)

    def test_unit_coordinate(self):
        q = DiagGaussian(np.array([1.0, -2.0]), np.array([4.0, 0.25]))
        got = reparam_sample(q, np.array([0.0, 1.0]))
        np.testing.assert_allclose(got, np.array([1.0, -1.5]), atol=1e-14)

    def test_monte_carlo_mean(self):
        rng = np.random.default_rng(5)
        q = DiagGaussian(np.array([0.7, -0.3, 2.0]), np.array([0.09, 1.0, 0.5]))
        draws = np.stack([reparam_sample(q, rng.normal(size=3)) for _ in range(100_000)])
        tol = 4.0 * q.std / math.sqrt(draws.shape[0])
        assert np.all(np.abs(draws.mean(axis=0) - q.mean) < tol)

    def test_shape_mismatch(self):
        q = DiagGaussian(np.zeros(2), np.ones(2))
        with pytest.raises(ValueError):
            reparam_sample(q, np.zeros(3))


def small_problem(rng, n_solutes=3, n_solvents=4, n_obs=9, latent_dim=2):
    table = ObservationTable(
        n_solutes,
        n_solvents,
        rng.integers(0, n_solutes, size=n_obs),
        rng.integers(0, n_solvents, size=n_obs),
        rng.normal(size=n_obs),
    )
    priors_u = [random_gaussian(rng, latent_dim) for _ in range(n_solutes)]
    priors_v = [random_gaussian(rng, latent_dim) for _ in range(n_solvents)]
    vstate = VariationalState.initial(n_solutes, n_solvents, latent_dim, rng)
    vstate.solute_logstd[...] = rng.normal(scale=0.3, size=vstate.solute_logstd.shape)
    vstate.solvent_logstd[...] = rng.normal(scale=0.3, size=vstate.solvent_logstd.shape)
    return table, priors_u, priors_v, vstate


class TestElboMinibatch:
    def test_full_batch_kl_scales_are_one(self):
        rng = np.random.default_rng(6)
        # every solute and solvent appears at least once
        table = ObservationTable.from_entries(
            3,
            3,
            [(0, 0, 0.1), (1, 1, -0.2), (2, 2, 0.3), (0, 1, 0.5), (1, 2, -0.4), (2, 0, 0.9)],
        )
        priors_u = [random_gaussian(rng, 2) for _ in range(3)]
        priors_v = [random_gaussian(rng, 2) for _ in range(3)]
        vstate = VariationalState.initial(3, 3, 2, rng)
        batch = np.arange(table.n_obs)
        eps_u = np.zeros((3, 2))
        eps_v = np.zeros((3, 2))
        _, parts, _ = elbo_minibatch(batch, table, priors_u, priors_v, vstate, eps_u, eps_v)
        direct_u = sum(kl_diag_gaussian(vstate.solute(i), priors_u[i]) for i in range(3))
        direct_v = sum(kl_diag_gaussian(vstate.solvent(j), priors_v[j]) for j in range(3))
        assert parts["kl_solutes"] == pytest.approx(direct_u, rel=1e-12)
        assert parts["kl_solvents"] == pytest.approx(direct_v, rel=1e-12)

    def test_variants_agree(self):
        rng = np.random.default_rng(7)
        table, priors_u, priors_v, vstate = small_problem(rng)
        batch = np.array([0, 2, 3, 5, 7])
        n_i = np.unique(table.solute_idx[batch]).size
        n_j = np.unique(table.solvent_idx[batch]).size
        eps_u = rng.normal(size=(n_i, 2))
        eps_v = rng.normal(size=(n_j, 2))
        v_kl, _, _ = elbo_minibatch(batch, table, priors_u, priors_v, vstate, eps_u, eps_v, "kl")
        v_ent, _, _ = elbo_minibatch(
            batch, table, priors_u, priors_v, vstate, eps_u, eps_v, "entropy"
        )
        assert abs(v_kl - v_ent) < 1e-9

    def test_zero_kl_leaves_only_likelihood(self):
        # posteriors equal priors, samples at means, data at the dot products
        rng = np.random.default_rng(8)
        priors_u = [random_gaussian(rng, 2) for _ in range(2)]
        priors_v = [random_gaussian(rng, 2) for _ in range(2)]
        vstate = VariationalState(
            solute_mean=np.stack([p.mean for p in priors_u]),
            solute_logstd=0.5 * np.log(np.stack([p.var for p in priors_u])),
            solvent_mean=np.stack([p.mean for p in priors_v]),
            solvent_logstd=0.5 * np.log(np.stack([p.var for p in priors_v])),
        )
        entries = [
            (i, j, float(priors_u[i].mean @ priors_v[j].mean)) for i in range(2) for j in range(2)
        ]
        table = ObservationTable.from_entries(2, 2, entries)
        value, parts, _ = elbo_minibatch(
            np.arange(4), table, priors_u, priors_v, vstate, np.zeros((2, 2)), np.zeros((2, 2))
        )
        per_term = log_likelihood(0.0, np.zeros(1), np.zeros(1))
        assert parts["kl_solutes"] == pytest.approx(0.0, abs=1e-12)
        assert parts["kl_solvents"] == pytest.approx(0.0, abs=1e-12)
        assert value == pytest.approx(4 * per_term, rel=1e-12)

    def test_empty_batch_rejected(self):
        rng = np.random.default_rng(9)
        table, priors_u, priors_v, vstate = small_problem(rng)
        with pytest.raises(ValueError, match="empty"):
            elbo_minibatch(np.array([], dtype=int), table, priors_u, priors_v, vstate,
                           np.zeros((1, 2)), np.zeros((1, 2)))

    def test_duplicate_entries_share_one_sample(self):
        rng = np.random.default_rng(10)
        priors_u = [random_gaussian(rng, 2)]
        priors_v = [random_gaussian(rng, 2)]
        vstate = VariationalState.initial(1, 1, 2, rng)
        table = ObservationTable.from_entries(1, 1, [(0, 0, 0.2), (0, 0, 0.4)])
        eps_u = rng.normal(size=(1, 2))
        eps_v = rng.normal(size=(1, 2))
        value, parts, _ = elbo_minibatch(
            np.arange(2), table, priors_u, priors_v, vstate, eps_u, eps_v
        )
        u = vstate.solute_mean[0] + np.exp(vstate.solute_logstd[0]) * eps_u[0]
        v = vstate.solvent_mean[0] + np.exp(vstate.solvent_logstd[0]) * eps_v[0]
        expected_lik = log_likelihood(0.2, u, v) + log_likelihood(0.4, u, v)
        assert parts["likelihood"] == pytest.approx(expected_lik, rel=1e-12)

    def test_deterministic_and_differentiable(self):
        rng = np.random.default_rng(11)
        table, priors_u, priors_v, vstate = small_problem(rng)
        batch = np.arange(table.n_obs)
        n_i = np.unique(table.solute_idx).size
        n_j = np.unique(table.solvent_idx).size
        eps_u = rng.normal(size=(n_i, 2))
        eps_v = rng.normal(size=(n_j, 2))
        v1, _, tape1 = elbo_minibatch(batch, table, priors_u, priors_v, vstate, eps_u, eps_v)
        v2, _, tape2 = elbo_minibatch(batch, table, priors_u, priors_v, vstate, eps_u, eps_v)
        assert v1 == v2
        tape1.params.zero_grads()
        backward(tape1)
        tape2.params.zero_grads()
        backward(tape2)
        for name in tape1.params.names():
            np.testing.assert_array_equal(tape1.params.grad(name), tape2.params.grad(name))

    def test_minibatch_partition_average_matches_full_sum(self):
        # all-distinct 6-entry table: every equal-size partition's per-batch
        # average of the scaled KL terms equals the full-data KL sums
        rng = np.random.default_rng(12)
        priors_u = [random_gaussian(rng, 2) for _ in range(6)]
        priors_v = [random_gaussian(rng, 2) for _ in range(6)]
        vstate = VariationalState.initial(6, 6, 2, rng)
        table = ObservationTable.from_entries(
            6, 6, [(k, k, float(rng.normal())) for k in range(6)]
        )
        full_u = sum(kl_diag_gaussian(vstate.solute(i), priors_u[i]) for i in range(6))
        full_v = sum(kl_diag_gaussian(vstate.solvent(j), priors_v[j]) for j in range(6))
        for m in (2, 3):
            seen = 0
            for perm in itertools.permutations(range(6)):
                batches = [perm[k : k + m] for k in range(0, 6, m)]
                if any(list(b) != sorted(b) for b in batches):
                    continue  # canonical representative per partition
                seen += 1
                total_u = 0.0
                total_v = 0.0
                for b in batches:
                    _, parts, _ = elbo_minibatch(
                        np.array(b), table, priors_u, priors_v, vstate,
                        np.zeros((m, 2)), np.zeros((m, 2)),
                    )
                    total_u += parts["kl_solutes"]
                    total_v += parts["kl_solvents"]
                assert total_u / len(batches) == pytest.approx(full_u, abs=1e-12)
                assert total_v / len(batches) == pytest.approx(full_v, abs=1e-12)
            assert seen > 1


class TestBruteForceMarginalLikelihood:
    def test_wide_likelihood_limit(self):
        prior_u = DiagGaussian(np.zeros(1), np.ones(1))
        prior_v = DiagGaussian(np.zeros(1), np.ones(1))
        lam = 1e3
        got = log_marginal_likelihood_bruteforce([0.0], prior_u, prior_v, lam=lam)
        assert got == pytest.approx(log_likelihood(0.0, np.zeros(1), np.zeros(1), lam=lam), abs=1e-3)

    def test_elbo_bound_holds_for_random_phi(self):
        rng = np.random.default_rng(13)
        prior_u = DiagGaussian(np.array([0.2]), np.array([1.1]))
        prior_v = DiagGaussian(np.array([-0.4]), np.array([0.8]))
        y = [0.6]
        ln_ml = log_marginal_likelihood_bruteforce(y, prior_u, prior_v, lam=0.5)
        gaps = []
        for _ in range(100):
            q_u = DiagGaussian(rng.normal(size=1), np.exp(rng.uniform(-2, 1, size=1)))
            q_v = DiagGaussian(rng.normal(size=1), np.exp(rng.uniform(-2, 1, size=1)))
            elbo = singleton_elbo_exact(y, prior_u, prior_v, q_u, q_v, lam=0.5)
            assert elbo <= ln_ml + 1e-6
            gaps.append(ln_ml - elbo)
        assert min(gaps) >= 0.0

    def test_requires_rank_one(self):
        g2 = DiagGaussian(np.zeros(2), np.ones(2))
        with pytest.raises(ValueError):
            log_marginal_likelihood_bruteforce([0.0], g2, g2)


class TestObservationTable:
    def test_validation(self):
        with pytest.raises(DataFormatError):
            ObservationTable(2, 2, np.array([0, 2]), np.array([0, 0]), np.zeros(2))
        with pytest.raises(DataFormatError):
            ObservationTable(2, 2, np.array([0]), np.array([0]), np.array([np.inf]))

    def test_duplicates_allowed(self):
        table = ObservationTable.from_entries(1, 1, [(0, 0, 1.0), (0, 0, 2.0)])
        assert table.n_obs == 2

    def test_subset(self):
        table = ObservationTable.from_entries(2, 2, [(0, 0, 1.0), (1, 1, 2.0), (0, 1, 3.0)])
        sub = table.subset([2, 0])
        assert sub.n_obs == 2
        assert sub.ln_gamma.tolist() == [3.0, 1.0]
        assert sub.n_solutes == 2  # index space is preserved


class TestVariationalState:
    def test_init_and_views(self):
        rng = np.random.default_rng(14)
        vstate = VariationalState.initial(3, 4, 2, rng)
        assert vstate.n_solutes == 3 and vstate.n_solvents == 4 and vstate.latent_dim == 2
        q = vstate.solute(1)
        assert np.all(q.var > 0)
        np.testing.assert_allclose(q.var, np.ones(2))  # logstd starts at zero

    def test_save_load_roundtrip_exact(self, tmp_path):
        rng = np.random.default_rng(15)
        vstate = VariationalState.initial(2, 3, 4, rng)
        vstate.solute_logstd[...] = rng.normal(size=vstate.solute_logstd.shape)
        path = tmp_path / "vstate.npz"
        save_vstate(path, vstate, ["a", "b"], ["x", "y", "z"])
        loaded, sol_ids, svt_ids = load_vstate(path)
        assert sol_ids == ["a", "b"] and svt_ids == ["x", "y", "z"]
        np.testing.assert_array_equal(loaded.solute_mean, vstate.solute_mean)
        np.testing.assert_array_equal(loaded.solute_logstd, vstate.solute_logstd)
        np.testing.assert_array_equal(loaded.solvent_mean, vstate.solvent_mean)
        np.testing.assert_array_equal(loaded.solvent_logstd, vstate.solvent_logstd)


class TestDatasetLoading:
    def make_files(self, tmp_path, obs_lines):
        mol = tmp_path / "molecules.tsv"
        mol.write_text(
            "water\tSMILES\tO\nethanol\tSMILES\tCCO\nbenzene\tSMILES\tc1ccccc1\n",
            encoding="utf-8",
        )
        obs = tmp_path / "observations.csv"
        obs.write_text("solute_id,solvent_id,ln_gamma\n" + "".join(obs_lines), encoding="utf-8")
        return mol, obs

    def test_load_and_index_by_first_appearance(self, tmp_path):
        mol, obs = self.make_files(
            tmp_path,
            ["ethanol,water,0.31\n", "benzene,water,2.2\n", "ethanol,benzene,0.05\n"],
        )
        data = load_dataset(mol, obs)
        assert data.solute_ids == ["ethanol", "benzene"]
        assert data.solvent_ids == ["water", "benzene"]
        assert data.table.n_obs == 3
        assert data.table.solute_idx.tolist() == [0, 1, 0]

    def test_unknown_component_rejected(self, tmp_path):
        mol, obs = self.make_files(tmp_path, ["ethanol,acetone,0.1\n"])
        with pytest.raises(DataFormatError, match="acetone"):
            load_dataset(mol, obs)

    def test_bad_header_rejected(self, tmp_path):
        mol = tmp_path / "molecules.tsv"
        mol.write_text("water\tSMILES\tO\n", encoding="utf-8")
        obs = tmp_path / "observations.csv"
        obs.write_text("a,b,c\nwater,water,0.0\n", encoding="utf-8")
        with pytest.raises(DataFormatError, match="header"):
            load_observations(obs)

    def test_non_numeric_value_rejected(self, tmp_path):
        mol, obs = self.make_files(tmp_path, ["ethanol,water,abc\n"])
        with pytest.raises(DataFormatError, match="ln_gamma"):
            load_observations(obs)
