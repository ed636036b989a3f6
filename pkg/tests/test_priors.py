import math

import numpy as np
import pytest

from gammamix.autodiff import ParamStore, Tape, grad_check
from gammamix.molecules import (
    ATOM_INDEX,
    MoleculeError,
    MoleculeGraph,
    mofo_features,
    parse_smiles,
)
from gammamix.priors import (
    FilmLayerParams,
    FormulaPriorConfig,
    GnnPriorConfig,
    GraphBatch,
    N_EDGE_TYPES,
    PriorNetwork,
    SELF_LOOP_TYPE,
    VAR_FLOOR,
    film_layer,
    gnn_prior,
    mofo_prior,
)

C = ATOM_INDEX["C"]


def make_formula_net(rng, latent_dim=3, **kwargs):
    store = ParamStore()
    config = FormulaPriorConfig(latent_dim=latent_dim, **kwargs)
    return PriorNetwork("formula", config, store, "sol.", rng), store


def make_gnn_net(rng, latent_dim=3, **kwargs):
    store = ParamStore()
    config = GnnPriorConfig(latent_dim=latent_dim, **kwargs)
    return PriorNetwork("gnn", config, store, "sol.", rng), store


def random_tree_graph(rng, n_atoms):
    atoms = tuple(int(rng.integers(0, 12)) for _ in range(n_atoms))
    bonds = []
    for k in range(1, n_atoms):
        parent = int(rng.integers(0, k))
        bonds.append((parent, k, int(rng.integers(0, 4))))
    return MoleculeGraph(atoms, tuple(bonds))


def relabeled(graph, perm):
    inverse = {old: new for new, old in enumerate(perm)}
    atoms = tuple(graph.atoms[old] for old in perm)
    bonds = tuple((inverse[a], inverse[b], kind) for a, b, kind in graph.bonds)
    return MoleculeGraph(atoms, bonds)


class TestFormulaPrior:
    def test_variance_always_positive(self):
        rng = np.random.default_rng(0)
        net, _ = make_formula_net(rng, hidden_dim=8, n_layers=2)
        for _ in range(20):
            graph = random_tree_graph(rng, int(rng.integers(1, 9)))
            prior = mofo_prior(net, mofo_features(graph))
            assert np.all(prior.var > VAR_FLOOR)

    def test_zero_weights_give_softplus_zero_variance(self):
        rng = np.random.default_rng(1)
        net, store = make_formula_net(rng, latent_dim=4, hidden_dim=8, n_layers=1)
        for name in store.names():
            store.set_value(name, np.zeros_like(store.value(name)))
        prior = mofo_prior(net, mofo_features(parse_smiles("CCO")))
        np.testing.assert_allclose(prior.mean, np.zeros(4), atol=0)
        np.testing.assert_allclose(prior.var, math.log(2.0) + 1e-6, rtol=0, atol=1e-15)

    def test_deterministic(self):
        rng = np.random.default_rng(2)
        net, _ = make_formula_net(rng, hidden_dim=6, n_layers=2)
        counts = mofo_features(parse_smiles("c1ccccc1"))
        a = mofo_prior(net, counts)
        b = mofo_prior(net, counts)
        np.testing.assert_array_equal(a.mean, b.mean)
        np.testing.assert_array_equal(a.var, b.var)

    def test_mean_only_network_has_no_prior(self):
        rng = np.random.default_rng(3)
        net, _ = make_formula_net(rng, mean_only=True)
        counts = mofo_features(parse_smiles("CC"))
        with pytest.raises(ValueError):
            net.prior(counts)
        assert net.predict_mean(counts).shape == (3,)

    def test_skip_connections_change_output(self):
        rng = np.random.default_rng(4)
        net_plain, store_a = make_formula_net(rng, hidden_dim=16, n_layers=2)
        rng = np.random.default_rng(4)
        net_skip, store_b = make_formula_net(rng, hidden_dim=16, n_layers=2, skip_period=1)
        counts = mofo_features(parse_smiles("CCCC"))
        a = net_plain.prior(counts)
        b = net_skip.prior(counts)
        assert not np.allclose(a.mean, b.mean)

    def test_gradients_flow(self):
        rng = np.random.default_rng(5)
        net, store = make_formula_net(rng, latent_dim=2, hidden_dim=4, n_layers=1)
        features = np.stack(
            [mofo_features(parse_smiles(s)).as_array() for s in ("C", "CCO", "C=C")]
        )

        def loss(tape):
            mean, var = net.forward_t(tape, features)
            return tape.sum(tape.square(mean)) + tape.sum(var)

        assert grad_check(loss, store) < 1e-6


class TestFilmLayer:
    def test_single_node_manual_formula(self):
        rng = np.random.default_rng(6)
        d = 4
        layer = FilmLayerParams(
            transforms=rng.normal(size=(N_EDGE_TYPES, d, d)),
            hyper_w=rng.normal(size=(N_EDGE_TYPES, d, 2 * d)),
            hyper_b=rng.normal(size=(N_EDGE_TYPES, 2 * d)),
        )
        graph = MoleculeGraph((ATOM_INDEX["O"],), ())
        h = rng.normal(size=(1, d))
        out = film_layer(h, graph, layer)
        # self-loop only: message = gamma(h) * (W h) + beta(h)
        mod = h @ layer.hyper_w[SELF_LOOP_TYPE] + layer.hyper_b[SELF_LOOP_TYPE]
        expected = np.tanh(mod[:, :d] * (h @ layer.transforms[SELF_LOOP_TYPE]) + mod[:, d:])
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_identity_modulation_reduces_to_relational_messages(self):
        # gamma = 1, beta = 0 turns the layer into h'_t = tanh(sum_e sum_s W_e h_s)
        rng = np.random.default_rng(7)
        d = 5
        graph = random_tree_graph(rng, 6)
        layer = FilmLayerParams(
            transforms=rng.normal(size=(N_EDGE_TYPES, d, d)),
            hyper_w=np.zeros((N_EDGE_TYPES, d, 2 * d)),
            hyper_b=np.concatenate(
                [np.ones((N_EDGE_TYPES, d)), np.zeros((N_EDGE_TYPES, d))], axis=1
            ),
        )
        h = rng.normal(size=(graph.n_atoms, d))
        out = film_layer(h, graph, layer)
        expected = np.zeros_like(h)
        for src, dst, kind in graph.directed_edges():
            expected[dst] += h[src] @ layer.transforms[kind]
        for node in range(graph.n_atoms):
            expected[node] += h[node] @ layer.transforms[SELF_LOOP_TYPE]
        np.testing.assert_allclose(out, np.tanh(expected), atol=1e-12)

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(8)
        d = 4
        layer = FilmLayerParams(
            transforms=rng.normal(size=(N_EDGE_TYPES, d, d)),
            hyper_w=rng.normal(size=(N_EDGE_TYPES, d, 2 * d)),
            hyper_b=rng.normal(size=(N_EDGE_TYPES, 2 * d)),
        )
        graph = random_tree_graph(rng, 7)
        h = rng.normal(size=(graph.n_atoms, d))
        base = film_layer(h, graph, layer)
        for _ in range(10):
            perm = list(rng.permutation(graph.n_atoms))
            permuted = film_layer(h[perm], relabeled(graph, perm), layer)
            np.testing.assert_allclose(permuted, base[perm], atol=1e-12)

    def test_row_alignment_checked(self):
        rng = np.random.default_rng(9)
        layer = FilmLayerParams(
            transforms=rng.normal(size=(N_EDGE_TYPES, 3, 3)),
            hyper_w=rng.normal(size=(N_EDGE_TYPES, 3, 6)),
        )
        with pytest.raises(ValueError):
            film_layer(np.zeros((2, 3)), MoleculeGraph((C,), ()), layer)


class TestGnnPrior:
    def test_permutation_invariance(self):
        rng = np.random.default_rng(10)
        for aggregation in ("sum", "mean"):
            net, _ = make_gnn_net(rng, embed_dim=6, n_layers=2, aggregation=aggregation)
            for _ in range(5):
                graph = random_tree_graph(rng, int(rng.integers(2, 10)))
                base = gnn_prior(net, graph)
                for _ in range(5):
                    perm = list(rng.permutation(graph.n_atoms))
                    other = gnn_prior(net, relabeled(graph, perm))
                    assert np.max(np.abs(other.mean - base.mean)) <= 1e-10
                    assert np.max(np.abs(other.var - base.var)) <= 1e-10

    def test_identical_single_atoms_identical_priors(self):
        rng = np.random.default_rng(11)
        net, _ = make_gnn_net(rng)
        a = gnn_prior(net, MoleculeGraph((C,), ()))
        b = gnn_prior(net, MoleculeGraph((C,), ()))
        np.testing.assert_array_equal(a.mean, b.mean)
        np.testing.assert_array_equal(a.var, b.var)

    def test_variance_floor(self):
        rng = np.random.default_rng(12)
        net, _ = make_gnn_net(rng, embed_dim=4, n_layers=1)
        for _ in range(10):
            prior = gnn_prior(net, random_tree_graph(rng, int(rng.integers(1, 8))))
            assert np.all(prior.var > VAR_FLOOR)

    def test_locality_on_path_graph(self):
        # with L layers, node features beyond graph distance L are untouched
        rng = np.random.default_rng(13)
        n_layers = 2
        net, _ = make_gnn_net(rng, embed_dim=4, n_layers=n_layers)
        n = 7
        bonds = tuple((k, k + 1, 0) for k in range(n - 1))
        path_c = MoleculeGraph((C,) * n, bonds)
        atoms_changed = (C,) * (n - 1) + (ATOM_INDEX["N"],)
        path_n = MoleculeGraph(atoms_changed, bonds)
        feats_c = net.node_features(path_c)
        feats_n = net.node_features(path_n)
        changed = n - 1
        for node in range(n):
            if abs(node - changed) > n_layers:
                np.testing.assert_allclose(feats_c[node], feats_n[node], atol=1e-12)
        assert not np.allclose(feats_c[changed], feats_n[changed])
        # pooled outputs still differ
        assert not np.allclose(gnn_prior(net, path_c).mean, gnn_prior(net, path_n).mean)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(14)
        net, store = make_gnn_net(rng, latent_dim=2, embed_dim=3, n_layers=1)
        batch = GraphBatch([random_tree_graph(rng, 4), random_tree_graph(rng, 3)])

        def loss(tape):
            mean, var = net.forward_t(tape, batch)
            return tape.sum(tape.square(mean)) + tape.sum(var)

        assert grad_check(loss, store) < 1e-4

    def test_mean_aggregation_and_skip_paths(self):
        rng = np.random.default_rng(15)
        net, _ = make_gnn_net(rng, embed_dim=4, n_layers=2, aggregation="mean", skip_period=2)
        prior = gnn_prior(net, parse_smiles("CCO"))
        assert np.all(np.isfinite(prior.mean)) and np.all(prior.var > 0)

    def test_bias_free_network(self):
        rng = np.random.default_rng(16)
        net, store = make_gnn_net(rng, embed_dim=4, n_layers=1, bias=False)
        assert not any(".hb" in n or "ro.b" in n for n in store.names())
        prior = gnn_prior(net, parse_smiles("CC"))
        assert np.all(prior.var > 0)

    def test_dropout_training_mode_only(self):
        rng = np.random.default_rng(17)
        net, store = make_gnn_net(rng, embed_dim=4, n_layers=1, dropout=0.5)
        batch = GraphBatch([parse_smiles("CCO")])
        eval_a, _ = net.prior_params(batch)
        eval_b, _ = net.prior_params(batch)
        np.testing.assert_array_equal(eval_a, eval_b)  # eval mode ignores dropout
        tape = Tape(store)
        mean_train, _ = net.forward_t(tape, batch, training=True, rng=np.random.default_rng(0))
        tape2 = Tape(store)
        mean_train2, _ = net.forward_t(tape2, batch, training=True, rng=np.random.default_rng(0))
        np.testing.assert_array_equal(mean_train.value, mean_train2.value)  # seeded masks
        with pytest.raises(ValueError):
            tape3 = Tape(store)
            net.forward_t(tape3, batch, training=True, rng=None)

    def test_formula_only_record_rejected(self):
        rng = np.random.default_rng(18)
        net, _ = make_gnn_net(rng)
        from gammamix.molecules import ComponentRecord, FormulaCounts, parse_formula

        record = ComponentRecord(
            "x", "FORMULA", None, FormulaCounts.from_atom_counts(parse_formula("CH4"))
        )
        with pytest.raises(MoleculeError, match="graph"):
            net.prior(record)

    def test_wrapper_kind_checks(self):
        rng = np.random.default_rng(19)
        fnet, _ = make_formula_net(rng)
        gnet, _ = make_gnn_net(rng)
        graph = parse_smiles("C")
        with pytest.raises(ValueError):
            mofo_prior(gnet, mofo_features(graph))
        with pytest.raises(ValueError):
            gnn_prior(fnet, graph)


class TestGraphBatch:
    def test_packing_indices(self):
        g1 = parse_smiles("O")  # 3 nodes
        g2 = parse_smiles("C")  # 5 nodes
        batch = GraphBatch([g1, g2])
        assert batch.n_nodes == 8
        assert batch.graph_of_node.tolist() == [0] * 3 + [1] * 5
        assert batch.node_counts.tolist() == [3.0, 5.0]
        np.testing.assert_array_equal(batch.edge_src[SELF_LOOP_TYPE], np.arange(8))
        # two O-H bonds -> 4 directed single edges in graph 1, 4 C-H in graph 2
        assert batch.edge_src[0].size == 4 + 8

    def test_empty_batch_rejected(self):
        with pytest.raises(ValueError):
            GraphBatch([])
