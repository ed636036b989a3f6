"""Structure-conditioned prior networks.

Two families map a component's chemical structure to the mean and variance
of a diagonal Gaussian over its latent vector:

* formula prior: an MLP over the 16 atom/bond occurrence counts;
* graph prior: message passing with feature-wise linear modulation, one
  transform and one hyper-network per edge type (4 bond types plus a
  dedicated self-loop type), followed by pooling and a readout MLP.

Variances come out of a softplus plus a 1e-6 floor, so they are positive
by construction. Forward passes run on the autodiff tape; evaluation
helpers record on a scratch tape and return plain arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import ParamStore, Tape, Var
from .model import DiagGaussian
from .molecules import (
    ComponentRecord,
    FormulaCounts,
    MoleculeError,
    MoleculeGraph,
    N_ATOM_TYPES,
    N_BOND_TYPES,
    N_FEATURES,
    mofo_features,
)

SELF_LOOP_TYPE = N_BOND_TYPES  # dedicated edge type beyond the 4 bond types
N_EDGE_TYPES = N_BOND_TYPES + 1

VAR_FLOOR = 1e-6
FORMULA_INPUT_SCALE = 0.125  # keeps raw occurrence counts in a tanh-friendly range

AGGREGATIONS = ("sum", "mean")


@dataclass(frozen=True)
class FormulaPriorConfig:
    latent_dim: int
    hidden_dim: int = 16
    n_layers: int = 1
    dropout: float = 0.0
    skip_period: int = 0  # 0 disables; k adds the previous features every k-th layer
    mean_only: bool = False

    def __post_init__(self):
        if self.latent_dim < 1 or self.hidden_dim < 1 or self.n_layers < 0:
            raise ValueError("bad formula prior shape")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    @property
    def out_dim(self) -> int:
        return self.latent_dim if self.mean_only else 2 * self.latent_dim


@dataclass(frozen=True)
class GnnPriorConfig:
    latent_dim: int
    embed_dim: int = 16
    n_layers: int = 2
    aggregation: str = "sum"
    skip_period: int = 0
    dropout: float = 0.0
    bias: bool = True
    mean_only: bool = False

    def __post_init__(self):
        if self.latent_dim < 1 or self.embed_dim < 1 or self.n_layers < 1:
            raise ValueError("bad graph prior shape")
        if self.aggregation not in AGGREGATIONS:
            raise ValueError(f"aggregation must be one of {AGGREGATIONS}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    @property
    def out_dim(self) -> int:
        return self.latent_dim if self.mean_only else 2 * self.latent_dim


class GraphBatch:
    """Disjoint union of molecule graphs with per-edge-type index arrays."""

    def __init__(self, graphs: list[MoleculeGraph]):
        if not graphs:
            raise ValueError("empty graph batch")
        self.n_graphs = len(graphs)
        atom_index: list[int] = []
        graph_of_node: list[int] = []
        srcs: list[list[int]] = [[] for _ in range(N_EDGE_TYPES)]
        dsts: list[list[int]] = [[] for _ in range(N_EDGE_TYPES)]
        offset = 0
        counts = []
        for g, graph in enumerate(graphs):
            atom_index.extend(graph.atoms)
            graph_of_node.extend([g] * graph.n_atoms)
            for a, b, kind in graph.directed_edges():
                srcs[kind].append(offset + a)
                dsts[kind].append(offset + b)
            offset += graph.n_atoms
            counts.append(graph.n_atoms)
        self.n_nodes = offset
        srcs[SELF_LOOP_TYPE] = list(range(self.n_nodes))
        dsts[SELF_LOOP_TYPE] = list(range(self.n_nodes))
        self.atom_index = np.array(atom_index, dtype=np.intp)
        self.graph_of_node = np.array(graph_of_node, dtype=np.intp)
        self.node_counts = np.array(counts, dtype=np.float64)
        self.edge_src = [np.array(s, dtype=np.intp) for s in srcs]
        self.edge_dst = [np.array(d, dtype=np.intp) for d in dsts]
        # per-type in-degree, clamped for mean aggregation of empty neighborhoods
        self.in_degree = [
            np.maximum(np.bincount(d, minlength=self.n_nodes), 1).astype(np.float64)[:, None]
            for d in self.edge_dst
        ]


# --------------------------------------------------------------------------
# shared message-passing math
# --------------------------------------------------------------------------


def _film_pass_t(
    tape: Tape,
    h: Var,
    batch: GraphBatch,
    weights: list[dict[str, Var | None]],
    aggregation: str,
) -> Var:
    """One modulated message-passing step; returns pre-activation sums.

    Per directed edge (s -> t) of type e the message is
    gamma_e(h_t) * (W_e h_s) + beta_e(h_t); (gamma, beta) come from the
    per-edge-type affine hyper-network applied to the target features.
    Messages aggregate per node (sum, or mean per edge type) and the
    per-type aggregates add up across edge types.
    """
    d = h.value.shape[1]
    acc: Var | None = None
    for e in range(N_EDGE_TYPES):
        src = batch.edge_src[e]
        if src.size == 0:
            continue
        dst = batch.edge_dst[e]
        h_src = tape.gather_rows(h, src)
        h_dst = tape.gather_rows(h, dst)
        transformed = tape.matmul(h_src, weights[e]["w"])
        modulation = tape.matmul(h_dst, weights[e]["hw"])
        if weights[e]["hb"] is not None:
            modulation = modulation + weights[e]["hb"]
        gamma = tape.slice_cols(modulation, 0, d)
        beta = tape.slice_cols(modulation, d, 2 * d)
        messages = gamma * transformed + beta
        agg = tape.segment_sum(messages, dst, batch.n_nodes)
        if aggregation == "mean":
            agg = agg / tape.const(batch.in_degree[e])
        acc = agg if acc is None else acc + agg
    assert acc is not None  # the self-loop type is never empty
    return acc


@dataclass
class FilmLayerParams:
    """Plain-array weights for one message-passing layer (test surface)."""

    transforms: np.ndarray  # (n_edge_types, d, d)
    hyper_w: np.ndarray  # (n_edge_types, d, 2d)
    hyper_b: np.ndarray | None = None  # (n_edge_types, 2d)
    aggregation: str = "sum"


def film_layer(node_features: np.ndarray, graph: MoleculeGraph,
               layer: FilmLayerParams) -> np.ndarray:
    """Apply one modulated message-passing layer to raw node features."""
    h0 = np.asarray(node_features, dtype=np.float64)
    if h0.shape[0] != graph.n_atoms:
        raise ValueError("node feature rows must align with graph nodes")
    batch = GraphBatch([graph])
    tape = Tape()
    weights = [
        {
            "w": tape.const(layer.transforms[e]),
            "hw": tape.const(layer.hyper_w[e]),
            "hb": tape.const(layer.hyper_b[e]) if layer.hyper_b is not None else None,
        }
        for e in range(N_EDGE_TYPES)
    ]
    out = tape.tanh(_film_pass_t(tape, tape.const(h0), batch, weights, layer.aggregation))
    return out.value


# --------------------------------------------------------------------------
# prior networks
# --------------------------------------------------------------------------


def _fan_in_uniform(rng, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class PriorNetwork:
    """One conditional-prior network plus its slice of a ParamStore.

    ``kind`` is "formula" or "gnn"; all parameters are registered under
    ``prefix`` so two networks (solutes, solvents) share one store.
    """

    def __init__(self, kind: str, config, store: ParamStore, prefix: str, rng=None,
                 register: bool = True):
        if kind not in ("formula", "gnn"):
            raise ValueError(f"unknown prior kind {kind!r}")
        self.kind = kind
        self.config = config
        self.store = store
        self.prefix = prefix
        if register:
            if kind == "formula":
                self._init_formula(rng)
            else:
                self._init_gnn(rng)
        else:
            anchor = self._name("out.w" if kind == "formula" else "ro.w2")
            if anchor not in store:
                raise KeyError(f"store has no parameters under prefix {prefix!r}")

    # -- parameter registration -------------------------------------------

    def _name(self, suffix: str) -> str:
        return self.prefix + suffix

    def _init_formula(self, rng) -> None:
        cfg: FormulaPriorConfig = self.config
        width_in = N_FEATURES
        for layer in range(cfg.n_layers):
            self.store.add(self._name(f"h{layer}.w"), _fan_in_uniform(rng, width_in, (width_in, cfg.hidden_dim)))
            self.store.add(self._name(f"h{layer}.b"), np.zeros(cfg.hidden_dim))
            width_in = cfg.hidden_dim
        self.store.add(self._name("out.w"), _fan_in_uniform(rng, width_in, (width_in, cfg.out_dim)))
        self.store.add(self._name("out.b"), np.zeros(cfg.out_dim))

    def _init_gnn(self, rng) -> None:
        cfg: GnnPriorConfig = self.config
        d = cfg.embed_dim
        self.store.add(self._name("atom_embed"), 0.5 * rng.standard_normal((N_ATOM_TYPES, d)))
        # bond embeddings are part of the parameter contract; the modulated
        # message math keys on edge types only, so they receive no gradient
        self.store.add(self._name("bond_embed"), 0.5 * rng.standard_normal((N_BOND_TYPES, d)))
        for layer in range(cfg.n_layers):
            for e in range(N_EDGE_TYPES):
                self.store.add(self._name(f"l{layer}.w{e}"), _fan_in_uniform(rng, d, (d, d)))
                self.store.add(self._name(f"l{layer}.hw{e}"), _fan_in_uniform(rng, d, (d, 2 * d)))
                if cfg.bias:
                    # start as identity modulation: gamma = 1, beta = 0
                    self.store.add(
                        self._name(f"l{layer}.hb{e}"),
                        np.concatenate([np.ones(d), np.zeros(d)]),
                    )
        self.store.add(self._name("ro.w1"), _fan_in_uniform(rng, d, (d, d)))
        self.store.add(self._name("ro.w2"), _fan_in_uniform(rng, d, (d, cfg.out_dim)))
        if cfg.bias:
            self.store.add(self._name("ro.b1"), np.zeros(d))
            self.store.add(self._name("ro.b2"), np.zeros(cfg.out_dim))

    # -- forward passes ------------------------------------------------------

    def _dropout(self, tape: Tape, h: Var, training: bool, rng) -> Var:
        p = self.config.dropout
        if not training or p == 0.0:
            return h
        if rng is None:
            raise ValueError("training-mode dropout needs an rng")
        mask = (rng.random(h.value.shape) >= p).astype(np.float64) / (1.0 - p)
        return h * tape.const(mask)

    def _split_outputs(self, tape: Tape, out: Var) -> tuple[Var, Var | None]:
        k = self.config.latent_dim
        mean = tape.slice_cols(out, 0, k)
        if self.config.mean_only:
            return mean, None
        var = tape.softplus(tape.slice_cols(out, k, 2 * k)) + VAR_FLOOR
        return mean, var

    def forward_t(self, tape: Tape, inputs, *, training: bool = False, rng=None):
        """Batched forward pass on `tape` -> (mean Var (B, K), var Var or None)."""
        if self.kind == "formula":
            return self._forward_formula(tape, inputs, training, rng)
        return self._forward_gnn(tape, inputs, training, rng)

    def _forward_formula(self, tape: Tape, features: np.ndarray, training, rng):
        cfg: FormulaPriorConfig = self.config
        h = tape.const(np.asarray(features, dtype=np.float64) * FORMULA_INPUT_SCALE)
        for layer in range(cfg.n_layers):
            prev = h
            h = tape.tanh(
                tape.matmul(h, tape.param(self._name(f"h{layer}.w"))) + tape.param(self._name(f"h{layer}.b"))
            )
            h = self._dropout(tape, h, training, rng)
            if (
                cfg.skip_period
                and (layer + 1) % cfg.skip_period == 0
                and prev.value.shape == h.value.shape
            ):
                h = h + prev
        out = tape.matmul(h, tape.param(self._name("out.w"))) + tape.param(self._name("out.b"))
        return self._split_outputs(tape, out)

    def _layer_weights(self, tape: Tape, layer: int) -> list[dict[str, Var | None]]:
        cfg: GnnPriorConfig = self.config
        return [
            {
                "w": tape.param(self._name(f"l{layer}.w{e}")),
                "hw": tape.param(self._name(f"l{layer}.hw{e}")),
                "hb": tape.param(self._name(f"l{layer}.hb{e}")) if cfg.bias else None,
            }
            for e in range(N_EDGE_TYPES)
        ]

    def _node_features_t(self, tape: Tape, batch: GraphBatch, training, rng) -> Var:
        cfg: GnnPriorConfig = self.config
        h = tape.gather_rows(tape.param(self._name("atom_embed")), batch.atom_index)
        for layer in range(cfg.n_layers):
            prev = h
            h = tape.tanh(
                _film_pass_t(tape, h, batch, self._layer_weights(tape, layer), cfg.aggregation)
            )
            h = self._dropout(tape, h, training, rng)
            if cfg.skip_period and (layer + 1) % cfg.skip_period == 0:
                h = h + prev
        return h

    def _forward_gnn(self, tape: Tape, batch: GraphBatch, training, rng):
        cfg: GnnPriorConfig = self.config
        h = self._node_features_t(tape, batch, training, rng)
        pooled = tape.segment_sum(h, batch.graph_of_node, batch.n_graphs)
        if cfg.aggregation == "mean":
            pooled = pooled / tape.const(batch.node_counts[:, None])
        hidden = tape.matmul(pooled, tape.param(self._name("ro.w1")))
        if cfg.bias:
            hidden = hidden + tape.param(self._name("ro.b1"))
        hidden = self._dropout(tape, tape.tanh(hidden), training, rng)
        out = tape.matmul(hidden, tape.param(self._name("ro.w2")))
        if cfg.bias:
            out = out + tape.param(self._name("ro.b2"))
        return self._split_outputs(tape, out)

    # -- evaluation helpers ----------------------------------------------------

    def _structure_input(self, structure):
        """Normalize ComponentRecord / MoleculeGraph / FormulaCounts to net input."""
        if self.kind == "formula":
            if isinstance(structure, FormulaCounts):
                counts = structure
            elif isinstance(structure, MoleculeGraph):
                counts = mofo_features(structure)
            elif isinstance(structure, ComponentRecord):
                counts = structure.counts
            else:
                raise TypeError(f"cannot featurize {type(structure).__name__}")
            return counts.as_array()[None, :]
        if isinstance(structure, ComponentRecord):
            if structure.graph is None:
                raise MoleculeError(
                    f"component {structure.component_id!r} has no graph; "
                    "the graph prior needs SMILES or GRAPH records"
                )
            return GraphBatch([structure.graph])
        if isinstance(structure, MoleculeGraph):
            return GraphBatch([structure])
        if isinstance(structure, FormulaCounts):
            raise MoleculeError("the graph prior cannot featurize formula-only input")
        raise TypeError(f"cannot featurize {type(structure).__name__}")

    def batch_inputs(self, records: list[ComponentRecord]):
        """Precompute the batched network input for a component list."""
        if self.kind == "formula":
            return np.stack([rec.counts.as_array() for rec in records])
        missing = [rec.component_id for rec in records if rec.graph is None]
        if missing:
            raise MoleculeError(
                f"graph prior needs graphs; formula-only components: {missing[:5]}"
            )
        return GraphBatch([rec.graph for rec in records])

    def prior_params(self, inputs) -> tuple[np.ndarray, np.ndarray | None]:
        """Eval-mode forward -> (means (B, K), vars (B, K) or None)."""
        tape = Tape(self.store)
        mean, var = self.forward_t(tape, inputs, training=False)
        return mean.value.copy(), None if var is None else var.value.copy()

    def prior(self, structure) -> DiagGaussian:
        """Conditional prior for one structure (eval mode)."""
        if self.config.mean_only:
            raise ValueError("mean-only network defines no prior distribution")
        mean, var = self.prior_params(self._structure_input(structure))
        return DiagGaussian(mean[0], var[0])

    def predict_mean(self, structure) -> np.ndarray:
        mean, _ = self.prior_params(self._structure_input(structure))
        return mean[0]

    def node_features(self, graph: MoleculeGraph) -> np.ndarray:
        """Pre-readout node features (diagnostic surface for locality checks)."""
        if self.kind != "gnn":
            raise ValueError("node features exist only for the graph prior")
        tape = Tape(self.store)
        h = self._node_features_t(tape, GraphBatch([graph]), False, None)
        return h.value.copy()


def mofo_prior(net: PriorNetwork, features: FormulaCounts) -> DiagGaussian:
    """Conditional prior from occurrence counts (formula network)."""
    if net.kind != "formula":
        raise ValueError("mofo_prior expects a formula network")
    return net.prior(features)


def gnn_prior(net: PriorNetwork, graph: MoleculeGraph) -> DiagGaussian:
    """Conditional prior from a molecular graph (graph network)."""
    if net.kind != "gnn":
        raise ValueError("gnn_prior expects a graph network")
    return net.prior(graph)
