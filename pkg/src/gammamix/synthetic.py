"""Synthetic corpus with planted ground truth.

Builds a library of random valid molecules over the fixed vocabulary,
plants per-component latent vectors as a fixed random linear map of the
standardized occurrence counts, injects per-component anomaly offsets
into a chosen fraction, and emits observations ln(gamma) = u*.v* + noise
over a Bernoulli observation mask. A slice of the library consists of
"formula twins": molecules rebuilt from an earlier molecule's atom
multiset, so their counts coincide while their behavior may not (the
anomaly mechanism the nonparametric part is supposed to absorb).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .molecules import (
    ATOM_INDEX,
    BOND_AROMATIC,
    BOND_DOUBLE,
    BOND_ORDER,
    BOND_SINGLE,
    BOND_TRIPLE,
    ComponentRecord,
    MoleculeGraph,
    VALENCE,
    mofo_features,
    write_molecules,
)

_SYMBOL_WEIGHTS = (
    ("C", 0.46), ("N", 0.10), ("O", 0.12), ("S", 0.05), ("P", 0.02),
    ("Si", 0.02), ("Sn", 0.02), ("F", 0.08), ("Cl", 0.08), ("Br", 0.03), ("I", 0.02),
)


@dataclass(frozen=True)
class WorldSpec:
    latent_dim: int = 4
    density: float = 0.3
    noise: float = 0.15
    anomaly_fraction: float = 0.1
    anomaly_scale: float = 3.0
    min_heavy: int = 2
    max_heavy: int = 12
    twin_fraction: float = 0.25
    latent_std: float = 0.75

    def __post_init__(self):
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        if not 0.0 < self.density <= 1.0:
            raise ValueError("density must be in (0, 1]")
        if not 0.0 <= self.anomaly_fraction < 1.0:
            raise ValueError("anomaly_fraction must be in [0, 1)")
        if self.noise < 0.0:
            raise ValueError("noise must be nonnegative")
        if not 2 <= self.min_heavy <= self.max_heavy:
            raise ValueError("heavy-atom range must satisfy 2 <= min <= max")


@dataclass
class PlantedWorld:
    spec: WorldSpec
    solute_records: list[ComponentRecord]
    solvent_records: list[ComponentRecord]
    solute_latents: np.ndarray
    solvent_latents: np.ndarray
    anomalous_solutes: np.ndarray
    anomalous_solvents: np.ndarray
    solute_map: np.ndarray  # latents before anomalies: z @ map.T
    solvent_map: np.ndarray
    feature_mean: np.ndarray
    feature_scale: np.ndarray

    def standardized_features(self, records) -> np.ndarray:
        raw = np.stack([r.counts.as_array() for r in records])
        return (raw - self.feature_mean) / self.feature_scale


# --------------------------------------------------------------------------
# random molecules
# --------------------------------------------------------------------------


def _draw_symbols(rng, count: int) -> list[str]:
    names = [s for s, _ in _SYMBOL_WEIGHTS]
    weights = np.array([w for _, w in _SYMBOL_WEIGHTS])
    picks = rng.choice(len(names), size=count, p=weights / weights.sum())
    return [names[int(k)] for k in picks]


def _tree_bonds(rng, symbols: list[str]):
    """Random recursive tree with single bonds, respecting valences."""
    remaining = [VALENCE[s] for s in symbols]
    bonds = []
    placed = 1
    for k in range(1, len(symbols)):
        candidates = [p for p in range(placed) if remaining[p] > 0]
        if not candidates:
            break
        parent = candidates[int(rng.integers(0, len(candidates)))]
        bonds.append([parent, k, BOND_SINGLE])
        remaining[parent] -= 1
        remaining[k] -= 1
        placed += 1
    return symbols[:placed], bonds, remaining[:placed]


def _decorate(rng, symbols, bonds, remaining):
    """Occasionally upgrade bond orders and close one ring."""
    for bond in bonds:
        a, b, _ = bond
        roll = rng.random()
        if roll < 0.05 and remaining[a] >= 2 and remaining[b] >= 2:
            bond[2] = BOND_TRIPLE
            remaining[a] -= 2
            remaining[b] -= 2
        elif roll < 0.22 and remaining[a] >= 1 and remaining[b] >= 1:
            bond[2] = BOND_DOUBLE
            remaining[a] -= 1
            remaining[b] -= 1
    if len(symbols) >= 4 and rng.random() < 0.4:
        adjacent = {frozenset((a, b)) for a, b, _ in bonds}
        open_nodes = [k for k in range(len(symbols)) if remaining[k] > 0]
        rng.shuffle(open_nodes)
        for a in open_nodes:
            partners = [
                b for b in open_nodes if b != a and frozenset((a, b)) not in adjacent
            ]
            if partners:
                b = partners[int(rng.integers(0, len(partners)))]
                bonds.append([a, b, BOND_SINGLE])
                remaining[a] -= 1
                remaining[b] -= 1
                break
    return symbols, bonds


def _aromatic_skeleton(rng, n_extra: int):
    """Benzene-like aromatic 6-ring with a random substituent tree."""
    symbols = ["C"] * 6
    bonds = [[k, (k + 1) % 6, BOND_AROMATIC] for k in range(6)]
    remaining = [1] * 6  # 4 - ceil(2 * 1.5)
    extra = _draw_symbols(rng, n_extra)
    for symbol in extra:
        candidates = [p for p in range(len(symbols)) if remaining[p] > 0]
        if not candidates:
            break
        parent = candidates[int(rng.integers(0, len(candidates)))]
        symbols.append(symbol)
        remaining.append(VALENCE[symbol] - 1)
        bonds.append([parent, len(symbols) - 1, BOND_SINGLE])
        remaining[parent] -= 1
    return symbols, bonds


def _fill_hydrogens(symbols: list[str], bonds) -> MoleculeGraph:
    order_sum = [0.0] * len(symbols)
    for a, b, kind in bonds:
        order_sum[a] += BOND_ORDER[kind]
        order_sum[b] += BOND_ORDER[kind]
    atoms = [ATOM_INDEX[s] for s in symbols]
    typed = [(a, b, kind) for a, b, kind in bonds]
    h_index = ATOM_INDEX["H"]
    for heavy, symbol in enumerate(symbols):
        fill = max(0, VALENCE[symbol] - math.ceil(order_sum[heavy] - 1e-9))
        for _ in range(fill):
            atoms.append(h_index)
            typed.append((heavy, len(atoms) - 1, BOND_SINGLE))
    return MoleculeGraph(tuple(atoms), tuple(typed))


def random_molecule_library(rng, count: int, prefix: str, spec: WorldSpec) -> list[ComponentRecord]:
    """`count` valid molecules; a slice are formula twins of earlier ones."""
    records: list[ComponentRecord] = []
    tree_pool: list[list[str]] = []
    for k in range(count):
        if tree_pool and rng.random() < spec.twin_fraction:
            # same atom multiset, fresh random tree: identical occurrence
            # counts (tree hydrogen count depends only on the multiset).
            # Descending-valence order maximizes every prefix valence sum,
            # so a multiset that built a full tree once always completes.
            symbols = sorted(
                tree_pool[int(rng.integers(0, len(tree_pool)))],
                key=lambda s: (-VALENCE[s], s),
            )
            kept, bonds, _ = _tree_bonds(rng, symbols)
            graph = _fill_hydrogens(kept, bonds)
        else:
            n_heavy = int(rng.integers(spec.min_heavy, spec.max_heavy + 1))
            style = rng.random()
            if style < 0.2 and spec.max_heavy >= 6 and n_heavy >= 6:
                symbols, bonds = _aromatic_skeleton(rng, n_heavy - 6)
                graph = _fill_hydrogens(symbols, bonds)
            elif style < 0.5:
                kept, bonds, remaining = _tree_bonds(rng, _draw_symbols(rng, n_heavy))
                kept, bonds = _decorate(rng, kept, bonds, remaining)
                graph = _fill_hydrogens(kept, bonds)
            else:
                kept, bonds, _ = _tree_bonds(rng, _draw_symbols(rng, n_heavy))
                graph = _fill_hydrogens(kept, bonds)
                tree_pool.append(list(kept))
        records.append(
            ComponentRecord(f"{prefix}{k:04d}", "GRAPH", graph, mofo_features(graph))
        )
    return records


# --------------------------------------------------------------------------
# planted world
# --------------------------------------------------------------------------


def _planted_latents(rng, features_z: np.ndarray, spec: WorldSpec) -> tuple[np.ndarray, np.ndarray]:
    raw_map = rng.standard_normal((spec.latent_dim, features_z.shape[1]))
    raw = features_z @ raw_map.T
    per_dim_std = np.maximum(raw.std(axis=0), 1e-9)
    effective = raw_map * (spec.latent_std / per_dim_std)[:, None]
    return features_z @ effective.T, effective


def build_world(spec: WorldSpec, n_solutes: int, n_solvents: int, seed: int) -> PlantedWorld:
    if n_solutes < 2 or n_solvents < 2:
        raise ValueError("need at least two solutes and two solvents")
    rng = np.random.default_rng([seed, 101])
    solutes = random_molecule_library(rng, n_solutes, "sol", spec)
    solvents = random_molecule_library(rng, n_solvents, "svt", spec)

    all_counts = np.stack([r.counts.as_array() for r in solutes + solvents])
    feature_mean = all_counts.mean(axis=0)
    feature_scale = np.maximum(all_counts.std(axis=0), 1.0)

    z_sol = (np.stack([r.counts.as_array() for r in solutes]) - feature_mean) / feature_scale
    z_svt = (np.stack([r.counts.as_array() for r in solvents]) - feature_mean) / feature_scale
    u_latents, u_map = _planted_latents(rng, z_sol, spec)
    v_latents, v_map = _planted_latents(rng, z_svt, spec)

    n_anom_u = int(spec.anomaly_fraction * n_solutes)
    n_anom_v = int(spec.anomaly_fraction * n_solvents)
    anom_u = np.sort(rng.choice(n_solutes, size=n_anom_u, replace=False))
    anom_v = np.sort(rng.choice(n_solvents, size=n_anom_v, replace=False))
    offset_scale = spec.anomaly_scale * spec.latent_std
    u_latents[anom_u] += rng.normal(0.0, offset_scale, size=(n_anom_u, spec.latent_dim))
    v_latents[anom_v] += rng.normal(0.0, offset_scale, size=(n_anom_v, spec.latent_dim))

    return PlantedWorld(
        spec=spec,
        solute_records=solutes,
        solvent_records=solvents,
        solute_latents=u_latents,
        solvent_latents=v_latents,
        anomalous_solutes=anom_u,
        anomalous_solvents=anom_v,
        solute_map=u_map,
        solvent_map=v_map,
        feature_mean=feature_mean,
        feature_scale=feature_scale,
    )


def generate(
    spec: WorldSpec, n_solutes: int, n_solvents: int, seed: int, out_dir
) -> tuple[dict[str, Path], PlantedWorld]:
    """Write molecules.tsv, observations.csv and ground_truth.csv.

    Regeneration with the same arguments is byte-identical.
    """
    world = build_world(spec, n_solutes, n_solvents, seed)
    rng = np.random.default_rng([seed, 202])
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    mask = rng.random((n_solutes, n_solvents)) < spec.density
    noise = rng.normal(0.0, 1.0, size=(n_solutes, n_solvents))

    molecules_path = out_dir / "molecules.tsv"
    observations_path = out_dir / "observations.csv"
    truth_path = out_dir / "ground_truth.csv"

    write_molecules(molecules_path, world.solute_records + world.solvent_records)

    lines = ["solute_id,solvent_id,ln_gamma"]
    for i in range(n_solutes):
        for j in range(n_solvents):
            if mask[i, j]:
                value = float(
                    world.solute_latents[i] @ world.solvent_latents[j]
                    + spec.noise * noise[i, j]
                )
                lines.append(
                    f"{world.solute_records[i].component_id},"
                    f"{world.solvent_records[j].component_id},{value!r}"
                )
    observations_path.write_text("\n".join(lines) + "\n", encoding="utf-8")

    header = "component_id,role,anomalous," + ",".join(
        f"z{k}" for k in range(spec.latent_dim)
    )
    truth_lines = [header]
    anom_u = set(world.anomalous_solutes.tolist())
    anom_v = set(world.anomalous_solvents.tolist())
    for i, record in enumerate(world.solute_records):
        coords = ",".join(repr(float(x)) for x in world.solute_latents[i])
        truth_lines.append(f"{record.component_id},solute,{int(i in anom_u)},{coords}")
    for j, record in enumerate(world.solvent_records):
        coords = ",".join(repr(float(x)) for x in world.solvent_latents[j])
        truth_lines.append(f"{record.component_id},solvent,{int(j in anom_v)},{coords}")
    truth_path.write_text("\n".join(truth_lines) + "\n", encoding="utf-8")

    paths = {
        "molecules": molecules_path,
        "observations": observations_path,
        "ground_truth": truth_path,
    }
    return paths, world
