"""Shared test helpers: tiny random graphs and planted datasets."""

import numpy as np

from gammamix.model import Dataset, ObservationTable
from gammamix.molecules import ComponentRecord, MoleculeGraph, mofo_features


def random_tree_graph(rng, n_atoms):
    atoms = tuple(int(rng.integers(0, 12)) for _ in range(n_atoms))
    bonds = []
    for k in range(1, n_atoms):
        parent = int(rng.integers(0, k))
        bonds.append((parent, k, int(rng.integers(0, 4))))
    return MoleculeGraph(atoms, tuple(bonds))


def make_records(rng, count, prefix):
    records = []
    for k in range(count):
        graph = random_tree_graph(rng, int(rng.integers(2, 7)))
        records.append(ComponentRecord(f"{prefix}{k:03d}", "GRAPH", graph, mofo_features(graph)))
    return records


def planted_dataset(rng, n_solutes=6, n_solvents=6, density=0.8, noise=0.05, latent_dim=2):
    """Small dataset with free (structure-independent) planted latents."""
    solutes = make_records(rng, n_solutes, "sol")
    solvents = make_records(rng, n_solvents, "svt")
    u_true = rng.normal(size=(n_solutes, latent_dim))
    v_true = rng.normal(size=(n_solvents, latent_dim))
    entries = []
    for i in range(n_solutes):
        for j in range(n_solvents):
            if rng.random() < density:
                value = float(u_true[i] @ v_true[j] + noise * rng.normal())
                entries.append((i, j, value))
    table = ObservationTable.from_entries(n_solutes, n_solvents, entries)
    data = Dataset(
        table=table,
        solute_ids=[r.component_id for r in solutes],
        solvent_ids=[r.component_id for r in solvents],
        solutes=solutes,
        solvents=solvents,
    )
    return data, u_true, v_true
