"""Molecular structure encodings over a fixed 12-atom / 4-bond vocabulary.

Three input encodings resolve to the same two artifacts: integer formula
counts (12 atom symbols + 4 bond types) and an explicit molecular graph
with hydrogens as real nodes. The graph format and a restricted SMILES
dialect both produce :class:`MoleculeGraph`; plain formulas only produce
counts.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

ATOM_SYMBOLS = ("O", "Si", "I", "F", "Br", "P", "H", "S", "Sn", "N", "C", "Cl")
ATOM_INDEX = {s: i for i, s in enumerate(ATOM_SYMBOLS)}
N_ATOM_TYPES = len(ATOM_SYMBOLS)

BOND_SINGLE, BOND_DOUBLE, BOND_TRIPLE, BOND_AROMATIC = range(4)
BOND_NAMES = ("single", "double", "triple", "aromatic")
N_BOND_TYPES = 4
BOND_ORDER = (1.0, 2.0, 3.0, 1.5)

N_FEATURES = N_ATOM_TYPES + N_BOND_TYPES  # 16

VALENCE = {
    "C": 4, "N": 3, "O": 2, "S": 2, "P": 3,
    "F": 1, "Cl": 1, "Br": 1, "I": 1,
    "Si": 4, "Sn": 4, "H": 1,
}


class MoleculeError(ValueError):
    """Structured parse / validation error, with text position when known."""

    def __init__(self, message: str, position: int | None = None):
        if position is not None:
            message = f"{message} (position {position})"
        super().__init__(message)
        self.position = position


@dataclass(frozen=True)
class FormulaCounts:
    """16 nonnegative counts: 12 atom symbols followed by 4 bond types."""

    counts: tuple[int, ...]

    def __post_init__(self):
        if len(self.counts) != N_FEATURES:
            raise MoleculeError(f"expected {N_FEATURES} counts, got {len(self.counts)}")
        if any(c < 0 for c in self.counts):
            raise MoleculeError("counts must be nonnegative")
        if sum(self.counts[:N_ATOM_TYPES]) == 0:
            raise MoleculeError("at least one atom count must be positive")

    @classmethod
    def from_atom_counts(cls, atom_counts) -> "FormulaCounts":
        atoms = tuple(int(c) for c in atom_counts)
        return cls(atoms + (0,) * N_BOND_TYPES)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.counts, dtype=np.float64)

    def atom_count(self, symbol: str) -> int:
        return self.counts[ATOM_INDEX[symbol]]

    def bond_count(self, bond_type: int) -> int:
        return self.counts[N_ATOM_TYPES + bond_type]


@dataclass(frozen=True)
class MoleculeGraph:
    """Connected molecular graph: atom vocabulary indices + undirected typed bonds.

    ``bonds`` holds each undirected bond once; :meth:`directed_edges`
    yields the two opposite directed edges message passing operates on.
    """

    atoms: tuple[int, ...]
    bonds: tuple[tuple[int, int, int], ...]

    def __post_init__(self):
        n = len(self.atoms)
        if n == 0:
            raise MoleculeError("graph must contain at least one atom")
        for a in self.atoms:
            if not 0 <= a < N_ATOM_TYPES:
                raise MoleculeError(f"atom index {a} outside vocabulary")
        seen: set[frozenset[int]] = set()
        adjacency: list[list[int]] = [[] for _ in range(n)]
        for a, b, kind in self.bonds:
            if not (0 <= a < n and 0 <= b < n):
                raise MoleculeError(f"bond ({a},{b}) references a missing atom")
            if a == b:
                raise MoleculeError(f"self-bond on atom {a}")
            if not 0 <= kind < N_BOND_TYPES:
                raise MoleculeError(f"bond type {kind} outside vocabulary")
            key = frozenset((a, b))
            if key in seen:
                raise MoleculeError(f"duplicate bond between atoms {a} and {b}")
            seen.add(key)
            adjacency[a].append(b)
            adjacency[b].append(a)
        # single component
        reached = {0}
        frontier = [0]
        while frontier:
            node = frontier.pop()
            for nb in adjacency[node]:
                if nb not in reached:
                    reached.add(nb)
                    frontier.append(nb)
        if len(reached) != n:
            raise MoleculeError("graph is disconnected")

    @property
    def n_atoms(self) -> int:
        return len(self.atoms)

    def directed_edges(self) -> list[tuple[int, int, int]]:
        out = []
        for a, b, kind in self.bonds:
            out.append((a, b, kind))
            out.append((b, a, kind))
        return out

    def atom_symbols(self) -> list[str]:
        return [ATOM_SYMBOLS[a] for a in self.atoms]


# --------------------------------------------------------------------------
# formula parsing
# --------------------------------------------------------------------------

_FORMULA_TOKEN = re.compile(r"([A-Z][a-z]?)(\d*)")


def parse_formula(text: str) -> np.ndarray:
    """Parse e.g. ``"C2H5Cl"`` into a 12-vector of atom counts."""
    if not text:
        raise MoleculeError("empty formula")
    counts = np.zeros(N_ATOM_TYPES, dtype=np.int64)
    pos = 0
    while pos < len(text):
        match = _FORMULA_TOKEN.match(text, pos)
        if match is None or not match.group(1):
            raise MoleculeError(f"unexpected character {text[pos]!r}", position=pos)
        symbol, digits = match.group(1), match.group(2)
        if symbol not in ATOM_INDEX:
            raise MoleculeError(f"unknown element {symbol!r}", position=pos)
        if digits == "":
            count = 1
        else:
            count = int(digits)
            if count == 0:
                raise MoleculeError("zero count", position=pos + len(symbol))
        counts[ATOM_INDEX[symbol]] += count
        pos = match.end()
    return counts


# --------------------------------------------------------------------------
# explicit graph records
# --------------------------------------------------------------------------

def parse_graph(payload: str) -> MoleculeGraph:
    """Parse ``atoms=H,O,H;bonds=0-1:1,1-2:1`` (bond codes 1..4)."""
    fields: dict[str, str] = {}
    for part in payload.strip().split(";"):
        if not part:
            continue
        if "=" not in part:
            raise MoleculeError(f"malformed graph field {part!r}")
        key, value = part.split("=", 1)
        fields[key.strip()] = value.strip()
    if "atoms" not in fields or not fields["atoms"]:
        raise MoleculeError("graph record missing atoms")
    atoms = []
    for token in fields["atoms"].split(","):
        symbol = token.strip()
        if symbol not in ATOM_INDEX:
            raise MoleculeError(f"unknown atom symbol {symbol!r} in graph record")
        atoms.append(ATOM_INDEX[symbol])
    bonds = []
    bond_text = fields.get("bonds", "")
    if bond_text:
        for token in bond_text.split(","):
            match = re.fullmatch(r"(\d+)-(\d+):([1-4])", token.strip())
            if match is None:
                raise MoleculeError(f"malformed bond token {token!r}")
            bonds.append((int(match.group(1)), int(match.group(2)), int(match.group(3)) - 1))
    return MoleculeGraph(tuple(atoms), tuple(bonds))


def format_graph_payload(graph: MoleculeGraph) -> str:
    atoms = ",".join(graph.atom_symbols())
    bonds = ",".join(f"{a}-{b}:{kind + 1}" for a, b, kind in graph.bonds)
    return f"atoms={atoms};bonds={bonds}"


# --------------------------------------------------------------------------
# restricted SMILES
# --------------------------------------------------------------------------

_ORGANIC_TWO = ("Cl", "Br")
_ORGANIC_ONE = ("C", "N", "O", "S", "P", "F", "I")
_AROMATIC = {"c": "C", "n": "N", "o": "O", "s": "S"}
_BRACKET = {"[Si]": "Si", "[Sn]": "Sn", "[H]": "H"}
_BOND_CHAR = {"-": BOND_SINGLE, "=": BOND_DOUBLE, "#": BOND_TRIPLE}


def parse_smiles(text: str) -> MoleculeGraph:
    """Parse a restricted SMILES string into a graph with explicit hydrogens.

    Supported: organic-subset atoms C N O S P F Cl Br I, aromatic
    c n o s, bracket atoms [Si] [Sn] [H], bonds ``- = #``, branches,
    ring-closure digits 1-9. Hydrogens are filled from a fixed valence
    table and materialized as graph nodes; atoms whose explicit bonds
    already exceed the table get no implicit hydrogens.
    """
    if not text:
        raise MoleculeError("empty SMILES")

    symbols: list[str] = []          # heavy atoms in token order
    aromatic_atom: list[bool] = []
    bonds: list[tuple[int, int, int | None]] = []  # type None = infer later
    bond_keys: set[frozenset[int]] = set()

    prev: int | None = None
    pending_bond: int | None = None
    pending_pos = -1
    branch_stack: list[int] = []
    rings: dict[str, tuple[int, int | None, int]] = {}  # digit -> (atom, bond, pos)

    def add_bond(a: int, b: int, kind: int | None, pos: int) -> None:
        if a == b:
            raise MoleculeError("ring closure bonds an atom to itself", position=pos)
        key = frozenset((a, b))
        if key in bond_keys:
            raise MoleculeError("duplicate bond", position=pos)
        bond_keys.add(key)
        bonds.append((a, b, kind))

    def add_atom(symbol: str, aromatic: bool, pos: int) -> None:
        nonlocal prev, pending_bond
        symbols.append(symbol)
        aromatic_atom.append(aromatic)
        idx = len(symbols) - 1
        if prev is not None:
            add_bond(prev, idx, pending_bond, pos)
        elif pending_bond is not None:
            raise MoleculeError("bond symbol without a preceding atom", position=pending_pos)
        pending_bond = None
        prev = idx

    pos = 0
    while pos < len(text):
        ch = text[pos]
        if ch == "[":
            end = text.find("]", pos)
            if end < 0:
                raise MoleculeError("unterminated bracket atom", position=pos)
            token = text[pos : end + 1]
            if token not in _BRACKET:
                raise MoleculeError(f"unsupported bracket atom {token!r}", position=pos)
            add_atom(_BRACKET[token], False, pos)
            pos = end + 1
        elif text.startswith(_ORGANIC_TWO[0], pos) or text.startswith(_ORGANIC_TWO[1], pos):
            add_atom(text[pos : pos + 2], False, pos)
            pos += 2
        elif ch in _ORGANIC_ONE:
            add_atom(ch, False, pos)
            pos += 1
        elif ch in _AROMATIC:
            add_atom(_AROMATIC[ch], True, pos)
            pos += 1
        elif ch in _BOND_CHAR:
            if pending_bond is not None:
                raise MoleculeError("two consecutive bond symbols", position=pos)
            pending_bond = _BOND_CHAR[ch]
            pending_pos = pos
            pos += 1
        elif ch == "(":
            if prev is None:
                raise MoleculeError("branch before any atom", position=pos)
            if pending_bond is not None:
                raise MoleculeError("bond symbol before branch open", position=pos)
            branch_stack.append(prev)
            pos += 1
        elif ch == ")":
            if not branch_stack:
                raise MoleculeError("unbalanced parenthesis", position=pos)
            if pending_bond is not None:
                raise MoleculeError("dangling bond symbol before branch close", position=pos)
            prev = branch_stack.pop()
            pos += 1
        elif ch.isdigit():
            if ch == "0":
                raise MoleculeError("ring closure digit must be 1-9", position=pos)
            if prev is None:
                raise MoleculeError("ring digit before any atom", position=pos)
            if ch in rings:
                open_atom, open_bond, _ = rings.pop(ch)
                kind = pending_bond if pending_bond is not None else open_bond
                if (
                    pending_bond is not None
                    and open_bond is not None
                    and pending_bond != open_bond
                ):
                    raise MoleculeError(f"conflicting bond orders for ring {ch}", position=pos)
                add_bond(open_atom, prev, kind, pos)
                pending_bond = None
            else:
                rings[ch] = (prev, pending_bond, pos)
                pending_bond = None
            pos += 1
        else:
            raise MoleculeError(f"unsupported character {ch!r}", position=pos)

    if branch_stack:
        raise MoleculeError("unbalanced parenthesis", position=len(text))
    if rings:
        digit, (_, _, open_pos) = next(iter(rings.items()))
        raise MoleculeError(f"unclosed ring digit {digit}", position=open_pos)
    if pending_bond is not None:
        raise MoleculeError("dangling bond symbol", position=pending_pos)
    if not symbols:
        raise MoleculeError("SMILES contains no atoms")

    # resolve deferred bond types: aromatic between two aromatic atoms, else single
    typed_bonds: list[tuple[int, int, int]] = []
    for a, b, kind in bonds:
        if kind is None:
            kind = BOND_AROMATIC if (aromatic_atom[a] and aromatic_atom[b]) else BOND_SINGLE
        typed_bonds.append((a, b, kind))

    # implicit hydrogens from the valence table; explicit H atoms get none,
    # and atoms already over the table (hypervalent S etc.) are clamped to 0
    order_sum = [0.0] * len(symbols)
    for a, b, kind in typed_bonds:
        order_sum[a] += BOND_ORDER[kind]
        order_sum[b] += BOND_ORDER[kind]
    atoms = [ATOM_INDEX[s] for s in symbols]
    h_index = ATOM_INDEX["H"]
    for heavy, symbol in enumerate(symbols):
        if symbol == "H":
            continue
        fill = max(0, VALENCE[symbol] - math.ceil(order_sum[heavy] - 1e-9))
        for _ in range(fill):
            atoms.append(h_index)
            typed_bonds.append((heavy, len(atoms) - 1, BOND_SINGLE))

    return MoleculeGraph(tuple(atoms), tuple(typed_bonds))


# --------------------------------------------------------------------------
# featurization
# --------------------------------------------------------------------------

def mofo_features(graph: MoleculeGraph) -> FormulaCounts:
    """Occurrence counts of the 12 atom symbols and 4 undirected bond types."""
    counts = [0] * N_FEATURES
    for a in graph.atoms:
        counts[a] += 1
    for _, _, kind in graph.bonds:
        counts[N_ATOM_TYPES + kind] += 1
    return FormulaCounts(tuple(counts))


# --------------------------------------------------------------------------
# molecules file
# --------------------------------------------------------------------------

KINDS = ("FORMULA", "SMILES", "GRAPH")


@dataclass(frozen=True)
class ComponentRecord:
    """One library entry: id, source kind, optional graph, formula counts."""

    component_id: str
    kind: str
    graph: MoleculeGraph | None
    counts: FormulaCounts


def _record_from_payload(component_id: str, kind: str, payload: str) -> ComponentRecord:
    if kind == "FORMULA":
        return ComponentRecord(
            component_id, kind, None, FormulaCounts.from_atom_counts(parse_formula(payload))
        )
    if kind == "SMILES":
        graph = parse_smiles(payload)
    elif kind == "GRAPH":
        graph = parse_graph(payload)
    else:
        raise MoleculeError(f"unknown record kind {kind!r}")
    return ComponentRecord(component_id, kind, graph, mofo_features(graph))


def load_molecules(path) -> dict[str, ComponentRecord]:
    """Load a tab-separated molecules file: ``id<TAB>KIND<TAB>payload``."""
    records: dict[str, ComponentRecord] = {}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise MoleculeError(f"line {lineno}: expected 3 tab-separated fields")
        component_id, kind, payload = (p.strip() for p in parts)
        if not component_id:
            raise MoleculeError(f"line {lineno}: empty component id")
        if component_id in records:
            raise MoleculeError(f"line {lineno}: duplicate component id {component_id!r}")
        try:
            records[component_id] = _record_from_payload(component_id, kind, payload)
        except MoleculeError as exc:
            raise MoleculeError(f"line {lineno} ({component_id}): {exc}") from exc
    return records


def write_molecules(path, records) -> None:
    lines = []
    for rec in records:
        if rec.kind == "GRAPH":
            payload = format_graph_payload(rec.graph)
        elif rec.kind == "SMILES":
            raise MoleculeError("SMILES records cannot be regenerated from a graph; store GRAPH")
        else:
            payload = "".join(
                f"{symbol}{count if count > 1 else ''}"
                for symbol, count in zip(ATOM_SYMBOLS, rec.counts.counts[:N_ATOM_TYPES])
                if count > 0
            )
        lines.append(f"{rec.component_id}\t{rec.kind}\t{payload}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
