"""Triple storage, controlled perturbation, splitting and corruption sampling."""

from __future__ import annotations

import logging
import math
import zlib
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

REMOVED = "removed"
ADDED = "added"


class GraphError(ValueError):
    pass


def rng_stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for the named sub-stream of ``seed``."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


def _as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5 + 1e-12))


@dataclass
class Vocab:
    entities: list[str] = field(default_factory=list)
    relations: list[str] = field(default_factory=list)
    entity_id: dict[str, int] = field(default_factory=dict)
    relation_id: dict[str, int] = field(default_factory=dict)

    @classmethod
    def from_names(cls, entities, relations) -> Vocab:
        v = cls()
        for e in entities:
            v.add_entity(e)
        for r in relations:
            v.add_relation(r)
        return v

    @classmethod
    def anonymous(cls, n_entities: int, n_relations: int) -> Vocab:
        return cls.from_names([f"e{i}" for i in range(n_entities)], [f"r{i}" for i in range(n_relations)])

    @property
    def n_entities(self) -> int:
        return len(self.entities)

    @property
    def n_relations(self) -> int:
        return len(self.relations)

    def add_entity(self, name: str) -> int:
        if name not in self.entity_id:
            self.entity_id[name] = len(self.entities)
            self.entities.append(name)
        return self.entity_id[name]

    def add_relation(self, name: str) -> int:
        if name not in self.relation_id:
            self.relation_id[name] = len(self.relations)
            self.relations.append(name)
        return self.relation_id[name]

    def name_triple(self, triple) -> tuple[str, str, str]:
        h, r, t = (int(x) for x in triple)
        return self.entities[h], self.relations[r], self.entities[t]


class KnowledgeGraph:
    """An ordered, duplicate-free set of integer triples plus its vocabulary.

    Parameters
    ----------
    triples: array-like of shape (n, 3)
        Rows of (head, relation, tail) ids.
    vocab: Vocab
        Shared vocabulary; ids must lie within its bounds.
    """

    def __init__(self, triples, vocab: Vocab):
        arr = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
        self.vocab = vocab
        self.index: set[tuple[int, int, int]] = set()
        keep = []
        for i, row in enumerate(arr):
            key = (int(row[0]), int(row[1]), int(row[2]))
            if key in self.index:
                continue
            self.index.add(key)
            keep.append(i)
        self.n_duplicates = len(arr) - len(keep)
        self.triples = arr[keep] if len(keep) != len(arr) else arr.copy()
        self.triples.setflags(write=False)
        if len(self.triples):
            h, r, t = self.triples.T
            if (
                min(h.min(), t.min(), r.min()) < 0
                or max(h.max(), t.max()) >= vocab.n_entities
                or r.max() >= vocab.n_relations
            ):
                raise GraphError("triple ids exceed vocabulary bounds")

    def __len__(self) -> int:
        return len(self.triples)

    def __contains__(self, triple) -> bool:
        return tuple(int(x) for x in triple) in self.index

    @property
    def n_entities(self) -> int:
        return self.vocab.n_entities

    @property
    def n_relations(self) -> int:
        return self.vocab.n_relations

    def subset(self, rows) -> KnowledgeGraph:
        return KnowledgeGraph(self.triples[np.asarray(rows, dtype=np.int64)], self.vocab)


def parse_triples(path, vocab: Vocab | None = None, grow: bool = True):
    """Read a TSV triple file into id rows.

    Returns ``(rows, vocab, n_unknown)``.  With ``grow=False`` triples naming
    entities or relations missing from ``vocab`` are skipped and counted.
    Lines starting with ``#`` are comments.
    """
    vocab = vocab if vocab is not None else Vocab()
    rows = []
    n_unknown = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3 or not all(p.strip() for p in parts):
                raise GraphError(f"{path}:{lineno}: expected head<TAB>relation<TAB>tail, got {line!r}")
            h, r, t = (p.strip() for p in parts)
            if grow:
                rows.append((vocab.add_entity(h), vocab.add_relation(r), vocab.add_entity(t)))
            elif h in vocab.entity_id and t in vocab.entity_id and r in vocab.relation_id:
                rows.append((vocab.entity_id[h], vocab.relation_id[r], vocab.entity_id[t]))
            else:
                n_unknown += 1
    return np.asarray(rows, dtype=np.int64).reshape(-1, 3), vocab, n_unknown


def load_triples(path, vocab: Vocab | None = None) -> KnowledgeGraph:
    """Load a TSV file; the vocabulary grows in first-appearance order."""
    rows, vocab, _ = parse_triples(path, vocab, grow=True)
    if len(rows) == 0:
        raise GraphError(f"{path}: no triples")
    graph = KnowledgeGraph(rows, vocab)
    if graph.n_duplicates:
        log.info("%s: dropped %d duplicate triples", path, graph.n_duplicates)
    return graph


def write_triples(path, triples, vocab: Vocab, header: str | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        if header:
            fh.write(f"# {header}\n")
        for row in triples:
            fh.write("\t".join(vocab.name_triple(row)) + "\n")


@dataclass
class FlipLog:
    removed: np.ndarray
    added: np.ndarray
    seed: int
    ptb_rate: float

    def __len__(self) -> int:
        return len(self.removed) + len(self.added)

    @property
    def edits(self) -> list[tuple[tuple[int, int, int], str]]:
        out = [(tuple(int(x) for x in row), REMOVED) for row in self.removed]
        out += [(tuple(int(x) for x in row), ADDED) for row in self.added]
        return out

    def revert(self, graph: KnowledgeGraph) -> KnowledgeGraph:
        """Undo the recorded edits on a perturbed graph."""
        added = {tuple(int(x) for x in row) for row in self.added}
        keep = [row for row in graph.triples if tuple(int(x) for x in row) not in added]
        rows = np.concatenate([np.asarray(keep, dtype=np.int64).reshape(-1, 3), self.removed.reshape(-1, 3)])
        return KnowledgeGraph(rows, graph.vocab)

    def write(self, path, vocab: Vocab, header: str = "") -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"# seed={self.seed} ptb_rate={self.ptb_rate}{' ' + header if header else ''}\n")
            for triple, edit in self.edits:
                fh.write("\t".join(vocab.name_triple(triple)) + f"\t{edit}\n")

    @classmethod
    def read(cls, path, vocab: Vocab) -> FlipLog:
        seed, ptb = 0, 0.0
        removed, added = [], []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.rstrip("\n")
                if line.startswith("#"):
                    for tok in line[1:].split():
                        if tok.startswith("seed="):
                            seed = int(tok[5:])
                        elif tok.startswith("ptb_rate="):
                            ptb = float(tok[9:])
                    continue
                if not line.strip():
                    continue
                parts = line.split("\t")
                if len(parts) != 4 or parts[3] not in (REMOVED, ADDED):
                    raise GraphError(f"{path}:{lineno}: malformed flip log line {line!r}")
                h, r, t, edit = parts
                try:
                    row = (vocab.entity_id[h], vocab.relation_id[r], vocab.entity_id[t])
                except KeyError:
                    continue
                (removed if edit == REMOVED else added).append(row)
        return cls(
            np.asarray(removed, dtype=np.int64).reshape(-1, 3),
            np.asarray(added, dtype=np.int64).reshape(-1, 3),
            seed,
            ptb,
        )


def perturb(graph: KnowledgeGraph, ptb_rate: float, removal_fraction: float = 0.9, seed: int = 0):
    """Flip a fraction of links: remove true ones and add random absent ones.

    ``round(ptb_rate * |G|)`` links are modified; ``round(removal_fraction *
    n_mod)`` of them are removals and the rest are additions of triples absent
    from the original graph.  Returns ``(perturbed_graph, flip_log)``.
    """
    if not 0.0 <= ptb_rate < 1.0:
        raise GraphError(f"ptb_rate must lie in [0, 1), got {ptb_rate}")
    if not 0.0 <= removal_fraction <= 1.0:
        raise GraphError(f"removal_fraction must lie in [0, 1], got {removal_fraction}")
    if len(graph) == 0:
        raise GraphError("cannot perturb an empty graph")
    rng = _as_rng(seed)
    n_mod = round_half_up(ptb_rate * len(graph))
    n_remove = round_half_up(removal_fraction * n_mod)
    n_add = n_mod - n_remove

    relations = np.unique(graph.triples[:, 1])
    n_ent = graph.n_entities
    capacity = len(relations) * n_ent * n_ent - len(graph)
    if n_add > capacity:
        raise GraphError(f"cannot add {n_add} absent triples; only {capacity} exist")

    removed_rows = np.sort(rng.choice(len(graph), size=n_remove, replace=False))
    added: list[tuple[int, int, int]] = []
    seen = set(graph.index)
    while len(added) < n_add:
        key = (int(rng.integers(n_ent)), int(relations[rng.integers(len(relations))]), int(rng.integers(n_ent)))
        if key in seen:
            continue
        seen.add(key)
        added.append(key)

    mask = np.ones(len(graph), dtype=bool)
    mask[removed_rows] = False
    added_arr = np.asarray(added, dtype=np.int64).reshape(-1, 3)
    new = KnowledgeGraph(np.concatenate([graph.triples[mask], added_arr]), graph.vocab)
    flips = FlipLog(graph.triples[removed_rows].copy(), added_arr, seed if isinstance(seed, int) else -1, ptb_rate)
    return new, flips


def split(graph: KnowledgeGraph, train_fraction: float = 0.7, seed: int = 0):
    """Shuffle and partition into ``(train, valid)`` graphs."""
    if not 0.0 < train_fraction < 1.0:
        raise GraphError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    rng = _as_rng(seed)
    order = rng.permutation(len(graph))
    n_train = round_half_up(train_fraction * len(graph))
    return graph.subset(np.sort(order[:n_train])), graph.subset(np.sort(order[n_train:]))


def corrupt(triple, n_entities: int, k: int, index: set, seed=None) -> np.ndarray:
    """Sample ``k`` distinct corruptions of ``triple`` absent from ``index``.

    Slots alternate tail, head, tail, ...; a side that runs out of valid
    replacements hands its slots to the other side.  Returns a (k, 3) array.
    """
    if k < 1:
        raise GraphError(f"k must be >= 1, got {k}")
    rng = _as_rng(seed)
    h, r, t = (int(x) for x in triple)
    own = (h, r, t)

    def valid(e: int, side: int) -> tuple[int, int, int] | None:
        cand = (h, r, e) if side == 0 else (e, r, t)
        return None if cand == own or cand in index else cand

    chosen: list[tuple[int, int, int]] = []
    taken: set = set()
    exhausted = [False, False]
    pools: list[list | None] = [None, None]

    def draw(side: int) -> tuple[int, int, int] | None:
        if pools[side] is None:
            for _ in range(32):
                cand = valid(int(rng.integers(n_entities)), side)
                if cand is not None and cand not in taken:
                    return cand
            # dense neighbourhood: fall back to an explicit shuffled list
            order = rng.permutation(n_entities)
            pools[side] = [c for c in (valid(int(e), side) for e in order) if c is not None]
        pool = pools[side]
        while pool:
            cand = pool.pop()
            if cand not in taken:
                return cand
        return None

    side = 0
    while len(chosen) < k:
        if exhausted[0] and exhausted[1]:
            raise GraphError(f"triple {own}: only {len(chosen)} absent corruptions available, need {k}")
        if exhausted[side]:
            side = 1 - side
            continue
        cand = draw(side)
        if cand is None:
            exhausted[side] = True
        else:
            chosen.append(cand)
            taken.add(cand)
        side = 1 - side
    return np.asarray(chosen, dtype=np.int64)
