"""Posterior-aware attention encoder and the two score heads.

Relation ids ``[0, R)`` are the graph's relations; ``[R, 2R)`` are their
inverses, used only on the attention side so that tail entities also see
their heads.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tape, Tensor, init_uniform

HEADS = ("pos", "neg")


@dataclass
class NeighborSet:
    """CSR layout: neighbours of entity ``e`` live in ``offsets[e]:offsets[e+1]``."""

    offsets: np.ndarray
    neighbor: np.ndarray
    relation: np.ndarray
    fact: np.ndarray
    top_m: int

    @property
    def n_entities(self) -> int:
        return len(self.offsets) - 1

    def of(self, e: int) -> list[tuple[int, int]]:
        lo, hi = self.offsets[e], self.offsets[e + 1]
        return list(zip(self.neighbor[lo:hi].tolist(), self.relation[lo:hi].tolist()))

    def degree(self) -> np.ndarray:
        return np.diff(self.offsets)

    def centers(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_entities), self.degree())

    def same_as(self, other: NeighborSet) -> bool:
        return all(
            np.array_equal(getattr(self, k), getattr(other, k)) for k in ("offsets", "neighbor", "relation", "fact")
        )


def build_neighbor_sets(triples, n_entities: int, n_relations: int, posterior, top_m: int) -> NeighborSet:
    """Keep, per entity, the ``top_m`` incident facts with highest posterior.

    Ties are broken by fact index (ascending).  A fact (h, r, t) gives ``h``
    the neighbour (t, r) and ``t`` the neighbour (h, r + n_relations).
    """
    triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    posterior = np.asarray(posterior, dtype=np.float64)
    if posterior.shape != (len(triples),):
        raise ValueError(f"need one posterior per fact: {posterior.shape} vs {len(triples)} facts")
    n = len(triples)
    fact = np.concatenate([np.arange(n), np.arange(n)])
    center = np.concatenate([triples[:, 0], triples[:, 2]])
    neighbor = np.concatenate([triples[:, 2], triples[:, 0]])
    relation = np.concatenate([triples[:, 1], triples[:, 1] + n_relations])
    score = posterior[fact]
    # primary key center, then posterior descending, then fact id, then direction
    direction = np.concatenate([np.zeros(n, np.int64), np.ones(n, np.int64)])
    order = np.lexsort((direction, fact, -score, center))
    center, neighbor, relation, fact = center[order], neighbor[order], relation[order], fact[order]
    counts = np.bincount(center, minlength=n_entities)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    rank = np.arange(len(center)) - starts[center]
    keep = rank < top_m
    kept_counts = np.minimum(counts, top_m)
    offsets = np.concatenate([[0], np.cumsum(kept_counts)]).astype(np.int64)
    return NeighborSet(offsets, neighbor[keep], relation[keep], fact[keep], top_m)


def init_params(n_entities: int, n_relations: int, dim: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    p = {
        "entity": init_uniform(rng, (n_entities, dim), dim),
        "relation": init_uniform(rng, (2 * n_relations, dim), dim),
        "attention": init_uniform(rng, (3 * dim,), 3 * dim),
        "transform": init_uniform(rng, (dim, dim), dim),
    }
    for head in HEADS:
        p[f"{head}.w1"] = init_uniform(rng, (3 * dim, dim), 3 * dim)
        p[f"{head}.b1"] = np.zeros(dim)
        p[f"{head}.w2"] = init_uniform(rng, (dim,), dim)
        p[f"{head}.b2"] = np.zeros(())
    return p


def receptive_field(neighbors: NeighborSet, targets: np.ndarray, n_layers: int) -> list[np.ndarray]:
    """Entity sets needed at each layer, ``fields[l]`` feeding layer ``l + 1``."""
    fields = [np.unique(targets)]
    for _ in range(n_layers):
        cur = fields[0]
        lo, hi = neighbors.offsets[cur], neighbors.offsets[cur + 1]
        nbrs = [neighbors.neighbor[a:b] for a, b in zip(lo, hi)]
        fields.insert(0, np.unique(np.concatenate([cur] + nbrs)))
    return fields


def encode_entities(
    tape: Tape,
    params: dict[str, Tensor],
    neighbors: NeighborSet,
    n_layers: int = 1,
    dropout: float = 0.0,
    training: bool = False,
    rng: np.random.Generator | None = None,
    targets=None,
    return_attention: bool = False,
):
    """Entity representations after ``n_layers`` rounds of attentive aggregation.

    Each round computes, for entity ``e`` and kept neighbour ``(e_k, r_k)``,
    ``q = a . [h_e | h_ek | h_rk]``, normalises ``q`` with a softmax over the
    neighbourhood and sets ``h_e <- h_e + tanh(sum_k gamma_k h_ek M)``.

    Returns ``(reprs, row)`` where ``reprs[row[e]]`` is the representation of
    entity ``e``; ``row`` is -1 for entities outside ``targets``.
    """
    n_ent = neighbors.n_entities
    targets = np.arange(n_ent) if targets is None else np.asarray(targets, dtype=np.int64)
    fields = receptive_field(neighbors, targets, n_layers)
    row = np.full(n_ent, -1, dtype=np.int64)
    row[fields[0]] = np.arange(len(fields[0]))
    h = tape.gather(params["entity"], fields[0])
    attention = []
    for layer in range(1, n_layers + 1):
        cur = fields[layer]
        lo, hi = neighbors.offsets[cur], neighbors.offsets[cur + 1]
        counts = hi - lo
        edge_pos = np.concatenate([np.arange(a, b) for a, b in zip(lo, hi)]) if counts.sum() else np.zeros(0, np.int64)
        seg = np.repeat(np.arange(len(cur)), counts)
        self_rows = row[cur]
        if len(edge_pos):
            nbr_rows = row[neighbors.neighbor[edge_pos]]
            h_self = tape.gather(h, self_rows[seg])
            h_nbr = tape.gather(h, nbr_rows)
            h_rel = tape.gather(params["relation"], neighbors.relation[edge_pos])
            q = tape.matmul(tape.concat([h_self, h_nbr, h_rel]), params["attention"])
            gamma = tape.softmax(q, segments=seg, n_segments=len(cur))
            msg = tape.mul(tape.matmul(h_nbr, params["transform"]), tape.reshape(gamma, (-1, 1)))
            agg = tape.segment_sum(msg, seg, len(cur))
            attention.append((cur, seg, edge_pos, gamma.data.copy()))
            update = tape.dropout(tape.tanh(agg), dropout, rng, training)
            h = tape.add(tape.gather(h, self_rows), update)
        else:
            h = tape.gather(h, self_rows)
        row = np.full(n_ent, -1, dtype=np.int64)
        row[cur] = np.arange(len(cur))
    if return_attention:
        return h, row, attention
    return h, row


def head_forward(tape: Tape, params: dict[str, Tensor], head: str, x: Tensor) -> Tensor:
    """One-hidden-layer tanh MLP mapping rows of ``x`` (n, 3d) to scores (n,)."""
    hidden = tape.tanh(tape.add(tape.matmul(x, params[f"{head}.w1"]), params[f"{head}.b1"]))
    return tape.add(tape.matmul(hidden, params[f"{head}.w2"]), params[f"{head}.b2"])


def score(tape: Tape, params: dict[str, Tensor], triples, reprs: Tensor, row: np.ndarray):
    """Positive- and negative-head scores ``(psi1, psi0)`` for each triple."""
    triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    heads = row[triples[:, 0]]
    tails = row[triples[:, 2]]
    if (heads < 0).any() or (tails < 0).any():
        raise ValueError("score: a triple references an entity that was not encoded")
    x = tape.concat(
        [tape.gather(reprs, heads), tape.gather(params["relation"], triples[:, 1]), tape.gather(reprs, tails)]
    )
    return head_forward(tape, params, "pos", x), head_forward(tape, params, "neg", x)


class Model:
    """Parameters plus the neighbour sets the encoder currently reads."""

    def __init__(self, params: dict[str, np.ndarray], neighbors: NeighborSet, n_layers: int = 1):
        self.params = params
        self.neighbors = neighbors
        self.n_layers = n_layers

    @classmethod
    def initialise(cls, n_entities, n_relations, dim, neighbors, rng, n_layers=1) -> Model:
        return cls(init_params(n_entities, n_relations, dim, rng), neighbors, n_layers)

    @property
    def dim(self) -> int:
        return self.params["entity"].shape[1]

    @property
    def n_entities(self) -> int:
        return self.params["entity"].shape[0]

    @property
    def n_relations(self) -> int:
        return self.params["relation"].shape[0] // 2

    def copy(self) -> Model:
        return Model({k: v.copy() for k, v in self.params.items()}, self.neighbors, self.n_layers)

    def leaves(self, tape: Tape) -> dict[str, Tensor]:
        return {k: tape.leaf(v, requires_grad=True, name=k) for k, v in self.params.items()}

    def forward(self, tape: Tape, triples, training=False, dropout=0.0, rng=None, leaves=None):
        """Encode the entities touched by ``triples`` and score them."""
        triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
        leaves = leaves if leaves is not None else self.leaves(tape)
        targets = np.unique(np.concatenate([triples[:, 0], triples[:, 2]]))
        reprs, row = encode_entities(
            tape, leaves, self.neighbors, self.n_layers, dropout, training, rng, targets=targets
        )
        return score(tape, leaves, triples, reprs, row)

    def entity_reprs(self) -> np.ndarray:
        tape = Tape(grad_enabled=False)
        leaves = {k: tape.leaf(v) for k, v in self.params.items()}
        reprs, _ = encode_entities(tape, leaves, self.neighbors, self.n_layers)
        return reprs.data

    def score_triples(self, triples, reprs: np.ndarray | None = None, chunk: int = 65536):
        """Evaluation-mode ``(psi1, psi0)`` as numpy arrays."""
        triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
        reprs = self.entity_reprs() if reprs is None else reprs
        out1, out0 = [], []
        for lo in range(0, len(triples), chunk):
            t = triples[lo : lo + chunk]
            x = np.concatenate([reprs[t[:, 0]], self.params["relation"][t[:, 1]], reprs[t[:, 2]]], axis=1)
            out1.append(self._head_np("pos", x))
            out0.append(self._head_np("neg", x))
        if not out1:
            return np.zeros(0), np.zeros(0)
        return np.concatenate(out1), np.concatenate(out0)

    def _head_np(self, head: str, x: np.ndarray) -> np.ndarray:
        p = self.params
        return np.tanh(x @ p[f"{head}.w1"] + p[f"{head}.b1"]) @ p[f"{head}.w2"] + p[f"{head}.b2"]

    def score_candidates(self, anchor: int, relation: int, side: str, reprs: np.ndarray, head: str = "pos"):
        """Scores of every entity placed at ``side`` ("head" or "tail") of the query."""
        p = self.params
        d = self.dim
        w1 = p[f"{head}.w1"]
        fixed = p["relation"][relation] @ w1[d : 2 * d] + p[f"{head}.b1"]
        if side == "tail":
            pre = reprs[anchor] @ w1[:d] + fixed + reprs @ w1[2 * d :]
        elif side == "head":
            pre = reprs @ w1[:d] + fixed + reprs[anchor] @ w1[2 * d :]
        else:
            raise ValueError(f"side must be 'head' or 'tail', got {side!r}")
        return np.tanh(pre) @ p[f"{head}.w2"] + p[f"{head}.b2"]

