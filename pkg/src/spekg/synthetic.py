"""Block-structured synthetic knowledge graphs for tests and demos."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kg import FlipLog, KnowledgeGraph, Vocab, perturb, rng_stream, split

# (relation, source blocks) pairs; every entity of a source block links to
# every entity of its target block.
DEFAULT_PATTERN = ((0, range(0, 6)), (1, range(3, 8)), (2, range(5, 10)))


def block_triples(n_blocks: int = 10, block_size: int = 5, pattern=DEFAULT_PATTERN) -> np.ndarray:
    """All planted triples; relation ``r`` maps block ``b`` to ``(3b + r + 1) % n_blocks``."""
    rows = []
    for r, sources in pattern:
        for b in sources:
            target = (3 * b + r + 1) % n_blocks
            for i in range(block_size):
                for j in range(block_size):
                    rows.append((b * block_size + i, r, target * block_size + j))
    return np.asarray(rows, dtype=np.int64)


@dataclass
class Fixture:
    planted: KnowledgeGraph
    perturbed: KnowledgeGraph
    train: KnowledgeGraph
    valid: KnowledgeGraph
    test: np.ndarray
    flips: FlipLog

    @property
    def vocab(self) -> Vocab:
        return self.planted.vocab

    def filter_triples(self) -> list[np.ndarray]:
        """Everything known true or observed; used for filtered test ranking."""
        return [self.planted.triples, self.train.triples, self.valid.triples]


def make_fixture(
    seed: int = 0, ptb_rate: float = 0.3, removal_fraction: float = 0.9, test_fraction: float = 0.1
) -> Fixture:
    """Planted graph -> clean test hold-out -> perturbation -> 7:3 train/valid split."""
    rows = block_triples()
    n_rel = int(rows[:, 1].max()) + 1
    n_ent = int(rows[:, [0, 2]].max()) + 1
    vocab = Vocab.anonymous(n_ent, n_rel)
    planted = KnowledgeGraph(rows, vocab)
    rng = rng_stream(seed, "fixture")
    order = rng.permutation(len(planted))
    n_test = int(round(test_fraction * len(planted)))
    test = planted.triples[np.sort(order[:n_test])]
    observed = planted.subset(np.sort(order[n_test:]))
    perturbed, flips = perturb(observed, ptb_rate, removal_fraction, seed=rng_stream(seed, "perturb"))
    train, valid = split(perturbed, 0.7, seed=rng_stream(seed, "split"))
    return Fixture(planted, perturbed, train, valid, test, flips)
