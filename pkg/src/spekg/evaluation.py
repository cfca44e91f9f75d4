"""Filtered link-prediction metrics and posterior-based noise detection."""

from __future__ import annotations

import csv
import io
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.stats import rankdata

from .autodiff import sigmoid
from .loss import posterior_labeled


@dataclass(frozen=True)
class RankQuery:
    head: int
    relation: int
    tail: int
    side: str  # the masked position

    def __post_init__(self):
        if self.side not in ("head", "tail"):
            raise ValueError(f"side must be 'head' or 'tail', got {self.side!r}")

    @property
    def answer(self) -> int:
        return self.tail if self.side == "tail" else self.head

    @property
    def anchor(self) -> int:
        return self.head if self.side == "tail" else self.tail


class FilterIndex:
    """Known-true completions per (head, relation) and (relation, tail)."""

    def __init__(self, *triple_sets):
        self.tails: dict[tuple[int, int], set[int]] = defaultdict(set)
        self.heads: dict[tuple[int, int], set[int]] = defaultdict(set)
        for triples in triple_sets:
            for h, r, t in np.asarray(triples, dtype=np.int64).reshape(-1, 3).tolist():
                self.tails[(h, r)].add(t)
                self.heads[(r, t)].add(h)

    def known(self, q: RankQuery) -> set[int]:
        if q.side == "tail":
            return self.tails.get((q.head, q.relation), set())
        return self.heads.get((q.relation, q.tail), set())


def filtered_rank(q: RankQuery, scorer: Callable[[RankQuery], np.ndarray], filter_index, pessimistic=False) -> int:
    """1 + number of unfiltered candidates scoring strictly above the answer.

    ``scorer(q)`` returns one score per entity.  Known-true completions other
    than the answer are ignored.  With ``pessimistic`` ties also count.
    """
    if not isinstance(filter_index, FilterIndex):
        filter_index = FilterIndex(list(filter_index))
    scores = np.asarray(scorer(q), dtype=np.float64)
    target = scores[q.answer]
    keep = np.ones(len(scores), dtype=bool)
    known = filter_index.known(q)
    if known:
        keep[list(known)] = False
    keep[q.answer] = False
    others = scores[keep]
    rank = 1 + int(np.count_nonzero(others > target))
    if pessimistic:
        rank += int(np.count_nonzero(others == target))
    return rank


@dataclass
class MetricsReport:
    mrr: float
    hits: dict[int, float]
    count: int
    extra: dict[str, float] = field(default_factory=dict)

    def as_row(self) -> dict[str, float]:
        row = {"mrr": self.mrr}
        row.update({f"hits@{k}": v for k, v in sorted(self.hits.items())})
        row["queries"] = self.count
        row.update(self.extra)
        return row

    def to_csv(self) -> str:
        buf = io.StringIO()
        row = self.as_row()
        w = csv.DictWriter(buf, fieldnames=list(row), lineterminator="\n")
        w.writeheader()
        w.writerow(row)
        return buf.getvalue()

    def to_table(self) -> str:
        row = self.as_row()
        width = max(len(k) for k in row)
        lines = []
        for k, v in row.items():
            lines.append(f"{k:<{width}}  {v:.6f}" if isinstance(v, float) else f"{k:<{width}}  {v}")
        return "\n".join(lines)


def compute_metrics(ranks, ks=(1, 3, 10)) -> MetricsReport:
    ranks = np.asarray(ranks, dtype=np.float64)
    if ranks.size == 0:
        raise ValueError("compute_metrics: no ranks")
    return MetricsReport(
        mrr=float(np.mean(1.0 / ranks)),
        hits={int(k): float(np.mean(ranks <= k)) for k in ks},
        count=int(ranks.size),
    )


def queries_for(triples, sides=("tail", "head")) -> list[RankQuery]:
    out = []
    for h, r, t in np.asarray(triples, dtype=np.int64).reshape(-1, 3).tolist():
        for side in sides:
            out.append(RankQuery(h, r, t, side))
    return out


def model_scorer(model, reprs=None, mode: str = "pos", beta: float = 0.5):
    """Callable scoring every candidate entity of a query with ``model``.

    ``mode="posterior"`` ranks by the collected-triple posterior instead of
    the positive-head score.
    """
    reprs = model.entity_reprs() if reprs is None else reprs

    def scorer(q: RankQuery) -> np.ndarray:
        psi1 = model.score_candidates(q.anchor, q.relation, q.side, reprs, "pos")
        if mode == "pos":
            return psi1
        if mode == "posterior":
            psi0 = model.score_candidates(q.anchor, q.relation, q.side, reprs, "neg")
            return posterior_labeled(sigmoid(psi1), sigmoid(psi0), beta)
        raise ValueError(f"unknown score mode {mode!r}")

    return scorer


def rank_triples(model, triples, filter_index: FilterIndex, pessimistic=False, mode="pos", beta=0.5):
    scorer = model_scorer(model, mode=mode, beta=beta)
    return np.asarray([filtered_rank(q, scorer, filter_index, pessimistic) for q in queries_for(triples)], dtype=np.int64)


def evaluate(model, triples, filter_index: FilterIndex, ks=(1, 3, 10), **kw) -> MetricsReport:
    return compute_metrics(rank_triples(model, triples, filter_index, **kw), ks)


def auc(positive_scores, negative_scores) -> float:
    """P(positive > negative) with ties counted half (Mann-Whitney)."""
    pos = np.asarray(positive_scores, dtype=np.float64)
    neg = np.asarray(negative_scores, dtype=np.float64)
    if pos.size == 0 or neg.size == 0:
        return float("nan")
    ranks = rankdata(np.concatenate([pos, neg]))
    u = ranks[: pos.size].sum() - pos.size * (pos.size + 1) / 2.0
    return float(u / (pos.size * neg.size))


@dataclass
class DetectionReport:
    applicable: bool
    auc: float = float("nan")
    precision_at_n: float = float("nan")
    recall_at_n: float = float("nan")
    n: int = 10
    n_added: int = 0
    n_removed: int = 0

    def as_row(self) -> dict[str, float]:
        return {
            "fp_auc": self.auc,
            f"fp_precision@{self.n}": self.precision_at_n,
            f"fn_recall@{self.n}": self.recall_at_n,
        }


def detection_report(
    posterior_labeled_values, labeled_triples, flip_log, model=None, filter_index=None, n: int = 10
) -> DetectionReport:
    """Score the posteriors against the ground-truth perturbation record.

    False-positive detection ranks labeled triples by posterior (lowest is
    most suspicious): AUC separating genuine triples from added ones, and the
    share of added triples among the ``n`` lowest.  False-negative recovery is
    the share of removed triples that the model ranks within the top ``n`` on
    either the head or the tail query.
    """
    if flip_log is None or len(flip_log) == 0:
        return DetectionReport(applicable=False, n=n)
    w = np.asarray(posterior_labeled_values, dtype=np.float64)
    labeled = np.asarray(labeled_triples, dtype=np.int64).reshape(-1, 3)
    added = {tuple(row) for row in flip_log.added.tolist()}
    is_added = np.array([tuple(row) in added for row in labeled.tolist()], dtype=bool)
    report = DetectionReport(applicable=True, n=n, n_added=int(is_added.sum()), n_removed=len(flip_log.removed))
    if is_added.any() and (~is_added).any():
        report.auc = auc(w[~is_added], w[is_added])
        order = np.lexsort((np.arange(len(w)), w))[:n]
        report.precision_at_n = float(is_added[order].mean())
    if model is not None and len(flip_log.removed):
        index = filter_index if filter_index is not None else FilterIndex(labeled)
        scorer = model_scorer(model)
        hit = []
        for h, r, t in flip_log.removed.tolist():
            ranks = [filtered_rank(RankQuery(h, r, t, s), scorer, index) for s in ("tail", "head")]
            hit.append(min(ranks) <= n)
        report.recall_at_n = float(np.mean(hit))
    return report
