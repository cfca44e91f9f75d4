"""Self-training loop: posterior refresh, neighbour rebuild, pool resampling."""

from __future__ import annotations

import dataclasses
import hashlib
import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import __version__
from .autodiff import AdamState, Tape, adam_step, load_tensors, logit, save_tensors
from .encoder import Model, NeighborSet, build_neighbor_sets
from .evaluation import FilterIndex, compute_metrics, rank_triples
from .kg import GraphError, KnowledgeGraph, Vocab, corrupt, rng_stream
from .loss import PosteriorTable, batch_objective

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "loss_triple", "loss_kl", "loss_reg", "valid_mrr", "valid_hits10")


class ConfigError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, last_finite_epoch: int):
        super().__init__(f"non-finite loss in epoch {epoch}; last finite epoch was {last_finite_epoch}")
        self.epoch = epoch
        self.last_finite_epoch = last_finite_epoch


@dataclass
class TrainConfig:
    alpha: float = 0.05
    beta: float = 0.1
    max_epochs: int = 200
    warmup_epochs: int = 50
    batch_size: int = 256
    dim: int = 128
    dropout: float = 0.5
    n_unlabeled: int = 10
    lr: float = 0.01
    top_m: int = 32
    n_layers: int = 1
    lambda_kl: float = 1.0
    lambda_reg: float = 1.0
    seed: int = 0
    candidate_pool_size: int = 0  # 0 means 4 * n_unlabeled
    exploration_fraction: float = 0.2
    valid_sample: int = 2000  # queries scored per epoch

    def __post_init__(self):
        for name in ("max_epochs", "warmup_epochs"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        for name in ("batch_size", "dim", "n_unlabeled", "top_m", "n_layers", "valid_sample"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if not 0.0 <= self.alpha < 1.0 or not 0.0 <= self.beta < 1.0:
            raise ConfigError("alpha and beta must lie in [0, 1)")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if not 0.0 <= self.exploration_fraction <= 1.0:
            raise ConfigError("exploration_fraction must lie in [0, 1]")
        if self.candidate_pool_size and self.candidate_pool_size < self.n_unlabeled:
            raise ConfigError("candidate_pool_size must be >= n_unlabeled")

    @property
    def pool_size(self) -> int:
        return self.candidate_pool_size or 4 * self.n_unlabeled

    def as_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)!r}\n" for f in dataclasses.fields(self))

    def digest(self) -> str:
        return hashlib.sha256(self.as_text().encode()).hexdigest()[:12]

    def replace(self, **changes) -> TrainConfig:
        return dataclasses.replace(self, **changes)


REQUIRED_KEYS = ("alpha", "beta")


def parse_config(text: str, required=REQUIRED_KEYS, base: TrainConfig | None = None) -> TrainConfig:
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    types = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(key, value, types[key])
    missing = [k for k in required if k not in values]
    if missing:
        raise ConfigError(f"missing config key {missing[0]!r}")
    try:
        return dataclasses.replace(base or TrainConfig(), **values)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def _coerce(key: str, value: str, typ):
    try:
        if typ in (int, "int"):
            return int(value)
        return float(value)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r}") from None


def load_config(path, required=REQUIRED_KEYS) -> TrainConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), required)


# -- self-training pieces ---------------------------------------------------


def resample_unlabeled(candidates, posteriors, k: int, exploration_fraction: float, rng) -> np.ndarray:
    """Indices of ``k`` pool candidates: the best by posterior, then random ones.

    ``ceil((1 - exploration_fraction) * k)`` are taken greedily (posterior
    descending, ties by triple id); the rest are drawn uniformly from what is
    left.
    """
    candidates = np.asarray(candidates, dtype=np.int64).reshape(-1, 3)
    posteriors = np.asarray(posteriors, dtype=np.float64)
    if len(candidates) < k:
        raise GraphError(f"candidate pool of {len(candidates)} is smaller than k={k}")
    n_top = min(k, math.ceil(round((1.0 - exploration_fraction) * k, 9)))
    order = np.lexsort((candidates[:, 2], candidates[:, 1], candidates[:, 0], -posteriors))
    top = order[:n_top]
    rest = np.sort(order[n_top:])
    extra = rng.choice(rest, size=k - n_top, replace=False) if k > n_top else np.zeros(0, np.int64)
    return np.concatenate([top, extra]).astype(np.int64)


def refresh_neighbors(graph: KnowledgeGraph, wl_tilde, top_m: int) -> NeighborSet:
    return build_neighbor_sets(graph.triples, graph.n_entities, graph.n_relations, wl_tilde, top_m)


def initial_pool(graph: KnowledgeGraph, k: int, rng) -> np.ndarray:
    return np.stack([corrupt(t, graph.n_entities, k, graph.index, rng) for t in graph.triples])


@dataclass
class TrainState:
    model: Model
    table: PosteriorTable
    pool: np.ndarray  # (n_labeled, K, 3)
    adam: AdamState
    epoch: int = 0
    best_model: Model | None = None
    best_epoch: int = 0
    best_sample_mrr: float = -1.0
    pool_history: list = field(default_factory=list)


@dataclass
class TrainResult:
    best_model: Model
    history: list[dict]
    state: TrainState
    best_valid_mrr: float
    best_epoch: int


def _score_all(model: Model, labeled: np.ndarray, pool: np.ndarray):
    reprs = model.entity_reprs()
    psi1_l, psi0_l = model.score_triples(labeled, reprs)
    psi1_u, psi0_u = model.score_triples(pool.reshape(-1, 3), reprs)
    shape = pool.shape[:2]
    return psi1_l, psi0_l, psi1_u.reshape(shape), psi0_u.reshape(shape)


def _resample_pool(state: TrainState, graph: KnowledgeGraph, config: TrainConfig, rng) -> None:
    k = config.n_unlabeled
    labeled = graph.triples
    cands = []
    for t in labeled:
        try:
            cands.append(corrupt(t, graph.n_entities, config.pool_size, graph.index, rng))
        except GraphError:
            cands.append(corrupt(t, graph.n_entities, k, graph.index, rng))
    reprs = state.model.entity_reprs()
    flat = np.concatenate(cands)
    psi1, psi0 = state.model.score_triples(flat, reprs)
    post = state.table.unlabeled_posterior(psi1, psi0)
    new_pool = np.empty((len(labeled), k, 3), dtype=np.int64)
    new_wu = np.empty((len(labeled), k))
    lo = 0
    for i, c in enumerate(cands):
        p = post[lo : lo + len(c)]
        lo += len(c)
        idx = resample_unlabeled(c, p, k, config.exploration_fraction, rng)
        new_pool[i] = c[idx]
        new_wu[i] = p[idx]
    state.pool = new_pool
    state.table.wu_tilde = new_wu
    state.table.wu_logit = logit(new_wu)
    state.adam.reset("wu")


def _valid_subset(valid: np.ndarray, n_queries: int, rng) -> np.ndarray:
    n_triples = max(1, n_queries // 2)
    if len(valid) <= n_triples:
        return valid
    return valid[np.sort(rng.choice(len(valid), size=n_triples, replace=False))]


def init_state(graph: KnowledgeGraph, config: TrainConfig) -> TrainState:
    if len(graph) == 0:
        raise GraphError("training graph is empty")
    neighbors = refresh_neighbors(graph, np.ones(len(graph)), config.top_m)
    model = Model.initialise(
        graph.n_entities, graph.n_relations, config.dim, neighbors, rng_stream(config.seed, "init"), config.n_layers
    )
    pool = initial_pool(graph, config.n_unlabeled, rng_stream(config.seed, "pool-init"))
    table = PosteriorTable.from_scores(*_score_all(model, graph.triples, pool), config.alpha, config.beta)
    return TrainState(model, table, pool, AdamState(lr=config.lr))


def train(
    graph: KnowledgeGraph,
    valid,
    config: TrainConfig,
    on_epoch: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Run the alternating optimisation and keep the best model by validation MRR.

    Posteriors are refreshed at the end of every epoch.  Neighbour sets and
    the unlabeled pool are rebuilt from them at the start of each epoch after
    ``warmup_epochs``.
    """
    valid = np.asarray(valid, dtype=np.int64).reshape(-1, 3)
    state = init_state(graph, config)
    labeled = graph.triples
    n = len(labeled)
    sampling = rng_stream(config.seed, "sampling")
    dropout_rng = rng_stream(config.seed, "dropout")
    filters = FilterIndex(labeled, valid)
    valid_sample = _valid_subset(valid, config.valid_sample, rng_stream(config.seed, "eval")) if len(valid) else valid
    history: list[dict] = []
    state.best_model = state.model.copy()

    for epoch in range(1, config.max_epochs + 1):
        state.epoch = epoch
        if epoch > config.warmup_epochs:
            state.model.neighbors = refresh_neighbors(graph, state.table.wl_tilde, config.top_m)
            _resample_pool(state, graph, config, sampling)

        sums = {"triple": 0.0, "kl": 0.0, "reg": 0.0}
        perm = sampling.permutation(n)
        try:
            for lo in range(0, n, config.batch_size):
                batch = perm[lo : lo + config.batch_size]
                parts = _train_step(state, labeled[batch], batch, config, dropout_rng)
                for key in sums:
                    sums[key] += parts[key] * len(batch)
        except FloatingPointError as exc:
            raise TrainingDiverged(epoch, epoch - 1) from exc

        state.table.refresh(*_score_all(state.model, labeled, state.pool))

        if len(valid_sample):
            report = compute_metrics(rank_triples(state.model, valid_sample, filters), ks=(10,))
            mrr, h10 = report.mrr, report.hits[10]
        else:
            mrr = h10 = float("nan")
        row = {
            "epoch": epoch,
            "loss_triple": sums["triple"] / n,
            "loss_kl": sums["kl"] / n,
            "loss_reg": sums["reg"] / n,
            "valid_mrr": mrr,
            "valid_hits10": h10,
        }
        row["loss"] = row["loss_triple"] + config.lambda_kl * row["loss_kl"] + config.lambda_reg * row["loss_reg"]
        history.append(row)
        log.debug("epoch %d loss %.5f valid_mrr %.4f", epoch, row["loss"], mrr)
        if on_epoch:
            on_epoch(row)
        if mrr > state.best_sample_mrr:
            state.best_sample_mrr = mrr
            state.best_epoch = epoch
            state.best_model = state.model.copy()

    best = state.best_model
    best_mrr = compute_metrics(rank_triples(best, valid, filters)).mrr if len(valid) else float("nan")
    return TrainResult(best, history, state, best_mrr, state.best_epoch)


def _train_step(state: TrainState, triples, batch, config: TrainConfig, dropout_rng) -> dict[str, float]:
    model, table = state.model, state.table
    b, k = len(batch), config.n_unlabeled
    tape = Tape()
    leaves = model.leaves(tape)
    wl = tape.leaf(table.wl_logit[batch], requires_grad=True, name="wl")
    wu = tape.leaf(table.wu_logit[batch], requires_grad=True, name="wu")
    all_triples = np.concatenate([triples, state.pool[batch].reshape(-1, 3)])
    psi1, psi0 = model.forward(tape, all_triples, training=True, dropout=config.dropout, rng=dropout_rng, leaves=leaves)
    lab = np.arange(b)
    unl = np.arange(b, b + b * k)
    obj = batch_objective(
        tape,
        tape.gather(psi1, lab),
        tape.gather(psi0, lab),
        tape.reshape(tape.gather(psi1, unl), (b, k)),
        tape.reshape(tape.gather(psi0, unl), (b, k)),
        wl,
        wu,
        table.wl_tilde[batch],
        table.wu_tilde[batch],
        config.lambda_kl,
        config.lambda_reg,
    )
    grads = tape.backward(obj["total"], wrt=list(leaves.values()) + [wl, wu])
    named = {name: grads[t] for name, t in leaves.items()}
    g_wl = np.zeros_like(table.wl_logit)
    g_wl[batch] = grads[wl]
    g_wu = np.zeros_like(table.wu_logit)
    g_wu[batch] = grads[wu]
    named["wl"], named["wu"] = g_wl, g_wu
    params = dict(model.params)
    params["wl"], params["wu"] = table.wl_logit, table.wu_logit
    adam_step(params, named, state.adam)
    return {key: float(obj[key].data) for key in ("triple", "kl", "reg")}


# -- persistence ------------------------------------------------------------


def write_history(path, history: list[dict], banner: str = "") -> None:
    with open(path, "w", encoding="utf-8") as fh:
        if banner:
            fh.write(f"# {banner}\n")
        fh.write(",".join(HISTORY_COLUMNS) + "\n")
        for row in history:
            fh.write(",".join(str(row[c]) if c == "epoch" else repr(float(row[c])) for c in HISTORY_COLUMNS) + "\n")


def save_checkpoint(path, model: Model, vocab: Vocab, config: TrainConfig, train_triples=None, wl_tilde=None) -> None:
    """Persist model parameters, neighbour sets, vocabulary and config.

    Layout: see README ("Checkpoint format").
    """
    header = {
        "dim": model.dim,
        "n_entities": model.n_entities,
        "n_relations": model.n_relations,
        "n_layers": model.n_layers,
        "seed": config.seed,
        "config": config.as_text(),
        "version": __version__,
    }
    tensors = {f"param/{k}": v for k, v in model.params.items()}
    nb = model.neighbors
    tensors.update(
        {
            "neighbors/offsets": nb.offsets,
            "neighbors/neighbor": nb.neighbor,
            "neighbors/relation": nb.relation,
            "neighbors/fact": nb.fact,
            "neighbors/top_m": np.array(nb.top_m),
            "vocab/entities": np.array(vocab.entities, dtype=str),
            "vocab/relations": np.array(vocab.relations, dtype=str),
        }
    )
    if train_triples is not None:
        tensors["train/triples"] = np.asarray(train_triples, dtype=np.int64)
    if wl_tilde is not None:
        tensors["train/wl_tilde"] = np.asarray(wl_tilde, dtype=np.float64)
    save_tensors(path, header, tensors)


@dataclass
class Checkpoint:
    model: Model
    vocab: Vocab
    config: TrainConfig
    header: dict
    train_triples: np.ndarray | None
    wl_tilde: np.ndarray | None


def load_checkpoint(path) -> Checkpoint:
    header, t = load_tensors(path)
    params = {k[len("param/") :]: v.astype(np.float64) for k, v in t.items() if k.startswith("param/")}
    nb = NeighborSet(
        t["neighbors/offsets"], t["neighbors/neighbor"], t["neighbors/relation"], t["neighbors/fact"],
        int(t["neighbors/top_m"]),
    )
    vocab = Vocab.from_names(t["vocab/entities"].tolist(), t["vocab/relations"].tolist())
    if vocab.n_entities != header["n_entities"] or vocab.n_relations != header["n_relations"]:
        raise ValueError(f"{path}: vocabulary does not match header")
    config = parse_config(header["config"], required=())
    return Checkpoint(
        Model(params, nb, header["n_layers"]), vocab, config, header, t.get("train/triples"), t.get("train/wl_tilde")
    )
