"""Command-line driver: ``spekg <command> ...``.

Every command that writes files takes ``--out DIR``; the ``SPEKG_OUT``
environment variable, when set, replaces it.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import itertools
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .evaluation import FilterIndex, RankQuery, compute_metrics, detection_report, model_scorer, rank_triples
from .kg import FlipLog, GraphError, load_triples, parse_triples, perturb, rng_stream, split, write_triples
from .loss import collection_prob, posterior_labeled
from .training import (
    ConfigError,
    TrainConfig,
    TrainingDiverged,
    load_checkpoint,
    load_config,
    parse_config,
    save_checkpoint,
    train,
    write_history,
)

log = logging.getLogger("spekg")

OUT_ENV = "SPEKG_OUT"


class CommandError(RuntimeError):
    """A failure that should end the command with a message and exit code 1."""


def banner(seed: int, digest: str) -> str:
    return f"spekg {__version__} seed={seed} config={digest}"


def _digest_of(**values) -> str:
    text = "".join(f"{k} = {v!r}\n" for k, v in sorted(values.items()))
    return hashlib.sha256(text.encode()).hexdigest()[:12]


def _out_dir(args) -> Path:
    override = os.environ.get(OUT_ENV)
    if override:
        log.info("output directory %s taken from %s (was %s)", override, OUT_ENV, args.out)
        path = Path(override)
    elif args.out is None:
        raise CommandError("--out is required")
    else:
        path = Path(args.out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _parse_ks(text: str) -> tuple[int, ...]:
    try:
        ks = tuple(int(k) for k in text.split(",") if k.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"--ks expects comma-separated integers, got {text!r}") from None
    if not ks or min(ks) < 1:
        raise argparse.ArgumentTypeError("--ks needs at least one positive integer")
    return ks


def _parse_seeds(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"--seeds expects comma-separated integers, got {text!r}") from None


def _write_csv(path: Path, rows: list[dict], header: str) -> None:
    fields: list[str] = []
    for row in rows:
        fields.extend(k for k in row if k not in fields)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(f"# {header}\n")
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def read_csv(path) -> list[dict]:
    """Rows of a CSV written by this tool, skipping ``#`` header comments."""
    with open(path, encoding="utf-8") as fh:
        lines = [line for line in fh if not line.startswith("#")]
    return list(csv.DictReader(lines))


# -- perturb / split --------------------------------------------------------


def cmd_perturb(args) -> int:
    graph = load_triples(args.input)
    digest = _digest_of(ptb_rate=args.ptb_rate, removal_fraction=args.removal_fraction)
    head = banner(args.seed, digest)
    log.info(head)
    perturbed, flips = perturb(graph, args.ptb_rate, args.removal_fraction, seed=rng_stream(args.seed, "perturb"))
    flips.seed = args.seed
    out = _out_dir(args)
    write_triples(out / "perturbed.tsv", perturbed.triples, graph.vocab, header=head)
    fliplog = Path(args.fliplog) if args.fliplog else out / "fliplog.tsv"
    flips.write(fliplog, graph.vocab, header=head)
    print(f"removed={len(flips.removed)} added={len(flips.added)}")
    return 0


def cmd_split(args) -> int:
    graph = load_triples(args.input)
    head = banner(args.seed, _digest_of(train_fraction=args.train_fraction))
    log.info(head)
    tr, va = split(graph, args.train_fraction, seed=rng_stream(args.seed, "split"))
    out = _out_dir(args)
    write_triples(out / "train.tsv", tr.triples, graph.vocab, header=head)
    write_triples(out / "valid.tsv", va.triples, graph.vocab, header=head)
    print(f"train={len(tr)} valid={len(va)}")
    return 0


# -- train ------------------------------------------------------------------


def _load_known(path, vocab, what: str) -> np.ndarray:
    rows, _, unknown = parse_triples(path, vocab, grow=False)
    if unknown:
        log.warning("%s: skipped %d %s triples with entities or relations unseen in training", path, unknown, what)
    return rows


def run_training(config: TrainConfig, train_path, valid_path, out: Path) -> dict:
    """Train, then write checkpoint, metrics history and posterior dump under ``out``."""
    graph = load_triples(train_path)
    valid = _load_known(valid_path, graph.vocab, "validation") if valid_path else np.zeros((0, 3), dtype=np.int64)
    head = banner(config.seed, config.digest())
    log.info(head)
    result = train(graph, valid, config)
    save_checkpoint(
        out / "checkpoint.npz",
        result.best_model,
        graph.vocab,
        config,
        graph.triples,
        _labeled_posterior(result.best_model, graph.triples, config.beta),
    )
    write_history(out / "metrics.csv", result.history, banner=head)
    result.state.table.dump(out / "posteriors.tsv", header=head)
    with open(out / "config.txt", "w", encoding="utf-8") as fh:
        fh.write(f"# {head}\n{config.as_text()}")
    return {"best_valid_mrr": result.best_valid_mrr, "best_epoch": result.best_epoch, "epochs": len(result.history)}


def _load_train_config(args) -> TrainConfig:
    config = load_config(args.config)
    if args.seed is not None:
        config = config.replace(seed=args.seed)
    return config


def cmd_train(args) -> int:
    config = _load_train_config(args)
    out = _out_dir(args)
    summary = run_training(config, args.train, args.valid, out)
    print(f"best_valid_mrr={summary['best_valid_mrr']:.6f} best_epoch={summary['best_epoch']} epochs={summary['epochs']}")
    return 0


# -- eval / predict / inspect ----------------------------------------------


def _labeled_posterior(model, triples, beta: float) -> np.ndarray:
    psi1, psi0 = model.score_triples(triples)
    return np.atleast_1d(posterior_labeled(collection_prob(psi1), collection_prob(psi0), beta))


def evaluate_checkpoint(ckpt_path, test_path, filter_paths=(), ks=(1, 3, 10), fliplog=None, pessimistic=False, mode="pos"):
    """Filtered metrics of a checkpoint on a test file, plus detection scores when a flip log is given."""
    ckpt = load_checkpoint(ckpt_path)
    vocab = ckpt.vocab
    test, _, unknown = parse_triples(test_path, vocab, grow=False)
    if unknown:
        log.warning("%s: %d test triples mention unseen entities or relations and were skipped", test_path, unknown)
    if len(test) == 0:
        raise CommandError(f"{test_path}: no evaluable test triples")
    known = [test]
    if ckpt.train_triples is not None:
        known.append(ckpt.train_triples)
    for path in filter_paths:
        known.append(_load_known(path, vocab, "filter"))
    report = compute_metrics(
        rank_triples(ckpt.model, test, FilterIndex(*known), pessimistic=pessimistic, mode=mode, beta=ckpt.config.beta), ks
    )
    report.extra["skipped_unknown"] = unknown
    if fliplog:
        if ckpt.train_triples is None:
            raise CommandError("checkpoint carries no training triples; detection needs them")
        flips = FlipLog.read(fliplog, vocab)
        w = _labeled_posterior(ckpt.model, ckpt.train_triples, ckpt.config.beta)
        det = detection_report(w, ckpt.train_triples, flips, model=ckpt.model, filter_index=FilterIndex(*known))
        if det.applicable:
            report.extra.update(det.as_row())
        else:
            log.info("flip log is empty; detection report not applicable")
    return report, ckpt


def cmd_eval(args) -> int:
    report, ckpt = evaluate_checkpoint(args.checkpoint, args.test, args.filter, args.ks, args.fliplog, args.pessimistic, args.score)
    head = banner(ckpt.config.seed, ckpt.config.digest())
    log.info(head)
    print(report.to_table())
    if args.out is not None or os.environ.get(OUT_ENV):
        out = _out_dir(args)
        _write_csv(out / "eval.csv", [report.as_row()], head)
    return 0


def cmd_predict(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    vocab = ckpt.vocab
    if (args.head is None) == (args.tail is None):
        raise CommandError("give exactly one of --head or --tail")
    try:
        relation = vocab.relation_id[args.relation]
        anchor_name = args.head if args.head is not None else args.tail
        anchor = vocab.entity_id[anchor_name]
    except KeyError as exc:
        raise CommandError(f"unknown name {exc.args[0]!r}") from None
    side = "tail" if args.head is not None else "head"
    reprs = ckpt.model.entity_reprs()
    q = RankQuery(anchor, relation, anchor, side)
    scores = model_scorer(ckpt.model, reprs, mode=args.score, beta=ckpt.config.beta)(q)
    skip: set[int] = set()
    if not args.include_known and ckpt.train_triples is not None:
        skip = FilterIndex(ckpt.train_triples).known(q)
    order = [e for e in np.lexsort((np.arange(len(scores)), -scores)).tolist() if e not in skip][: args.top]
    log.info(banner(ckpt.config.seed, ckpt.config.digest()))
    for rank, e in enumerate(order, 1):
        h, t = (anchor, e) if side == "tail" else (e, anchor)
        print(f"{rank}\t{vocab.entities[h]}\t{vocab.relations[relation]}\t{vocab.entities[t]}\t{scores[e]:.6f}")
    return 0


def cmd_inspect_posterior(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    if ckpt.train_triples is None:
        raise CommandError("checkpoint carries no training triples")
    w = _labeled_posterior(ckpt.model, ckpt.train_triples, ckpt.config.beta)
    head = banner(ckpt.config.seed, ckpt.config.digest())
    log.info(head)
    q = np.quantile(w, [0.0, 0.5, 1.0])
    print(f"labeled={len(w)} min={q[0]:.6g} median={q[1]:.6g} max={q[2]:.6g}")
    order = np.lexsort((np.arange(len(w)), w))
    print("# most doubtful collected facts")
    for i in order[: args.top].tolist():
        print("\t".join(ckpt.vocab.name_triple(ckpt.train_triples[i])) + f"\t{w[i]:.6g}")
    if args.fliplog:
        det = detection_report(w, ckpt.train_triples, FlipLog.read(args.fliplog, ckpt.vocab), n=args.top)
        if det.applicable:
            print(f"fp_auc={det.auc:.6f} fp_precision@{det.n}={det.precision_at_n:.6f} added_in_train={det.n_added}")
        else:
            print("flip log empty: detection not applicable")
    if args.out is not None or os.environ.get(OUT_ENV):
        out = _out_dir(args)
        with open(out / "labeled_posterior.tsv", "w", encoding="utf-8") as fh:
            fh.write(f"# {head}\n")
            for row, p in zip(ckpt.train_triples, w):
                fh.write("\t".join(ckpt.vocab.name_triple(row)) + f"\t{p!r}\n")
    return 0


# -- sweep ------------------------------------------------------------------


def parse_grid(text: str) -> list[dict]:
    """Expand ``key = v1, v2, ...`` lines into one ``{key: value}`` dict per grid point."""
    keys, choices = [], []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"grid line {lineno}: expected key = v1, v2, ...")
        key, values = (s.strip() for s in line.split("=", 1))
        opts = [v.strip() for v in values.split(",") if v.strip()]
        if not opts:
            raise ConfigError(f"grid line {lineno}: no values for {key!r}")
        keys.append(key)
        choices.append(opts)
    return [dict(zip(keys, combo)) for combo in itertools.product(*choices)]


def _sweep_run(job: dict) -> dict:
    out = Path(job["out"])
    out.mkdir(parents=True, exist_ok=True)
    row = {"point": job["point"], "seed": job["seed"], **job["values"]}
    try:
        text = "".join(f"{k} = {v}\n" for k, v in job["values"].items()) + f"seed = {job['seed']}\n"
        config = parse_config(text)
        run_training(config, job["train"], job["valid"], out)
        report, _ = evaluate_checkpoint(out / "checkpoint.npz", job["test"], job["filters"], job["ks"])
        _write_csv(out / "eval.csv", [report.as_row()], banner(config.seed, config.digest()))
        row.update({k: v for k, v in report.as_row().items() if k != "skipped_unknown"})
        row["status"] = "ok"
    except Exception as exc:  # a failed child is recorded, not fatal
        logging.getLogger("spekg").error("sweep point %s seed %s failed: %s", job["point"], job["seed"], exc)
        row["status"] = f"failed: {type(exc).__name__}: {exc}"
    return row


def aggregate(rows: list[dict], n_points: int) -> list[dict]:
    """Mean and (population) standard deviation of every metric per grid point."""
    out = []
    for p in range(n_points):
        runs = [r for r in rows if r["point"] == p]
        ok = [r for r in runs if r["status"] == "ok"]
        agg = {k: v for k, v in runs[0].items() if k not in ("seed", "status") and not _is_metric(k)}
        agg["runs"] = len(ok)
        agg["failed"] = len(runs) - len(ok)
        metrics = [k for k in (ok[0] if ok else {}) if _is_metric(k)]
        for k in metrics:
            vals = np.asarray([float(r[k]) for r in ok])
            agg[f"{k}_mean"] = float(vals.mean())
            agg[f"{k}_std"] = float(vals.std())
        out.append(agg)
    return out


def _is_metric(key: str) -> bool:
    return key == "mrr" or key.startswith("hits@") or key == "queries"


def cmd_sweep(args) -> int:
    with open(args.config, encoding="utf-8") as fh:
        grid_text = fh.read()
    points = parse_grid(grid_text)
    out = _out_dir(args)
    head = banner(args.seeds[0] if args.seeds else 0, _digest_of(grid=grid_text, seeds=args.seeds))
    log.info(head)
    jobs = []
    for p, values in enumerate(points):
        for seed in args.seeds:
            jobs.append(
                {
                    "point": p,
                    "seed": seed,
                    "values": values,
                    "out": str(out / f"point{p:03d}-seed{seed}"),
                    "train": args.train,
                    "valid": args.valid,
                    "test": args.test,
                    "filters": list(args.filter),
                    "ks": args.ks,
                }
            )
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(_sweep_run, jobs))
    else:
        rows = [_sweep_run(j) for j in jobs]
    _write_csv(out / "runs.csv", rows, head)
    _write_csv(out / "aggregate.csv", aggregate(rows, len(points)), head)
    n_ok = sum(r["status"] == "ok" for r in rows)
    print(f"runs={len(rows)} ok={n_ok} failed={len(rows) - n_ok}")
    return 0 if n_ok else 1


# -- entry point ------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spekg", description="Noise-aware knowledge graph completion.")
    parser.add_argument("--version", action="version", version=f"spekg {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("perturb", help="remove true links and add random ones, recording every edit")
    p.add_argument("input")
    p.add_argument("--ptb-rate", type=float, required=True)
    p.add_argument("--removal-fraction", type=float, default=0.9)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.add_argument("--fliplog", help="flip log path (default: OUT/fliplog.tsv)")
    p.set_defaults(func=cmd_perturb)

    p = sub.add_parser("split", help="shuffle a triple file into train and valid parts")
    p.add_argument("input")
    p.add_argument("--train-fraction", type=float, default=0.7)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="fit a model and keep the best checkpoint by validation MRR")
    p.add_argument("--config", required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--valid")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="filtered ranking metrics of a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("test")
    p.add_argument("--filter", nargs="*", default=[], help="extra triple files treated as known")
    p.add_argument("--ks", type=_parse_ks, default=(1, 3, 10))
    p.add_argument("--fliplog", help="flip log for false positive / negative detection scores")
    p.add_argument("--pessimistic", action="store_true", help="count ties against the answer")
    p.add_argument("--score", choices=("pos", "posterior"), default="pos")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="top completions for a (head, relation, ?) or (?, relation, tail) query")
    p.add_argument("checkpoint")
    p.add_argument("--head")
    p.add_argument("--tail")
    p.add_argument("--relation", required=True)
    p.add_argument("--top", type=int, default=10)
    p.add_argument("--include-known", action="store_true")
    p.add_argument("--score", choices=("pos", "posterior"), default="pos")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("inspect-posterior", help="list the collected facts the model doubts most")
    p.add_argument("checkpoint")
    p.add_argument("--top", type=int, default=20)
    p.add_argument("--fliplog")
    p.add_argument("--out")
    p.set_defaults(func=cmd_inspect_posterior)

    p = sub.add_parser("sweep", help="train and evaluate every grid point for every seed")
    p.add_argument("--config", required=True, help="grid file: key = v1, v2, ...")
    p.add_argument("--train", required=True)
    p.add_argument("--valid")
    p.add_argument("--test", required=True)
    p.add_argument("--filter", nargs="*", default=[])
    p.add_argument("--seeds", type=_parse_seeds, default=[0, 1, 2, 3, 4])
    p.add_argument("--ks", type=_parse_ks, default=(1, 3, 10))
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr
    )
    try:
        return args.func(args)
    except (CommandError, ConfigError, GraphError, TrainingDiverged, OSError, ValueError, KeyError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"spekg {args.command}: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
