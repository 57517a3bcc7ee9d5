"""Command line entry point: ``hashqa <subcommand> [flags]``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from . import codestore, synthetic
from .config import TrainConfig, parse_config_text
from .data import build_vocab, corpus_from_records, dataset_from_records, read_jsonl, tokenize, tokenize_pad, Vocabulary
from .encoder import load_checkpoint, save_checkpoint
from .errors import HashQAError, InputError
from .model import infer_dims, init_params
from .serve import MODES, bench, evaluate, rank
from .trainer import grad_check, gradcheck_config, train

log = logging.getLogger("hashqa")

SUBCOMMANDS = ("train", "index", "query", "eval", "bench", "gradcheck", "sensitivity")


class Artifacts:
    """Files written by one invocation; removed again if it fails."""

    def __init__(self):
        self.paths: list[Path] = []

    def path(self, p: str | Path) -> Path:
        p = Path(p)
        p.parent.mkdir(parents=True, exist_ok=True)
        self.paths.append(p)
        return p

    def cleanup(self) -> None:
        for p in self.paths:
            p.unlink(missing_ok=True)


def _write_csv(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


def _records(path: str | None, split: str) -> list[dict]:
    if path:
        return read_jsonl(path)
    return read_jsonl(synthetic.bundled_path(split))


def _sibling(checkpoint: str, name: str) -> Path:
    return Path(checkpoint).with_name(name)


def _resolve_config(args, checkpoint: str | None = None):
    values = {}
    if checkpoint and _sibling(checkpoint, "config.txt").exists():
        values.update(parse_config_text(_sibling(checkpoint, "config.txt").read_text(encoding="utf-8")))
    if args.config:
        values.update(parse_config_text(Path(args.config).read_text(encoding="utf-8")))
    cfg = TrainConfig(**values)
    overrides = {
        "seed": args.seed,
        "beta": args.beta,
        "delta": args.delta,
        "margin": args.margin,
        "epochs": args.epochs,
        "batch_size": args.batch_size,
    }
    cfg = cfg.replace(**{k: v for k, v in overrides.items() if v is not None})
    log.info("resolved config: %s", " ".join(cfg.to_text().split("\n")).replace(" = ", "="))
    return cfg


def _load_model(args):
    if not args.checkpoint:
        raise InputError("--checkpoint is required")
    params = load_checkpoint(args.checkpoint)
    vocab = Vocabulary.load(_sibling(args.checkpoint, "vocab.txt"))
    cfg = _resolve_config(args, args.checkpoint)
    dims = infer_dims(params)
    cfg = cfg.replace(**{k: dims[k] for k in ("L", "D", "E", "M", "F", "layers")})
    return params, vocab, cfg


def cmd_train(args, out: Artifacts) -> int:
    cfg = _resolve_config(args)
    train_recs = _records(args.data, "train")
    vocab = build_vocab(corpus_from_records(train_recs), cfg.min_count)
    train_set = dataset_from_records(train_recs, cfg.L, vocab)
    dev_set = dataset_from_records(_records(args.dev, "dev"), cfg.L, vocab)
    result = train(cfg, train_set, dev_set, len(vocab))
    root = Path(args.out or "runs/train")
    save_checkpoint(result.params, out.path(root / "model.hasp"))
    vocab.save(out.path(root / "vocab.txt"))
    cfg.save(out.path(root / "config.txt"))
    _write_csv(out.path(root / "history.csv"), result.history)
    if not args.no_figures:
        from .plots import plot_history

        plot_history(result.history, out.path(root / "history.png"))
    print(f"best epoch {result.best_epoch}: dev P@1 {result.history[result.best_epoch - 1]['dev_P@1']:.4f}")
    print(f"wrote {root / 'model.hasp'}")
    return 0


def cmd_index(args, out: Artifacts) -> int:
    params, vocab, cfg = _load_model(args)
    ds = dataset_from_records(_records(args.data, "dev"), cfg.L, vocab)
    store = codestore.build_index(params, ds.answers, cfg.beta, cfg.layers)
    path = out.path(args.out or args.store or "runs/answers.hasb")
    codestore.save(store, path)
    rep = codestore.memory_report(store.D, store.L, store.count)
    print(f"indexed {store.count} answers into {path} ({rep.binary_bytes} payload bytes, float32 would be {rep.float_bytes})")
    return 0


def cmd_query(args, out: Artifacts) -> int:
    params, vocab, cfg = _load_model(args)
    if not args.store:
        raise InputError("--store is required")
    if not args.question:
        raise InputError("--question is required")
    store = codestore.load(args.store)
    question = tokenize_pad(tokenize(args.question), cfg.L, vocab)
    result = rank(question, store, params, cfg.layers, qid="query")
    for i, (aid, score) in enumerate(result.ranked[: args.top], 1):
        print(f"{i}\t{aid}\t{score:.6f}")
    return 0


def cmd_eval(args, out: Artifacts) -> int:
    params, vocab, cfg = _load_model(args)
    ds = dataset_from_records(_records(args.data, "dev"), cfg.L, vocab)
    store = codestore.load(args.store) if args.store else None
    m, rankings = evaluate(params, ds, cfg.layers, cfg.beta, store=store)
    root = Path(args.out or "runs/eval")
    _write_csv(out.path(root / "metrics.csv"), [{"questions": len(rankings), **m}])
    if args.trace:
        with open(out.path(root / "trace.jsonl"), "w", encoding="utf-8") as f:
            for r in rankings:
                f.write(json.dumps({"qid": r.qid, "aids": r.aids, "scores": [s for _, s in r.ranked]}) + "\n")
    print("\t".join(f"{k}={v:.4f}" for k, v in m.items()))
    return 0


def cmd_bench(args, out: Artifacts) -> int:
    if args.checkpoint:
        params, vocab, cfg = _load_model(args)
        ds = dataset_from_records(_records(args.data, "dev"), cfg.L, vocab)
    else:
        cfg = _resolve_config(args)
        recs = _records(args.data, "dev") if args.data else synthetic.generate(
            args.questions, pool_size=args.pool_size, seed=cfg.seed, prefix="b"
        )
        vocab = build_vocab(corpus_from_records(recs))
        ds = dataset_from_records(recs, cfg.L, vocab)
        params = init_params(cfg, len(vocab))
    store = codestore.load(args.store) if args.store else None
    modes = MODES if args.mode in (None, "all") else (args.mode,)
    reports = [
        bench(m, ds, params, cfg.layers, cfg.beta, store=store, repetitions=args.repetitions, workers=args.workers).as_row()
        for m in modes
    ]
    root = Path(args.out or "runs/bench")
    _write_csv(out.path(root / "bench.csv"), reports)
    if not args.no_figures:
        from .plots import plot_bench

        plot_bench(reports, out.path(root / "bench.png"))
    print(f"{'mode':<14}{'s/question':>12}{'memory bytes':>16}{'P@1':>8}{'MRR':>8}")
    for r in reports:
        print(f"{r['mode']:<14}{r['seconds_per_question']:>12.5f}{r['memory_bytes']:>16d}{r['P_at_1']:>8.3f}{r['MRR']:>8.3f}")
    return 0


def cmd_gradcheck(args, out: Artifacts) -> int:
    overrides = {k: v for k, v in (("beta", args.beta), ("delta", args.delta), ("margin", args.margin)) if v is not None}
    report = grad_check(gradcheck_config(**overrides), n_points=args.points, seed=args.seed or 0)
    for group, err in report.errors.items():
        print(f"{group:<10} max rel error {err:.3e}  {'ok' if err <= report.tolerance else 'FAIL'}")
    if args.out:
        _write_csv(out.path(Path(args.out) / "gradcheck.csv"), [{"group": g, "max_rel_error": e} for g, e in report.errors.items()])
    if not report.passed:
        print(f"gradient check failed for: {', '.join(report.failing)}", file=sys.stderr)
        return 1
    return 0


def cmd_sensitivity(args, out: Artifacts) -> int:
    cfg = _resolve_config(args)
    train_recs = _records(args.data, "train")
    vocab = build_vocab(corpus_from_records(train_recs), cfg.min_count)
    train_set = dataset_from_records(train_recs, cfg.L, vocab)
    dev_set = dataset_from_records(_records(args.dev, "dev"), cfg.L, vocab)
    rows = []
    for beta in cfg.beta_grid:
        for delta in cfg.delta_grid:
            result = train(cfg.replace(beta=beta, delta=delta), train_set, dev_set, len(vocab))
            best = result.history[result.best_epoch - 1]
            rows.append({"beta": beta, "delta": delta, "dev_P@1": best["dev_P@1"], "dev_MRR": best["dev_MRR"], "best_epoch": result.best_epoch})
            log.info("beta=%g delta=%g dev P@1 %.4f", beta, delta, best["dev_P@1"])
    root = Path(args.out or "runs/sensitivity")
    _write_csv(out.path(root / "sensitivity.csv"), rows)
    if not args.no_figures:
        from .plots import plot_sensitivity

        plot_sensitivity(rows, out.path(root / "sensitivity.png"))
    print(f"wrote {len(rows)} rows to {root / 'sensitivity.csv'}")
    return 0


COMMANDS = {
    "train": cmd_train,
    "index": cmd_index,
    "query": cmd_query,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "gradcheck": cmd_gradcheck,
    "sensitivity": cmd_sensitivity,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--beta", type=float)
    common.add_argument("--delta", type=float)
    common.add_argument("--margin", type=float)
    common.add_argument("--epochs", type=int)
    common.add_argument("--batch-size", type=int)
    common.add_argument("--mode", choices=MODES + ("all",))
    common.add_argument("--store", help=".hasb code store path")
    common.add_argument("--checkpoint", help=".hasp parameter checkpoint")
    common.add_argument("--out", help="output directory (or file for index)")
    common.add_argument("--data", help="JSONL dataset (default: bundled synthetic split)")
    common.add_argument("--dev", help="JSONL dev split for training")
    common.add_argument("--no-figures", action="store_true", help="skip PNG figures")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="hashqa", description="Hashing-based answer selection.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "query":
            p.add_argument("--question")
            p.add_argument("--top", type=int, default=10)
        elif name == "eval":
            p.add_argument("--trace", action="store_true", help="also write per-question trace.jsonl")
        elif name == "bench":
            p.add_argument("--repetitions", type=int, default=1)
            p.add_argument("--workers", type=int, default=1, help="threads for candidate fan-out")
            p.add_argument("--questions", type=int, default=13)
            p.add_argument("--pool-size", type=int, default=500)
        elif name == "gradcheck":
            p.add_argument("--points", type=int, default=10)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    if not args.verbose:
        log.setLevel(logging.INFO)
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter("%(asctime)s %(message)s"))
        log.addHandler(handler)
        log.propagate = False
    out = Artifacts()
    try:
        return COMMANDS[args.command](args, out)
    except (HashQAError, OSError) as exc:
        out.cleanup()
        err = {"command": args.command, "error": type(exc).__name__, "message": str(exc)}
        print(json.dumps(err), file=sys.stderr)
        return 1
    except BaseException:
        out.cleanup()
        raise


if __name__ == "__main__":
    sys.exit(main())
