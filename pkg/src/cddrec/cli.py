"""Command-line entry point: prepare, train, evaluate, sweep."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path

import torch

from . import corpus as corpus_mod
from .config import ConfigError, RunConfig, parse_pairs, read_config, write_config
from .corpus import CorpusError
from .evaluation import evaluate, write_report
from .trainer import CheckpointError, fit, restore

logger = logging.getLogger("cddrec")

WORKDIR_ENV = "CDDREC_WORKDIR"


def _option(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_config_flags(parser: argparse.ArgumentParser, skip=()):
    group = parser.add_argument_group("run config (overrides --config)")
    for f in dataclasses.fields(RunConfig):
        if f.name in skip:
            continue
        if f.type in (bool, "bool"):
            group.add_argument(_option(f.name), dest=f"cfg_{f.name}", nargs="?", const="true", default=None,
                               metavar="BOOL")
        else:
            group.add_argument(_option(f.name), dest=f"cfg_{f.name}", default=None, metavar=f.name.upper())
    parser.add_argument("--config", type=Path, help="flat key = value config file")


def _run_config(args) -> RunConfig:
    base = read_config(args.config) if getattr(args, "config", None) else RunConfig()
    pairs = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    cfg = parse_pairs(pairs, RunConfig, base)
    if os.environ.get(WORKDIR_ENV):
        cfg = dataclasses.replace(cfg, workdir=os.environ[WORKDIR_ENV])
    return cfg


def run_dir_for(cfg: RunConfig) -> Path:
    return Path(cfg.workdir) / "runs" / cfg.run_name


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_prepare(cfg: RunConfig) -> dict:
    if not cfg.data_in:
        raise CorpusError("prepare needs --data-in")
    rows = corpus_mod.load_interactions(cfg.data_in, cfg.data_format or None)
    sequences, catalog = corpus_mod.build_sequences(rows, cfg.min_count)
    stats = corpus_mod.write_corpus(cfg.workdir, sequences, catalog)
    logger.info("prepared %s", " ".join(f"{k}={v}" for k, v in stats.items()))
    return stats


def cmd_train(cfg: RunConfig):
    sequences, catalog = corpus_mod.read_corpus(cfg.workdir)
    run_dir = run_dir_for(cfg)
    run_dir.mkdir(parents=True, exist_ok=True)
    for stale in ("epochs.log", "losses.tsv"):
        (run_dir / stale).unlink(missing_ok=True)
    write_config(run_dir / "config.txt", cfg)
    (run_dir / "run.txt").write_text(
        f"corpus_sha256 = {corpus_mod.corpus_hash(cfg.workdir)}\nseed = {cfg.seed}\ntorch = {torch.__version__}\n",
        encoding="utf-8",
    )
    train_cfg = cfg.train_config()
    model, report = fit(sequences, catalog, train_cfg, run_dir=run_dir)
    (run_dir / "report.txt").write_text(
        f"epochs_run = {report.epochs_run}\nbest_epoch = {report.best_epoch}\n"
        f"best_valid_mrr = {report.best_valid_metric}\nstopped_early = {report.stopped_early}\n"
        f"wall_time = {report.wall_time:.2f}\n",
        encoding="utf-8",
    )
    return model, report, run_dir


def cmd_evaluate(checkpoint, split: str = "test", workdir=None, out=None):
    checkpoint = Path(checkpoint)
    model, _, train_cfg, _ = restore(checkpoint)
    if workdir is None:
        echo = checkpoint.parent / "config.txt"
        if not echo.exists():
            raise CorpusError("cannot locate the corpus: pass --workdir")
        workdir = read_config(echo).workdir
    sequences, _ = corpus_mod.read_corpus(workdir)
    report = evaluate(model, sequences, split, t_infer=train_cfg.t_infer, batch_size=train_cfg.eval_batch_size)
    write_report(report, out or checkpoint.parent, prefix=f"{split}_")
    return report


def cmd_sweep(cfg: RunConfig, T_list, beta_list, split: str = "test"):
    if not T_list or not beta_list:
        raise ConfigError("sweep grid must be non-empty")
    out_dir = Path(cfg.workdir) / "sweeps" / cfg.run_name
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for T in T_list:
        for beta in beta_list:
            try:
                # replace() re-runs validation, so a bad grid value fails only its own cell
                cell = dataclasses.replace(
                    cfg, num_steps=int(T), beta_max=float(beta), run_name=f"{cfg.run_name}_T{T}_b{beta}"
                )
                _, report, run_dir = cmd_train(cell)
                metrics = cmd_evaluate(run_dir / "best.ckpt", split, cell.workdir)
                rows.append((int(T), float(beta), report.best_valid_metric, metrics.mrr, "ok"))
            except Exception as exc:  # a failing cell must not stop the sweep
                logger.error("sweep cell T=%s beta=%s failed: %s", T, beta, exc)
                rows.append((int(T), float(beta), float("nan"), float("nan"), f"error: {exc}"))
    with (out_dir / "sweep.tsv").open("w", encoding="utf-8") as fh:
        fh.write(f"# T\tbeta_max\tvalid_mrr\t{split}_mrr\tstatus\n")
        for T, beta, v, m, status in rows:
            fh.write(f"{T}\t{beta}\t{v}\t{m}\t{status}\n")
    ok = [r for r in rows if r[4] == "ok"]
    for key, idx in (("T", 0), ("beta", 1)):
        best = {}
        for r in ok:
            best[r[idx]] = max(best.get(r[idx], float("-inf")), r[3])
        with (out_dir / f"mrr_vs_{key}.dat").open("w", encoding="utf-8") as fh:
            fh.write(f"# {key} best_{split}_mrr\n")
            for k in sorted(best):
                fh.write(f"{k}\t{best[k]}\n")
    return rows


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cddrec", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="filter, index and cache a raw interaction file")
    _add_config_flags(p)

    p = sub.add_parser("train", help="train on a prepared corpus")
    _add_config_flags(p)

    p = sub.add_parser("evaluate", help="full-catalog metrics for a checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--split", choices=("train", "valid", "test"), default="test",
                   help="train scores the last training transition of each user")
    p.add_argument("--workdir", default=None)
    p.add_argument("--out", type=Path, default=None)

    p = sub.add_parser("sweep", help="train and evaluate over a T x beta_max grid")
    _add_config_flags(p)
    p.add_argument("--T-list", dest="T_list", type=_ints, required=True, help="comma-separated")
    p.add_argument("--beta-list", dest="beta_list", type=_floats, required=True, help="comma-separated")
    p.add_argument("--split", choices=("valid", "test"), default="test")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose or args.command != "evaluate" else logging.WARNING,
        format="%(message)s",
        stream=sys.stderr,
    )
    try:
        if args.command == "prepare":
            cmd_prepare(_run_config(args))
        elif args.command == "train":
            cmd_train(_run_config(args))
        elif args.command == "evaluate":
            workdir = os.environ.get(WORKDIR_ENV) or args.workdir
            cmd_evaluate(args.checkpoint, args.split, workdir, args.out)
        elif args.command == "sweep":
            rows = cmd_sweep(_run_config(args), args.T_list, args.beta_list, args.split)
            if not any(r[4] == "ok" for r in rows):
                return 1
    except (ConfigError, CorpusError, CheckpointError, OSError) as exc:
        print(f"cddrec {args.command}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
