"""Command-line surface: corpus generation, training, evaluation, unpaired-data
sweeps, and alignment export.

Exit codes: 0 success, 1 usage error, 2 data error, 3 training abort.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace

import numpy as np

from . import align, svg
from .config import ConfigError, format_config, load_config
from .metrics import EvalReport
from .models import load_models
from .synthdata import Corpus, CorpusConfig, derived_seed, make_corpus
from .tape import thread_limit
from .train import (TrainConfig, TrainingAbort, evaluate_models,
                    load_split_items, train_run)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_TRAIN = 0, 1, 2, 3


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _snapshot_config(config_path: str | None, cfg, out_dir: str):
    """Keep a byte-identical copy of the input config plus the effective one."""
    snap = os.path.join(out_dir, "config.snapshot")
    if config_path:
        with open(config_path, "rb") as src, open(snap, "wb") as dst:
            dst.write(src.read())
    else:
        with open(snap, "w") as dst:
            dst.write(format_config(cfg))
    with open(os.path.join(out_dir, "config.effective"), "w") as f:
        f.write(format_config(cfg))


def _load_cfg(path: str | None, cls, overrides: dict):
    if path:
        return load_config(path, cls, overrides)
    cfg = cls()
    for key, value in overrides.items():
        if value is not None:
            setattr(cfg, key, value)
    return cfg


def cmd_gen_data(args) -> int:
    overrides = {"seed": args.seed, "paired_fraction": args.paired_fraction,
                 "utterances": args.utterances}
    cfg = _load_cfg(args.config, CorpusConfig, overrides)
    os.makedirs(args.out, exist_ok=True)
    _snapshot_config(args.config, cfg, args.out)
    counts = make_corpus(cfg, args.out)
    total = sum(counts.values())
    print(f"corpus: {total} utterances, {cfg.speakers} speakers -> {args.out}")
    for tag in ("paired", "text_only", "lip_only", "eval"):
        n = counts.get(tag, 0)
        print(f"  {tag:10s} {n:6d}  ({100.0 * n / total:.1f}%)")
    return EXIT_OK


def cmd_train(args) -> int:
    overrides = {"seed": args.seed, "mode": args.mode, "generator": args.generator,
                 "total_epochs": args.epochs,
                 "unpaired_fraction": args.unpaired_fraction}
    cfg = _load_cfg(args.config, TrainConfig, overrides)
    os.makedirs(args.out, exist_ok=True)
    _snapshot_config(args.config, cfg, args.out)
    with open(os.path.join(args.out, "data_ref.txt"), "w") as f:
        f.write(os.path.abspath(args.data) + "\n")
    info = train_run(cfg, args.data, args.out)
    final = info["final"]
    print(f"run complete: eval CER {100 * final['cer']:.2f}%  "
          f"L1 {final['l1']:.5f}  PSNR {final['psnr']:.2f} dB -> {args.out}")
    return EXIT_OK


def _evaluate_run(run_dir: str, corpus: Corpus, batch_size: int, max_frames: int):
    ckpt = os.path.join(run_dir, "checkpoints", "best")
    if not os.path.exists(ckpt + os.sep + "meta.json"):
        raise DataError(f"no checkpoint under {ckpt}")
    reader, generator, meta = load_models(ckpt)
    if meta["tokens"] != corpus.vocab.tokens:
        raise DataError("checkpoint vocabulary does not match the corpus")
    eval_items = load_split_items(corpus, "eval")
    if not eval_items:
        raise DataError("corpus has no eval split")
    stats, _ = evaluate_models(reader, generator, meta["generator"], eval_items,
                               corpus.vocab, corpus.config.unit, batch_size, max_frames)
    report = EvalReport(cer=stats["cer"], wer=stats["wer"], mean_l1=stats["l1"],
                        mean_psnr=stats["psnr"], n_utterances=len(eval_items))
    return report, meta


def cmd_eval(args) -> int:
    corpus = Corpus(args.data)
    report, meta = _evaluate_run(args.run, corpus, args.batch_size, args.max_frames)
    out_csv = args.out or os.path.join(args.run, "eval_report.csv")
    with open(out_csv, "w") as f:
        f.write(EvalReport.CSV_HEADER + "\n" + report.csv_row() + "\n")
    print(f"run: {args.run} ({meta['mode']}, generator={meta['generator']})")
    print(report.table())
    if args.compare:
        other, other_meta = _evaluate_run(args.compare, corpus,
                                          args.batch_size, args.max_frames)
        print(f"\ncompared with: {args.compare} ({other_meta['mode']}, "
              f"generator={other_meta['generator']})")
        print(other.table())
        if np.isfinite(other.cer) and other.cer > 0:
            print(f"\nCER ratio (compare/run): {other.cer / max(report.cer, 1e-12):.2f}x")
    return EXIT_OK


def cmd_sweep_unpaired(args) -> int:
    fractions = [float(x) for x in args.fractions.split(",") if x.strip() != ""]
    if not fractions:
        raise DataError("no fractions given")
    base = _load_cfg(args.config, TrainConfig, {"seed": args.seed,
                                                "total_epochs": args.epochs})
    os.makedirs(args.out, exist_ok=True)
    jobs = args.jobs if args.jobs else thread_limit(1)

    def one(frac: float):
        run_dir = os.path.join(args.out, f"frac_{frac:.2f}")
        cfg = replace(base, mode="dual", unpaired_fraction=frac)
        try:
            info = train_run(cfg, args.data, run_dir)
            return frac, info["final"], None
        except Exception as exc:  # a sub-run failure must not kill the sweep
            return frac, None, f"{type(exc).__name__}: {exc}"

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(one, fractions))
    else:
        results = [one(f) for f in fractions]

    rows = ["unpaired_fraction,cer,wer,l1,psnr,status"]
    good = []
    for frac, final, err in results:
        if err is None:
            rows.append(f"{frac!r},{final['cer']!r},{final['wer']!r},"
                        f"{final['l1']!r},{final['psnr']!r},ok")
            good.append((frac, final))
        else:
            rows.append(f"{frac!r},,,,,{err}")
            print(f"fraction {frac}: FAILED ({err})", file=sys.stderr)
    with open(os.path.join(args.out, "sweep.csv"), "w") as f:
        f.write("\n".join(rows) + "\n")
    if good:
        xs = [f for f, _ in good]
        svg.line_plot(os.path.join(args.out, "sweep.svg"), xs,
                      [("reading error vs unpaired data", "CER",
                        [("CER", [s["cer"] for _, s in good])]),
                       ("generation error vs unpaired data", "L1",
                        [("L1", [s["l1"] for _, s in good])])],
                      x_label="unpaired fraction")
    for frac, final in good:
        print(f"fraction {frac:.2f}: CER {100 * final['cer']:.2f}%  L1 {final['l1']:.5f}")
    if len(good) < len(results):
        return EXIT_TRAIN
    return EXIT_OK


def cmd_export_alignments(args) -> int:
    ckpt_meta = os.path.join(args.run, "checkpoints", "best", "meta.json")
    if not os.path.exists(ckpt_meta):
        raise DataError(f"no checkpoint metadata under {args.run}")
    with open(ckpt_meta) as f:
        meta = json.load(f)
    if meta["generator"] != "attention":
        raise DataError("alignment export needs a run trained with --generator attention")
    npz_path = os.path.join(args.run, "alignments.npz")
    if not os.path.exists(npz_path):
        raise DataError(f"{npz_path} missing; re-run training to produce it")
    corpus = Corpus(args.data)
    tokens_by_id = {e["id"]: corpus.tokens_for(e) for e in corpus.split("eval")}
    archive = np.load(npz_path)
    ids = sorted(k for k in archive.files if not k.endswith("/len"))
    os.makedirs(args.out, exist_ok=True)

    lines = []
    summary = ["id,frames,monotone,violations"]
    for i, utt in enumerate(ids):
        matrix = archive[utt]
        tokens = tokens_by_id.get(utt)
        if tokens is None or len(tokens) != matrix.shape[0]:
            raise DataError(f"alignment for {utt} does not match the corpus text")
        durations = align.extract_durations(matrix)
        lines.append(align.format_durations_line(tokens, durations))
        monotone, violations = align.monotonicity(matrix)
        summary.append(f"{utt},{matrix.shape[1]},{int(monotone)},{violations}")
        if i < args.limit:
            svg.heat_map(os.path.join(args.out, f"{utt}.svg"), matrix.tolist(),
                         row_labels=tokens, title=f"{utt} alignment")
    with open(os.path.join(args.out, "durations.txt"), "w") as f:
        f.write("\n".join(lines) + "\n")
    with open(os.path.join(args.out, "monotonicity.csv"), "w") as f:
        f.write("\n".join(summary) + "\n")
    n_monotone = sum(1 for row in summary[1:] if row.split(",")[2] == "1")
    print(f"exported {len(ids)} alignments; monotone: {n_monotone}/{len(ids)}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="duallab",
                     description="dual-transformation training on synthetic viseme traces")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate a synthetic corpus")
    p.add_argument("--config", help="corpus config file (key=value lines)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--paired-fraction", dest="paired_fraction", type=float)
    p.add_argument("--utterances", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train reader + generator")
    p.add_argument("--config", help="train config file (key=value lines)")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=["baseline", "dual"])
    p.add_argument("--generator", choices=["duration", "attention"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--unpaired-fraction", dest="unpaired_fraction", type=float)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a run's best checkpoint")
    p.add_argument("--run", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="report CSV path (default: RUN/eval_report.csv)")
    p.add_argument("--compare", help="second run directory for a side-by-side table")
    p.add_argument("--batch-size", dest="batch_size", type=int, default=16)
    p.add_argument("--max-frames", dest="max_frames", type=int, default=90)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep-unpaired", help="train at several unpaired-data fractions")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--fractions", default="0,0.3,0.6,0.9")
    p.add_argument("--jobs", type=int, default=0,
                   help="parallel sub-runs (default: DUALLAB_THREADS or 1)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_sweep_unpaired)

    p = sub.add_parser("export-alignments", help="durations + heat maps from an attention run")
    p.add_argument("--run", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--limit", type=int, default=8, help="heat maps to render")
    p.set_defaults(func=cmd_export_alignments)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        return args.func(args)
    except TrainingAbort as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_TRAIN
    except (DataError, ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
