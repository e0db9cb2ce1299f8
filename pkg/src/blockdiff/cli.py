"""Command-line entry point.

Subcommands: train, ablate, sweep-loss-vs-t, verify-theory, decode. All of
them accept `--config path` (flat `section.key = value` file) and repeated
`--set section.key=value` overrides; BLOCKDIFF_SEED in the environment
overrides the seed last.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .config import RunConfig
from .data import decode_tokens, encode_text, ingest_corpus
from .decoding import DecodeConfig, decode_sequence, write_trace
from .model import load_checkpoint
from .schedule import STREAM_EVAL, derive_rng


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="flat key-value config file")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="SECTION.KEY=VALUE", help="override one config key")


def _load_config(args) -> RunConfig:
    return RunConfig.from_sources(args.config, args.overrides)


def cmd_train(args) -> int:
    from .training import train

    cfg = _load_config(args)
    if args.corpus:
        cfg.corpus = args.corpus
    if not cfg.corpus:
        print("train: no corpus configured (use --corpus or train.corpus)", file=sys.stderr)
        return 2
    res = train(cfg, out_dir=args.out_dir)
    final = float(np.mean(res.losses[-min(50, res.losses.size):]))
    print(f"trained {cfg.steps} steps; final loss (50-step mean) {final:.4f}")
    print(f"checkpoint: {res.checkpoint_path}")
    print(f"metrics: {os.path.join(args.out_dir or cfg.out_dir, 'metrics.csv')}")
    return 0


def cmd_ablate(args) -> int:
    from .training import arm_registry, run_ablation

    cfg = _load_config(args)
    if args.corpus:
        cfg.corpus = args.corpus
    if not cfg.corpus:
        print("ablate: no corpus configured", file=sys.stderr)
        return 2
    keys = [k.strip() for k in args.arms.split(",") if k.strip()]
    report = run_ablation(cfg, keys, out_dir=args.out_dir)
    width = max(len(r["arm"]) for r in report["arms"])
    for row in report["arms"]:
        flag = " (within noise of baseline)" if row["within_noise_of_baseline"] else ""
        print(f"{row['arm']:<{width}}  train={row['final_train_loss']:.4f}  "
              f"holdout-nll={row['holdout_nll']:.4f}{flag}")
    print(f"report: {os.path.join(args.out_dir or cfg.out_dir, 'report.json')}")
    return 0


def cmd_sweep(args) -> int:
    from .training import sweep_loss_vs_t

    cfg = _load_config(args)
    model = load_checkpoint(args.checkpoint)
    corpus = args.corpus or cfg.corpus
    if not corpus:
        print("sweep-loss-vs-t: no corpus configured", file=sys.stderr)
        return 2
    samples = ingest_corpus(corpus, max_len=model.config.max_seq_len)[: args.samples]
    grid = list(np.linspace(args.t_min, 1.0, args.grid_points))
    rng = derive_rng(cfg.seed, STREAM_EVAL, 999)
    rows, rho = sweep_loss_vs_t(model, samples, grid, args.masks_per_t, rng)
    for t, nll in rows:
        print(f"t={t:.3f}  mean-nll={nll:.4f}")
    print(f"spearman rho = {rho:.4f}")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump({"rows": rows, "spearman_rho": rho}, fh, indent=2)
    return 0


def cmd_verify_theory(args) -> int:
    from .theory import format_report_line, standard_verification_reports

    cfg = _load_config(args)
    reports = standard_verification_reports(
        seed=cfg.seed,
        replicates=args.replicates,
        transfer_replicates=args.transfer_replicates,
        include_transfer=not args.skip_transfer,
    )
    for r in reports:
        print(format_report_line(r))
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump([r.to_dict() for r in reports], fh, indent=2)
    return 0 if all(r.passed for r in reports) else 1


def cmd_decode(args) -> int:
    cfg = _load_config(args)
    model = load_checkpoint(args.checkpoint)
    dcfg = DecodeConfig(
        block_len=args.block_len if args.block_len else cfg.decode_block_len,
        denoise_steps=args.steps if args.steps else cfg.decode_steps,
        max_new_blocks=args.max_blocks if args.max_blocks else cfg.decode_max_blocks,
        eos_mode=cfg.decode_eos_mode,
    )
    prompt = np.array(encode_text(args.prompt), dtype=np.int64)
    out, traces = decode_sequence(model, prompt, dcfg, collect_traces=bool(args.trace_out))
    print(decode_tokens(out))
    if args.trace_out:
        write_trace(args.trace_out, traces)
        print(f"trace: {args.trace_out}", file=sys.stderr)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="blockdiff",
        description="Desk-scale block-wise discrete diffusion language model lab",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one scheduler/rule configuration")
    _add_config_args(p)
    p.add_argument("--corpus", default=None)
    p.add_argument("--out-dir", default=None)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("ablate", help="train and compare ablation arms")
    _add_config_args(p)
    p.add_argument("--corpus", default=None)
    p.add_argument("--out-dir", default=None)
    p.add_argument("--arms", default="sns,abns,abns-emrs,abns-emrs-clamp,"
                                    "abns-emrs-pbnc25,abns-emrs-pbnc50")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("sweep-loss-vs-t", help="mean loss per mask ratio + Spearman rho")
    _add_config_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", default=None)
    p.add_argument("--samples", type=int, default=16)
    p.add_argument("--grid-points", type=int, default=20)
    p.add_argument("--t-min", type=float, default=0.05)
    p.add_argument("--masks-per-t", type=int, default=2)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("verify-theory", help="Monte Carlo lemma checks vs oracles")
    _add_config_args(p)
    p.add_argument("--replicates", type=int, default=100_000)
    p.add_argument("--transfer-replicates", type=int, default=2000)
    p.add_argument("--skip-transfer", action="store_true")
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_verify_theory)

    p = sub.add_parser("decode", help="block-wise greedy decoding from a checkpoint")
    _add_config_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--prompt", default="")
    p.add_argument("--block-len", type=int, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--max-blocks", type=int, default=None)
    p.add_argument("--trace-out", default=None)
    p.set_defaults(fn=cmd_decode)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
