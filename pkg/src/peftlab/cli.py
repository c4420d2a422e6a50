"""
Command-line harness.

    peftlab pretrain     --config cfg.json --checkpoint upstream.ckpt
    peftlab run          --config cfg.json --checkpoint upstream.ckpt --out results/
    peftlab count-params --config cfg.json
    peftlab sweep        --mode lr|lowresource --config cfg.json --checkpoint upstream.ckpt --out results/
    peftlab report       results/results.csv [more.csv ...]

Every command exits 0 on success and 1 on a reported error.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

from . import checkpoint, config, peft, report
from .errors import PeftLabError
from .tasks import gen_splits
from .train import RunSpec, low_resource_experiment, lr_sweep, pretrain_upstream, train_run
from .transformer import count_encoder_params


def _load_config(args) -> config.HarnessConfig:
    cfg = config.load(args.config) if args.config else config.HarnessConfig()
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, seeds=(args.seed,),
                                  pretrain=dataclasses.replace(cfg.pretrain, seed=args.seed))
    return cfg


def _out_dir(args, cfg) -> Path:
    out = Path(args.out if getattr(args, "out", None) else cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _data(cfg):
    d = cfg.data
    return gen_splits(cfg.task, d.n_train, d.n_test, d.seq_len, cfg.encoder.d_input, d.seed)


def cmd_pretrain(args) -> int:
    cfg = _load_config(args)
    target = Path(args.checkpoint) if args.checkpoint else _out_dir(args, cfg) / "upstream.ckpt"
    result = pretrain_upstream(cfg.encoder, cfg.pretrain)
    checkpoint.save_model(target, cfg.encoder, "pretrain", cfg.pretrain.seed, {**result.params, **result.recon})
    print(f"pretrain: initial loss {result.initial_loss:.4f}  final loss {result.final_loss:.4f}  "
          f"ratio {result.final_loss / result.initial_loss:.3f}")
    print(f"wrote {target}")
    return 0


def _require_checkpoint(args):
    if not args.checkpoint:
        raise PeftLabError("--checkpoint is required (create one with `peftlab pretrain`)")


def cmd_run(args) -> int:
    cfg = _load_config(args)
    _require_checkpoint(args)
    upstream, _ = checkpoint.load_upstream(args.checkpoint, cfg.encoder)
    train, test = _data(cfg)
    out = _out_dir(args, cfg)
    csv_path = out / "results.csv"
    for seed in cfg.seeds:
        r = train_run(upstream, cfg.method, cfg.task, train, test, cfg.optim, seed, cfg.log_every,
                      keep_params=True)
        report.append_rows(csv_path, [report.result_row(r)])
        ckpt = out / f"run-{r.method}-{r.task}-seed{seed}.ckpt"
        checkpoint.save_model(ckpt, cfg.encoder, r.method, seed, r.final_params)
        print(f"{r.method} on {r.task} seed={seed}: trainable_upstream={r.trainable_upstream} "
              f"{r.metric_name}={r.metric:.4f} diverged={str(r.diverged).lower()}")
    print(f"appended {len(cfg.seeds)} row(s) to {csv_path}")
    return 0


def count_table(cfg: config.HarnessConfig) -> str:
    rows = [["method", "trainable upstream", "millions"]]
    for m in cfg.sweep.methods:
        n = peft.count_upstream(m, cfg.encoder)
        label = m.label
        if isinstance(m, peft.Prefix):
            label += f" (l={m.length}, length ambiguous)"
        elif isinstance(m, peft.FullFT):
            label += " (encoder only)"
        rows.append([label, f"{n:,}", report.format_count(n)])
    return report.align(rows)


def cmd_count_params(args) -> int:
    cfg = _load_config(args)
    enc = cfg.encoder
    print(f"encoder: L={enc.n_layers} d={enc.d_model} d_ffn={enc.d_ffn} "
          f"({count_encoder_params(enc):,} parameters)")
    print(count_table(cfg), end="")
    return 0


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    _require_checkpoint(args)
    upstream, _ = checkpoint.load_upstream(args.checkpoint, cfg.encoder)
    train, test = _data(cfg)
    spec = RunSpec(upstream, cfg.task, train, test, cfg.optim, cfg.log_every)
    methods = list(cfg.sweep.methods)
    if args.mode == "lr":
        table = lr_sweep(spec, methods, cfg.sweep.lrs, cfg.seeds, args.workers)
    else:
        table = low_resource_experiment(spec, methods, cfg.sweep.fractions, cfg.seeds, args.workers)
    out = _out_dir(args, cfg)
    stem = f"sweep-{args.mode}"
    (out / f"{stem}.csv").write_text(report.rows_to_csv(report.result_row(r) for r in table.runs),
                                     encoding="utf-8")
    text = report.sweep_text(table, cfg.task.metric)
    (out / f"{stem}.txt").write_text(text, encoding="utf-8")
    print(text, end="")
    print(f"wrote {out / (stem + '.csv')} and {out / (stem + '.txt')}")
    return 0


def cmd_report(args) -> int:
    rows = []
    for path in args.csv:
        rows += report.read_rows(path)
    text = report.summary_table(rows)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(text, encoding="utf-8")
    print(text, end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="peftlab", description=__doc__.strip().splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint_help=None, seed=True):
        p.add_argument("--config", help="harness config (JSON); defaults apply when omitted")
        if checkpoint_help:
            p.add_argument("--checkpoint", help=checkpoint_help)
        p.add_argument("--out", help="output directory (default: the config's 'out')")
        if seed:
            p.add_argument("--seed", type=int, help="override the config's seed(s)")
        return p

    p = common(sub.add_parser("pretrain", help="pretrain the toy upstream encoder"),
               "where to write the upstream checkpoint (default: OUT/upstream.ckpt)")
    p.set_defaults(func=cmd_pretrain)

    p = common(sub.add_parser("run", help="train one method on one task per seed"), "upstream checkpoint")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("count-params", help="trainable upstream parameters per method")
    p.add_argument("--config", help="harness config (JSON)")
    p.set_defaults(func=cmd_count_params)

    p = common(sub.add_parser("sweep", help="learning-rate or low-resource sweep"), "upstream checkpoint")
    p.add_argument("--mode", choices=["lr", "lowresource"], required=True)
    p.add_argument("--workers", type=int, default=1, help="worker processes (default 1)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="methods x tasks summary of result CSVs")
    p.add_argument("csv", nargs="+", help="result CSV files")
    p.add_argument("--out", help="also write OUT/report.txt")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (PeftLabError, OSError, ValueError) as exc:
        print(f"peftlab {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
