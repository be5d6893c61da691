"""Command-line entry point: ``generate``, ``pretrain``, ``train``, ``evaluate``, ``ablate``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from .checkpoint import save_embeddings
from .config import DEFAULTS_DOC, RunConfig, apply_overrides, load_config
from .errors import ConfigError, TkgqaError
from .harness import ablate, evaluate, load_data, train, write_report
from .store import load_tsv
from .synthetic import SyntheticConfig, write_dataset
from .tkge import PretrainConfig, pretrain


def _config(args) -> RunConfig:
    config = load_config(args.config) if args.config else RunConfig()
    overrides = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"seed={args.seed}")
    return apply_overrides(config, overrides)


def _echo(msg):
    print(msg, flush=True)


def cmd_generate(args):
    cfg = SyntheticConfig()
    known = {f.name for f in dataclasses.fields(cfg)}
    changes = {}
    for item in args.set or []:
        key, _, value = item.partition("=")
        if key not in known:
            raise ConfigError(f"unknown generator key {key!r}")
        try:
            changes[key] = type(getattr(cfg, key))(value)
        except ValueError:
            raise ConfigError(f"{key}: cannot parse {value!r}") from None
    cfg = dataclasses.replace(cfg, **changes)
    paths = write_dataset(args.out, cfg, args.seed)
    for name, path in paths.items():
        _echo(f"{name}: {path}")


def cmd_pretrain(args):
    config = _config(args)
    store = load_tsv(config.facts)
    lam = config.lam if config.time_aware else 0.0
    result = pretrain(store, PretrainConfig(dim=config.dim, lam=lam, lr=config.pretrain_lr,
                                            epochs=config.pretrain_epochs, init_scale=config.pretrain_init,
                                            positional=config.time_aware, seed=config.seed))
    out = Path(args.out or config.checkpoint)
    save_embeddings(out, store, result.tables, result.head, config.seed)
    for epoch, (fin, tc, ts) in enumerate(result.trace, 1):
        _echo(f"epoch {epoch:3d}  L_fin {fin:.6f}  L_tc {tc:.6f}  L_ts {ts:.6f}")
    _echo(f"embeddings written to {out}")


def cmd_train(args):
    config = _config(args)
    out = Path(args.out or config.checkpoint)
    result = train(config, embeddings=args.embeddings, checkpoint_dir=out, log=_echo)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(config.to_text(), encoding="utf-8")
    with open(out / "trace.jsonl", "w", encoding="utf-8") as fh:
        for row in result.trace:
            fh.write(json.dumps(row) + "\n")
    write_report(result.reports[result.best_epoch], out, stem="dev_report")
    _echo(f"best dev epoch {result.best_epoch}; checkpoint in {out}")


def cmd_evaluate(args):
    config = _config(args)
    checkpoint = args.checkpoint or config.checkpoint
    report = evaluate(config, checkpoint, split=args.split)
    _echo(report.to_text())
    if args.out:
        write_report(report, args.out, stem=f"{args.split}_report")
    if args.json:
        _echo(json.dumps(report.to_json(), indent=2, sort_keys=True))


def cmd_ablate(args):
    config = _config(args)
    result = ablate(config, load_data(config), log=_echo)
    _echo(result.to_text())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "ablation.txt").write_text(result.to_text() + "\n", encoding="utf-8")
        (out / "ablation.json").write_text(json.dumps(result.to_json(), indent=2, sort_keys=True) + "\n",
                                           encoding="utf-8")


def build_parser() -> argparse.ArgumentParser:
    keys = "\n".join(f"  {k:<17}{DEFAULTS_DOC[k]}" for k in DEFAULTS_DOC)
    parser = argparse.ArgumentParser(prog="tkgqa", description="Temporal KG question answering toolkit.",
                                     epilog=f"config keys:\n{keys}", formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p, seed_required=False):
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        p.add_argument("--seed", type=int, required=seed_required, help="random seed")
        return p

    p = sub.add_parser("generate", help="write the synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one generator setting")
    p.set_defaults(func=cmd_generate)

    p = with_config(sub.add_parser("pretrain", help="train the temporal KG embeddings alone"))
    p.add_argument("--out", help="checkpoint directory (default: config checkpoint)")
    p.set_defaults(func=cmd_pretrain)

    p = with_config(sub.add_parser("train", help="end-to-end training"), seed_required=True)
    p.add_argument("--out", help="checkpoint directory (default: config checkpoint)")
    p.add_argument("--embeddings", help="start from a pretrain checkpoint instead of pretraining")
    p.set_defaults(func=cmd_train)

    p = with_config(sub.add_parser("evaluate", help="evaluate a checkpoint"))
    p.add_argument("--checkpoint")
    p.add_argument("--split", choices=("train", "dev", "test"), default="test")
    p.add_argument("--out", help="directory for text, JSON and per-question reports")
    p.add_argument("--json", action="store_true", help="also print the JSON report")
    p.set_defaults(func=cmd_evaluate)

    p = with_config(sub.add_parser("ablate", help="full model versus single-component-off variants"),
                    seed_required=True)
    p.add_argument("--out", help="directory for ablation.txt and ablation.json")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except TkgqaError as exc:
        print(f"[{exc.category}] {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"[io] {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
