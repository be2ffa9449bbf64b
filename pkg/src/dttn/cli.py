"""Command line: ``dttn {train,eval,verify,count}``.

Exit codes: 0 success, 1 a verification check failed, 2 usage or
configuration error (including missing data), 3 data/format error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .checkpoint import load_checkpoint, restore_model
from .config import RunConfig, load_config, parse_config
from .data import DATASETS
from .errors import ConfigurationError, FormatError, NumericError
from .model import build, count_flops_analytic, count_params_analytic, enumerate_params
from .train import evaluate, run_config_datasets, train
from .verify import SUITES, run_suite

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_DATA = 0, 1, 2, 3


def _run_config(args) -> RunConfig:
    overrides = list(args.set or [])
    for flag, key in (("data_dir", "data.data_dir"), ("dataset", "data.dataset"), ("out_dir", "trainer.out_dir")):
        if getattr(args, flag, None) is not None:
            overrides.append(f"{key}={getattr(args, flag)}")
    if getattr(args, "seed", None) is not None:
        overrides += [f"model.seed={args.seed}", f"trainer.seed={args.seed}"]
    if getattr(args, "variant", None) is not None:
        overrides.insert(0, f"model.variant={args.variant}")
    return load_config(args.config, overrides).validate()


def cmd_train(args) -> int:
    run = _run_config(args)
    if not Path(run.data.data_dir).is_dir():
        raise FileNotFoundError(f"data directory {run.data.data_dir} does not exist")
    tr, te = run_config_datasets(run)
    model = build(run.model)
    history = train(model, tr, te, run.trainer, run.to_text(), resume=args.resume)
    out = Path(run.trainer.out_dir)
    (out / "config.txt").write_text(run.to_text(), encoding="utf-8")
    final = history.rows[-1][5] if history.rows else float("nan")
    print(f"final_top1={final!r}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    overrides = list(args.set or [])
    if args.data_dir is not None:
        overrides.append(f"data.data_dir={args.data_dir}")
    if args.dataset is not None:
        overrides.append(f"data.dataset={args.dataset}")
    run = parse_config(ckpt.config_text, overrides, source=str(args.checkpoint)).validate()
    model = build(run.model)
    restore_model(model, ckpt)
    _, te = run_config_datasets(run)
    loss, top1 = evaluate(model, te, args.batch_size or run.trainer.eval_batch_size)
    if args.json:
        print(json.dumps({"top1": top1, "loss": loss, "n": len(te)}))
    else:
        print(f"top1={top1!r} loss={loss!r}")
    return EXIT_OK


def cmd_verify(args) -> int:
    reports = run_suite(args.only, seed=args.seed or 0)
    if args.json:
        print(json.dumps([r.as_dict() for r in reports], indent=2, default=float))
    else:
        for r in reports:
            print(r.line())
    return EXIT_OK if all(r.passed for r in reports) else EXIT_VERIFY


def cmd_count(args) -> int:
    run = _run_config(args)
    cfg = run.model
    analytic = count_params_analytic(cfg)
    enumerated = enumerate_params(build(cfg.replace(dtype="f32")))
    cost = count_flops_analytic(cfg)
    if args.json:
        print(json.dumps({"variant": cfg.variant, "blocks": cfg.n_blocks, "stage_blocks": list(cfg.stage_blocks),
                          "params_analytic": analytic, "params_enumerated": enumerated, **cost}, indent=2))
        return EXIT_OK
    print(f"variant={cfg.variant} blocks={cfg.n_blocks} stage_blocks={','.join(map(str, cfg.stage_blocks))} "
          f"hidden={','.join(map(str, cfg.stage_hidden))} r={cfg.r_exp} input={cfg.img_channels}x"
          f"{cfg.img_size[0]}x{cfg.img_size[1]} classes={cfg.classes}")
    print(f"{'component':<14}{'analytic':>14}{'enumerated':>14}{'MACs':>16}{'FLOPs':>16}")
    for k in ("embed", "blocks", "downsamplers", "head"):
        print(f"{k:<14}{analytic[k]:>14,}{enumerated[k]:>14,}{cost['macs'][k]:>16,}{cost['flops'][k]:>16,}")
    print(f"{'norm_affine':<14}{'':>14}{enumerated['norm_affine']:>14,}")
    print(f"{'norm_stats':<14}{'':>14}{enumerated['norm_stats']:>14,}")
    print(f"{'total':<14}{analytic['total']:>14,}{enumerated['total']:>14,}"
          f"{cost['macs']['total']:>16,}{cost['flops']['total']:>16,}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dttn", description="Tree tensor network classifier toolkit")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True):
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
        sp.add_argument("--seed", type=int)
        if data:
            sp.add_argument("--data-dir")
            sp.add_argument("--dataset", choices=DATASETS)
            sp.add_argument("--out-dir")

    t = sub.add_parser("train", help="train a model and write history.csv plus checkpoints")
    common(t)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    e.add_argument("checkpoint")
    e.add_argument("--set", action="append", metavar="KEY=VALUE")
    e.add_argument("--data-dir")
    e.add_argument("--dataset", choices=DATASETS)
    e.add_argument("--batch-size", type=int)
    e.add_argument("--json", action="store_true")
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("verify", help="run the algebraic checks")
    v.add_argument("--only", choices=SUITES)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--json", action="store_true")
    v.set_defaults(func=cmd_verify)

    c = sub.add_parser("count", help="parameter and FLOP breakdown")
    common(c, data=False)
    c.add_argument("--variant", help="preset name (tiny, small, large, desk)")
    c.add_argument("--json", action="store_true")
    c.set_defaults(func=cmd_count)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (ConfigurationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, NumericError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
