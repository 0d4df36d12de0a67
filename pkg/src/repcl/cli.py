"""Command-line front end: pretrain, run, sweep, analyze, report.

Exit codes are a stable contract: 0 success, 2 usage/config errors,
3 config/checkpoint state mismatch, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .backbone import ViT
from .config import ConfigError, RunConfig, load_config, parse_config
from .data import gen_synthetic_stream
from .tensor import NonFiniteError
from .train import TrainingAborted, pretrain_backbones, run_stream

log = logging.getLogger("repcl")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STATE = 3
EXIT_NUMERIC = 4


def _setup_logging() -> None:
    level = os.environ.get("REP_LOG_LEVEL", "error").lower()
    if level not in ("error", "info", "debug"):
        level = "error"
    logging.basicConfig(level=getattr(logging, level.upper()),
                        format="%(levelname)s %(name)s: %(message)s")


def _load_cfg(path: str, seed: int | None) -> RunConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    cfg = load_config(p)
    if seed is not None:
        cfg = dataclasses.replace(cfg, seed=seed)
    return cfg


def _apply_rep_flags(cfg: RunConfig, args) -> RunConfig:
    if args.rep is not None:
        cfg = cfg.with_rep(atom=args.rep, ald=args.rep, surrogate=args.rep)
    if args.no_atom:
        cfg = cfg.with_rep(atom=False)
    if args.no_ald:
        cfg = cfg.with_rep(ald=False)
    if args.no_surrogate:
        cfg = cfg.with_rep(surrogate=False)
    return cfg


def _structural(vit_cfg) -> dict:
    d = vit_cfg.to_dict()
    d.pop("n_classes")  # the CL head is rebuilt; class count may differ
    return d


def _load_checkpoint_for(cfg: RunConfig, path: str):
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"checkpoint file not found: {p}")
    main, surrogate, _, meta = ckpt.load_bundle(p)
    if (_structural(main.cfg) != _structural(cfg.backbone)
            or _structural(surrogate.cfg) != _structural(cfg.surrogate)):
        raise StateMismatch(f"checkpoint {p} does not match the run config")
    if meta.get("seed") is not None and meta["seed"] != cfg.seed:
        raise StateMismatch(
            f"checkpoint {p} was pretrained with seed {meta['seed']}, "
            f"run config uses seed {cfg.seed}")
    return main, surrogate


class StateMismatch(RuntimeError):
    pass


def _json_dump(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def _cfg_dict(cfg: RunConfig) -> dict:
    def conv(x):
        if dataclasses.is_dataclass(x):
            return {k: conv(v) for k, v in dataclasses.asdict(x).items()}
        return x
    d = {f.name: conv(getattr(cfg, f.name)) for f in dataclasses.fields(cfg)}
    d["backbone"] = cfg.backbone.to_dict()
    d["surrogate"] = cfg.surrogate.to_dict()
    return d


# -- commands ------------------------------------------------------------


def cmd_pretrain(args) -> int:
    cfg = _load_cfg(args.config, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    main, surrogate = pretrain_backbones(cfg)
    path = out / "backbone.ckpt"
    digest = ckpt.save_bundle(path, main, surrogate, meta={"seed": cfg.seed})
    print(f"checkpoint {path} sha256 {digest}")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _apply_rep_flags(_load_cfg(args.config, args.seed), args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_path = args.checkpoint or str(Path(args.config).parent / "backbone.ckpt")
    main, surrogate = _load_checkpoint_for(cfg, ckpt_path)
    trainer, summary = run_stream(cfg, main, surrogate)
    summary["config"] = _cfg_dict(cfg)
    _json_dump(summary, out / "summary.json")
    with open(out / "metrics.csv", "w") as f:
        f.write("task,step,loss,acc\n")
        for r in trainer.rows:
            f.write(f"{r.task},{r.step},{float(r.loss)!r},{float(r.acc)!r}\n")
    trainer.acc_matrix.to_csv(out / "accuracy_matrix.csv")
    trainer.last_report.write_csv(out / "merge_report.csv")
    trainer.gate_trace.write_csv(out / "gate_trace.csv")
    trainer.prof.write_csv(out / "ledger.csv")
    print(f"final_avg_acc {summary['final_avg_acc']:.4f} "
          f"train_macs {summary['train_macs']}")
    return EXIT_OK


def _set_path(d: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    for k in keys[:-1]:
        d = d.setdefault(k, {})
    d[keys[-1]] = value


def cmd_sweep(args) -> int:
    p = Path(args.config)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    base = json.loads(p.read_text())
    values = [json.loads(v) for v in args.values.split(",")]
    out = Path(args.out)
    for v in values:
        d = json.loads(json.dumps(base))
        _set_path(d, args.param, v)
        cfg = parse_config(d)
        if args.seed is not None:
            cfg = dataclasses.replace(cfg, seed=args.seed)
        cfg = _apply_rep_flags(cfg, args)
        sub = out / f"{args.param.replace('.', '_')}={v}"
        sub.mkdir(parents=True, exist_ok=True)
        ckpt_path = args.checkpoint or str(p.parent / "backbone.ckpt")
        main, surrogate = _load_checkpoint_for(cfg, ckpt_path)
        trainer, summary = run_stream(cfg, main, surrogate)
        summary["config"] = _cfg_dict(cfg)
        summary["sweep"] = {"param": args.param, "value": v}
        _json_dump(summary, sub / "summary.json")
        print(f"{args.param}={v} final_avg_acc {summary['final_avg_acc']:.4f} "
              f"train_macs {summary['train_macs']}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    from .analysis import mean_attention_distance
    p = Path(args.checkpoint)
    if not p.exists():
        raise ConfigError(f"checkpoint file not found: {p}")
    main, _, _, meta = ckpt.load_bundle(p)
    seed = args.seed if args.seed is not None else meta.get("seed", 0)
    stream = gen_synthetic_stream(1, 4, max(args.samples // 4, 1), seed,
                                  image_side=main.cfg.image_side)
    x = stream.tasks[0].train_x[: args.samples]
    from .tensor import no_grad
    with no_grad():
        _, records, _ = main.forward_tokens(main.embed(x), record_attention=True)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "attention_distance.csv"
    with open(path, "w") as f:
        f.write("layer,head,mean_distance\n")
        for rec in records:
            d = mean_attention_distance(rec, main.cfg.grid_side, prompt_len=0)
            f.write(f"{rec.layer},{rec.head},{float(d)!r}\n")
    print(f"wrote {path} ({len(records)} rows)")
    return EXIT_OK


def cmd_report(args) -> int:
    root = Path(args.dir)
    if not root.exists():
        raise ConfigError(f"directory not found: {root}")
    rows = []
    for sub in sorted(root.glob("**/summary.json")):
        s = json.loads(sub.read_text())
        rows.append((str(sub.parent.relative_to(root)),
                     s.get("final_avg_acc"), s.get("forgetting"),
                     s.get("total_macs"), s.get("train_macs"),
                     s.get("peak_bytes")))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "report.csv"
    with open(path, "w") as f:
        f.write("run,final_avg_acc,forgetting,total_macs,train_macs,peak_bytes\n")
        for r in rows:
            f.write(",".join("" if v is None else (repr(v) if isinstance(v, float) else str(v))
                             for v in r) + "\n")
    print(f"wrote {path} ({len(rows)} runs)")
    return EXIT_OK


# -- parser --------------------------------------------------------------


def _add_rep_flags(sp) -> None:
    g = sp.add_mutually_exclusive_group()
    g.add_argument("--rep", dest="rep", action="store_true", default=None)
    g.add_argument("--no-rep", dest="rep", action="store_false")
    sp.add_argument("--no-atom", action="store_true")
    sp.add_argument("--no-ald", action="store_true")
    sp.add_argument("--no-surrogate", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="repcl",
                                 description="resource-efficient prompting, desk scale")
    sub = ap.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("pretrain", help="train and freeze the backbones")
    sp.add_argument("--config", required=True)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", default=".")
    sp.set_defaults(fn=cmd_pretrain)

    sp = sub.add_parser("run", help="run a class-incremental stream")
    sp.add_argument("--config", required=True)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--checkpoint")
    sp.add_argument("--out", default=".")
    _add_rep_flags(sp)
    sp.set_defaults(fn=cmd_run)

    sp = sub.add_parser("sweep", help="run a one-parameter sweep")
    sp.add_argument("--config", required=True)
    sp.add_argument("--param", required=True, help="dotted path, e.g. atom.n")
    sp.add_argument("--values", required=True, help="comma-separated JSON values")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--checkpoint")
    sp.add_argument("--out", default=".")
    _add_rep_flags(sp)
    sp.set_defaults(fn=cmd_sweep)

    sp = sub.add_parser("analyze", help="dump per-layer/head attention distances")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--samples", type=int, default=16)
    sp.add_argument("--out", default=".")
    sp.set_defaults(fn=cmd_analyze)

    sp = sub.add_parser("report", help="aggregate summaries into one table")
    sp.add_argument("--dir", required=True)
    sp.add_argument("--out", default=".")
    sp.set_defaults(fn=cmd_report)
    return ap


def main(argv=None) -> int:
    _setup_logging()
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code not in (0, None) else EXIT_OK
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except StateMismatch as e:
        print(f"state mismatch: {e}", file=sys.stderr)
        return EXIT_STATE
    except (NonFiniteError, TrainingAborted) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


def entrypoint() -> None:
    sys.exit(main())
