"""lorun command line.

    lorun pretrain  --config configs/toy_cs.toml
    lorun finetune  --config configs/toy_cs.toml --backbone runs/toy_cs/backbone.lrck
    lorun baseline  --config configs/toy_cs.toml --strategy block_k
    lorun eval      --model runs/toy_cs/lorun.lrck --config configs/toy_cs.toml --csv eval.csv
    lorun lora swap|merge|inspect ...
    lorun verify    [--inject-fault adjoint]
    lorun params    --config configs/toy_cs.toml [--sweep-k 12]

Exit codes: 0 ok, 1 verification failed, 2 usage/config/schema/geometry, 3 runtime.
Tables and JSON lines go to stdout, progress to stderr.
"""
import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

from . import log
from .config import load_config, write_resolved
from .data import ingest
from .denoisers import weight_shapes
from .errors import (CheckpointSchemaError, ConfigError, ContractError, FormatError, LorunError, ShapeError,
                     UnsupportedError)
from .fileio import read_checkpoint, write_checkpoint, write_loss_csv, write_rows
from .lora import param_count
from .manage import inspect_adapters, merge_adapters, swap_adapters
from .metrics import evaluate, mean_row
from .training import finetune_lora, load_model, pretrain_backbone, train_baseline
from .verify import FAULTS, run_checks

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2, 3
USAGE_ERRORS = (ConfigError, CheckpointSchemaError, ShapeError, ContractError, FormatError, UnsupportedError,
                FileNotFoundError)


def _out_dir(args, cfg) -> Path:
    return Path(args.out or cfg.out_dir)


def _config(args):
    overrides = {"seed": args.seed} if getattr(args, "seed", None) is not None else None
    return load_config(args.config, overrides)


# ---------- training commands ----------

def cmd_pretrain(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    write_resolved(cfg, out)
    ckpt = pretrain_backbone(cfg.train_config("pretrain"), ingest(cfg.train_data), cfg.build_operator())
    write_checkpoint(out / "backbone.lrck", ckpt)
    write_loss_csv(out / "pretrain_loss.csv", ckpt.history)
    return EXIT_OK


def cmd_finetune(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    backbone = read_checkpoint(args.backbone)
    write_resolved(cfg, out)
    ckpt = finetune_lora(cfg.train_config("finetune"), backbone, ingest(cfg.train_data), cfg.build_operator())
    write_checkpoint(out / "lorun.lrck", ckpt)
    write_loss_csv(out / "finetune_loss.csv", ckpt.history)
    return EXIT_OK


def cmd_baseline(args) -> int:
    cfg = _config(args)
    strategy = args.strategy or cfg.strategy
    if strategy not in ("block_k", "block_share"):
        raise ConfigError(f"baseline needs strategy block_k or block_share, got {strategy!r}")
    out = _out_dir(args, cfg)
    backbone = read_checkpoint(args.backbone) if args.backbone else None
    write_resolved(cfg, out)
    tcfg = replace(cfg.train_config("baseline"), strategy=strategy)
    ckpt = train_baseline(tcfg, ingest(cfg.train_data), cfg.build_operator(), backbone)
    write_checkpoint(out / f"{strategy}.lrck", ckpt)
    write_loss_csv(out / f"{strategy}_loss.csv", ckpt.history)
    return EXIT_OK


# ---------- eval ----------

def _fmt(v: float) -> str:
    return f"{v:.6f}"


def cmd_eval(args) -> int:
    cfg = load_config(args.config) if args.config else None
    data = args.data or (cfg.test_data if cfg else None)
    if data is None:
        raise ConfigError("eval needs --data or a --config with test_data")
    sigma = args.noise_sigma if args.noise_sigma is not None else (cfg.noise_sigma if cfg else 0.0)
    seed = args.seed if args.seed is not None else (cfg.seed if cfg else 0)

    model = load_model(read_checkpoint(args.model))
    samples = ingest(data)
    op = model.operator
    mshape = op.measurement_shape((1,) + samples[0].shape)
    info = (f"task={op.kind} strategy={model.mode} stages={model.K} image={list(samples[0].shape)} "
            f"measurement={list(mshape[1:])}")
    log.info("eval", f"{len(samples)} samples, {info}")
    rows = evaluate(model, samples, sigma, seed, trajectory=args.trajectory)
    mean = mean_row(rows)

    fields = ["id", "psnr", "ssim", "baseline_psnr", "baseline_ssim"]
    if args.trajectory:
        fields += [f"stage{k}_psnr" for k in range(1, model.K + 1)]
    table = []
    for r in rows:
        rec = {"id": r.id, "psnr": _fmt(r.psnr), "ssim": _fmt(r.ssim),
               "baseline_psnr": _fmt(r.baseline_psnr), "baseline_ssim": _fmt(r.baseline_ssim)}
        rec.update({f"stage{k}_psnr": _fmt(v) for k, v in enumerate(r.trajectory, start=1)})
        table.append(rec)
    table.append({"id": "mean", **{k: _fmt(v) for k, v in mean.items()}})

    print(f"# {info}")
    print(",".join(fields))
    for rec in table:
        print(",".join(rec.get(f, "") for f in fields))
    csv_path = args.csv or (str(Path(cfg.out_dir) / "eval.csv") if cfg else None)
    if csv_path:
        write_rows(csv_path, fields, table, comment=info)
        log.info("eval", f"table -> {csv_path}")
    return EXIT_OK


# ---------- adapters ----------

def cmd_lora(args) -> int:
    if args.lora_cmd == "swap":
        ckpt = swap_adapters(read_checkpoint(args.target), read_checkpoint(args.donor))
        write_checkpoint(args.out, ckpt)
    elif args.lora_cmd == "merge":
        write_checkpoint(args.out, merge_adapters(read_checkpoint(args.model)))
    else:
        rows = inspect_adapters(read_checkpoint(args.model), args.out_dir, png=args.png)
        print("stage,target,rank,fro_norm,max_abs")
        for r in rows:
            print(f"{r['stage']},{r['target']},{r['rank']},{r['fro_norm']:.6g},{r['max_abs']:.6g}")
    return EXIT_OK


# ---------- verify / params ----------

def cmd_verify(args) -> int:
    rows = run_checks(args.only, args.inject_fault)
    for r in rows:
        print(json.dumps(r, sort_keys=True))
    return EXIT_OK if all(r["passed"] for r in rows) else EXIT_VERIFY


def cmd_params(args) -> int:
    cfg = load_config(args.config)
    shapes = weight_shapes(cfg.denoiser_config())
    rep = param_count(shapes, cfg.stages, cfg.gamma)
    print("arch,stages,gamma,backbone,per_stage_lora,lorun_total,block_k_equivalent,ratio")
    print(f"{cfg.arch},{rep.stages},{rep.gamma:g},{rep.backbone},{rep.per_stage_lora},{rep.lorun_total},"
          f"{rep.block_k_equivalent},{rep.ratio:.6f}")
    log.info("params", "ranks: " + ", ".join(f"{n}={r}" for n, r in rep.ranks.items()))
    if args.sweep_k:
        print()
        print("stages,lorun_total,block_k_equivalent,ratio")
        for K in range(1, args.sweep_k + 1):
            r = param_count(shapes, K, cfg.gamma)
            print(f"{K},{r.lorun_total},{r.block_k_equivalent},{r.ratio:.6f}")
    return EXIT_OK


# ---------- parser ----------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lorun", description="LoRA-adapted deep unfolding networks")
    ap.add_argument("--quiet", action="store_true", help="suppress progress logging on stderr")
    sub = ap.add_subparsers(dest="cmd", required=True)

    for name, fn, helptext in (("pretrain", cmd_pretrain, "train the shared backbone"),
                               ("finetune", cmd_finetune, "freeze the backbone and train per-stage LoRA"),
                               ("baseline", cmd_baseline, "full-parameter Block-K / Block-share training")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", required=True, help="TOML run config")
        p.add_argument("--out", default=None, help="output dir (default: out_dir from config)")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        if name in ("finetune", "baseline"):
            p.add_argument("--backbone", required=(name == "finetune"), help="pretrained backbone checkpoint")
        if name == "baseline":
            p.add_argument("--strategy", choices=("block_k", "block_share"), default=None)
        p.set_defaults(func=fn)

    p = sub.add_parser("eval", help="PSNR/SSIM table for a checkpoint")
    p.add_argument("--model", required=True, help="checkpoint (.lrck)")
    p.add_argument("--config", default=None, help="run config supplying test_data, noise_sigma, seed")
    p.add_argument("--data", default=None, help="pgm/tensor file, directory, or synthetic:key=value,...")
    p.add_argument("--csv", default=None, help="table path (default: <out_dir>/eval.csv with --config)")
    p.add_argument("--trajectory", action="store_true", help="add per-stage PSNR columns")
    p.add_argument("--noise-sigma", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("lora", help="swap, merge or inspect adapters")
    lsub = p.add_subparsers(dest="lora_cmd", required=True)
    q = lsub.add_parser("swap", help="replace all adapters with another task's over the same backbone")
    q.add_argument("--target", required=True, help="checkpoint whose backbone is kept")
    q.add_argument("--donor", required=True, help="checkpoint supplying adapters and stage params")
    q.add_argument("--out", required=True)
    q = lsub.add_parser("merge", help="fold adapters into per-stage weights")
    q.add_argument("--model", required=True)
    q.add_argument("--out", required=True)
    q = lsub.add_parser("inspect", help="heatmaps of every adapter delta")
    q.add_argument("--model", required=True)
    q.add_argument("--out-dir", required=True)
    q.add_argument("--png", action="store_true", help="also render PNGs (matplotlib)")
    p.set_defaults(func=cmd_lora)

    p = sub.add_parser("verify", help="run the invariant suite, JSON lines on stdout")
    p.add_argument("--inject-fault", choices=FAULTS, default=None, help="test hook: corrupt a component")
    p.add_argument("--only", nargs="*", default=None, help="check name prefixes to run")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("params", help="parameter accounting for a config")
    p.add_argument("--config", required=True)
    p.add_argument("--sweep-k", type=int, default=0, help="also print the ratio for K = 1..N")
    p.set_defaults(func=cmd_params)
    return ap


def main(argv: Optional[List[str]] = None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    if args.quiet:
        log.set_quiet(True)
    tag = args.cmd
    try:
        return args.func(args)
    except USAGE_ERRORS as e:
        log.error(tag, str(e))
        return EXIT_USAGE
    except (LorunError, OSError) as e:
        log.error(tag, str(e))
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
