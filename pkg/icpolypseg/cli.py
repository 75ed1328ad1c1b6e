import os
import sys
import json
import uuid
import logging
import argparse
import datetime as _dt
from dataclasses import dataclass, field
from typing import Optional, List, Dict, Any, Callable

import torch
from dotenv import load_dotenv

from .config import (
    TrainConfig, SynthConfig, load_config, parse_override, to_dict, env_str, data_root_default, runs_db_path,
)
from .data import (
    load_dataset, train_val_sets, synth_generate, read_probability_map, read_mask,
    write_probability_map, write_mask,
)
from .db import RunDB, RunManifest, hash_artifacts
from .errors import ContractViolation, DatasetError
from .metrics import EvalReport, evaluate, evaluate_maps
from .network import build_model, load_checkpoint
from .profiler import profile
from .train import train, ablate, BEST_CHECKPOINT, TRAIN_CONFIG

log = logging.getLogger("icpolypseg.cli")

MANIFEST_NAME = "run_manifest.json"
EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
RUNTIME_ERRORS = (ValueError, ArithmeticError, RuntimeError, OSError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


@dataclass
class RunContext:
    args: argparse.Namespace
    out: str
    manifest: RunManifest
    db: Optional[RunDB] = None
    outputs: Dict[str, str] = field(default_factory=dict)


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


# ---------------------------
# Parser
# ---------------------------

def _add_config_flags(sp: argparse.ArgumentParser) -> None:
    sp.add_argument("--config", help="JSON config file")
    sp.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                    help="override a config leaf by dotted path, e.g. model.decoder_width=16")
    sp.add_argument("--seed", type=int)


def _add_train_flags(sp: argparse.ArgumentParser) -> None:
    _add_config_flags(sp)
    sp.add_argument("--data", help="dataset root (train/ + val/, or one pool split 90/10)")
    sp.add_argument("--input-size", type=int)
    sp.add_argument("--desk-preset", action="store_true")
    sp.add_argument("--deterministic", action="store_true", help="single-threaded, bit-exact mode")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="icpolypseg", description="IC-PolypSeg training, evaluation and profiling.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic polyp dataset")
    _add_config_flags(g)
    g.add_argument("--count", type=int)
    g.add_argument("--val-count", type=int, default=0, help="also write a val/ split of this size")
    g.add_argument("--canvas", type=int)
    g.add_argument("--out")

    t = sub.add_parser("train", help="train one model")
    _add_train_flags(t)
    t.add_argument("--out")

    e = sub.add_parser("eval", help="score a checkpoint or saved predictions")
    e.add_argument("--checkpoint")
    e.add_argument("--predictions", help="directory of <id>.png probability maps or masks")
    e.add_argument("--data", action="append", default=[], help="dataset root; repeat for several")
    e.add_argument("--split")
    e.add_argument("--threshold", type=float, default=0.5)
    e.add_argument("--input-size", type=int)
    e.add_argument("--out")

    pr = sub.add_parser("predict", help="write probability maps and masks")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--data")
    pr.add_argument("--split")
    pr.add_argument("--threshold", type=float, default=0.5)
    pr.add_argument("--input-size", type=int)
    pr.add_argument("--out")

    a = sub.add_parser("ablate", help="train and score the four component settings")
    _add_train_flags(a)
    a.add_argument("--threshold", type=float, default=0.5)
    a.add_argument("--out")

    f = sub.add_parser("profile", help="params, MACs and single-thread FPS")
    f.add_argument("--checkpoint")
    _add_config_flags(f)
    f.add_argument("--desk-preset", action="store_true")
    f.add_argument("--input-size", type=int)
    f.add_argument("--runs", type=int, default=30)
    f.add_argument("--out")
    return p


# ---------------------------
# Config resolution
# ---------------------------

def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    out = {}
    for text in getattr(args, "overrides", []) or []:
        key, value = parse_override(text)
        out[key] = value
    return out


def resolve_train_config(args: argparse.Namespace) -> TrainConfig:
    """defaults (or desk preset) < --config < flags < --set."""
    flags: Dict[str, Any] = {}
    if args.seed is not None:
        flags["seed"] = args.seed
    if getattr(args, "input_size", None) is not None:
        flags["model.input_size"] = args.input_size
    if getattr(args, "deterministic", False):
        flags["deterministic"] = True
    flags.update(_overrides(args))
    base = TrainConfig.desk() if getattr(args, "desk_preset", False) else TrainConfig()
    try:
        cfg = load_config(TrainConfig, base=base, path=args.config, overrides=flags)
        cfg.validate()
    except ContractViolation as e:
        raise UsageError(str(e)) from e
    return cfg


def resolve_synth_config(args: argparse.Namespace) -> SynthConfig:
    flags: Dict[str, Any] = {}
    if args.seed is not None:
        flags["seed"] = args.seed
    if args.count is not None:
        flags["count"] = args.count
    if args.canvas is not None:
        flags["canvas"] = args.canvas
    flags.update(_overrides(args))
    try:
        return load_config(SynthConfig, path=args.config, overrides=flags)
    except ContractViolation as e:
        raise UsageError(str(e)) from e


def _data_root(value: Optional[str]) -> str:
    root = value or data_root_default()
    if not root:
        raise UsageError("no dataset given: pass --data or set ICPOLYP_DATA_ROOT")
    return root


def _load_model(args: argparse.Namespace):
    model = load_checkpoint(args.checkpoint)
    if args.input_size is not None:
        if args.input_size < 32 or args.input_size % 32:
            raise UsageError(f"--input-size must be a positive multiple of 32, got {args.input_size}")
        model.cfg.input_size = args.input_size
    return model.eval()


# ---------------------------
# Commands
# ---------------------------

def cmd_gen_data(run: RunContext) -> None:
    args = run.args
    cfg = resolve_synth_config(args)
    run.manifest.config = to_dict(cfg)
    run.manifest.seed = cfg.seed
    if args.val_count:
        synth_generate(cfg, os.path.join(run.out, "train"))
        val_cfg = SynthConfig(**{**to_dict(cfg), "count": args.val_count, "seed": cfg.seed + 1})
        synth_generate(val_cfg, os.path.join(run.out, "val"))
        run.outputs.update({"train": os.path.join(run.out, "train"), "val": os.path.join(run.out, "val")})
    else:
        synth_generate(cfg, run.out)
        run.outputs.update({"images": os.path.join(run.out, "images"), "masks": os.path.join(run.out, "masks"),
                            "synth_config": os.path.join(run.out, "synth_config.json")})
    print(f"✅ wrote {cfg.count} synthetic pairs to {run.out}")


def cmd_train(run: RunContext) -> None:
    args = run.args
    cfg = resolve_train_config(args)
    root = _data_root(args.data)
    run.manifest.config = to_dict(cfg)
    run.manifest.seed = cfg.seed
    run.manifest.inputs = {"data": os.path.abspath(root)}
    train_set, val_set = train_val_sets(root, cfg.model.input_size, cfg.val_fraction, cfg.seed)
    result = train(cfg, train_set, val_set, run.out, db=run.db, run_id=run.manifest.run_id)
    run.outputs.update({"checkpoint": result.best_checkpoint, "train_config": os.path.join(run.out, TRAIN_CONFIG),
                        "train_log": result.log_path})
    print(f"✅ best epoch {result.best_epoch}: val loss {result.best_val_loss:.4f} -> {result.best_checkpoint}")


def _prediction_items(pred_dir: str, dataset):
    for image_id, _, mask_path in dataset.pairs:
        path = os.path.join(pred_dir, f"{image_id}.png")
        if not os.path.isfile(path):
            raise DatasetError(f"no prediction for {image_id}: expected {path} (mask {mask_path})")
        prob = read_probability_map(path)
        if prob.shape[0] != prob.shape[1]:
            raise DatasetError(f"prediction {path} is not square: {prob.shape}")
        yield image_id, prob, read_mask(mask_path, prob.shape[0])


def cmd_eval(run: RunContext) -> None:
    args = run.args
    if bool(args.checkpoint) == bool(args.predictions):
        raise UsageError("eval needs exactly one of --checkpoint or --predictions")
    if not 0.0 < args.threshold < 1.0:
        raise UsageError(f"--threshold must be in (0, 1), got {args.threshold}")
    roots = args.data or [_data_root(None)]
    run.manifest.inputs = {"data": [os.path.abspath(r) for r in roots],
                           "checkpoint": args.checkpoint, "predictions": args.predictions}
    run.manifest.config = {"threshold": args.threshold, "split": args.split, "input_size": args.input_size}

    report = EvalReport(threshold=args.threshold)
    if args.checkpoint:
        model = _load_model(args)
        run.manifest.config["model"] = to_dict(model.cfg)
        for root in roots:
            ds = load_dataset(root, args.split, model.cfg.input_size)
            report.merge(evaluate(model, ds, args.threshold, model_name=os.path.basename(args.checkpoint)))
    else:
        for root in roots:
            ds = load_dataset(root, args.split, target_size=32)
            report.merge(evaluate_maps(_prediction_items(args.predictions, ds), args.threshold,
                                       dataset_name=ds.name, model_name=os.path.basename(os.path.normpath(args.predictions))))
    for path in report.write(run.out, "report"):
        run.outputs[os.path.basename(path)] = path
    if run.db is not None:
        run.db.add_report_rows(run.manifest.run_id, report.rows)
    for r in report.rows:
        print(f"✅ {r.dataset}: mDice {r.mdice:.4f} | mIoU {r.miou:.4f} | MAE {r.mae:.4f} | FNR {r.fnr:.4f}")


def cmd_predict(run: RunContext) -> None:
    args = run.args
    if not 0.0 < args.threshold < 1.0:
        raise UsageError(f"--threshold must be in (0, 1), got {args.threshold}")
    model = _load_model(args)
    root = _data_root(args.data)
    run.manifest.inputs = {"data": os.path.abspath(root), "checkpoint": args.checkpoint}
    run.manifest.config = {"threshold": args.threshold, "split": args.split, "model": to_dict(model.cfg)}
    ds = load_dataset(root, args.split, model.cfg.input_size, require_masks=False)
    prob_dir = os.path.join(run.out, "probs")
    mask_dir = os.path.join(run.out, "masks")
    os.makedirs(prob_dir, exist_ok=True)
    os.makedirs(mask_dir, exist_ok=True)

    with torch.no_grad():
        for batch in ds.batches(1):
            prob = model(batch.images).final[0, 0].cpu().numpy()
            write_probability_map(os.path.join(prob_dir, f"{batch.ids[0]}.png"), prob)
            write_mask(os.path.join(mask_dir, f"{batch.ids[0]}.png"), prob > args.threshold)
    run.outputs.update({"probs": prob_dir, "masks": mask_dir})
    print(f"✅ wrote {len(ds)} predictions to {run.out}")


def cmd_ablate(run: RunContext) -> None:
    args = run.args
    cfg = resolve_train_config(args)
    root = _data_root(args.data)
    run.manifest.config = to_dict(cfg)
    run.manifest.seed = cfg.seed
    run.manifest.inputs = {"data": os.path.abspath(root)}
    train_set, val_set = train_val_sets(root, cfg.model.input_size, cfg.val_fraction, cfg.seed)
    result = ablate(cfg, train_set, val_set, run.out, threshold=args.threshold, db=run.db,
                    run_id=run.manifest.run_id)
    run.outputs.update({"ablation_json": os.path.join(run.out, "ablation.json"),
                        "ablation_csv": os.path.join(run.out, "ablation.csv")})
    for label_dir in sorted(os.listdir(run.out)):
        ckpt = os.path.join(run.out, label_dir, BEST_CHECKPOINT)
        if os.path.isfile(ckpt):
            run.outputs[f"{label_dir}/checkpoint"] = ckpt
    for r in result.table.rows:
        print(f"✅ {r.model:<20} mDice {r.mdice:.4f} | mIoU {r.miou:.4f} | MAE {r.mae:.4f} | FNR {r.fnr:.4f}")


def cmd_profile(run: RunContext) -> None:
    args = run.args
    if args.checkpoint:
        model = load_checkpoint(args.checkpoint).eval()
        run.manifest.inputs = {"checkpoint": args.checkpoint}
    else:
        cfg = resolve_train_config(argparse.Namespace(**{**vars(args), "input_size": None, "deterministic": False}))
        model = build_model(cfg.model, cfg.seed).eval()
    size = args.input_size or model.cfg.input_size
    if size < 32 or size % 32:
        raise UsageError(f"--input-size must be a positive multiple of 32, got {size}")
    run.manifest.config = {"model": to_dict(model.cfg), "input_size": size, "runs": args.runs}
    result = profile(model, size, runs=args.runs)
    path = os.path.join(run.out, "profile.json")
    with open(path, "w", encoding="utf-8") as f:
        json.dump(result.to_dict(), f, indent=2)
    run.outputs["profile"] = path
    print(f"✅ Params(M) {result.params_m:.3f} | MACs(G) {result.macs_g:.3f} | FPS {result.fps:.1f}  [{result.hardware}]")


COMMANDS: Dict[str, Callable[[RunContext], None]] = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "ablate": cmd_ablate,
    "profile": cmd_profile,
}


# ---------------------------
# Entry points
# ---------------------------

def _run(args: argparse.Namespace) -> int:
    out = args.out or os.path.join(os.getcwd(), "runs", args.command)
    os.makedirs(out, exist_ok=True)
    run_id = f"{args.command}-{_dt.datetime.now().strftime('%Y%m%dT%H%M%S')}-{uuid.uuid4().hex[:6]}"
    manifest = RunManifest(run_id=run_id, command=args.command, started_at=_now(), seed=getattr(args, "seed", None))
    run = RunContext(args=args, out=out, manifest=manifest, db=RunDB(runs_db_path()))
    run.db.start_run(run_id, args.command, manifest.seed, None)
    status = "failed"
    try:
        COMMANDS[args.command](run)
        status = "ok"
    finally:
        manifest.status = status
        manifest.outputs = dict(run.outputs)
        manifest.artifact_hashes = hash_artifacts(run.outputs.values()) if status == "ok" else {}
        manifest.ended_at = _now()
        manifest.write(os.path.join(out, MANIFEST_NAME))
        run.db.finish_run(run_id, status, manifest.outputs, manifest.artifact_hashes,
                          config=manifest.config, inputs=manifest.inputs, seed=manifest.seed)
        run.db.close()
    return EXIT_OK


def cli_main(argv: List[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _run(args)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:
        # --help / --version
        return int(e.code or 0)
    except RUNTIME_ERRORS as e:
        print(f"❌ {type(e).__name__}: {e}", file=sys.stderr)
        log.debug("run failed", exc_info=True)
        return EXIT_RUNTIME


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    level = env_str("ICPOLYP_LOG_LEVEL", "INFO").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    return cli_main(sys.argv[1:] if argv is None else argv)
