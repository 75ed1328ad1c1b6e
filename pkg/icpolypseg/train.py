import os
import copy
import json
import math
import time
import random
import logging
from dataclasses import dataclass, field, asdict
from contextlib import contextmanager
from typing import Optional, List, Dict, Tuple, Iterator

import numpy as np
import torch

from .config import TrainConfig, save_config, to_dict
from .data import PolypDataset, multiscale_size, rescale_batch
from .db import RunDB
from .errors import ContractViolation, DatasetError, NonFiniteError, TrainingDiverged
from .metrics import EvalReport, evaluate
from .network import ICPolypSeg, build_model, save_checkpoint, load_checkpoint
from .objective import deep_supervised_loss

log = logging.getLogger("icpolypseg.train")

BEST_CHECKPOINT = "best.ckpt"
TRAIN_LOG = "train_log.jsonl"
TRAIN_CONFIG = "train_config.json"


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    per_head: Dict[str, float]
    lr: float
    wall_time: float


@dataclass
class TrainResult:
    model: ICPolypSeg
    best_checkpoint: str
    log_path: str
    history: List[EpochRecord] = field(default_factory=list)
    best_val_loss: float = math.inf
    best_epoch: int = 0
    stopped_early: bool = False


class EarlyStopping:
    """Stops once the monitored loss has not improved for `patience` consecutive epochs."""

    def __init__(self, patience: int):
        if patience < 1:
            raise ContractViolation(f"patience must be >= 1, got {patience}")
        self.patience = patience
        self.best = math.inf
        self.bad_epochs = 0

    def update(self, loss: float) -> bool:
        """Record one epoch; returns True when it is a new best."""
        if loss < self.best:
            self.best = loss
            self.bad_epochs = 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience


@contextmanager
def configure_determinism(seed: int, deterministic: bool) -> Iterator[None]:
    """Seed every RNG; in deterministic mode also force deterministic kernels on one
    thread until the block exits."""
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
    if not deterministic:
        yield
        return
    prev_algorithms = torch.are_deterministic_algorithms_enabled()
    prev_warn_only = torch.is_deterministic_algorithms_warn_only_enabled()
    prev_threads = torch.get_num_threads()
    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(1)
    try:
        yield
    finally:
        torch.use_deterministic_algorithms(prev_algorithms, warn_only=prev_warn_only)
        torch.set_num_threads(prev_threads)


def make_optimizer(model: torch.nn.Module, cfg: TrainConfig) -> torch.optim.Optimizer:
    # decoupled weight decay, constant learning rate
    return torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)


def validation_loss(model: ICPolypSeg, dataset: PolypDataset, cfg: TrainConfig) -> Tuple[float, Dict[str, float]]:
    """Sample-weighted mean deep-supervised loss at the base input size."""
    was_training = model.training
    model.eval()
    total, heads, seen = 0.0, {}, 0
    try:
        with torch.no_grad():
            for batch in dataset.batches(cfg.batch_size):
                preds = model(batch.images)
                loss, breakdown = deep_supervised_loss(preds, batch.masks, cfg.loss)
                n = len(batch)
                total += float(loss) * n
                for name, value in breakdown.items():
                    heads[name] = heads.get(name, 0.0) + value * n
                seen += n
    finally:
        model.train(was_training)
    return total / seen, {k: v / seen for k, v in heads.items()}


def _append_record(path: str, rec: EpochRecord) -> None:
    with open(path, "a", encoding="utf-8") as f:
        f.write(json.dumps(asdict(rec), sort_keys=True) + "\n")


def read_log(path: str) -> List[EpochRecord]:
    with open(path, "r", encoding="utf-8") as f:
        return [EpochRecord(**json.loads(line)) for line in f if line.strip()]


def train(cfg: TrainConfig, train_set: PolypDataset, val_set: PolypDataset, out_dir: str,
          db: Optional[RunDB] = None, run_id: Optional[str] = None) -> TrainResult:
    cfg.validate()
    if len(train_set) == 0 or len(val_set) == 0:
        raise DatasetError("size-0 dataset: training and validation sets must be non-empty")
    for ds in (train_set, val_set):
        if not ds.has_masks:
            raise DatasetError(f"{ds.name}: training needs masks for every image")
        if ds.target_size != cfg.model.input_size:
            raise ContractViolation(
                f"{ds.name} is loaded at {ds.target_size}px, model input_size is {cfg.model.input_size}"
            )

    os.makedirs(out_dir, exist_ok=True)
    save_config(cfg, os.path.join(out_dir, TRAIN_CONFIG))
    log_path = os.path.join(out_dir, TRAIN_LOG)
    best_path = os.path.join(out_dir, BEST_CHECKPOINT)
    open(log_path, "w").close()

    with configure_determinism(cfg.seed, cfg.deterministic):
        return _fit(cfg, train_set, val_set, log_path, best_path, db, run_id)


def _fit(cfg: TrainConfig, train_set: PolypDataset, val_set: PolypDataset, log_path: str, best_path: str,
         db: Optional[RunDB], run_id: Optional[str]) -> TrainResult:
    model = build_model(cfg.model, cfg.seed)
    model.train()
    opt = make_optimizer(model, cfg)
    shuffle = torch.Generator().manual_seed(cfg.seed)
    scale_rng = random.Random(cfg.seed)
    stopper = EarlyStopping(cfg.early_stop_patience)
    result = TrainResult(model=model, best_checkpoint=best_path, log_path=log_path)

    log.info("training %d/%d samples at %dpx for up to %d epochs", len(train_set), len(val_set),
             cfg.model.input_size, cfg.max_epochs)
    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        order = torch.randperm(len(train_set), generator=shuffle).tolist()
        total, heads, seen = 0.0, {}, 0
        for step, batch in enumerate(train_set.batches(cfg.batch_size, order=order)):
            size = multiscale_size(cfg.model.input_size, scale_rng.choice(cfg.scales))
            batch = rescale_batch(batch, size)
            try:
                preds = model(batch.images)
                loss, breakdown = deep_supervised_loss(preds, batch.masks, cfg.loss)
            except NonFiniteError as e:
                raise TrainingDiverged(f"epoch {epoch} step {step}: {e}", _last_good(best_path)) from e
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"epoch {epoch} step {step}: non-finite loss", _last_good(best_path))
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()

            n = len(batch)
            total += float(loss.detach()) * n
            for name, value in breakdown.items():
                heads[name] = heads.get(name, 0.0) + value * n
            seen += n

        try:
            val_loss, _ = validation_loss(model, val_set, cfg)
        except NonFiniteError as e:
            raise TrainingDiverged(f"epoch {epoch} validation: {e}", _last_good(best_path)) from e
        if not math.isfinite(val_loss):
            raise TrainingDiverged(f"epoch {epoch}: non-finite validation loss", _last_good(best_path))

        rec = EpochRecord(
            epoch=epoch,
            train_loss=total / seen,
            val_loss=val_loss,
            per_head={k: v / seen for k, v in heads.items()},
            lr=opt.param_groups[0]["lr"],
            wall_time=time.perf_counter() - t0,
        )
        improved = stopper.update(val_loss)
        if improved:
            save_checkpoint(model, best_path, extra={"epoch": epoch, "val_loss": val_loss})
            result.best_val_loss, result.best_epoch = val_loss, epoch
        result.history.append(rec)
        _append_record(log_path, rec)
        if db is not None and run_id:
            db.add_epoch(run_id, epoch, rec.train_loss, rec.val_loss, rec.per_head, rec.lr, rec.wall_time)
        log.info("epoch %d: train %.4f val %.4f%s (%.1fs)", epoch, rec.train_loss, rec.val_loss,
                 " *" if improved else "", rec.wall_time)

        if stopper.should_stop:
            log.warning("early stop at epoch %d, best epoch %d", epoch, result.best_epoch)
            result.stopped_early = True
            break

    load_checkpoint(best_path, model)
    model.eval()
    return result


def _last_good(path: str) -> Optional[str]:
    return path if os.path.exists(path) else None


# ---------------------------
# Ablation
# ---------------------------

ABLATION_SETTINGS = (
    ("Baseline", {"use_pfr": False, "use_cpfr": False, "use_cfc": False}),
    ("+ PFR", {"use_pfr": True, "use_cpfr": False, "use_cfc": False}),
    ("+ PFR + CPFR", {"use_pfr": True, "use_cpfr": True, "use_cfc": False}),
    ("+ PFR + CPFR + CFC", {"use_pfr": True, "use_cpfr": True, "use_cfc": True}),
)

# parameter-name prefixes each step adds / removes
_EXPECTED_DELTAS = (
    (("pfr.",), ()),
    (("cpfr.",), ("fuse.",)),
    (("cfc.",), ()),
)

SOFT_DICE_MARGIN = 0.02


@dataclass
class AblationResult:
    reports: List[EvalReport]
    table: EvalReport
    deltas: List[Dict[str, List[str]]]


def ablation_configs(base: TrainConfig) -> List[Tuple[str, TrainConfig]]:
    out = []
    for label, toggles in ABLATION_SETTINGS:
        cfg = copy.deepcopy(base)
        for key, value in toggles.items():
            setattr(cfg.model, key, value)
        out.append((label, cfg))
    return out


def _slug(label: str) -> str:
    s = label.lower().replace("+", "plus").replace(" ", "_")
    return "_".join(p for p in s.split("_") if p)


def parameter_deltas(name_sets: List[set]) -> List[Dict[str, List[str]]]:
    """Check consecutive settings differ by exactly the toggled block's parameters."""
    deltas = []
    for (prev, cur), (add_prefixes, drop_prefixes) in zip(zip(name_sets, name_sets[1:]), _EXPECTED_DELTAS):
        added, removed = sorted(cur - prev), sorted(prev - cur)
        if not added or any(not n.startswith(add_prefixes) for n in added):
            raise ContractViolation(f"toggle added unexpected parameters: {added}")
        if any(not n.startswith(drop_prefixes) for n in removed) or bool(removed) != bool(drop_prefixes):
            raise ContractViolation(f"toggle removed unexpected parameters: {removed}")
        deltas.append({"added": added, "removed": removed})
    return deltas


def ablate(base_cfg: TrainConfig, train_set: PolypDataset, val_set: PolypDataset, out_dir: str,
           threshold: float = 0.5, db: Optional[RunDB] = None, run_id: Optional[str] = None) -> AblationResult:
    """Train and evaluate the four component settings with identical seeds and data."""
    os.makedirs(out_dir, exist_ok=True)
    reports: List[EvalReport] = []
    name_sets: List[set] = []
    for label, cfg in ablation_configs(base_cfg):
        log.info("ablation: %s", label)
        result = train(cfg, train_set, val_set, os.path.join(out_dir, _slug(label)), db=db, run_id=run_id and f"{run_id}:{_slug(label)}")
        name_sets.append({n for n, _ in result.model.named_parameters()})
        reports.append(evaluate(result.model, val_set, threshold, dataset_name=val_set.name, model_name=label))

    deltas = parameter_deltas(name_sets)
    table = EvalReport(rows=[r.rows[0] for r in reports], threshold=threshold)
    with open(os.path.join(out_dir, "ablation.json"), "w", encoding="utf-8") as f:
        json.dump({**table.to_dict(), "config": to_dict(base_cfg), "parameter_deltas": dict(zip(
            [label for label, _ in ABLATION_SETTINGS[1:]], deltas))}, f, indent=2)
    table.to_csv(os.path.join(out_dir, "ablation.csv"))
    if db is not None and run_id:
        db.add_report_rows(run_id, table.rows)

    baseline, full = table.rows[0], table.rows[-1]
    if full.mdice < baseline.mdice - SOFT_DICE_MARGIN:
        log.warning("full model mDice %.4f trails baseline %.4f by more than %.2f",
                    full.mdice, baseline.mdice, SOFT_DICE_MARGIN)
    return AblationResult(reports=reports, table=table, deltas=deltas)
