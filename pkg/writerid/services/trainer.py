"""
Training Service.
Fine-tuning policies, plateau scheduling, macro-F1 early stopping and
seeded training runs that write a self-describing run directory.
"""

import copy
import csv
import hashlib
import json
import math
import platform
import random
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Dict, List, Literal, Optional

import numpy as np
import structlog
import torch
import yaml
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .. import __version__
from ..core.data_model import DatasetManifest, manifest_checksum
from ..core.errors import DataError, TrainingAborted
from ..core.preprocess import AugmentParams, load_rgb, make_loader, set_loader_epoch
from ..core.splits import Role, SplitAssignment, write_split_csv
from ..models.layers import cross_entropy
from ..models.pipeline import ModelConfig, WriterIdentifier, build_model, save_checkpoint
from .evaluation import (
    PredictionSet,
    RunReport,
    aggregate_runs,
    classification_report,
    evaluate_predictions,
    macro_f1,
    write_predictions_csv,
    write_report_csv,
)
from .report_renderer import RunReportRenderer

logger = structlog.get_logger()

LOG_COLUMNS = ["epoch", "lr", "train_loss", "val_f1"]


class FinetuneMode(str, Enum):
    """How much of the backbone is updated."""
    FROZEN = "frozen"
    LAST_K = "last_k"
    FULL = "full"
    SCRATCH = "scratch"


class FinetunePolicy(BaseModel):
    """Backbone update policy; scratch means random backbone weights, all trainable."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    mode: FinetuneMode = FinetuneMode.FULL
    k: Optional[int] = Field(default=None, ge=1)
    pretrained: Optional[bool] = None

    @model_validator(mode="after")
    def _check_consistent(self) -> "FinetunePolicy":
        if self.mode == FinetuneMode.LAST_K and self.k is None:
            raise ValueError("last_k policy needs k")
        if self.mode != FinetuneMode.LAST_K and self.k is not None:
            raise ValueError(f"k only applies to last_k, not {self.mode.value}")
        if self.pretrained is False and self.mode in (FinetuneMode.FROZEN, FinetuneMode.LAST_K):
            raise ValueError(f"{self.mode.value} with a randomly initialized backbone is contradictory")
        if self.pretrained is True and self.mode == FinetuneMode.SCRATCH:
            raise ValueError("scratch training cannot use pretrained weights")
        return self

    @property
    def uses_pretrained(self) -> bool:
        if self.pretrained is not None:
            return self.pretrained
        return self.mode != FinetuneMode.SCRATCH

    @property
    def name(self) -> str:
        return f"last{self.k}" if self.mode == FinetuneMode.LAST_K else self.mode.value

    @classmethod
    def from_name(cls, name: str) -> "FinetunePolicy":
        """Parse the command-line form: frozen, last<k>, full or scratch."""
        if name.startswith("last") and name[4:].isdigit():
            return cls(mode=FinetuneMode.LAST_K, k=int(name[4:]))
        return cls(mode=FinetuneMode(name))


class SchedulerConfig(BaseModel):
    """Reduce-on-plateau over validation macro-F1."""

    model_config = ConfigDict(extra="forbid")

    factor: float = Field(default=0.5, gt=0.0, lt=1.0)
    patience: int = Field(default=10, gt=0)
    mode: Literal["max"] = "max"
    min_lr: float = Field(default=1e-8, gt=0.0)


class EarlyStoppingConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    metric: Literal["val_macro_f1"] = "val_macro_f1"
    patience: int = Field(default=50, gt=0)
    mode: Literal["max"] = "max"


class TrainConfig(BaseModel):
    """Optimization settings (`train.*` config keys)."""

    model_config = ConfigDict(extra="forbid")

    optimizer: Literal["adam"] = "adam"
    initial_lr: float = Field(default=1e-3, gt=0.0)
    batch_size: int = Field(default=256, gt=0)
    max_epochs: int = Field(default=450, gt=0)
    scheduler: SchedulerConfig = Field(default_factory=SchedulerConfig)
    early_stopping: EarlyStoppingConfig = Field(default_factory=EarlyStoppingConfig)
    finetune: FinetunePolicy = Field(default_factory=FinetunePolicy)
    num_workers: int = Field(default=0, ge=0)


@dataclass
class RunState:
    """End-of-epoch bookkeeping of one training run."""
    epoch: int = 0
    current_lr: float = 1e-3
    best_val_f1: float = -math.inf
    best_epoch: int = -1
    epochs_since_best: int = 0
    plateau_wait: int = 0
    rng_states: Dict[str, Any] = field(default_factory=dict)


@dataclass
class RunArtifacts:
    """Files and results of a finished run."""
    run_dir: Path
    seed: int
    best_epoch: int
    best_val_f1: float
    epochs_run: int
    report: RunReport
    files: Dict[str, Path] = field(default_factory=dict)


def apply_finetune_policy(model: WriterIdentifier, policy: FinetunePolicy) -> WriterIdentifier:
    """Set requires_grad on backbone tensors; everything after the backbone stays trainable."""
    layers = model.backbone.trainable_layers()
    if policy.mode == FinetuneMode.LAST_K and policy.k > len(layers):
        raise ValueError(f"k={policy.k} exceeds the {len(layers)} backbone layers")

    for param in model.parameters():
        param.requires_grad_(True)
    if policy.mode == FinetuneMode.FROZEN:
        for param in model.backbone.parameters():
            param.requires_grad_(False)
    elif policy.mode == FinetuneMode.LAST_K:
        for layer in layers[:-policy.k]:
            for param in layer.parameters(recurse=False):
                param.requires_grad_(False)

    model.train(model.training)
    trainable = sum(p.numel() for p in model.backbone.parameters() if p.requires_grad)
    logger.info("finetune_policy_applied", policy=policy.name, backbone_layers=len(layers), backbone_trainable=trainable)
    return model


def scheduler_step(state: RunState, val_f1: float, cfg: Optional[TrainConfig] = None) -> RunState:
    """
    Update best score and both patience counters after one epoch.

    Improvement is strict. The plateau counter halves the learning rate (never
    below min_lr) once it exceeds the scheduler patience, then restarts.
    """
    cfg = cfg or TrainConfig()
    if val_f1 > state.best_val_f1:
        return replace(state, best_val_f1=val_f1, best_epoch=state.epoch, epochs_since_best=0, plateau_wait=0)

    wait = state.plateau_wait + 1
    lr = state.current_lr
    if wait > cfg.scheduler.patience:
        lr = max(lr * cfg.scheduler.factor, cfg.scheduler.min_lr)
        wait = 0
    return replace(state, current_lr=lr, epochs_since_best=state.epochs_since_best + 1, plateau_wait=wait)


def early_stop_check(state: RunState, cfg: Optional[TrainConfig] = None) -> bool:
    cfg = cfg or TrainConfig()
    return state.epochs_since_best >= cfg.early_stopping.patience


def seed_everything(seed: int) -> Dict[str, Any]:
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
    return {"python": seed, "numpy": seed, "torch": seed}


@torch.no_grad()
def predict(model: WriterIdentifier, loader, class_labels: List[str], device: str = "cpu") -> PredictionSet:
    """Run the model over a loader in inference mode."""
    model.eval()
    line_ids: List[str] = []
    labels: List[np.ndarray] = []
    probabilities: List[np.ndarray] = []
    for images, one_hot, ids in loader:
        probs = model(images.to(device))
        probabilities.append(probs.double().cpu().numpy())
        labels.append(one_hot.argmax(dim=1).cpu().numpy())
        line_ids.extend(ids)
    return PredictionSet(
        line_ids=line_ids,
        true_labels=np.concatenate(labels) if labels else np.zeros(0, dtype=np.int64),
        probabilities=np.concatenate(probabilities) if probabilities else np.zeros((0, len(class_labels))),
        class_labels=class_labels,
    )


def _sha256_file(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_diagnostic(run_dir: Path, payload: Dict[str, Any]) -> Path:
    path = run_dir / "diagnostic.json"
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, default=str)
    return path


def _run_snapshot(split: SplitAssignment, model_cfg: ModelConfig, train_cfg: TrainConfig,
                  augment: AugmentParams, seed: int) -> Dict[str, Any]:
    return {
        "protocol": split.protocol.value,
        "seed": seed,
        "model": model_cfg.model_dump(mode="json"),
        "train": train_cfg.model_dump(mode="json"),
        "augment": augment.model_dump(mode="json"),
    }


def train_run(
    manifest: DatasetManifest,
    split: SplitAssignment,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    seed: int,
    run_dir: Path,
    augment: Optional[AugmentParams] = None,
    device: str = "cpu",
    image_loader: Callable[[str], np.ndarray] = load_rgb,
) -> RunArtifacts:
    """
    Train one seeded run and evaluate its best checkpoint on the test role.

    The run directory receives config.snapshot, split.csv, log.csv, best.ckpt,
    test_report.{csv,txt,md}, predictions.csv and reproducibility.json; a
    non-finite loss writes diagnostic.json and raises TrainingAborted.
    """
    if split.num_classes < 2:
        raise DataError(
            f"split has {split.num_classes} class(es); training needs at least 2",
            offenders=[c.label for c in split.classes],
        )
    model_cfg = ModelConfig.model_validate({**model_cfg.model_dump(), "num_classes": split.num_classes})
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    augment = augment or AugmentParams()
    class_labels = [c.label for c in split.classes]

    snapshot = _run_snapshot(split, model_cfg, train_cfg, augment, seed)
    files = {"config": run_dir / "config.snapshot", "split": run_dir / "split.csv", "log": run_dir / "log.csv"}
    with open(files["config"], "w") as f:
        yaml.safe_dump(snapshot, f, sort_keys=False)
    write_split_csv(split, files["split"])

    state = RunState(current_lr=train_cfg.initial_lr, rng_states=seed_everything(seed))
    model = build_model(model_cfg, pretrained=train_cfg.finetune.uses_pretrained)
    apply_finetune_policy(model, train_cfg.finetune)
    model.to(device)
    optimizer = torch.optim.Adam([p for p in model.parameters() if p.requires_grad], lr=state.current_lr)

    def loader(role: Role):
        return make_loader(split, manifest, role, train_cfg.batch_size, seed=seed, params=augment,
                           num_workers=train_cfg.num_workers, image_loader=image_loader)

    train_loader, val_loader, test_loader = loader(Role.TRAIN), loader(Role.VAL), loader(Role.TEST)
    best_weights = copy.deepcopy(model.state_dict())
    logger.info("training_started", run_dir=str(run_dir), seed=seed, protocol=split.protocol.value,
                backbone=model_cfg.backbone.value, attention=model_cfg.attention, policy=train_cfg.finetune.name,
                train_lines=len(train_loader.dataset), val_lines=len(val_loader.dataset))

    with open(files["log"], "w", newline="") as log_file:
        log_writer = csv.writer(log_file)
        log_writer.writerow(LOG_COLUMNS)
        for epoch in range(train_cfg.max_epochs):
            state = replace(state, epoch=epoch)
            set_loader_epoch(train_loader, epoch)
            model.train()
            losses = []
            for step, (images, one_hot, line_ids) in enumerate(train_loader):
                images, one_hot = images.to(device), one_hot.to(device)
                optimizer.zero_grad()
                loss = cross_entropy(model(images), one_hot) + model.regularization_loss()
                if not torch.isfinite(loss):
                    path = _write_diagnostic(run_dir, {
                        "epoch": epoch,
                        "step": step,
                        "loss": loss.item(),
                        "lr": state.current_lr,
                        "line_ids": list(line_ids),
                        "non_finite_parameters": [n for n, p in model.named_parameters() if not torch.isfinite(p).all()],
                        "state": asdict(state),
                        "time": datetime.now(timezone.utc).isoformat(),
                    })
                    logger.error("training_aborted", epoch=epoch, step=step, loss=loss.item(), diagnostic=str(path))
                    raise TrainingAborted(f"non-finite loss at epoch {epoch} step {step}; see {path}")
                loss.backward()
                optimizer.step()
                losses.append(loss.item())

            val_f1 = macro_f1(predict(model, val_loader, class_labels, device))
            train_loss = float(np.mean(losses)) if losses else float("nan")
            log_writer.writerow([epoch, repr(state.current_lr), repr(train_loss), repr(val_f1)])
            log_file.flush()
            logger.info("epoch_completed", epoch=epoch, lr=state.current_lr, train_loss=train_loss, val_f1=val_f1)

            previous_lr = state.current_lr
            state = scheduler_step(state, val_f1, train_cfg)
            if state.epochs_since_best == 0:
                best_weights = copy.deepcopy(model.state_dict())
                logger.info("best_model_updated", epoch=epoch, val_f1=val_f1)
            if state.current_lr != previous_lr:
                for group in optimizer.param_groups:
                    group["lr"] = state.current_lr
                logger.info("learning_rate_reduced", epoch=epoch, lr=state.current_lr)
            if early_stop_check(state, train_cfg):
                logger.info("early_stopping", epoch=epoch, best_epoch=state.best_epoch, best_val_f1=state.best_val_f1)
                break

    model.load_state_dict(best_weights)
    files["checkpoint"] = save_checkpoint(model, run_dir / "best.ckpt",
                                          extra={"epoch": state.best_epoch, "val_f1": state.best_val_f1, "seed": seed})

    predictions = predict(model, test_loader, class_labels, device)
    report = evaluate_predictions(predictions)
    aggregate = aggregate_runs([report])
    files["predictions"] = write_predictions_csv(predictions, run_dir / "predictions.csv")
    files["report_csv"] = write_report_csv(aggregate, run_dir / "test_report.csv")
    files["report_txt"] = run_dir / "test_report.txt"
    files["report_txt"].write_text(classification_report(aggregate))
    files["report_md"] = RunReportRenderer().write(
        run_dir / "test_report.md",
        aggregate,
        title=f"Protocol {split.protocol.value} / {model_cfg.backbone.value} / {train_cfg.finetune.name}",
        settings=snapshot,
        runs=[{"seed": seed, "best_epoch": state.best_epoch, "best_val_f1": state.best_val_f1}],
    )

    files["reproducibility"] = run_dir / "reproducibility.json"
    with open(files["reproducibility"], "w") as f:
        json.dump({
            "seed": seed,
            "config_sha256": hashlib.sha256(json.dumps(snapshot, sort_keys=True).encode()).hexdigest(),
            "split_sha256": _sha256_file(files["split"]),
            "manifest_sha256": manifest_checksum(manifest),
            "best_epoch": state.best_epoch,
            "epochs_run": state.epoch + 1,
            "rng_states": state.rng_states,
            "versions": {
                "writerid": __version__,
                "python": platform.python_version(),
                "torch": torch.__version__,
                "numpy": np.__version__,
            },
        }, f, indent=2)

    logger.info("training_completed", run_dir=str(run_dir), seed=seed, best_epoch=state.best_epoch,
                best_val_f1=state.best_val_f1, top1=report.top1, macro_f1=report.macro_f1)
    return RunArtifacts(
        run_dir=run_dir,
        seed=seed,
        best_epoch=state.best_epoch,
        best_val_f1=state.best_val_f1,
        epochs_run=state.epoch + 1,
        report=report,
        files=files,
    )


def run_name(split: SplitAssignment, model_cfg: ModelConfig, policy: FinetunePolicy, seed: int) -> str:
    """Directory name embedding protocol, backbone, policy, attention flag and seed."""
    attention = "attn" if model_cfg.attention else "noattn"
    return f"protocol{split.protocol.value}_{model_cfg.backbone.value}_{policy.name}_{attention}_seed{seed}"


def train_seeds(
    manifest: DatasetManifest,
    split: SplitAssignment,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    seeds: List[int],
    output_dir: Path,
    augment: Optional[AugmentParams] = None,
    device: str = "cpu",
    image_loader: Callable[[str], np.ndarray] = load_rgb,
) -> List[RunArtifacts]:
    """One train_run per seed, each in its own run directory."""
    artifacts = []
    for seed in seeds:
        run_dir = Path(output_dir) / run_name(split, model_cfg, train_cfg.finetune, seed)
        artifacts.append(train_run(manifest, split, model_cfg, train_cfg, seed, run_dir,
                                   augment=augment, device=device, image_loader=image_loader))
    return artifacts
