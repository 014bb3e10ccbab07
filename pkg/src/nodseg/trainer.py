"""Training orchestration: schedules, freezing, checkpoints, evaluation.

Training is deterministic given the config seed and single-device execution:
torch's global generator drives weight initialization, a dedicated numpy
generator drives batch shuffling and flip augmentation, and data order is
independent of any loader parallelism (there is none).
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError, ConfigurationError, TrainingAbort
from .metrics import aggregate_report, binarize, case_metrics
from .network import NoduleSegNet
from .objectives import LossWeights, loss_components
from .roi_pipeline import SlicePatch, augment_flip

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1
LOG_COLUMNS = ("epoch", "lr", "loss_total", "loss_dice", "loss_bce_seg", "loss_bce_cls", "train_dice")

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    phase: str = "pretrain"
    epochs: int = 200
    batch_size: int = 10
    lr0: float = 0.001
    decay_factor: float = 0.75
    decay_period_epochs: int = 5
    weight_decay: float = 1e-8
    seed: int = 0
    std_enabled: bool = False
    loss_weights: LossWeights = field(default_factory=LossWeights)
    k_folds: int = 5

    @classmethod
    def for_phase(cls, phase: str, **overrides) -> "TrainConfig":
        """Paper-protocol defaults: pretrain 200 epochs plain sigmoid,
        finetune 50 epochs with the variational layer and lr decay."""
        if phase == "pretrain":
            cfg = cls(phase="pretrain", epochs=200, std_enabled=False)
        elif phase == "finetune":
            cfg = cls(phase="finetune", epochs=50, std_enabled=True)
        else:
            raise ConfigurationError(f"unknown phase {phase!r}")
        for key, value in overrides.items():
            if not hasattr(cfg, key):
                raise ConfigurationError(f"unknown TrainConfig field {key!r}")
            setattr(cfg, key, value)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.phase not in ("pretrain", "finetune"):
            raise ConfigurationError(f"phase must be pretrain or finetune, got {self.phase!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch_size must be >= 1")
        if self.lr0 <= 0:
            raise ConfigurationError(f"lr0 must be > 0, got {self.lr0}")
        if not 0 < self.decay_factor <= 1:
            raise ConfigurationError(f"decay_factor must be in (0,1], got {self.decay_factor}")
        if self.decay_period_epochs < 1:
            raise ConfigurationError("decay_period_epochs must be >= 1")
        if self.weight_decay < 0:
            raise ConfigurationError("weight_decay must be >= 0")
        if self.k_folds < 2:
            raise ConfigurationError("k_folds must be >= 2")


@dataclass(frozen=True)
class FreezeSpec:
    frozen_groups: tuple = ()

    @classmethod
    def of(cls, *names) -> "FreezeSpec":
        return cls(frozen_groups=tuple(names))


@dataclass
class TrainResult:
    checkpoint_dir: Path
    log_rows: list
    final_train_dice: float


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Constant for pretraining; stepwise 0.75^floor(epoch/5) for fine-tuning."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    if cfg.phase == "pretrain":
        return cfg.lr0
    return cfg.lr0 * cfg.decay_factor ** (epoch // cfg.decay_period_epochs)


def apply_freeze(model: NoduleSegNet, spec: FreezeSpec) -> NoduleSegNet:
    """Flag frozen groups on the model; unknown names raise listing the valid ones."""
    try:
        model.set_frozen_groups(spec.frozen_groups)
    except ConfigurationError as exc:
        raise ConfigurationError(f"{exc}; valid groups: {model.group_names()}") from None
    return model


def trainable_parameters(model: NoduleSegNet) -> list:
    return [p for p in model.parameters() if p.requires_grad]


def config_hash(obj) -> str:
    """Stable hash of a JSON-serializable config description."""
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# ------------------------------------------------------------- checkpoints

_DTYPE_CODES = {
    torch.float32: "<f4",
    torch.float64: "<f8",
    torch.int64: "<i8",
    torch.int32: "<i4",
    torch.uint8: "|u1",
    torch.bool: "|b1",
}


def save_checkpoint(directory, model: NoduleSegNet, epoch: int, config_digest: str = "") -> Path:
    """Write metadata.json plus one little-endian binary blob per tensor."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tensors = []
    for index, (name, tensor) in enumerate(model.state_dict().items()):
        if tensor.dtype not in _DTYPE_CODES:
            raise CheckpointError(f"unsupported tensor dtype {tensor.dtype} for {name}")
        code = _DTYPE_CODES[tensor.dtype]
        filename = f"t{index:04d}.bin"
        array = tensor.detach().cpu().numpy().astype(np.dtype(code), copy=False)
        (directory / filename).write_bytes(array.tobytes())
        tensors.append(
            {"name": name, "shape": list(tensor.shape), "dtype": code, "file": filename}
        )
    metadata = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "epoch": epoch,
        "config_hash": config_digest,
        "groups": model.group_names(),
        "tensors": tensors,
    }
    (directory / "metadata.json").write_text(json.dumps(metadata, indent=2) + "\n")
    return directory


def load_checkpoint(directory, model: NoduleSegNet) -> dict:
    """Restore tensors bitwise from a checkpoint directory into the model."""
    directory = Path(directory)
    meta_path = directory / "metadata.json"
    if not meta_path.exists():
        raise CheckpointError(f"no metadata.json in {directory}")
    metadata = json.loads(meta_path.read_text())
    if metadata.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format {metadata.get('format_version')}")

    current = model.state_dict()
    state = {}
    for entry in metadata["tensors"]:
        name, shape = entry["name"], tuple(entry["shape"])
        if name not in current:
            raise CheckpointError(f"checkpoint tensor {name!r} not present in model")
        if tuple(current[name].shape) != shape:
            raise CheckpointError(
                f"shape mismatch for {name!r}: checkpoint {shape}, model {tuple(current[name].shape)}"
            )
        blob = (directory / entry["file"]).read_bytes()
        array = np.frombuffer(blob, dtype=np.dtype(entry["dtype"]))
        expected = int(np.prod(shape, dtype=np.int64)) if shape else 1
        if array.size != expected:
            raise CheckpointError(f"blob size mismatch for {name!r}")
        array = array.reshape(shape).copy()
        state[name] = torch.from_numpy(array).to(current[name].dtype)
    missing = set(current) - set(state)
    if missing:
        raise CheckpointError(f"checkpoint missing tensors: {sorted(missing)[:5]}")
    model.load_state_dict(state)
    return metadata


# ---------------------------------------------------------------- batching


def _patch_tensors(patches: list) -> tuple:
    images = torch.from_numpy(np.stack([p.image for p in patches])[:, None])
    masks = torch.from_numpy(np.stack([p.mask for p in patches])[:, None].astype(np.float32))
    labels = torch.tensor([float(p.class_label) for p in patches])
    return images, masks, labels


def _hard_dice(x: torch.Tensor, g: torch.Tensor) -> float:
    """Per-item Dice of the thresholded mask, smoothed so empty-empty scores 1."""
    pred = (x >= 0.5).float().reshape(x.shape[0], -1)
    gt = g.reshape(g.shape[0], -1)
    s = 1e-6
    dice = (2 * (pred * gt).sum(1) + s) / (pred.sum(1) + gt.sum(1) + s)
    return float(dice.mean())


def train(
    model: NoduleSegNet,
    patches: list,
    cfg: TrainConfig,
    out_dir,
    freeze: FreezeSpec | None = None,
    resume=None,
) -> TrainResult:
    """Run the configured number of epochs and write checkpoint + CSV log."""
    cfg.validate()
    if not patches:
        raise ConfigurationError("training dataset is empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    if resume is not None:
        load_checkpoint(resume, model)
    apply_freeze(model, freeze or FreezeSpec())

    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    params = trainable_parameters(model)
    if not params:
        raise ConfigurationError("every parameter group is frozen; nothing to train")
    optimizer = torch.optim.AdamW(
        params, lr=cfg.lr0, betas=ADAM_BETAS, eps=ADAM_EPS, weight_decay=cfg.weight_decay
    )

    digest = config_hash(asdict(cfg))
    log_rows = []
    model.train()
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        for group in optimizer.param_groups:
            group["lr"] = lr
        order = rng.permutation(len(patches))
        sums = {"total": 0.0, "dice": 0.0, "seg_bce": 0.0, "cls_bce": 0.0, "train_dice": 0.0}
        batches = 0
        for start in range(0, len(order), cfg.batch_size):
            chosen = [augment_flip(patches[i], rng) for i in order[start : start + cfg.batch_size]]
            images, masks, labels = _patch_tensors(chosen)
            optimizer.zero_grad()
            out = model(images, std_enabled=cfg.std_enabled)
            parts = loss_components(out.x, masks, out.c, labels, cfg.loss_weights)
            loss = parts["total"]
            if not torch.isfinite(loss):
                raise TrainingAbort(epoch=epoch, batch_index=batches)
            loss.backward()
            optimizer.step()
            for key in ("total", "dice", "seg_bce", "cls_bce"):
                sums[key] += float(parts[key].detach())
            sums["train_dice"] += _hard_dice(out.x.detach(), masks)
            batches += 1
        row = {
            "epoch": epoch,
            "lr": lr,
            "loss_total": sums["total"] / batches,
            "loss_dice": sums["dice"] / batches,
            "loss_bce_seg": sums["seg_bce"] / batches,
            "loss_bce_cls": sums["cls_bce"] / batches,
            "train_dice": sums["train_dice"] / batches,
        }
        log_rows.append(row)
        logger.info(
            "epoch %d: lr %.6g loss %.5f dice %.4f", epoch, lr, row["loss_total"], row["train_dice"]
        )

    log_path = out_dir / "training_log.csv"
    with open(log_path, "w", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=LOG_COLUMNS)
        writer.writeheader()
        writer.writerows(log_rows)
    checkpoint_dir = save_checkpoint(out_dir / "checkpoint", model, cfg.epochs - 1, digest)
    return TrainResult(
        checkpoint_dir=checkpoint_dir,
        log_rows=log_rows,
        final_train_dice=log_rows[-1]["train_dice"],
    )


# -------------------------------------------------------------- evaluation


def select_split(patches: list, split: str) -> list:
    """train = any assigned fold, foldN = that fold, val = fold 0, test = unassigned."""
    if split == "train":
        return [p for p in patches if p.fold is not None]
    if split == "test":
        return [p for p in patches if p.fold is None]
    if split == "val":
        return [p for p in patches if p.fold == 0]
    if split.startswith("fold"):
        try:
            index = int(split[4:])
        except ValueError:
            raise ConfigurationError(f"bad split name {split!r}") from None
        return [p for p in patches if p.fold == index]
    raise ConfigurationError(f"bad split name {split!r}")


def evaluate_model(
    model: NoduleSegNet,
    patches: list,
    std_enabled: bool = True,
    threshold: float = 0.5,
    aggregation: str = "lesion",
    batch_size: int = 10,
):
    """Forward every slice, threshold, and aggregate CaseMetrics."""
    if not patches:
        raise ValueError("evaluation split is empty")
    model.eval()
    cases = []
    with torch.no_grad():
        for start in range(0, len(patches), batch_size):
            chunk = patches[start : start + batch_size]
            images, _, _ = _patch_tensors(chunk)
            out = model(images, std_enabled=std_enabled)
            for patch, prob in zip(chunk, out.x[:, 0].numpy()):
                pred = binarize(prob, threshold)
                cases.append(
                    case_metrics(pred, patch.mask, spacing_yx=patch.spacing_yx, lesion_id=patch.lesion_id)
                )
    return aggregate_report(cases, aggregation=aggregation)


# --------------------------------------------------------- cross-validation


@dataclass
class CrossValResult:
    fold_reports: list
    summary: dict  # metric -> {"mean": float|None, "stdev": float|None, "n_folds": int}


def crossvalidate(
    patches: list,
    cfg: TrainConfig,
    model_factory,
    out_dir,
    freeze: FreezeSpec | None = None,
    threshold: float = 0.5,
    aggregation: str = "lesion",
) -> CrossValResult:
    """Train on folds != f and evaluate on fold f, for every assigned fold."""
    if any(p.fold is None for p in patches):
        raise ConfigurationError("cross-validation requires every patch to carry a fold")
    folds = sorted({p.fold for p in patches})
    if len(folds) < 2:
        raise ConfigurationError(f"need >= 2 folds, found {folds}")
    out_dir = Path(out_dir)

    reports = []
    for fold in folds:
        torch.manual_seed(cfg.seed + fold)
        model = model_factory()
        train_patches = [p for p in patches if p.fold != fold]
        val_patches = [p for p in patches if p.fold == fold]
        train(model, train_patches, cfg, out_dir / f"fold{fold}", freeze=freeze)
        report = evaluate_model(
            model, val_patches, std_enabled=cfg.std_enabled,
            threshold=threshold, aggregation=aggregation,
        )
        report.write_json(out_dir / f"fold{fold}" / "report.json")
        report.write_csv(out_dir / f"fold{fold}" / "report.csv")
        reports.append(report)

    summary = {}
    for name in reports[0].means:
        values = [r.means[name] for r in reports if r.means[name] is not None]
        summary[name] = {
            "mean": float(np.mean(values)) if values else None,
            "stdev": float(np.std(values, ddof=1)) if len(values) > 1 else None,
            "n_folds": len(values),
        }
    return CrossValResult(fold_reports=reports, summary=summary)
