"""
Training loop: alternating parameter groups, cyclic learning rate,
epoch-end prototype projection followed by validation, best-snapshot
selection and an optional backbone warm-up.
"""

import copy
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.optim import AdamW
from torch.optim.lr_scheduler import CyclicLR

from config import RunConfig
from exceptions import DataError
from modules.data import PanicDataset, iterate_batches
from modules.panic_model import PanicModel, balanced_accuracy, evaluate, predict, total_loss
from modules.proto_image import AffineSpec, ProjectionReport, project_prototypes
from modules.tabular_gam import FeatureSchema
from utils.logging import fold_logger, get_logger
from utils.seeding import SeedStreams

logger = get_logger(__name__)

PHASE_ALL = "all"
PHASE_NAM = "nam"


def build_model(
    run_config: RunConfig,
    schema: FeatureSchema,
    volume_shape: Sequence[int],
    seeds: SeedStreams,
    fold: int = 0
) -> PanicModel:
    """Construct a PanicModel with initialization drawn from the 'init' substream."""
    seeds.seed_torch_global("init", fold)
    model = PanicModel(
        schema,
        run_config.n_classes,
        volume_shape,
        run_config.model,
        generator=seeds.torch("init", fold),
    )
    n_params = sum(p.numel() for p in model.parameters())
    logger.debug(f"Built model for fold {fold}: {n_params} parameters, {model.n_prototypes} prototypes per class")
    return model


def phase_for(epoch: int, cadence: int = 1) -> str:
    """Blocks of ``cadence`` epochs alternate, starting with all parameters."""
    return PHASE_ALL if (epoch // cadence) % 2 == 0 else PHASE_NAM


@dataclass
class TrainingResult:
    history: pd.DataFrame
    best_epoch: int
    best_val_bacc: float
    projection: Optional[ProjectionReport]
    spectral_bounds: Dict[str, float] = field(default_factory=dict)


class Trainer:
    """Fits one PanicModel on one train/val split."""

    def __init__(self, model: PanicModel, run_config: RunConfig, seeds: SeedStreams, fold: int = 0):
        self.model = model
        self.run_config = run_config
        self.train_cfg = run_config.train
        self.weights = run_config.loss
        self.seeds = seeds
        self.fold = fold
        self.log = fold_logger(__name__, fold)

        cfg = self.train_cfg
        self.optimizer_all = AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
        self.optimizer_nam = AdamW(model.nam_parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
        self.scheduler: Optional[CyclicLR] = None

        self.affine_rng = seeds.numpy("affine", fold)
        self.shuffle_generator = seeds.torch("shuffle", fold)
        self._event = 0

    def _next_event(self) -> int:
        self._event += 1
        return self._event

    def _build_scheduler(self, steps_per_epoch: int):
        cfg = self.train_cfg
        half_cycle = max(1, (cfg.cycle_epochs * steps_per_epoch) // 2)
        self.scheduler = CyclicLR(
            self.optimizer_all,
            base_lr=cfg.lr * cfg.lr_floor_ratio,
            max_lr=cfg.lr,
            step_size_up=half_cycle,
            mode="triangular",
            cycle_momentum=False,
        )
        self._sync_lr()

    def _sync_lr(self):
        # Both optimizers follow the one schedule
        lr = self.optimizer_all.param_groups[0]["lr"]
        for group in self.optimizer_nam.param_groups:
            group["lr"] = lr

    @property
    def current_lr(self) -> float:
        return self.optimizer_all.param_groups[0]["lr"]

    def warm_up(self, train_set: PanicDataset, val_set: Optional[PanicDataset] = None) -> int:
        """
        Train backbone + GAP + linear head with cross-entropy; the backbone is kept.

        With ``val_set`` and a nonzero ``train.patience`` this stops early on
        validation cross-entropy and restores the best backbone. Returns the
        number of warm-up epochs run.
        """
        epochs = self.train_cfg.warmup_epochs
        if epochs <= 0 or not self.model.use_image:
            return 0
        patience = self.train_cfg.patience if val_set is not None and len(val_set) else 0
        backbone = self.model.image.backbone
        dtype = self.model.bias.dtype
        head = nn.Linear(backbone.out_channels, self.model.n_classes).to(dtype)
        optimizer = AdamW(
            list(backbone.parameters()) + list(head.parameters()),
            lr=self.train_cfg.lr,
            weight_decay=self.train_cfg.weight_decay,
        )

        def pooled_logits(volumes: torch.Tensor) -> torch.Tensor:
            return head(self.model.image.backbone_forward(volumes.to(dtype)).mean(dim=(2, 3, 4)))

        backbone.train()
        best_loss, best_state, since_best = float("inf"), None, 0
        for epoch in range(epochs):
            losses = []
            for batch in iterate_batches(train_set, self.train_cfg.batch_size, True, self.shuffle_generator):
                loss = F.cross_entropy(pooled_logits(batch.volumes), batch.labels)
                optimizer.zero_grad(set_to_none=True)
                loss.backward()
                optimizer.step()
                losses.append(float(loss))
            message = f"Warm-up epoch {epoch + 1}/{epochs}: cross-entropy {np.mean(losses):.4f}"
            if not patience:
                self.log.info(message)
                continue

            backbone.eval()
            with torch.no_grad():
                val_losses = [F.cross_entropy(pooled_logits(b.volumes), b.labels, reduction="sum")
                              for b in iterate_batches(val_set, self.train_cfg.batch_size)]
            backbone.train()
            val_loss = float(sum(val_losses)) / len(val_set)
            self.log.info(f"{message}, val {val_loss:.4f}")
            if val_loss < best_loss:
                best_loss, best_state, since_best = val_loss, copy.deepcopy(backbone.state_dict()), 0
            else:
                since_best += 1
                if since_best >= patience:
                    self.log.info(f"Warm-up stopped after {epoch + 1} epochs")
                    break
        if best_state is not None:
            backbone.load_state_dict(best_state)
        return epoch + 1

    def _run_epoch(self, train_set: PanicDataset, phase: str) -> Dict[str, float]:
        model = self.model
        dtype = model.bias.dtype
        model.train()
        if phase == PHASE_NAM:
            model.image.eval()
        optimizer = self.optimizer_all if phase == PHASE_ALL else self.optimizer_nam

        sums: Dict[str, float] = {}
        n_seen = 0
        y_true, y_pred = [], []
        for batch in iterate_batches(train_set, self.train_cfg.batch_size, True, self.shuffle_generator):
            batch = batch.to(dtype)
            train_image = phase == PHASE_ALL
            affine = AffineSpec.sample(self.affine_rng) if train_image and model.use_image else None

            output = model(batch.tabular, batch.volumes, image_grad=train_image)
            losses = total_loss(model, output, batch.labels, self.weights, batch.volumes, affine)

            optimizer.zero_grad(set_to_none=True)
            losses.total.backward()
            optimizer.step()
            if train_image and model.use_image:
                model.image.bank.normalize_prototypes_()
            self.scheduler.step()
            self._sync_lr()

            size = len(batch)
            for name, value in losses.as_dict().items():
                sums[name] = sums.get(name, 0.0) + value * size
            n_seen += size
            y_true.extend(batch.labels.tolist())
            y_pred.extend(predict(output.logits.detach()).tolist())

        metrics = {name: value / n_seen for name, value in sums.items()}
        metrics["train_bacc"] = balanced_accuracy(y_true, y_pred)
        return metrics

    def _project(self, train_set: PanicDataset) -> Optional[ProjectionReport]:
        if not self.model.use_image:
            return None
        dtype = self.model.bias.dtype
        batches = (
            (b.subject_ids, b.volumes.to(dtype), b.labels)
            for b in iterate_batches(train_set, self.train_cfg.batch_size)
        )
        return project_prototypes(self.model.image, batches)

    def fit(self, train_set: PanicDataset, val_set: PanicDataset) -> TrainingResult:
        """
        Run the full protocol on one split.

        Raises:
            DataError: A class has no training samples or the splits overlap
        """
        n_classes = self.model.n_classes
        missing = sorted(set(range(n_classes)) - set(train_set.classes_present))
        if missing:
            raise DataError(f"Classes {missing} have no training samples", details={"classes": missing})
        if set(train_set.subject_ids) & set(val_set.subject_ids):
            raise DataError("Training and validation splits overlap")

        cfg = self.train_cfg
        self.seeds.seed_torch_global("dropout", self.fold)
        self.warm_up(train_set, val_set)
        steps_per_epoch = int(np.ceil(len(train_set) / cfg.batch_size))
        self._build_scheduler(steps_per_epoch)

        rows: List[Dict[str, object]] = []
        best_bacc, best_epoch = -1.0, -1
        best_state, best_projection = None, None
        since_best = 0

        for epoch in range(cfg.epochs):
            phase = phase_for(epoch, cfg.alternation_cadence)
            lr = self.current_lr
            metrics = self._run_epoch(train_set, phase)

            projection = self._project(train_set)
            projection_event = self._next_event()
            result = evaluate(self.model, val_set, cfg.batch_size)
            validation_event = self._next_event()

            row = {"epoch": epoch, "phase": phase, "lr": lr}
            row.update(metrics)
            row.update({
                "projection_event": projection_event,
                "validation_event": validation_event,
                "projection_similarity": projection.mean_similarity if projection else float("nan"),
                "val_bacc": result.balanced_accuracy,
                "val_mean_occurrence": result.mean_occurrence,
            })
            rows.append(row)
            self.log.info(
                f"Epoch {epoch + 1}/{cfg.epochs} [{phase}] lr {lr:.5f} "
                f"loss {metrics['total']:.4f} (ce {metrics['cross_entropy']:.4f}, tab {metrics['tab']:.4f}, "
                f"clst {metrics['cluster']:.4f}, sep {metrics['separation']:.4f}, "
                f"occ {metrics['occurrence']:.2f}, aff {metrics['affine']:.2f}) "
                f"train BAcc {metrics['train_bacc']:.3f} val BAcc {result.balanced_accuracy:.3f}"
            )

            if result.balanced_accuracy > best_bacc:
                best_bacc, best_epoch = result.balanced_accuracy, epoch
                best_state = copy.deepcopy(self.model.state_dict())
                best_projection = projection
                since_best = 0
            else:
                since_best += 1
                if cfg.patience and since_best >= cfg.patience:
                    self.log.info(f"Early stop after {epoch + 1} epochs (no val improvement in {cfg.patience})")
                    break

        self.model.load_state_dict(best_state)
        bounds = self.model.nam.spectral_bounds()
        if bounds:
            self.log.info(f"Best epoch {best_epoch + 1}, val BAcc {best_bacc:.3f}, "
                        f"max NAM spectral norm {max(bounds.values()):.4f}")
        return TrainingResult(
            history=pd.DataFrame(rows),
            best_epoch=best_epoch,
            best_val_bacc=best_bacc,
            projection=best_projection,
            spectral_bounds=bounds,
        )
