"""
The additive classifier: bias + tabular feature functions + prototype
similarities, the composite training objective and evaluation.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from sklearn.metrics import balanced_accuracy_score, confusion_matrix

from config import LossWeights, ModelConfig
from exceptions import ConfigurationError, InvalidInputError, NumericError
from modules.data import PanicBatch, PanicDataset, iterate_batches
from modules.proto_image import (
    AffineSpec,
    Backbone,
    ImageBranch,
    PrototypeBank,
    loss_affine,
    loss_cluster,
    loss_occurrence,
    loss_separation,
)
from modules.tabular_gam import (
    FeatureSchema,
    NamFunctionBank,
    TabularBatch,
    TabularSample,
    tab_penalty,
)
from utils.logging import get_logger

logger = get_logger(__name__)


@dataclass
class PanicOutput:
    """Logits plus every additive component that produced them."""

    logits: torch.Tensor                  # [B, C]
    contributions: torch.Tensor           # [B, N, C]
    scores: torch.Tensor                  # [B, C, K]
    occurrence: Optional[torch.Tensor]    # [B, C, K, H', D', W'] or None when image ablated
    latents: Optional[torch.Tensor] = None

    @property
    def probabilities(self) -> torch.Tensor:
        return torch.softmax(self.logits, dim=-1)

    @property
    def predictions(self) -> torch.Tensor:
        return predict(self.logits)


class PanicModel(nn.Module):
    """mu^c = beta_0^c + sum_n f_n^c(x_n) + sum_k g_k^c(I)."""

    def __init__(
        self,
        schema: FeatureSchema,
        n_classes: int,
        volume_shape: Sequence[int],
        model_config: Optional[ModelConfig] = None,
        generator: Optional[torch.Generator] = None
    ):
        super().__init__()
        cfg = model_config or ModelConfig()
        if n_classes < 2:
            raise ConfigurationError("Need at least two classes", details={"n_classes": n_classes})
        self.n_classes = n_classes
        self.use_tabular = cfg.use_tabular
        self.use_image = cfg.use_image

        self.bias = nn.Parameter(torch.zeros(n_classes))
        self.nam = NamFunctionBank(
            schema,
            n_classes,
            hidden=cfg.nam_hidden,
            dropout=cfg.nam_dropout,
            output_dropout=cfg.output_dropout,
            spectral_iterations=cfg.spectral_iterations,
        )
        backbone = Backbone(cfg.backbone_widths, cfg.backbone_blocks, cfg.backbone_strides, cfg.stem_stride)
        bank = PrototypeBank(
            backbone.out_channels,
            n_classes,
            n_prototypes=cfg.n_prototypes,
            latent_dim=cfg.latent_dim,
            head_channels=cfg.head_channels,
            generator=generator,
        )
        self.image = ImageBranch(backbone, bank, volume_shape)

    @property
    def schema(self) -> FeatureSchema:
        return self.nam.schema

    @property
    def n_prototypes(self) -> int:
        return self.image.bank.n_prototypes

    def nam_parameters(self) -> List[nn.Parameter]:
        """Parameters updated in NAM-only phases: feature functions and bias."""
        return list(self.nam.parameters()) + [self.bias]

    def image_parameters(self) -> List[nn.Parameter]:
        return list(self.image.parameters())

    def forward(self, tabular: TabularBatch, volumes: torch.Tensor, image_grad: bool = True) -> PanicOutput:
        """
        Args:
            tabular: Standardized features with missing mask
            volumes: [B, 1, H, D, W]
            image_grad: When False the image branch runs under no_grad (NAM-only phases)
        """
        batch_size = len(tabular)
        if volumes.shape[0] != batch_size:
            raise InvalidInputError("Tabular and image batch sizes differ",
                                    details={"tabular": batch_size, "image": volumes.shape[0]})
        dtype = self.bias.dtype

        if self.use_tabular:
            contributions = self.nam(tabular)
        else:
            contributions = torch.zeros(batch_size, self.nam.n_features, self.n_classes, dtype=dtype)

        if self.use_image:
            with torch.set_grad_enabled(image_grad and torch.is_grad_enabled()):
                image = self.image(volumes.to(dtype))
            scores, occurrence, latents = image.scores, image.occurrence, image.latents
        else:
            scores = torch.zeros(batch_size, self.n_classes, self.n_prototypes, dtype=dtype)
            occurrence, latents = None, None

        logits = self.bias + contributions.sum(dim=1) + scores.sum(dim=-1)
        return PanicOutput(logits, contributions, scores, occurrence, latents)

    def forward_batch(self, batch: PanicBatch) -> PanicOutput:
        return self(batch.tabular, batch.volumes)

    def forward_sample(self, sample: TabularSample, volume: torch.Tensor) -> PanicOutput:
        """Single subject; ``volume`` is [H, D, W] or [1, H, D, W]."""
        volume = torch.as_tensor(volume)
        while volume.dim() < 5:
            volume = volume.unsqueeze(0)
        return self(TabularBatch.from_samples([sample]).to(self.bias.dtype), volume)


def predict(logits: torch.Tensor) -> torch.Tensor:
    """argmax over classes; torch.argmax returns the first maximum, i.e. the lowest index."""
    return torch.argmax(logits, dim=-1)


@dataclass
class LossBreakdown:
    """Raw loss terms and the weighted total."""

    cross_entropy: torch.Tensor
    tab: torch.Tensor
    cluster: torch.Tensor
    separation: torch.Tensor
    occurrence: torch.Tensor
    affine: torch.Tensor
    total: torch.Tensor
    weights: Dict[str, float] = field(default_factory=dict)

    TERMS = ("cross_entropy", "tab", "cluster", "separation", "occurrence", "affine")

    def as_dict(self) -> Dict[str, float]:
        values = {name: float(getattr(self, name)) for name in self.TERMS}
        for name, weight in self.weights.items():
            values[f"{name}_weighted"] = weight * values[name]
        values["total"] = float(self.total)
        return values


def total_loss(
    model: PanicModel,
    output: PanicOutput,
    labels: torch.Tensor,
    weights: LossWeights,
    volumes: Optional[torch.Tensor] = None,
    affine: Optional[AffineSpec] = None
) -> LossBreakdown:
    """
    CE + l1*L_tab + l2*L_clst + l3*L_sep + l4*L_occ + l5*L_affine.

    Image terms are zero when the image branch is ablated; the affine term
    needs ``volumes`` and ``affine`` and is skipped when its weight is 0.
    """
    labels = labels.long()
    zero = output.logits.new_zeros(())
    ce = F.cross_entropy(output.logits, labels)
    tab = tab_penalty(output.contributions) if model.use_tabular else zero

    if model.use_image:
        cluster = loss_cluster(output.scores, labels)
        separation = loss_separation(output.scores, labels)
        occurrence = loss_occurrence(output.occurrence)
        if weights.affine > 0 and volumes is not None and affine is not None:
            affine_term = loss_affine(volumes.to(output.logits.dtype), model.image, affine, maps=output.occurrence)
        else:
            affine_term = zero
    else:
        cluster = separation = occurrence = affine_term = zero

    total = (
        ce
        + weights.tab * tab
        + weights.cluster * cluster
        + weights.separation * separation
        + weights.occurrence * occurrence
        + weights.affine * affine_term
    )
    if not torch.isfinite(total):
        raise NumericError("Non-finite training loss",
                           details={"ce": float(ce), "tab": float(tab), "occurrence": float(occurrence)})
    return LossBreakdown(
        cross_entropy=ce,
        tab=tab,
        cluster=cluster,
        separation=separation,
        occurrence=occurrence,
        affine=affine_term,
        total=total,
        weights={
            "tab": weights.tab,
            "cluster": weights.cluster,
            "separation": weights.separation,
            "occurrence": weights.occurrence,
            "affine": weights.affine,
        },
    )


def balanced_accuracy(y_true: Sequence[int], y_pred: Sequence[int]) -> float:
    """Mean per-class recall over the classes present in ``y_true``."""
    return float(balanced_accuracy_score(np.asarray(y_true), np.asarray(y_pred)))


@dataclass
class EvaluationResult:
    subject_ids: List[str]
    labels: np.ndarray
    logits: np.ndarray
    probabilities: np.ndarray
    predictions: np.ndarray
    balanced_accuracy: float
    confusion: np.ndarray
    mean_occurrence: float = float("nan")

    def to_dict(self) -> Dict[str, object]:
        return {
            "balanced_accuracy": self.balanced_accuracy,
            "confusion_matrix": self.confusion.tolist(),
            "n_subjects": len(self.subject_ids),
        }


def evaluate(model: PanicModel, dataset: PanicDataset, batch_size: int = 32) -> EvaluationResult:
    """Eval-mode logits for every subject (sorted id order), BAcc and confusion matrix."""
    was_training = model.training
    model.eval()
    logits, labels, ids, occurrence = [], [], [], []
    try:
        with torch.no_grad():
            for batch in iterate_batches(dataset, batch_size):
                output = model.forward_batch(batch)
                logits.append(output.logits.double())
                labels.append(batch.labels)
                ids.extend(batch.subject_ids)
                if output.occurrence is not None:
                    occurrence.append(output.occurrence.flatten(start_dim=1).sum(dim=1).double())
    finally:
        model.train(was_training)

    logits_t = torch.cat(logits)
    y_true = torch.cat(labels).numpy()
    y_pred = predict(logits_t).numpy()
    return EvaluationResult(
        subject_ids=ids,
        labels=y_true,
        logits=logits_t.numpy(),
        probabilities=torch.softmax(logits_t, dim=-1).numpy(),
        predictions=y_pred,
        balanced_accuracy=balanced_accuracy(y_true, y_pred),
        confusion=confusion_matrix(y_true, y_pred, labels=list(range(model.n_classes))),
        mean_occurrence=float(torch.cat(occurrence).mean()) if occurrence else float("nan"),
    )
