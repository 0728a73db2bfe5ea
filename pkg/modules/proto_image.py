"""
Image branch: 3D residual backbone, occurrence-pooled latent vectors,
cosine similarity to class-specific prototypes, the image regularizers,
prototype projection and attention visualization.
"""

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from utils.logging import get_logger
from exceptions import InvalidInputError, ProjectionError, SingleClassError

logger = get_logger(__name__)


class ResBlock3d(nn.Module):
    """Basic two-convolution residual block."""

    def __init__(self, in_channels: int, out_channels: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv3d(in_channels, out_channels, kernel_size=3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm3d(out_channels)
        self.conv2 = nn.Conv3d(out_channels, out_channels, kernel_size=3, stride=1, padding=1, bias=False)
        self.bn2 = nn.BatchNorm3d(out_channels)
        self.relu = nn.ReLU()

        if in_channels != out_channels or stride != 1:
            self.shortcut = nn.Sequential(
                nn.Conv3d(in_channels, out_channels, kernel_size=1, stride=stride, bias=False),
                nn.BatchNorm3d(out_channels),
            )
        else:
            self.shortcut = nn.Identity()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu(out + self.shortcut(x))


class Backbone(nn.Module):
    """ResNet18-style 3D backbone (2 blocks per stage) with configurable widths."""

    def __init__(
        self,
        widths: Sequence[int] = (8, 16, 32, 64),
        blocks: Sequence[int] = (2, 2, 2, 2),
        strides: Sequence[int] = (1, 2, 2, 1),
        stem_stride: int = 2,
        in_channels: int = 1
    ):
        super().__init__()
        self.stem_stride = stem_stride
        self.strides = list(strides)
        self.stem = nn.Sequential(
            nn.Conv3d(in_channels, widths[0], kernel_size=3, stride=stem_stride, padding=1, bias=False),
            nn.BatchNorm3d(widths[0]),
            nn.ReLU(),
        )
        stages = []
        channels = widths[0]
        for width, n_blocks, stride in zip(widths, blocks, strides):
            layers = [ResBlock3d(channels, width, stride)]
            layers += [ResBlock3d(width, width) for _ in range(1, n_blocks)]
            stages.append(nn.Sequential(*layers))
            channels = width
        self.stages = nn.Sequential(*stages)
        self.out_channels = channels

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.stages(self.stem(x))

    def output_shape(self, input_shape: Sequence[int]) -> Tuple[int, ...]:
        """Spatial dims after the stride schedule (3x3x3 kernels, padding 1)."""
        shape = list(input_shape)
        for stride in [self.stem_stride] + self.strides:
            shape = [(n - 1) // stride + 1 for n in shape]
        return tuple(shape)


def _unit_sphere(shape: Sequence[int], generator: Optional[torch.Generator] = None) -> torch.Tensor:
    points = torch.randn(*shape, generator=generator)
    return points / points.norm(dim=-1, keepdim=True)


class PrototypeBank(nn.Module):
    """Prototypes [C, K, L] with the extractor V and occurrence module O."""

    def __init__(
        self,
        in_channels: int,
        n_classes: int,
        n_prototypes: int = 2,
        latent_dim: int = 64,
        head_channels: int = 64,
        generator: Optional[torch.Generator] = None
    ):
        super().__init__()
        self.n_classes = n_classes
        self.n_prototypes = n_prototypes
        self.latent_dim = latent_dim
        self.extractor = nn.Sequential(
            nn.Conv3d(in_channels, head_channels, kernel_size=1),
            nn.ReLU(),
            nn.Conv3d(head_channels, latent_dim, kernel_size=1),
        )
        # One head with C*K channels instead of C separate heads
        self.occurrence = nn.Sequential(
            nn.Conv3d(in_channels, head_channels, kernel_size=1),
            nn.ReLU(),
            nn.Conv3d(head_channels, n_classes * n_prototypes, kernel_size=1),
        )
        self.prototypes = nn.Parameter(_unit_sphere((n_classes, n_prototypes, latent_dim), generator))

    def occurrence_logits(self, features: torch.Tensor) -> torch.Tensor:
        logits = self.occurrence(features)
        return logits.view(logits.shape[0], self.n_classes, self.n_prototypes, *logits.shape[2:])

    def occurrence_maps(self, features: torch.Tensor) -> torch.Tensor:
        """Post-sigmoid attention maps [B, C, K, H', D', W']."""
        return torch.sigmoid(self.occurrence_logits(features))

    def extract(self, features: torch.Tensor) -> torch.Tensor:
        """Softplus feature maps [B, L, H', D', W']."""
        return F.softplus(self.extractor(features))

    @torch.no_grad()
    def normalize_prototypes_(self):
        """Rescale every prototype to unit length in place."""
        self.prototypes.div_(self.prototypes.norm(dim=-1, keepdim=True).clamp_min(1e-12))


@dataclass
class ImageOutput:
    """Everything the image branch computes for a batch."""

    scores: torch.Tensor          # [B, C, K]
    occurrence: torch.Tensor      # [B, C, K, H', D', W']
    latents: torch.Tensor         # [B, C, K, L]
    features: torch.Tensor        # [B, R, H', D', W']


def pool_latent(features: torch.Tensor, bank: PrototypeBank) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Occurrence-pooled latents: GAP over voxels of sigmoid(O)_k * softplus(V).

    Returns:
        (latents [B, C, K, L], occurrence maps [B, C, K, H', D', W'])
    """
    if not torch.isfinite(features).all():
        raise InvalidInputError("Non-finite backbone features")
    maps = bank.occurrence_maps(features)
    extracted = bank.extract(features)
    batch = features.shape[0]
    voxels = features[0, 0].numel()
    latents = torch.einsum(
        "bckv,blv->bckl",
        maps.reshape(batch, bank.n_classes, bank.n_prototypes, voxels),
        extracted.reshape(batch, bank.latent_dim, voxels),
    ) / voxels
    return latents, maps


def similarity(prototype: torch.Tensor, latent: torch.Tensor) -> torch.Tensor:
    """
    Cosine similarity along the last dim, broadcasting leading dims.

    A zero-norm operand yields 0 and a warning instead of a division by zero.
    """
    dot = (prototype * latent).sum(dim=-1)
    denom = prototype.norm(dim=-1) * latent.norm(dim=-1)
    degenerate = denom == 0
    if degenerate.any():
        logger.warning(f"Degenerate latent: {int(degenerate.sum())} zero-norm vector(s), similarity set to 0")
    safe = torch.where(degenerate, torch.ones_like(denom), denom)
    return torch.where(degenerate, torch.zeros_like(dot), dot / safe)


class ImageBranch(nn.Module):
    """Backbone U plus prototype bank; scores one batch of volumes."""

    def __init__(self, backbone: nn.Module, bank: PrototypeBank, volume_shape: Optional[Sequence[int]] = None):
        super().__init__()
        self.backbone = backbone
        self.bank = bank
        self.volume_shape = tuple(volume_shape) if volume_shape is not None else None

    def check_volumes(self, volumes: torch.Tensor):
        if volumes.dim() != 5 or volumes.shape[1] != 1:
            raise InvalidInputError("Expected volumes shaped [B, 1, H, D, W]",
                                    details={"shape": tuple(volumes.shape)})
        if self.volume_shape is not None and tuple(volumes.shape[2:]) != self.volume_shape:
            raise InvalidInputError(
                f"Volume dims {tuple(volumes.shape[2:])} do not match configured {self.volume_shape}",
                details={"expected": self.volume_shape, "got": tuple(volumes.shape[2:])}
            )

    def backbone_forward(self, volumes: torch.Tensor) -> torch.Tensor:
        self.check_volumes(volumes)
        return self.backbone(volumes)

    def occurrence_of(self, volumes: torch.Tensor) -> torch.Tensor:
        return self.bank.occurrence_maps(self.backbone_forward(volumes))

    def forward(self, volumes: torch.Tensor) -> ImageOutput:
        features = self.backbone_forward(volumes)
        latents, maps = pool_latent(features, self.bank)
        scores = similarity(self.bank.prototypes.unsqueeze(0), latents)
        return ImageOutput(scores=scores, occurrence=maps, latents=latents, features=features)


def backbone_forward(branch: ImageBranch, volumes: torch.Tensor) -> torch.Tensor:
    return branch.backbone_forward(volumes)


def image_scores(branch: ImageBranch, volumes: torch.Tensor) -> torch.Tensor:
    """g_k^c for a batch of volumes, [B, C, K]."""
    return branch(volumes).scores


@dataclass(frozen=True)
class AffineSpec:
    """Random scale + rotation about the volume center (angles in degrees)."""

    scale: float = 1.0
    rotation: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    inverted: bool = False

    @classmethod
    def identity(cls) -> "AffineSpec":
        return cls()

    @classmethod
    def sample(
        cls,
        rng: np.random.Generator,
        scale_range: Tuple[float, float] = (0.8, 1.2),
        max_rotation: float = 180.0
    ) -> "AffineSpec":
        scale = float(rng.uniform(*scale_range))
        angles = tuple(float(a) for a in rng.uniform(-max_rotation, max_rotation, size=3))
        return cls(scale=scale, rotation=angles)

    def inverse(self) -> "AffineSpec":
        return replace(self, inverted=not self.inverted)

    @property
    def is_identity(self) -> bool:
        return self.scale == 1.0 and all(a == 0.0 for a in self.rotation)

    def matrix(self) -> np.ndarray:
        """3x3 forward map in normalized (x, y, z) grid coordinates."""
        ax, ay, az = (math.radians(a) for a in self.rotation)
        rx = np.array([[1, 0, 0], [0, math.cos(ax), -math.sin(ax)], [0, math.sin(ax), math.cos(ax)]])
        ry = np.array([[math.cos(ay), 0, math.sin(ay)], [0, 1, 0], [-math.sin(ay), 0, math.cos(ay)]])
        rz = np.array([[math.cos(az), -math.sin(az), 0], [math.sin(az), math.cos(az), 0], [0, 0, 1]])
        forward = self.scale * (rz @ ry @ rx)
        return np.linalg.inv(forward) if self.inverted else forward


def apply_affine(tensor: torch.Tensor, spec: AffineSpec) -> torch.Tensor:
    """Resample a [B, C, *spatial] tensor under A (trilinear, zero padding outside)."""
    if spec.is_identity and not spec.inverted:
        return tensor
    # grid_sample pulls: output voxel p reads input at A^-1 p
    pull = np.linalg.inv(spec.matrix())
    theta = torch.zeros(tensor.shape[0], 3, 4, dtype=tensor.dtype)
    theta[:, :, :3] = torch.as_tensor(pull, dtype=tensor.dtype)
    grid = F.affine_grid(theta, list(tensor.shape), align_corners=False)
    return F.grid_sample(tensor, grid, mode="bilinear", padding_mode="zeros", align_corners=False)


def loss_occurrence(maps: torch.Tensor) -> torch.Tensor:
    """Sparsity: l1 of the occurrence maps summed over classes/prototypes/voxels, batch mean."""
    return maps.abs().flatten(start_dim=1).sum(dim=1).mean()


def loss_affine(
    volumes: torch.Tensor,
    branch: ImageBranch,
    spec: AffineSpec,
    maps: Optional[torch.Tensor] = None
) -> torch.Tensor:
    """
    Spatial consistency ||A(O(U(I))) - O(U(A(I)))||_1, summed over classes,
    prototypes and voxels, batch mean. ``maps`` may be passed to reuse O(U(I)).
    """
    if maps is None:
        maps = branch.occurrence_of(volumes)
    batch, n_classes, n_prototypes = maps.shape[:3]
    spatial = maps.shape[3:]
    transformed_maps = apply_affine(maps.reshape(batch, n_classes * n_prototypes, *spatial), spec)
    maps_of_transformed = branch.occurrence_of(apply_affine(volumes, spec))
    diff = transformed_maps - maps_of_transformed.reshape(batch, n_classes * n_prototypes, *spatial)
    return diff.abs().flatten(start_dim=1).sum(dim=1).mean()


def _as_batch(scores: torch.Tensor, labels: Union[int, torch.Tensor]) -> Tuple[torch.Tensor, torch.Tensor]:
    if scores.dim() == 2:
        scores = scores.unsqueeze(0)
    labels = torch.as_tensor(labels).reshape(-1).long()
    return scores, labels


def loss_cluster(scores: torch.Tensor, labels: Union[int, torch.Tensor]) -> torch.Tensor:
    """-max_k g_k^y, batch mean. Accepts [C, K] or [B, C, K] scores."""
    scores, labels = _as_batch(scores, labels)
    own = scores[torch.arange(scores.shape[0]), labels]
    return -own.max(dim=-1).values.mean()


def loss_separation(scores: torch.Tensor, labels: Union[int, torch.Tensor]) -> torch.Tensor:
    """max_{k, c != y} g_k^c, batch mean."""
    scores, labels = _as_batch(scores, labels)
    if scores.shape[1] < 2:
        raise SingleClassError("Separation loss needs at least two classes")
    own_class = F.one_hot(labels, scores.shape[1]).bool().unsqueeze(-1).expand_as(scores)
    others = scores.masked_fill(own_class, float("-inf"))
    return others.flatten(start_dim=1).max(dim=1).values.mean()


@dataclass
class ProjectionRecord:
    class_index: int
    prototype_index: int
    subject_id: str
    similarity: float


@dataclass
class ProjectionReport:
    """Source training sample of every prototype after projection."""

    records: List[ProjectionRecord] = field(default_factory=list)

    def source_of(self, class_index: int, prototype_index: int) -> str:
        for record in self.records:
            if record.class_index == class_index and record.prototype_index == prototype_index:
                return record.subject_id
        raise KeyError((class_index, prototype_index))

    def to_dict(self) -> List[Dict[str, object]]:
        return [vars(r).copy() for r in self.records]

    @classmethod
    def from_dict(cls, data: Iterable[Dict[str, object]]) -> "ProjectionReport":
        return cls([ProjectionRecord(**r) for r in data])

    @property
    def mean_similarity(self) -> float:
        return float(np.mean([r.similarity for r in self.records])) if self.records else float("nan")


def project_prototypes(
    branch: ImageBranch,
    batches: Iterable[Tuple[Sequence[str], torch.Tensor, torch.Tensor]]
) -> ProjectionReport:
    """
    Replace each prototype by the most similar same-class training latent.

    ``batches`` yields (subject ids, volumes [B,1,H,D,W], labels [B]). Latents
    are computed in eval mode; ties go to the smallest subject id so the result
    does not depend on batch order.
    """
    bank = branch.bank
    n_classes, n_prototypes = bank.n_classes, bank.n_prototypes
    best_sim = torch.full((n_classes, n_prototypes), float("-inf"), dtype=torch.float64)
    best_latent = torch.zeros_like(bank.prototypes)
    best_id: List[List[Optional[str]]] = [[None] * n_prototypes for _ in range(n_classes)]

    was_training = branch.training
    branch.eval()
    try:
        with torch.no_grad():
            for ids, volumes, labels in batches:
                output = branch(volumes)
                for b, subject_id in enumerate(ids):
                    c = int(labels[b])
                    for k in range(n_prototypes):
                        s = float(output.scores[b, c, k])
                        current = best_id[c][k]
                        if s > best_sim[c, k] or (s == best_sim[c, k] and current is not None and subject_id < current):
                            best_sim[c, k] = s
                            best_latent[c, k] = output.latents[b, c, k]
                            best_id[c][k] = subject_id
    finally:
        branch.train(was_training)

    report = ProjectionReport()
    for c in range(n_classes):
        if best_id[c][0] is None:
            raise ProjectionError(f"No training samples of class {c} for projection", details={"class": c})
        for k in range(n_prototypes):
            norm = best_latent[c, k].norm()
            if norm == 0:
                raise ProjectionError(f"Closest latent of prototype ({c}, {k}) has zero norm",
                                      details={"class": c, "prototype": k, "subject": best_id[c][k]})
            report.records.append(ProjectionRecord(c, k, best_id[c][k], float(best_sim[c, k])))
            logger.debug(f"Prototype ({c}, {k}) <- subject {best_id[c][k]} (similarity {float(best_sim[c, k]):.4f})")

    with torch.no_grad():
        bank.prototypes.copy_(best_latent / best_latent.norm(dim=-1, keepdim=True))
    return report


@dataclass
class AttentionOverlay:
    upsampled: np.ndarray     # [H, D, W] float
    mask: np.ndarray          # [H, D, W] bool


def attention_overlay(
    occurrence_map: Union[np.ndarray, torch.Tensor],
    target_shape: Sequence[int],
    threshold: float = 0.3
) -> AttentionOverlay:
    """Upsample one occurrence map to input dims and keep voxels above threshold * max."""
    tensor = torch.as_tensor(np.asarray(occurrence_map), dtype=torch.float64)
    if tensor.dim() != 3:
        raise InvalidInputError("Expected a single [H', D', W'] occurrence map",
                                details={"shape": tuple(tensor.shape)})
    upsampled = F.interpolate(
        tensor[None, None], size=tuple(target_shape), mode="trilinear", align_corners=False
    )[0, 0].numpy()
    mask = upsampled > threshold * upsampled.max()
    return AttentionOverlay(upsampled=upsampled, mask=mask)


def render_montage(
    volume: np.ndarray,
    mask: np.ndarray,
    path: Union[str, Path],
    title: str = ""
) -> Path:
    """Axial/coronal/sagittal slices through the mask centroid, mask drawn in green."""
    volume = np.asarray(volume, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if mask.any():
        center = [int(round(c)) for c in np.argwhere(mask).mean(axis=0)]
    else:
        center = [n // 2 for n in volume.shape]

    views = [
        ("axial", volume[center[0]], mask[center[0]]),
        ("coronal", volume[:, center[1]], mask[:, center[1]]),
        ("sagittal", volume[:, :, center[2]], mask[:, :, center[2]]),
    ]
    fig, axes = plt.subplots(1, 3, figsize=(9, 3.2))
    for ax, (name, image, overlay) in zip(axes, views):
        ax.imshow(image, cmap="gray")
        green = np.zeros(overlay.shape + (4,))
        green[overlay] = (0.0, 1.0, 0.0, 0.45)
        ax.imshow(green)
        ax.set_title(name)
        ax.axis("off")
    if title:
        fig.suptitle(title)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, bbox_inches="tight")
    plt.close(fig)
    return path
