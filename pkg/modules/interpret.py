"""
Explanations read directly off the additive model: local contribution
breakdowns, global importance tables, log-odds-ratio curves and their
file exports.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd
import torch

from exceptions import DegenerateRequestError, NumericError, SubjectNotFoundError
from modules.data import PanicDataset, iterate_batches, write_volume
from modules.panic_model import PanicModel
from modules.proto_image import ProjectionReport, attention_overlay, render_montage
from modules.tabular_gam import FeatureKind, FeatureSpec, StandardizationStats, TabularBatch
from utils.logging import get_logger

logger = get_logger(__name__)

FIDELITY_TOLERANCE = 1e-5
CLOSED_FORM_TOLERANCE = 1e-6


@dataclass
class Explanation:
    """Exact decomposition of one subject's logits."""

    subject_id: str
    class_names: List[str]
    feature_names: List[str]
    feature_values: List[Optional[float]]     # standardized, None where missing
    bias: np.ndarray                          # [C]
    contributions: np.ndarray                 # [N, C]
    scores: np.ndarray                        # [C, K]
    model_logits: np.ndarray                  # [C]
    predicted: int
    true_label: Optional[int] = None
    prototype_sources: Dict[str, str] = field(default_factory=dict)
    occurrence: Optional[np.ndarray] = None   # [C, K, H', D', W'], not serialized

    @property
    def logits(self) -> np.ndarray:
        """Logits rebuilt from the components."""
        return self.bias + self.contributions.sum(axis=0) + self.scores.sum(axis=1)

    @property
    def fidelity_residual(self) -> float:
        return float(np.max(np.abs(self.logits - self.model_logits)))

    @property
    def probabilities(self) -> np.ndarray:
        z = self.model_logits - self.model_logits.max()
        p = np.exp(z)
        return p / p.sum()

    def best_prototype(self, class_index: Optional[int] = None) -> Tuple[int, int]:
        c = self.predicted if class_index is None else class_index
        return c, int(np.argmax(self.scores[c]))

    def to_dict(self) -> Dict[str, object]:
        return {
            "subject_id": self.subject_id,
            "class_names": self.class_names,
            "feature_names": self.feature_names,
            "feature_values": self.feature_values,
            "bias": self.bias.tolist(),
            "contributions": self.contributions.tolist(),
            "scores": self.scores.tolist(),
            "model_logits": self.model_logits.tolist(),
            "logits": self.logits.tolist(),
            "probabilities": self.probabilities.tolist(),
            "predicted": self.predicted,
            "true_label": self.true_label,
            "prototype_sources": self.prototype_sources,
            "fidelity_residual": self.fidelity_residual,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, object]) -> "Explanation":
        return cls(
            subject_id=data["subject_id"],
            class_names=list(data["class_names"]),
            feature_names=list(data["feature_names"]),
            feature_values=list(data["feature_values"]),
            bias=np.asarray(data["bias"], dtype=np.float64),
            contributions=np.asarray(data["contributions"], dtype=np.float64).reshape(
                len(data["feature_names"]), len(data["class_names"])),
            scores=np.asarray(data["scores"], dtype=np.float64),
            model_logits=np.asarray(data["model_logits"], dtype=np.float64),
            predicted=int(data["predicted"]),
            true_label=data.get("true_label"),
            prototype_sources=dict(data.get("prototype_sources", {})),
        )


def _sources(projection: Optional[ProjectionReport]) -> Dict[str, str]:
    if projection is None:
        return {}
    return {f"{r.class_index},{r.prototype_index}": r.subject_id for r in projection.records}


def explain_local(
    model: PanicModel,
    tabular: TabularBatch,
    volume: torch.Tensor,
    subject_id: str,
    class_names: Sequence[str],
    true_label: Optional[int] = None,
    projection: Optional[ProjectionReport] = None
) -> Explanation:
    """
    Explain one subject. ``tabular`` holds a single row, ``volume`` is [1, 1, H, D, W].
    Runs in eval mode; the fidelity residual is checked against FIDELITY_TOLERANCE.
    """
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            output = model(tabular.to(model.bias.dtype), volume)
    finally:
        model.train(was_training)

    values = tabular.values[0].double().numpy()
    missing = tabular.missing[0].numpy()
    explanation = Explanation(
        subject_id=subject_id,
        class_names=list(class_names),
        feature_names=model.schema.names,
        feature_values=[None if m else float(v) for v, m in zip(values, missing)],
        bias=model.bias.detach().double().numpy().copy(),
        contributions=output.contributions[0].double().numpy(),
        scores=output.scores[0].double().numpy(),
        model_logits=output.logits[0].double().numpy(),
        predicted=int(torch.argmax(output.logits[0])),
        true_label=true_label,
        prototype_sources=_sources(projection),
        occurrence=output.occurrence[0].double().numpy() if output.occurrence is not None else None,
    )
    residual = explanation.fidelity_residual
    if residual > FIDELITY_TOLERANCE:
        logger.warning(f"Explanation of {subject_id} reconstructs logits only to {residual:.2e}")
    return explanation


def explain_subject(
    model: PanicModel,
    dataset: PanicDataset,
    subject_id: str,
    class_names: Sequence[str],
    projection: Optional[ProjectionReport] = None
) -> Explanation:
    if subject_id not in dataset.subject_ids:
        raise SubjectNotFoundError(f"Subject {subject_id} not in dataset", details={"subject": subject_id})
    batch = dataset.batch([dataset.subject_ids.index(subject_id)])
    return explain_local(model, batch.tabular, batch.volumes, subject_id, class_names,
                         int(batch.labels[0]), projection)


@dataclass
class ImportanceTable:
    """Mean absolute contribution per function and class, sorted by ``overall``."""

    frame: pd.DataFrame

    def top(self, k: int) -> pd.DataFrame:
        return self.frame.head(k)

    def for_kind(self, kind: str) -> pd.DataFrame:
        return self.frame[self.frame["kind"] == kind]

    def to_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.frame.to_csv(path, index=False, float_format="%.17g")
        return path


def global_importance(
    model: PanicModel,
    dataset: PanicDataset,
    class_names: Sequence[str],
    batch_size: int = 32
) -> ImportanceTable:
    """
    Average |contribution| over a split for every feature function, the
    combined image term sum_k g_k^c, and each prototype separately.
    """
    n_classes = model.n_classes
    n_features = model.nam.n_features
    n_prototypes = model.n_prototypes
    tab_sum = np.zeros((n_features, n_classes))
    image_sum = np.zeros(n_classes)
    proto_sum = np.zeros((n_classes, n_prototypes))
    count = 0

    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            # accumulation in float64 over the sorted-id order of the dataset
            for batch in iterate_batches(dataset, batch_size):
                output = model.forward_batch(batch)
                contributions = output.contributions.double().numpy()
                scores = output.scores.double().numpy()
                for b in range(len(batch)):
                    tab_sum += np.abs(contributions[b])
                    image_sum += np.abs(scores[b].sum(axis=1))
                    proto_sum += np.abs(scores[b])
                    count += 1
    finally:
        model.train(was_training)

    rows = []
    for spec in model.schema:
        rows.append({"name": spec.name, "kind": "tabular",
                     **{name: tab_sum[spec.column_index, c] / count for c, name in enumerate(class_names)}})
    rows.append({"name": "image", "kind": "image_combined",
                 **{name: image_sum[c] / count for c, name in enumerate(class_names)}})
    for c in range(n_classes):
        for k in range(n_prototypes):
            values = {name: 0.0 for name in class_names}
            values[class_names[c]] = proto_sum[c, k] / count
            rows.append({"name": f"prototype_{class_names[c]}_{k}", "kind": "image_prototype", **values})

    frame = pd.DataFrame(rows)
    frame["overall"] = frame[list(class_names)].mean(axis=1)
    frame = frame.sort_values("overall", ascending=False, kind="stable").reset_index(drop=True)
    return ImportanceTable(frame)


@dataclass
class LogOddsCurve:
    """Change of log odds of ``class_index`` vs the reference class along one feature."""

    feature: str
    kind: str
    class_index: int
    class_name: str
    reference_class: int
    reference_label: str
    reference_value: float
    grid: np.ndarray
    values: np.ndarray
    grid_raw: Optional[np.ndarray] = None
    missing_value: Optional[float] = None
    quartiles: List[float] = field(default_factory=list)

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame({"grid": self.grid, "log_odds": self.values})
        if self.grid_raw is not None:
            frame.insert(1, "grid_raw", self.grid_raw)
        return frame

    def to_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False, float_format="%.17g")
        return path


def _closed_form(model: PanicModel, spec: FeatureSpec, grid: np.ndarray, reference: float,
                 class_index: int, reference_class: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Curve plus the raw f_n values on [reference, grid...]."""
    f = model.nam.shape_function(spec, np.concatenate([[reference], grid])).double().numpy()
    f_ref, f_grid = f[0], f[1:]
    curve = (f_grid[:, class_index] - f_ref[class_index]) - (f_grid[:, reference_class] - f_ref[reference_class])
    curve[grid == reference] = 0.0
    return curve, f_ref, f_grid


def direct_log_odds(
    model: PanicModel,
    spec: FeatureSpec,
    grid: np.ndarray,
    reference: float,
    class_index: int,
    reference_class: int,
    background: TabularBatch,
    background_volume: torch.Tensor
) -> np.ndarray:
    """
    Literal ratio of odds from softmax probabilities for a background subject
    whose feature ``spec`` is set to each grid value and to the reference.
    """
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            output = model(background.to(model.bias.dtype), background_volume)
    finally:
        model.train(was_training)
    contributions = output.contributions[0].double()
    shared = (model.bias.detach().double() + contributions.sum(dim=0)
              - contributions[spec.column_index] + output.scores[0].double().sum(dim=-1))

    f = model.nam.shape_function(spec, np.concatenate([[reference], grid])).double()
    log_p = torch.log_softmax(shared + f, dim=-1)
    log_odds = log_p[:, class_index] - log_p[:, reference_class]
    return (log_odds[1:] - log_odds[0]).numpy()


def log_odds_curve(
    model: PanicModel,
    feature: Union[int, str, FeatureSpec],
    class_index: int,
    grid: Optional[Sequence[float]] = None,
    background: Optional[Tuple[TabularBatch, torch.Tensor]] = None,
    stats: Optional[StandardizationStats] = None,
    class_names: Optional[Sequence[str]] = None,
    reference_class: int = 0,
    reference_label: str = "control",
    grid_points: int = 101
) -> LogOddsCurve:
    """
    log[(p_c(x) / p_ref(x)) / (p_c(x') / p_ref(x'))] along one feature.

    The reference x' is 0 in standardized units (training mean) for continuous
    features and 0 for categorical ones. When ``background`` is given the
    closed form is checked against the literal softmax ratio.

    Raises:
        DegenerateRequestError: class_index is the reference class
        NumericError: closed form and direct evaluation disagree
    """
    if class_index == reference_class:
        raise DegenerateRequestError(
            f"Class {class_index} is the reference class; its log-odds curve is identically 0",
            details={"class": class_index}
        )
    spec = feature if isinstance(feature, FeatureSpec) else model.schema[feature]
    reference = 0.0
    raw_grid, quartiles = None, []

    if grid is None:
        if spec.kind is FeatureKind.CONTINUOUS:
            if stats is None:
                raise DegenerateRequestError(f"No grid and no training range for {spec.name}",
                                             details={"feature": spec.name})
            s = stats.stats[spec.name]
            raw_grid = np.linspace(s.minimum, s.maximum, grid_points)
            grid = stats.to_standard(spec.name, raw_grid)
        else:
            grid = np.array([0.0, 1.0, 2.0])
    grid = np.asarray(grid, dtype=np.float64)
    if spec.kind is FeatureKind.CONTINUOUS and stats is not None and spec.name in stats.stats:
        if raw_grid is None:
            raw_grid = stats.to_raw(spec.name, grid)
        quartiles = list(stats.stats[spec.name].quartiles)

    curve, f_ref, _ = _closed_form(model, spec, grid, reference, class_index, reference_class)

    if background is not None:
        direct = direct_log_odds(model, spec, grid, reference, class_index, reference_class, *background)
        gap = float(np.max(np.abs(direct - curve))) if len(grid) else 0.0
        if gap > CLOSED_FORM_TOLERANCE:
            raise NumericError(
                f"Log-odds closed form deviates from direct evaluation by {gap:.2e} for {spec.name}",
                details={"feature": spec.name, "class": class_index, "gap": gap}
            )

    s_missing = model.nam.missing_indicators[spec.column_index].detach().double().numpy()
    missing_value = float((s_missing[class_index] - f_ref[class_index])
                          - (s_missing[reference_class] - f_ref[reference_class]))

    names = list(class_names) if class_names is not None else [str(c) for c in range(model.n_classes)]
    return LogOddsCurve(
        feature=spec.name,
        kind=spec.kind.value,
        class_index=class_index,
        class_name=names[class_index],
        reference_class=reference_class,
        reference_label=reference_label,
        reference_value=reference,
        grid=grid,
        values=curve,
        grid_raw=raw_grid,
        missing_value=missing_value,
        quartiles=quartiles,
    )


def attention_iou(mask: np.ndarray, truth: np.ndarray) -> float:
    mask, truth = np.asarray(mask, dtype=bool), np.asarray(truth, dtype=bool)
    union = np.logical_or(mask, truth).sum()
    return float(np.logical_and(mask, truth).sum() / union) if union else 0.0


def plot_waterfall(explanation: Explanation, path: Union[str, Path], top_k: int = 10) -> Path:
    """Running sum of the largest contributions toward the predicted class."""
    c = explanation.predicted
    items = [(name, float(explanation.contributions[n, c])) for n, name in enumerate(explanation.feature_names)]
    items.sort(key=lambda item: -abs(item[1]))
    shown = items[:top_k]
    rest = sum(value for _, value in items[top_k:])
    parts = [("bias", float(explanation.bias[c]))] + shown
    if len(items) > top_k:
        parts.append((f"{len(items) - top_k} other features", rest))
    parts.append(("image", float(explanation.scores[c].sum())))

    fig, ax = plt.subplots(figsize=(7, 0.4 * len(parts) + 1.5))
    start = 0.0
    for i, (name, value) in enumerate(parts):
        ax.barh(i, value, left=start, color="tab:red" if value >= 0 else "tab:blue")
        start += value
    ax.set_yticks(range(len(parts)))
    ax.set_yticklabels([name for name, _ in parts])
    ax.invert_yaxis()
    ax.axvline(start, color="black", linestyle="--", linewidth=1)
    ax.set_xlabel(f"logit of {explanation.class_names[c]} ({start:.3f})")
    ax.set_title(f"Subject {explanation.subject_id}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_curve(curve: LogOddsCurve, path: Union[str, Path]) -> Path:
    x = curve.grid_raw if curve.grid_raw is not None else curve.grid
    fig, ax = plt.subplots(figsize=(5, 4))
    if curve.kind == FeatureKind.CATEGORICAL.value:
        ax.bar(x, curve.values, width=0.6)
    else:
        ax.plot(x, curve.values)
        if len(curve.quartiles) == 3:
            low, high = ax.get_ylim()
            ax.boxplot([curve.quartiles], positions=[low], vert=False, widths=0.1 * (high - low),
                       manage_ticks=False, whis=0)
    if curve.missing_value is not None:
        ax.scatter([x[0]], [curve.missing_value], marker="x", color="black")
        ax.annotate("missing", (x[0], curve.missing_value))
    ax.axhline(0.0, color="grey", linewidth=0.8)
    ax.set_xlabel(curve.feature)
    ax.set_ylabel(f"log odds {curve.class_name} vs {curve.reference_label}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, bbox_inches="tight")
    plt.close(fig)
    return path


def export_explanation(
    explanation: Explanation,
    directory: Union[str, Path],
    volume: Optional[np.ndarray] = None,
    source_volumes: Optional[Dict[str, np.ndarray]] = None,
    source_occurrence: Optional[Dict[str, np.ndarray]] = None,
    threshold: float = 0.3
) -> List[Path]:
    """
    Write explanation.json and explanation.png. With ``volume``, each prototype
    of the predicted class also gets its upsampled attention map and mask as
    raw volumes plus a montage, and the source image montage of each prototype
    is added when its volume and map are given.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    json_path = directory / "explanation.json"
    json_path.write_text(json.dumps(explanation.to_dict(), indent=2), encoding="utf-8")
    written.append(json_path)
    written.append(plot_waterfall(explanation, directory / "explanation.png"))

    if volume is not None and explanation.occurrence is not None:
        c = explanation.predicted
        for k in range(explanation.scores.shape[1]):
            overlay = attention_overlay(explanation.occurrence[c, k], volume.shape, threshold)
            stem = directory / f"attention_{c}_{k}"
            for suffix, data in (("", overlay.upsampled), ("_mask", overlay.mask.astype(np.float32))):
                raw_path = stem.with_name(stem.name + suffix + ".raw")
                write_volume(raw_path, data, subject_id=explanation.subject_id)
                written.extend([raw_path, raw_path.with_suffix(".json")])
            title = f"{explanation.class_names[c]} prototype {k}: similarity {explanation.scores[c, k]:.3f}"
            written.append(render_montage(volume, overlay.mask, stem.with_suffix(".png"), title))
            key = f"{c},{k}"
            source = explanation.prototype_sources.get(key)
            if source and source_volumes and source_occurrence and source in source_volumes:
                src_overlay = attention_overlay(source_occurrence[key], volume.shape, threshold)
                written.append(render_montage(source_volumes[source], src_overlay.mask,
                                              directory / f"prototype_{c}_{k}.png", f"source {source}"))
    return written


def load_explanation(path: Union[str, Path]) -> Explanation:
    return Explanation.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
