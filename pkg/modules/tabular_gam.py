"""
Tabular branch: one univariate function per feature with class-specific outputs.
Continuous features go through a small spectrally normalized MLP, categorical
features through a linear coefficient, and missing values through a learned
class-conditional indicator.
"""

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils import parametrize

from utils.logging import get_logger
from exceptions import (
    ConfigurationError,
    DegenerateFeatureError,
    InvalidInputError,
    SchemaError,
)

logger = get_logger(__name__)


class FeatureKind(str, Enum):
    """Feature taxonomy of the tabular branch."""
    CONTINUOUS = "continuous"
    CATEGORICAL = "categorical"


@dataclass(frozen=True)
class FeatureSpec:
    """One tabular column and how it is modeled."""

    name: str
    kind: FeatureKind
    column_index: int

    def __post_init__(self):
        try:
            object.__setattr__(self, "kind", FeatureKind(self.kind))
        except ValueError:
            raise ConfigurationError(
                f"Unknown feature kind '{self.kind}' for feature {self.name}",
                details={"feature": self.name, "kind": str(self.kind)}
            )


class FeatureSchema:
    """Ordered collection of FeatureSpecs with unique names and column indices."""

    def __init__(self, features: Sequence[FeatureSpec]):
        self.features = sorted(features, key=lambda f: f.column_index)
        names = [f.name for f in self.features]
        columns = [f.column_index for f in self.features]
        if len(set(names)) != len(names):
            raise SchemaError("Feature names must be unique", details={"features": names})
        if columns != list(range(len(columns))):
            raise SchemaError(
                "Column indices must be unique and cover 0..N-1",
                details={"columns": columns}
            )

    def __len__(self) -> int:
        return len(self.features)

    def __iter__(self):
        return iter(self.features)

    def __getitem__(self, item: Union[int, str]) -> FeatureSpec:
        if isinstance(item, str):
            for spec in self.features:
                if spec.name == item:
                    return spec
            raise SchemaError(f"Unknown feature: {item}", details={"feature": item})
        return self.features[item]

    @property
    def names(self) -> List[str]:
        return [f.name for f in self.features]

    @property
    def continuous(self) -> List[FeatureSpec]:
        return [f for f in self.features if f.kind is FeatureKind.CONTINUOUS]

    @property
    def categorical(self) -> List[FeatureSpec]:
        return [f for f in self.features if f.kind is FeatureKind.CATEGORICAL]

    def to_dict(self) -> Dict[str, object]:
        return {
            "features": [
                {"name": f.name, "kind": f.kind.value, "column_index": f.column_index}
                for f in self.features
            ]
        }

    @classmethod
    def from_dict(cls, data: Dict[str, object]) -> "FeatureSchema":
        try:
            entries = data["features"]
            return cls([FeatureSpec(e["name"], e["kind"], int(e["column_index"])) for e in entries])
        except (KeyError, TypeError) as e:
            raise SchemaError(f"Malformed feature schema: {e}")

    def save(self, path: Union[str, Path]):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2), encoding="utf-8")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "FeatureSchema":
        try:
            return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
        except json.JSONDecodeError as e:
            raise SchemaError(f"Schema file {path} is not valid JSON: {e}", details={"path": str(path)})


@dataclass
class TabularSample:
    """One subject's feature vector; ``values`` entries under the mask are ignored."""

    values: np.ndarray
    missing_mask: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.missing_mask = np.asarray(self.missing_mask, dtype=bool)
        if self.values.ndim != 1 or self.values.shape != self.missing_mask.shape:
            raise InvalidInputError(
                "values and missing_mask must be vectors of equal length",
                details={"values": self.values.shape, "mask": self.missing_mask.shape}
            )
        bad = ~self.missing_mask & ~np.isfinite(self.values)
        if bad.any():
            raise InvalidInputError(
                "Non-finite value for an observed feature",
                details={"columns": np.flatnonzero(bad).tolist()}
            )

    @classmethod
    def from_values(cls, values: Sequence[float]) -> "TabularSample":
        """Build a sample where NaN marks a missing entry."""
        array = np.asarray(values, dtype=np.float64)
        return cls(values=array, missing_mask=np.isnan(array))

    def __len__(self) -> int:
        return len(self.values)


@dataclass
class TabularBatch:
    """Stacked samples: values [B, N] (zero where missing) and mask [B, N]."""

    values: torch.Tensor
    missing: torch.Tensor

    @classmethod
    def from_samples(cls, samples: Sequence[TabularSample]) -> "TabularBatch":
        if not samples:
            raise InvalidInputError("Empty batch")
        lengths = {len(s) for s in samples}
        if len(lengths) != 1:
            raise InvalidInputError("Ragged batch: samples differ in feature count",
                                    details={"lengths": sorted(lengths)})
        values = np.stack([np.where(s.missing_mask, 0.0, s.values) for s in samples])
        missing = np.stack([s.missing_mask for s in samples])
        return cls(torch.as_tensor(values, dtype=torch.float32), torch.as_tensor(missing))

    @classmethod
    def from_array(cls, values: np.ndarray) -> "TabularBatch":
        """Build from a [B, N] array where NaN marks missing entries."""
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 2:
            raise InvalidInputError("Expected a [batch, features] array", details={"shape": values.shape})
        missing = np.isnan(values)
        return cls(
            torch.as_tensor(np.where(missing, 0.0, values), dtype=torch.float32),
            torch.as_tensor(missing)
        )

    def __len__(self) -> int:
        return self.values.shape[0]

    def to(self, dtype: torch.dtype) -> "TabularBatch":
        return TabularBatch(self.values.to(dtype), self.missing)


class SpectralNorm(nn.Module):
    """
    Weight parametrization W -> W / sigma(W), sigma from power iteration.

    The divisor is clamped at ``eps`` so an all-zero matrix stays zero
    instead of turning into 0/0. Power iteration only runs in training mode
    and never replaces the singular vectors with zeros.
    """

    def __init__(self, weight: torch.Tensor, n_power_iterations: int = 1, eps: float = 1e-12):
        super().__init__()
        if weight.ndim != 2:
            raise ConfigurationError("Spectral normalization expects a 2D weight", details={"ndim": weight.ndim})
        self.n_power_iterations = n_power_iterations
        self.eps = eps
        out_features, in_features = weight.shape
        self.register_buffer("_u", F.normalize(weight.new_empty(out_features).normal_(0, 1), dim=0, eps=eps))
        self.register_buffer("_v", F.normalize(weight.new_empty(in_features).normal_(0, 1), dim=0, eps=eps))
        self._power_method(weight.detach(), 15)

    @torch.no_grad()
    def _power_method(self, weight: torch.Tensor, n_iter: int):
        for _ in range(n_iter):
            u = torch.mv(weight, self._v)
            if float(u.norm()) <= self.eps:
                return
            self._u.copy_(F.normalize(u, dim=0, eps=self.eps))
            v = torch.mv(weight.t(), self._u)
            if float(v.norm()) <= self.eps:
                return
            self._v.copy_(F.normalize(v, dim=0, eps=self.eps))

    def forward(self, weight: torch.Tensor) -> torch.Tensor:
        if self.training:
            self._power_method(weight.detach(), self.n_power_iterations)
        u = self._u.clone(memory_format=torch.contiguous_format)
        v = self._v.clone(memory_format=torch.contiguous_format)
        sigma = torch.dot(u, torch.mv(weight, v))
        return weight / sigma.clamp_min(self.eps)


def spectral_norm(layer: nn.Linear, n_power_iterations: int = 1) -> nn.Linear:
    parametrize.register_parametrization(layer, "weight", SpectralNorm(layer.weight, n_power_iterations))
    return layer


class FeatureNet(nn.Module):
    """Shared-trunk MLP for one continuous feature with a C-dimensional head."""

    def __init__(
        self,
        n_classes: int,
        hidden: Sequence[int] = (32, 32),
        dropout: float = 0.4,
        spectral_iterations: int = 1
    ):
        super().__init__()
        layers: List[nn.Module] = []
        width = 1
        for units in hidden:
            layers.append(spectral_norm(nn.Linear(width, units), n_power_iterations=spectral_iterations))
            layers.append(nn.ReLU())
            layers.append(nn.Dropout(dropout))
            width = units
        layers.append(spectral_norm(nn.Linear(width, n_classes), n_power_iterations=spectral_iterations))
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)

    def linear_layers(self) -> List[nn.Linear]:
        return [m for m in self.net if isinstance(m, nn.Linear)]


def largest_singular_value(weight: torch.Tensor, n_iter: int = 50) -> float:
    """Power-iteration estimate of the spectral norm of a 2D matrix."""
    with torch.no_grad():
        w = weight.detach().to(torch.float64)
        v = torch.ones(w.shape[1], dtype=torch.float64)
        v = v / v.norm()
        for _ in range(n_iter):
            u = F.normalize(w @ v, dim=0)
            v = F.normalize(w.t() @ u, dim=0)
        return float((w @ v).norm())


class NamFunctionBank(nn.Module):
    """
    The per-feature functions of the tabular branch.

    Output layout is [batch, features, classes]; entry [b, n, c] is the
    contribution of feature n to the class-c logit of sample b.
    """

    def __init__(
        self,
        schema: FeatureSchema,
        n_classes: int,
        hidden: Sequence[int] = (32, 32),
        dropout: float = 0.4,
        output_dropout: float = 0.1,
        spectral_iterations: int = 1
    ):
        super().__init__()
        self.schema = schema
        self.n_classes = n_classes
        self.n_features = len(schema)

        self.continuous_columns = [f.column_index for f in schema.continuous]
        self.categorical_columns = [f.column_index for f in schema.categorical]
        self.feature_nets = nn.ModuleList([
            FeatureNet(n_classes, hidden, dropout, spectral_iterations)
            for _ in self.continuous_columns
        ])
        self.categorical_weights = nn.Parameter(torch.zeros(len(self.categorical_columns), n_classes))
        self.missing_indicators = nn.Parameter(torch.zeros(self.n_features, n_classes))
        self.output_dropout = nn.Dropout(output_dropout)

        # column index -> (kind, position within its kind)
        self._slot: Dict[int, tuple] = {}
        for pos, col in enumerate(self.continuous_columns):
            self._slot[col] = (FeatureKind.CONTINUOUS, pos)
        for pos, col in enumerate(self.categorical_columns):
            self._slot[col] = (FeatureKind.CATEGORICAL, pos)

    def _check_batch(self, batch: TabularBatch) -> torch.Tensor:
        values, missing = batch.values, batch.missing
        if values.dim() != 2 or values.shape[1] != self.n_features or missing.shape != values.shape:
            raise InvalidInputError(
                f"Expected [batch, {self.n_features}] tabular input",
                details={"values": tuple(values.shape), "missing": tuple(missing.shape)}
            )
        x = values.to(self.missing_indicators.dtype).masked_fill(missing, 0.0)
        if not torch.isfinite(x).all():
            raise InvalidInputError("Non-finite value for an observed feature")
        return x

    def forward(self, batch: TabularBatch) -> torch.Tensor:
        x = self._check_batch(batch)
        batch_size = x.shape[0]

        columns: List[Optional[torch.Tensor]] = [None] * self.n_features
        for net, col in zip(self.feature_nets, self.continuous_columns):
            columns[col] = net(x[:, col:col + 1])
        if self.categorical_columns:
            codes = x[:, self.categorical_columns].unsqueeze(-1)
            linear = codes * self.categorical_weights
            for pos, col in enumerate(self.categorical_columns):
                columns[col] = linear[:, pos]

        contributions = torch.stack(columns, dim=1)
        indicators = self.missing_indicators.unsqueeze(0).expand(batch_size, -1, -1)
        contributions = torch.where(batch.missing.unsqueeze(-1), indicators, contributions)
        return self.output_dropout(contributions)

    def feature_contribution(
        self,
        feature: Union[int, str, FeatureSpec],
        x: Optional[float]
    ) -> torch.Tensor:
        """
        Evaluate a single feature function f_n at one value.

        ``x`` of None or NaN is the missing marker. Output dropout is applied
        only in training mode.
        """
        spec = feature if isinstance(feature, FeatureSpec) else self.schema[feature]
        col = spec.column_index
        if col not in self._slot:
            raise ConfigurationError(f"Feature {spec.name} is not part of this bank",
                                     details={"feature": spec.name})
        kind, pos = self._slot[col]
        if kind is not spec.kind:
            raise ConfigurationError(f"Feature {spec.name} was built as {kind.value}, not {spec.kind.value}",
                                     details={"feature": spec.name})

        if x is None or (isinstance(x, float) and np.isnan(x)):
            out = self.missing_indicators[col]
        else:
            if not np.isfinite(x):
                raise InvalidInputError(f"Non-finite value for feature {spec.name}",
                                        details={"feature": spec.name})
            value = torch.tensor([[float(x)]], dtype=self.missing_indicators.dtype)
            if kind is FeatureKind.CONTINUOUS:
                out = self.feature_nets[pos](value)[0]
            else:
                out = value[0, 0] * self.categorical_weights[pos]
        return self.output_dropout(out)

    def shape_function(self, feature: Union[int, str, FeatureSpec], grid: Sequence[float]) -> torch.Tensor:
        """f_n^c over a grid of observed values, [len(grid), C], in eval mode."""
        spec = feature if isinstance(feature, FeatureSpec) else self.schema[feature]
        values = torch.zeros(len(grid), self.n_features, dtype=self.missing_indicators.dtype)
        values[:, spec.column_index] = torch.as_tensor(np.asarray(grid, dtype=np.float64),
                                                       dtype=values.dtype)
        batch = TabularBatch(values, torch.zeros_like(values, dtype=torch.bool))
        was_training = self.training
        self.eval()
        try:
            with torch.no_grad():
                return self(batch)[:, spec.column_index]
        finally:
            self.train(was_training)

    def spectral_bounds(self, n_iter: int = 50) -> Dict[str, float]:
        """Largest singular value of every normalized MLP weight matrix."""
        was_training = self.training
        self.eval()
        bounds: Dict[str, float] = {}
        try:
            with torch.no_grad():
                for net, col in zip(self.feature_nets, self.continuous_columns):
                    for i, layer in enumerate(net.linear_layers()):
                        key = f"{self.schema[col].name}.layer{i}"
                        bounds[key] = largest_singular_value(layer.weight, n_iter)
        finally:
            self.train(was_training)
        return bounds


def feature_contribution(bank: NamFunctionBank, spec: FeatureSpec, x: Optional[float]) -> torch.Tensor:
    """Evaluate f_n for one feature value (None/NaN = missing)."""
    return bank.feature_contribution(spec, x)


def nam_forward(
    bank: NamFunctionBank,
    batch: Union[TabularBatch, Sequence[TabularSample]],
    training: bool = False
) -> torch.Tensor:
    """Contribution matrix [B, N, C]; dropout only when ``training`` is set."""
    if not isinstance(batch, TabularBatch):
        batch = TabularBatch.from_samples(batch)
    was_training = bank.training
    bank.train(training)
    try:
        return bank(batch)
    finally:
        bank.train(was_training)


def tab_penalty(contributions: torch.Tensor) -> torch.Tensor:
    """Output penalty: batch mean of (1/C) * sum_c sum_n f_n^c(x_n)^2."""
    if not torch.isfinite(contributions).all():
        raise InvalidInputError("Non-finite contributions in tabular penalty")
    n_classes = contributions.shape[-1]
    return contributions.pow(2).sum(dim=(1, 2)).mean() / n_classes


@dataclass
class FeatureStats:
    """Training-split statistics of one continuous feature (observed values only)."""

    mean: float
    std: float
    minimum: float
    maximum: float
    quartiles: List[float] = field(default_factory=list)


class StandardizationStats:
    """Per-feature mean/std fitted on a training split, persisted by feature name."""

    def __init__(self, stats: Dict[str, FeatureStats]):
        self.stats = stats

    @classmethod
    def fit(cls, table: pd.DataFrame, schema: FeatureSchema) -> "StandardizationStats":
        stats: Dict[str, FeatureStats] = {}
        for spec in schema.continuous:
            if spec.name not in table.columns:
                raise SchemaError(f"Column {spec.name} missing from table", details={"feature": spec.name})
            observed = table[spec.name].dropna().astype(np.float64)
            std = float(observed.std(ddof=0)) if len(observed) else float("nan")
            if not np.isfinite(std) or std <= 0.0:
                raise DegenerateFeatureError(
                    f"Feature {spec.name} has zero spread on the training split",
                    details={"feature": spec.name}
                )
            stats[spec.name] = FeatureStats(
                mean=float(observed.mean()),
                std=std,
                minimum=float(observed.min()),
                maximum=float(observed.max()),
                quartiles=[float(q) for q in observed.quantile([0.25, 0.5, 0.75])],
            )
        logger.debug(f"Fitted standardization stats for {len(stats)} continuous features")
        return cls(stats)

    def transform_array(self, table: pd.DataFrame, schema: FeatureSchema) -> np.ndarray:
        """[subjects, N] float array in schema order, NaN where missing."""
        out = np.empty((len(table), len(schema)), dtype=np.float64)
        for spec in schema:
            column = table[spec.name].to_numpy(dtype=np.float64)
            if spec.kind is FeatureKind.CONTINUOUS:
                s = self.stats[spec.name]
                column = (column - s.mean) / s.std
            out[:, spec.column_index] = column
        return out

    def to_standard(self, name: str, values: Iterable[float]) -> np.ndarray:
        s = self.stats[name]
        return (np.asarray(values, dtype=np.float64) - s.mean) / s.std

    def to_raw(self, name: str, values: Iterable[float]) -> np.ndarray:
        s = self.stats[name]
        return np.asarray(values, dtype=np.float64) * s.std + s.mean

    def to_dict(self) -> Dict[str, Dict[str, object]]:
        return {name: vars(s).copy() for name, s in sorted(self.stats.items())}

    @classmethod
    def from_dict(cls, data: Dict[str, Dict[str, object]]) -> "StandardizationStats":
        return cls({name: FeatureStats(**values) for name, values in data.items()})

    def save(self, path: Union[str, Path]):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2), encoding="utf-8")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "StandardizationStats":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def standardize(
    raw: pd.DataFrame,
    stats: StandardizationStats,
    schema: FeatureSchema
) -> List[TabularSample]:
    """Standardize continuous columns; categorical codes and missing entries pass through."""
    values = stats.transform_array(raw, schema)
    return [TabularSample.from_values(row) for row in values]
