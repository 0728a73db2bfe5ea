"""Small shared builders for the unit tests."""

import os
import sys

import numpy as np
import pandas as pd
import torch

sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from config import ModelConfig
from modules.data import SyntheticDataset
from modules.panic_model import PanicModel
from modules.tabular_gam import FeatureKind, FeatureSchema, FeatureSpec, TabularBatch


def toy_schema(n_continuous: int = 2, n_categorical: int = 1) -> FeatureSchema:
    specs = [FeatureSpec(f"cont_{i}", FeatureKind.CONTINUOUS, i) for i in range(n_continuous)]
    specs += [FeatureSpec(f"cat_{i}", FeatureKind.CATEGORICAL, n_continuous + i) for i in range(n_categorical)]
    return FeatureSchema(specs)


def toy_model_config(**updates) -> ModelConfig:
    values = dict(
        n_prototypes=2,
        latent_dim=8,
        head_channels=4,
        backbone_widths=[2, 2, 2, 2],
        backbone_blocks=[1, 1, 1, 1],
        backbone_strides=[1, 1, 1, 1],
        stem_stride=2,
        nam_hidden=[8, 8],
    )
    values.update(updates)
    return ModelConfig(**values)


def toy_model(
    schema: FeatureSchema,
    n_classes: int = 3,
    volume_shape=(8, 8, 8),
    seed: int = 0,
    **config_updates
) -> PanicModel:
    """Float64 model with non-zero bias, categorical weights and missing indicators."""
    torch.manual_seed(seed)
    generator = torch.Generator().manual_seed(seed)
    model = PanicModel(schema, n_classes, volume_shape, toy_model_config(**config_updates), generator=generator)
    model = model.double()
    with torch.no_grad():
        model.bias.copy_(torch.randn(n_classes, generator=generator, dtype=torch.float64))
        model.nam.categorical_weights.copy_(
            torch.randn(model.nam.categorical_weights.shape, generator=generator, dtype=torch.float64))
        model.nam.missing_indicators.copy_(
            torch.randn(model.nam.missing_indicators.shape, generator=generator, dtype=torch.float64))
    model.eval()
    return model


def random_tabular(schema: FeatureSchema, batch_size: int, seed: int = 0, missing_rate: float = 0.0) -> TabularBatch:
    rng = np.random.default_rng(seed)
    values = rng.standard_normal((batch_size, len(schema)))
    for spec in schema.categorical:
        values[:, spec.column_index] = rng.integers(0, 3, size=batch_size)
    values[rng.random(values.shape) < missing_rate] = np.nan
    return TabularBatch.from_array(values).to(torch.float64)


def random_volumes(batch_size: int, shape=(8, 8, 8), seed: int = 0) -> torch.Tensor:
    generator = torch.Generator().manual_seed(seed)
    return torch.randn(batch_size, 1, *shape, generator=generator, dtype=torch.float64)


def toy_dataset(
    schema: FeatureSchema,
    n_subjects: int = 12,
    n_classes: int = 3,
    volume_shape=(8, 8, 8),
    seed: int = 0
) -> SyntheticDataset:
    """Random cohort with every class present; categorical codes in {0, 1, 2}."""
    rng = np.random.default_rng(seed)
    ids = [f"T{i:03d}" for i in range(n_subjects)]
    labels = np.arange(n_subjects) % n_classes
    table = pd.DataFrame({"subject_id": ids})
    for spec in schema:
        if spec.kind is FeatureKind.CONTINUOUS:
            table[spec.name] = rng.normal(10.0, 2.0, size=n_subjects)
        else:
            table[spec.name] = rng.integers(0, 3, size=n_subjects).astype(np.float64)
    volumes = rng.standard_normal((n_subjects, *volume_shape)).astype(np.float32)
    return SyntheticDataset(
        subject_ids=ids,
        labels=labels.astype(np.int64),
        table=table,
        volumes=volumes,
        schema=schema,
        class_names=[f"class_{c}" for c in range(n_classes)],
    )
