"""
Synthetic cohort generator, stratified cross-validation and dataset I/O.

The generator plants class signal in both modalities: shifted biomarker
distributions and allele frequencies on an informative subset of tabular
columns, and one Gaussian blob per class in the volumes.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
from scipy.ndimage import gaussian_filter
from torch.utils.data import DataLoader, Dataset

from config import SyntheticSpec
from exceptions import (
    CorruptDataError,
    DataError,
    SchemaError,
    SubjectNotFoundError,
)
from modules.tabular_gam import (
    FeatureKind,
    FeatureSchema,
    FeatureSpec,
    StandardizationStats,
    TabularBatch,
)
from utils.logging import get_logger

logger = get_logger(__name__)

DEMOGRAPHIC_FEATURES = ["age", "education"]

# name -> (control mean, SD, direction of change with severity)
BIOMARKERS: Dict[str, Tuple[float, float, float]] = {
    "abeta": (1000.0, 300.0, -1.0),
    "tau": (250.0, 90.0, 1.0),
    "ptau": (24.0, 9.0, 1.0),
    "hippocampus_left": (3500.0, 400.0, -1.0),
    "hippocampus_right": (3550.0, 400.0, -1.0),
    "entorhinal_left": (1900.0, 300.0, -1.0),
    "entorhinal_right": (1950.0, 300.0, -1.0),
}

MANIFEST = "manifest.csv"
SCHEMA = "schema.json"
GROUNDTRUTH = "groundtruth.json"
VOLUME_DIR = "volumes"
HEADER_DIMS = ("H", "D", "W")


def continuous_names(n: int) -> List[str]:
    names = DEMOGRAPHIC_FEATURES + list(BIOMARKERS)
    return names[:n] + [f"cont_{i + 1:02d}" for i in range(len(names), n)]


def categorical_names(n: int) -> List[str]:
    return ["sex"] + [f"snp_{i:02d}" for i in range(1, n)]


def build_schema(spec: SyntheticSpec) -> FeatureSchema:
    """Continuous columns first, then categorical, in generation order."""
    names = [(n, FeatureKind.CONTINUOUS) for n in continuous_names(spec.n_continuous)]
    names += [(n, FeatureKind.CATEGORICAL) for n in categorical_names(spec.n_categorical)]
    return FeatureSchema([FeatureSpec(name, kind, i) for i, (name, kind) in enumerate(names)])


def largest_remainder(proportions: Sequence[float], total: int) -> List[int]:
    """Integer counts summing to ``total``; leftovers go to the largest fractional parts."""
    raw = np.asarray(proportions, dtype=np.float64) * total
    counts = np.floor(raw).astype(int)
    remainders = raw - counts
    # stable sort keeps the lowest class index first on equal remainders
    order = np.argsort(-remainders, kind="stable")
    for i in order[: total - counts.sum()]:
        counts[i] += 1
    return counts.tolist()


@dataclass
class SyntheticDataset:
    """Generated cohort: raw tabular table, volumes, labels and the signal record."""

    subject_ids: List[str]
    labels: np.ndarray
    table: pd.DataFrame
    volumes: np.ndarray
    schema: FeatureSchema
    class_names: List[str]
    groundtruth: Dict[str, object] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.subject_ids)

    @property
    def volume_shape(self) -> Tuple[int, ...]:
        return tuple(self.volumes.shape[1:])

    def index_of(self, subject_id: str) -> int:
        try:
            return self.subject_ids.index(subject_id)
        except ValueError:
            raise SubjectNotFoundError(f"Subject {subject_id} not in dataset", details={"subject": subject_id})

    def subset(self, subject_ids: Sequence[str]) -> "SyntheticDataset":
        """Rows for the given subjects, in sorted subject-id order."""
        ordered = sorted(subject_ids)
        index = [self.index_of(s) for s in ordered]
        return SyntheticDataset(
            subject_ids=ordered,
            labels=self.labels[index],
            table=self.table.iloc[index].reset_index(drop=True),
            volumes=self.volumes[index],
            schema=self.schema,
            class_names=list(self.class_names),
            groundtruth=self.groundtruth,
        )

    def blob_mask(self, label: int, threshold: float = 0.5) -> np.ndarray:
        """Voxels where the planted blob of ``label`` exceeds ``threshold`` of its peak."""
        center = np.asarray(self.groundtruth["blob_centers_voxel"][label])
        radius = float(self.groundtruth["blob_radius"])
        grid = np.stack(np.meshgrid(*[np.arange(n) for n in self.volume_shape], indexing="ij"), axis=-1)
        dist2 = ((grid - center) ** 2).sum(axis=-1)
        return np.exp(-dist2 / (2 * radius ** 2)) > threshold

    def summarize(self) -> pd.DataFrame:
        """Per-class cohort table: counts, age, sex, education and MMSE."""
        rows = []
        groups = [(name, self.labels == c) for c, name in enumerate(self.class_names)]
        groups.append(("Total", np.ones(len(self), dtype=bool)))
        for name, selected in groups:
            part = self.table[selected]
            age = part["age"].dropna() if "age" in part else pd.Series(dtype=float)
            row = {"Group": name, "N": int(selected.sum())}
            if len(age):
                row["Age"] = f"{age.mean():.1f} ({age.std(ddof=0):.1f})"
                row["Age range"] = f"{age.min():.1f}-{age.max():.1f}"
            if "sex" in part:
                female = int((part["sex"] == 1).sum())
                row["Female"] = f"{female} ({100.0 * female / max(len(part), 1):.1f}%)"
            for column, label in (("education", "Education"), ("mmse", "MMSE")):
                if column in part:
                    values = part[column].dropna()
                    row[label] = f"{values.mean():.1f} ({values.std(ddof=0):.1f})" if len(values) else ""
            rows.append(row)
        return pd.DataFrame(rows).set_index("Group")


def _smooth_noise(rng: np.random.Generator, shape: Sequence[int], level: float, sigma: float) -> np.ndarray:
    noise = rng.standard_normal(tuple(shape))
    if sigma > 0:
        noise = gaussian_filter(noise, sigma=sigma, mode="wrap")
        noise /= max(noise.std(), 1e-12)
    return level * noise


def _blob(shape: Sequence[int], center: np.ndarray, radius: float, intensity: float) -> np.ndarray:
    axes = [np.arange(n, dtype=np.float64) for n in shape]
    grid = np.meshgrid(*axes, indexing="ij")
    dist2 = sum((g - c) ** 2 for g, c in zip(grid, center))
    return intensity * np.exp(-dist2 / (2 * radius ** 2))


def generate(spec: SyntheticSpec) -> SyntheticDataset:
    """
    Draw a synthetic cohort. Deterministic under ``spec.seed``.

    Args:
        spec: Generator settings

    Returns:
        SyntheticDataset with raw (unstandardized) tabular values
    """
    rng = np.random.default_rng(spec.seed)
    n_classes = len(spec.class_names)
    counts = largest_remainder(spec.class_proportions, spec.n_subjects)
    labels = np.repeat(np.arange(n_classes), counts)
    labels = labels[rng.permutation(len(labels))]
    severity = np.asarray(spec.class_severity, dtype=np.float64)[labels]
    n = len(labels)
    width = max(4, len(str(n)))
    subject_ids = [f"S{i + 1:0{width}d}" for i in range(n)]
    logger.info(f"Generating {n} subjects, class counts {dict(zip(spec.class_names, counts))}")

    table = pd.DataFrame(index=range(n))
    cont = continuous_names(spec.n_continuous)
    informative_cont = [name for name in cont if name not in DEMOGRAPHIC_FEATURES][: spec.informative_continuous]

    age = rng.normal(np.asarray(spec.age_mean)[labels], np.asarray(spec.age_sd)[labels])
    education = rng.normal(np.asarray(spec.education_mean)[labels], np.asarray(spec.education_sd)[labels])
    demographics = {
        "age": np.clip(age, *spec.age_range),
        "education": np.clip(np.round(education), 6, 20),
    }
    shifts: Dict[str, float] = {}
    for name in cont:
        if name in demographics:
            table[name] = demographics[name]
            continue
        mean, sd, direction = BIOMARKERS.get(name, (0.0, 1.0, 1.0))
        shift = spec.tabular_effect * sd * direction if name in informative_cont else 0.0
        shifts[name] = shift
        table[name] = rng.normal(mean + shift * severity, sd)

    cat = categorical_names(spec.n_categorical)
    table["sex"] = (rng.random(n) < np.asarray(spec.female_fraction)[labels]).astype(np.float64)
    snps = cat[1:]
    informative_cat = snps[: spec.informative_categorical]
    base_maf = rng.uniform(0.1, 0.4, size=len(snps))
    allele_frequencies: Dict[str, List[float]] = {}
    for j, name in enumerate(snps):
        effect = spec.allele_effect if name in informative_cat else 0.0
        maf = np.clip(base_maf[j] + effect * np.asarray(spec.class_severity), 0.01, 0.95)
        allele_frequencies[name] = maf.tolist()
        table[name] = rng.binomial(2, maf[labels]).astype(np.float64)

    mmse = rng.normal(np.asarray(spec.mmse_mean)[labels], np.asarray(spec.mmse_sd)[labels])
    table["mmse"] = np.clip(np.round(mmse), 0, 30)

    if spec.missing_rate > 0:
        missing = rng.random((n, len(cont))) < spec.missing_rate
        for j, name in enumerate(cont):
            table.loc[missing[:, j], name] = np.nan
        logger.debug(f"Injected {int(missing.sum())} missing continuous values")

    shape = np.asarray(spec.volume_shape)
    centers = np.asarray(spec.blob_centers, dtype=np.float64) * (shape - 1)
    volumes = np.empty((n, *spec.volume_shape), dtype=np.float32)
    for i, label in enumerate(labels):
        center = centers[label] + spec.blob_jitter * spec.blob_radius * rng.standard_normal(3)
        volume = _smooth_noise(rng, spec.volume_shape, spec.noise_level, spec.noise_smoothing)
        volume = volume + _blob(spec.volume_shape, center, spec.blob_radius, spec.blob_intensity[label])
        volumes[i] = volume.astype(np.float32)

    schema = build_schema(spec)
    columns = schema.names + (["mmse"] if "mmse" not in schema.names else [])
    table.insert(0, "subject_id", subject_ids)
    table = table[["subject_id"] + columns]

    groundtruth = {
        "seed": spec.seed,
        "class_names": list(spec.class_names),
        "class_counts": counts,
        "informative_continuous": informative_cont,
        "informative_categorical": informative_cat,
        "continuous_shifts": shifts,
        "allele_frequencies": allele_frequencies,
        "blob_centers_voxel": centers.tolist(),
        "blob_radius": spec.blob_radius,
        "blob_intensity": list(spec.blob_intensity),
        "missing_rate": spec.missing_rate,
        "mmse_in_schema": spec.include_mmse,
    }
    if spec.include_mmse:
        schema = FeatureSchema(list(schema) + [FeatureSpec("mmse", FeatureKind.CONTINUOUS, len(schema))])

    return SyntheticDataset(
        subject_ids=subject_ids,
        labels=labels.astype(np.int64),
        table=table.reset_index(drop=True),
        volumes=volumes,
        schema=schema,
        class_names=list(spec.class_names),
        groundtruth=groundtruth,
    )


@dataclass
class FoldAssignment:
    """Test fold of every subject plus the validation subset for each test fold."""

    subject_ids: List[str]
    folds: Dict[str, int]
    validation: Dict[int, List[str]]
    n_folds: int

    def split(self, fold: int) -> Tuple[List[str], List[str], List[str]]:
        """(train, val, test) subject ids for one repetition, each sorted."""
        if fold not in range(self.n_folds):
            raise DataError(f"Fold {fold} out of range", details={"fold": fold, "n_folds": self.n_folds})
        test = sorted(s for s in self.subject_ids if self.folds[s] == fold)
        val = sorted(self.validation[fold])
        held = set(test) | set(val)
        train = sorted(s for s in self.subject_ids if s not in held)
        return train, val, test

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for subject in sorted(self.subject_ids):
            row = {"subject_id": subject, "test_fold": self.folds[subject]}
            for fold in range(self.n_folds):
                if self.folds[subject] == fold:
                    role = "test"
                elif subject in self.validation[fold]:
                    role = "val"
                else:
                    role = "train"
                row[f"fold_{fold}"] = role
            rows.append(row)
        return pd.DataFrame(rows)

    def to_dict(self) -> Dict[str, object]:
        return {
            "n_folds": self.n_folds,
            "folds": {s: self.folds[s] for s in sorted(self.subject_ids)},
            "validation": {str(f): sorted(v) for f, v in sorted(self.validation.items())},
        }

    @classmethod
    def from_dict(cls, data: Dict[str, object]) -> "FoldAssignment":
        folds = {s: int(f) for s, f in data["folds"].items()}
        return cls(
            subject_ids=sorted(folds),
            folds=folds,
            validation={int(f): list(v) for f, v in data["validation"].items()},
            n_folds=int(data["n_folds"]),
        )


def stratification_cells(
    labels: Sequence[int],
    sex: Sequence[float],
    age: Sequence[float]
) -> List[Tuple[int, int, int]]:
    """(class, sex, age quartile) per subject; missing age and sex go to bin -1."""
    age = np.asarray(age, dtype=np.float64)
    observed = age[~np.isnan(age)]
    edges = np.quantile(observed, [0.25, 0.5, 0.75]) if len(observed) else np.array([])
    cells = []
    for y, s, a in zip(labels, sex, age):
        age_bin = -1 if np.isnan(a) else int(np.searchsorted(edges, a, side="right"))
        sex_bin = -1 if s is None or np.isnan(s) else int(s)
        cells.append((int(y), sex_bin, age_bin))
    return cells


def stratified_folds(
    subject_ids: Sequence[str],
    labels: Sequence[int],
    sex: Sequence[float],
    age: Sequence[float],
    n_folds: int = 5,
    seed: int = 0,
    val_fraction: float = 0.2
) -> FoldAssignment:
    """
    Greedy stratified k-fold over (class, sex, age-quartile) cells.

    Members of each cell are shuffled and dealt to the fold holding the fewest
    members of that cell (then fewest overall, then lowest index). Validation
    subjects are taken systematically from the cell-ordered non-test portion.
    """
    if len(subject_ids) < n_folds:
        raise DataError(f"Need at least {n_folds} subjects for {n_folds} folds",
                        details={"subjects": len(subject_ids)})
    rng = np.random.default_rng(seed)
    cells = stratification_cells(labels, sex, age)
    members: Dict[Tuple[int, int, int], List[str]] = {}
    for subject, cell in sorted(zip(subject_ids, cells)):
        members.setdefault(cell, []).append(subject)

    folds: Dict[str, int] = {}
    totals = np.zeros(n_folds, dtype=int)
    shuffled: Dict[Tuple[int, int, int], List[str]] = {}
    for cell in sorted(members):
        group = [members[cell][i] for i in rng.permutation(len(members[cell]))]
        shuffled[cell] = group
        in_cell = np.zeros(n_folds, dtype=int)
        for subject in group:
            fold = min(range(n_folds), key=lambda f: (in_cell[f], totals[f], f))
            folds[subject] = fold
            in_cell[fold] += 1
            totals[fold] += 1

    validation: Dict[int, List[str]] = {}
    for fold in range(n_folds):
        pool = [s for cell in sorted(shuffled) for s in shuffled[cell] if folds[s] != fold]
        chosen = [s for j, s in enumerate(pool) if int((j + 1) * val_fraction) > int(j * val_fraction)]
        validation[fold] = sorted(chosen)

    logger.info(f"Stratified {len(subject_ids)} subjects into {n_folds} folds over {len(members)} cells "
                f"(fold sizes {totals.tolist()})")
    return FoldAssignment(sorted(subject_ids), folds, validation, n_folds)


def folds_for(dataset: SyntheticDataset, n_folds: int = 5, seed: int = 0, val_fraction: float = 0.2) -> FoldAssignment:
    return stratified_folds(
        dataset.subject_ids,
        dataset.labels,
        dataset.table["sex"].to_numpy(dtype=np.float64),
        dataset.table["age"].to_numpy(dtype=np.float64),
        n_folds=n_folds,
        seed=seed,
        val_fraction=val_fraction,
    )


def write_volume(path: Union[str, Path], volume: np.ndarray, subject_id: Optional[str] = None):
    """Little-endian float32 raw file plus a JSON header {H, D, W, subject_id} next to it."""
    path = Path(path)
    if volume.ndim != 3:
        raise SchemaError(f"Expected an [H, D, W] volume, got shape {volume.shape}", details={"file": str(path)})
    np.ascontiguousarray(volume, dtype="<f4").tofile(path)
    header = dict(zip(HEADER_DIMS, (int(n) for n in volume.shape)))
    header.update(subject_id=subject_id or path.stem, dtype="float32", byteorder="little")
    path.with_suffix(".json").write_text(json.dumps(header), encoding="utf-8")


def read_volume(
    path: Union[str, Path],
    expected_shape: Optional[Sequence[int]] = None,
    subject_id: Optional[str] = None
) -> np.ndarray:
    path = Path(path)
    header_path = path.with_suffix(".json")
    try:
        header = json.loads(header_path.read_text(encoding="utf-8"))
        shape = tuple(int(header[dim]) for dim in HEADER_DIMS)
    except (OSError, ValueError, KeyError) as e:
        raise CorruptDataError(f"Unreadable volume header {header_path}: {e}", details={"file": str(header_path)})
    if expected_shape is not None and shape != tuple(expected_shape):
        raise SchemaError(
            f"Volume {path.name} has dims {shape}, manifest expects {tuple(expected_shape)}",
            details={"file": str(path), "header": shape, "expected": tuple(expected_shape)}
        )
    if subject_id is not None and header.get("subject_id") != subject_id:
        raise SchemaError(
            f"Volume {path.name} belongs to {header.get('subject_id')}, manifest row is {subject_id}",
            details={"file": str(path), "subject_id": subject_id}
        )
    try:
        data = np.fromfile(path, dtype="<f4")
    except OSError as e:
        raise CorruptDataError(f"Cannot read volume {path}: {e}", details={"file": str(path)})
    if data.size != int(np.prod(shape)):
        raise CorruptDataError(
            f"Volume file {path} holds {data.size} values, header says {int(np.prod(shape))}",
            details={"file": str(path)}
        )
    return data.reshape(shape).astype(np.float32)


def save_dataset(dataset: SyntheticDataset, path: Union[str, Path]) -> Path:
    """Write manifest.csv, schema.json, groundtruth.json and volumes/."""
    root = Path(path)
    (root / VOLUME_DIR).mkdir(parents=True, exist_ok=True)

    manifest = dataset.table.copy()
    manifest.insert(1, "label", dataset.labels)
    manifest["volume_file"] = [f"{VOLUME_DIR}/{s}.raw" for s in dataset.subject_ids]
    manifest.to_csv(root / MANIFEST, index=False, float_format="%.17g", na_rep="")

    meta = dataset.schema.to_dict()
    meta["class_names"] = list(dataset.class_names)
    meta["volume_shape"] = list(dataset.volume_shape)
    (root / SCHEMA).write_text(json.dumps(meta, indent=2), encoding="utf-8")
    (root / GROUNDTRUTH).write_text(json.dumps(dataset.groundtruth, indent=2, sort_keys=True), encoding="utf-8")

    for subject, volume in zip(dataset.subject_ids, dataset.volumes):
        write_volume(root / VOLUME_DIR / f"{subject}.raw", volume, subject_id=subject)
    logger.info(f"Saved {len(dataset)} subjects to {root}")
    return root


def load_dataset(path: Union[str, Path]) -> SyntheticDataset:
    root = Path(path)
    if not (root / MANIFEST).exists():
        raise DataError(f"No dataset at {root} (missing {MANIFEST})", details={"path": str(root)})
    try:
        meta = json.loads((root / SCHEMA).read_text(encoding="utf-8"))
    except (OSError, ValueError) as e:
        raise SchemaError(f"Cannot read {root / SCHEMA}: {e}", details={"file": str(root / SCHEMA)})
    schema = FeatureSchema.from_dict(meta)
    volume_shape = tuple(meta["volume_shape"])

    manifest = pd.read_csv(root / MANIFEST, dtype={"subject_id": str}, float_precision="round_trip")
    missing_columns = [c for c in ["subject_id", "label", "volume_file"] + schema.names if c not in manifest]
    if missing_columns:
        raise SchemaError(f"Manifest lacks columns {missing_columns}", details={"columns": missing_columns})

    volumes = np.empty((len(manifest), *volume_shape), dtype=np.float32)
    for i, (subject, relative) in enumerate(zip(manifest["subject_id"], manifest["volume_file"])):
        volumes[i] = read_volume(root / relative, expected_shape=volume_shape, subject_id=subject)

    groundtruth = {}
    if (root / GROUNDTRUTH).exists():
        groundtruth = json.loads((root / GROUNDTRUTH).read_text(encoding="utf-8"))

    labels = manifest["label"].to_numpy(dtype=np.int64)
    table = manifest.drop(columns=["label", "volume_file"])
    for column in table.columns[1:]:
        table[column] = table[column].astype(np.float64)
    logger.info(f"Loaded {len(manifest)} subjects from {root}")
    return SyntheticDataset(
        subject_ids=manifest["subject_id"].tolist(),
        labels=labels,
        table=table,
        volumes=volumes,
        schema=schema,
        class_names=list(meta["class_names"]),
        groundtruth=groundtruth,
    )


@dataclass
class PanicBatch:
    """Model-ready mini-batch."""

    subject_ids: List[str]
    tabular: TabularBatch
    volumes: torch.Tensor        # [B, 1, H, D, W]
    labels: torch.Tensor         # [B]

    def __len__(self) -> int:
        return len(self.subject_ids)

    def to(self, dtype: torch.dtype) -> "PanicBatch":
        return PanicBatch(self.subject_ids, self.tabular.to(dtype), self.volumes.to(dtype), self.labels)


class PanicDataset(Dataset):
    """Standardized tabular rows and volumes of a subset, in sorted subject-id order."""

    def __init__(self, dataset: SyntheticDataset, stats: StandardizationStats, subject_ids: Optional[Sequence[str]] = None):
        subset = dataset.subset(subject_ids if subject_ids is not None else dataset.subject_ids)
        values = stats.transform_array(subset.table, subset.schema)
        self.subject_ids = subset.subject_ids
        self.missing = torch.from_numpy(np.isnan(values))
        self.values = torch.from_numpy(np.nan_to_num(values, nan=0.0)).float()
        self.volumes = torch.from_numpy(subset.volumes).unsqueeze(1)
        self.labels = torch.from_numpy(subset.labels)

    def __len__(self) -> int:
        return len(self.subject_ids)

    def __getitem__(self, index: int) -> Dict[str, object]:
        return {
            "subject_id": self.subject_ids[index],
            "values": self.values[index],
            "missing": self.missing[index],
            "volume": self.volumes[index],
            "label": self.labels[index],
        }

    def batch(self, indices: Optional[Sequence[int]] = None) -> PanicBatch:
        index = list(range(len(self))) if indices is None else list(indices)
        return PanicBatch(
            subject_ids=[self.subject_ids[i] for i in index],
            tabular=TabularBatch(self.values[index], self.missing[index]),
            volumes=self.volumes[index],
            labels=self.labels[index],
        )

    @property
    def classes_present(self) -> List[int]:
        return sorted(set(self.labels.tolist()))


def collate(items: List[Dict[str, object]]) -> PanicBatch:
    return PanicBatch(
        subject_ids=[item["subject_id"] for item in items],
        tabular=TabularBatch(
            torch.stack([item["values"] for item in items]),
            torch.stack([item["missing"] for item in items]),
        ),
        volumes=torch.stack([item["volume"] for item in items]),
        labels=torch.stack([item["label"] for item in items]),
    )


def iterate_batches(
    dataset: PanicDataset,
    batch_size: int,
    shuffle: bool = False,
    generator: Optional[torch.Generator] = None
) -> Iterator[PanicBatch]:
    """Single-process loader; order is sorted subject id unless shuffled with ``generator``."""
    loader = DataLoader(
        dataset,
        batch_size=batch_size,
        shuffle=shuffle,
        generator=generator,
        collate_fn=collate,
        num_workers=0,
    )
    return iter(loader)
