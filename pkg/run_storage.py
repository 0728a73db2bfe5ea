"""
Run-directory storage: configuration, metrics, histories, fold assignments
and model checkpoints, kept as plain JSON/CSV files plus torch checkpoints.
"""

import json
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import pandas as pd
import torch

from config import RunConfig, dump_dotted
from exceptions import CheckpointError
from modules.panic_model import PanicModel
from modules.proto_image import ProjectionReport
from modules.tabular_gam import FeatureSchema, StandardizationStats
from utils.logging import get_logger

logger = get_logger(__name__)

CHECKPOINT_FORMAT = "panic-checkpoint"
CHECKPOINT_VERSION = 1


class RunStore:
    """Files of one run directory."""

    def __init__(self, run_dir: Union[str, Path]):
        self.run_dir = Path(run_dir)
        self.run_dir.mkdir(parents=True, exist_ok=True)

        self.config_text_file = self.run_dir / "config.txt"
        self.config_json_file = self.run_dir / "config.json"
        self.metrics_file = self.run_dir / "metrics.json"
        self.folds_file = self.run_dir / "folds.json"

    def _load_json(self, file_path: Path) -> Any:
        try:
            with open(file_path, "r", encoding="utf-8") as f:
                return json.load(f)
        except FileNotFoundError:
            return None

    def _save_json(self, file_path: Path, data: Any):
        file_path.parent.mkdir(parents=True, exist_ok=True)
        with open(file_path, "w", encoding="utf-8") as f:
            json.dump(data, f, indent=2, sort_keys=True)

    def fold_dir(self, fold: int) -> Path:
        path = self.run_dir / f"fold_{fold}"
        path.mkdir(parents=True, exist_ok=True)
        return path

    # Configuration
    def save_config(self, run_config: RunConfig):
        """Write the resolved config as dotted text and JSON before anything runs."""
        self.config_text_file.write_text(dump_dotted(run_config), encoding="utf-8")
        self._save_json(self.config_json_file, run_config.model_dump())
        logger.debug(f"Saved run config to {self.run_dir}")

    def load_config(self) -> Optional[RunConfig]:
        data = self._load_json(self.config_json_file)
        return RunConfig.model_validate(data) if data is not None else None

    # Metrics
    def save_metrics(self, metrics: Dict[str, Any], file_path: Optional[Path] = None):
        self._save_json(file_path or self.metrics_file, metrics)

    def load_metrics(self, file_path: Optional[Path] = None) -> Optional[Dict[str, Any]]:
        return self._load_json(file_path or self.metrics_file)

    def save_folds(self, folds: Dict[str, Any]):
        self._save_json(self.folds_file, folds)

    def load_folds(self) -> Optional[Dict[str, Any]]:
        return self._load_json(self.folds_file)

    # Tables
    def save_table(self, frame: pd.DataFrame, name: str, fold: Optional[int] = None) -> Path:
        directory = self.fold_dir(fold) if fold is not None else self.run_dir
        path = directory / name
        frame.to_csv(path, index=False, float_format="%.17g")
        return path

    def history_path(self, fold: int) -> Path:
        return self.fold_dir(fold) / "history.csv"

    def checkpoint_path(self, fold: int) -> Path:
        return self.fold_dir(fold) / "checkpoint.pt"


def save_checkpoint(
    path: Union[str, Path],
    model: PanicModel,
    stats: StandardizationStats,
    run_config: RunConfig,
    projection: Optional[ProjectionReport] = None,
    splits: Optional[Dict[str, List[str]]] = None,
    volume_shape=None
) -> Path:
    """Versioned single-file checkpoint: parameters plus everything needed to rebuild the model."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "state_dict": model.state_dict(),
        "schema": model.schema.to_dict(),
        "stats": stats.to_dict(),
        "projection": projection.to_dict() if projection is not None else None,
        "config": run_config.model_dump(),
        "volume_shape": list(volume_shape if volume_shape is not None else model.image.volume_shape),
        "dtype": str(model.bias.dtype).replace("torch.", ""),
        "splits": splits or {},
    }
    torch.save(payload, path)
    logger.info(f"Checkpoint written to {path}")
    return path


class Checkpoint:
    """Loaded checkpoint contents with the rebuilt model."""

    def __init__(self, model: PanicModel, stats: StandardizationStats, run_config: RunConfig,
                 projection: Optional[ProjectionReport], splits: Optional[Dict[str, List[str]]] = None):
        self.model = model
        self.splits = splits or {}
        self.stats = stats
        self.run_config = run_config
        self.projection = projection


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"Checkpoint {path} not found", details={"path": str(path)})
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as e:
        raise CheckpointError(f"Cannot read checkpoint {path}: {e}", details={"path": str(path)})

    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a PANIC checkpoint", details={"path": str(path)})
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"Unsupported checkpoint version {payload.get('version')}",
            details={"path": str(path), "version": payload.get("version")}
        )

    run_config = RunConfig.model_validate(payload["config"])
    schema = FeatureSchema.from_dict(payload["schema"])
    model = PanicModel(schema, run_config.n_classes, payload["volume_shape"], run_config.model)
    model = model.to(getattr(torch, payload.get("dtype", "float32")))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    projection = ProjectionReport.from_dict(payload["projection"]) if payload.get("projection") else None
    return Checkpoint(model, StandardizationStats.from_dict(payload["stats"]), run_config, projection,
                      payload.get("splits"))
