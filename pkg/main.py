"""
Main application entry point for PANIC.
Coordinates data generation, cross-validated training, evaluation and the
explanation exports behind one command-line interface.
"""

import argparse
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
import torch

from config import RunConfig, SyntheticSpec, build_run_config, config
from exceptions import ConfigurationError, PanicError
from modules.data import PanicDataset, folds_for, generate, load_dataset, save_dataset
from modules.interpret import (
    export_explanation,
    explain_subject,
    global_importance,
    log_odds_curve,
    plot_curve,
)
from modules.panic_model import evaluate
from modules.tabular_gam import StandardizationStats
from modules.trainer import Trainer, build_model
from run_storage import RunStore, load_checkpoint, save_checkpoint
from utils.logging import fold_logger, get_logger, setup_logging
from utils.seeding import SeedStreams, configure_torch

logger = get_logger(__name__)

COMMANDS = ("generate", "train", "evaluate", "explain", "importance", "curves")


class PanicRunner:
    """Runs one CLI command against a resolved RunConfig."""

    def __init__(self, run_config: RunConfig):
        self.run_config = run_config
        self.seeds = SeedStreams(run_config.seed)
        self.out_dir = Path(run_config.out_dir)

    def _data_spec(self) -> SyntheticSpec:
        # The data substream of the root seed drives generation
        data = self.run_config.data
        derived = self.seeds.seed("data")
        if data.seed != SyntheticSpec.model_fields["seed"].default:
            logger.warning(f"data.seed={data.seed} is ignored; the cohort is drawn from the data stream "
                           f"of seed={self.run_config.seed}. Use --seed to change it")
        return data.model_copy(update={"seed": derived})

    def _dataset(self):
        data_dir = Path(self.run_config.data_dir)
        if not (data_dir / "manifest.csv").exists():
            logger.info(f"No dataset at {data_dir}, generating one")
            self.cmd_generate()
        return load_dataset(data_dir)

    def _checkpoint(self):
        if not self.run_config.checkpoint:
            raise ConfigurationError("This command needs --checkpoint")
        return load_checkpoint(self.run_config.checkpoint)

    def cmd_generate(self) -> Path:
        """Generate the synthetic cohort into data_dir and print its summary table."""
        dataset = generate(self._data_spec())
        path = save_dataset(dataset, self.run_config.data_dir)
        print(dataset.summarize().to_string())
        return path

    def cmd_train(self) -> Dict[str, Any]:
        """Stratified k-fold CV: one trained model, history and checkpoint per fold."""
        store = RunStore(self.out_dir)
        store.save_config(self.run_config)
        dataset = self._dataset()
        cv = self.run_config.cv
        assignment = folds_for(dataset, cv.n_folds, self.seeds.seed("folds"), cv.val_fraction)
        store.save_folds(assignment.to_dict())

        n_run = min(cv.folds_to_run or cv.n_folds, cv.n_folds)
        fold_metrics: List[Dict[str, Any]] = []
        for fold in range(n_run):
            train_ids, val_ids, test_ids = assignment.split(fold)
            fold_log = fold_logger(__name__, fold)
            fold_log.info(f"{len(train_ids)} train / {len(val_ids)} val / {len(test_ids)} test")
            stats = StandardizationStats.fit(dataset.subset(train_ids).table, dataset.schema)
            train_set = PanicDataset(dataset, stats, train_ids)
            val_set = PanicDataset(dataset, stats, val_ids)
            test_set = PanicDataset(dataset, stats, test_ids)

            model = build_model(self.run_config, dataset.schema, dataset.volume_shape, self.seeds, fold)
            trainer = Trainer(model, self.run_config, self.seeds, fold)
            result = trainer.fit(train_set, val_set)
            test = evaluate(model, test_set, self.run_config.train.batch_size)

            result.history.to_csv(store.history_path(fold), index=False, float_format="%.17g")
            save_checkpoint(
                store.checkpoint_path(fold), model, stats, self.run_config, result.projection,
                splits={"train": train_ids, "val": val_ids, "test": test_ids},
            )
            fold_metrics.append({
                "fold": fold,
                "best_epoch": result.best_epoch,
                "val_bacc": result.best_val_bacc,
                "test_bacc": test.balanced_accuracy,
                "test_confusion": test.confusion.tolist(),
                "max_spectral_norm": max(result.spectral_bounds.values()) if result.spectral_bounds else None,
            })
            fold_log.info(f"Done: val BAcc {result.best_val_bacc:.3f}, test BAcc {test.balanced_accuracy:.3f}")

        val = np.array([m["val_bacc"] for m in fold_metrics])
        test = np.array([m["test_bacc"] for m in fold_metrics])
        metrics = {
            "folds": fold_metrics,
            "val_bacc_mean": float(val.mean()),
            "val_bacc_sd": float(val.std(ddof=0)),
            "test_bacc_mean": float(test.mean()),
            "test_bacc_sd": float(test.std(ddof=0)),
        }
        store.save_metrics(metrics)
        print(f"Validation BAcc: {metrics['val_bacc_mean']:.3f} +/- {metrics['val_bacc_sd']:.3f}")
        print(f"Test BAcc:       {metrics['test_bacc_mean']:.3f} +/- {metrics['test_bacc_sd']:.3f}")
        return metrics

    def cmd_evaluate(self) -> Dict[str, Any]:
        """Per-subject logits/probabilities and BAcc for the requested subjects (default: all)."""
        checkpoint = self._checkpoint()
        dataset = self._dataset()
        subjects = self.run_config.subjects or dataset.subject_ids
        eval_set = PanicDataset(dataset, checkpoint.stats, subjects)
        result = evaluate(checkpoint.model, eval_set, self.run_config.train.batch_size)

        frame = pd.DataFrame({"subject_id": result.subject_ids, "label": result.labels,
                              "predicted": result.predictions})
        for c, name in enumerate(dataset.class_names):
            frame[f"logit_{name}"] = result.logits[:, c]
        for c, name in enumerate(dataset.class_names):
            frame[f"prob_{name}"] = result.probabilities[:, c]
        store = RunStore(self.out_dir)
        store.save_table(frame, "predictions.csv")
        metrics = result.to_dict()
        store.save_metrics(metrics, store.run_dir / "evaluation.json")
        print(f"BAcc on {len(result.subject_ids)} subjects: {result.balanced_accuracy:.3f}")
        return metrics

    def cmd_explain(self) -> List[Path]:
        """Explanation JSON, waterfall plot and attention montages per subject."""
        if not self.run_config.subjects:
            raise ConfigurationError("explain needs at least one subject id (--subjects)")
        checkpoint = self._checkpoint()
        dataset = self._dataset()
        model = checkpoint.model
        threshold = self.run_config.interpret.threshold
        eval_set = PanicDataset(dataset, checkpoint.stats)

        source_volumes, source_occurrence = {}, {}
        if checkpoint.projection is not None:
            model.eval()
            for record in checkpoint.projection.records:
                volume = dataset.volumes[dataset.index_of(record.subject_id)]
                source_volumes[record.subject_id] = volume
                with torch.no_grad():
                    maps = model.image.occurrence_of(torch.from_numpy(volume)[None, None].to(model.bias.dtype))
                key = f"{record.class_index},{record.prototype_index}"
                source_occurrence[key] = maps[0, record.class_index, record.prototype_index].double().numpy()

        written: List[Path] = []
        for subject in self.run_config.subjects:
            explanation = explain_subject(model, eval_set, subject, dataset.class_names, checkpoint.projection)
            volume = dataset.volumes[dataset.index_of(subject)]
            written += export_explanation(explanation, self.out_dir / subject, volume,
                                          source_volumes, source_occurrence, threshold)
            names = dataset.class_names
            print(f"{subject}: predicted {names[explanation.predicted]}, "
                  f"fidelity residual {explanation.fidelity_residual:.2e}")
        return written

    def _training_set(self, checkpoint, dataset) -> PanicDataset:
        train_ids = checkpoint.splits.get("train") or dataset.subject_ids
        return PanicDataset(dataset, checkpoint.stats, train_ids)

    def cmd_importance(self) -> Path:
        """Importance CSV over the checkpoint's training split, descending by overall score."""
        checkpoint = self._checkpoint()
        dataset = self._dataset()
        table = global_importance(checkpoint.model, self._training_set(checkpoint, dataset),
                                  dataset.class_names, self.run_config.train.batch_size)
        path = table.to_csv(self.out_dir / "importance.csv")
        print(table.top(self.run_config.interpret.top_k)[["name", "kind", "overall"]].to_string(index=False))
        return path

    def cmd_curves(self) -> List[Path]:
        """One log-odds CSV and plot per (feature, non-reference class)."""
        checkpoint = self._checkpoint()
        dataset = self._dataset()
        interp = self.run_config.interpret
        train_set = self._training_set(checkpoint, dataset)
        background = train_set.batch([0])
        written: List[Path] = []
        for spec in checkpoint.model.schema:
            for c in range(checkpoint.model.n_classes):
                if c == interp.reference_class:
                    continue
                curve = log_odds_curve(
                    checkpoint.model, spec, c,
                    background=(background.tabular, background.volumes),
                    stats=checkpoint.stats,
                    class_names=dataset.class_names,
                    reference_class=interp.reference_class,
                    reference_label=interp.reference_label,
                    grid_points=interp.grid_points,
                )
                stem = self.out_dir / "curves" / f"{spec.name}_{dataset.class_names[c]}"
                written.append(curve.to_csv(stem.with_suffix(".csv")))
                written.append(plot_curve(curve, stem.with_suffix(".png")))
        logger.info(f"Wrote {len(written) // 2} log-odds curves to {self.out_dir / 'curves'}")
        return written

    def run(self, command: str):
        if command not in COMMANDS:
            raise ConfigurationError(f"Unknown command {command}", details={"command": command})
        return getattr(self, f"cmd_{command}")()


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="panic",
        description="Interpretable additive classifier over tabular data and 3D volumes",
        epilog="Any config field can be overridden with its dotted name, e.g. --train.lr 0.002",
    )
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="Dotted-format config file")
    parser.add_argument("--seed", type=int, help="Root seed")
    parser.add_argument("--out", help="Run/output directory")
    parser.add_argument("--data", help="Dataset directory")
    parser.add_argument("--checkpoint", help="Checkpoint file")
    parser.add_argument("--subjects", nargs="+", help="Subject ids (explain, evaluate)")
    parser.add_argument("--folds", type=int, help="Only run the first N folds")
    parser.add_argument("--ablate", choices=("tabular", "image"), help="Disable one branch")
    return parser


def dotted_overrides(extra: Sequence[str]) -> Dict[str, str]:
    """``--a.b value`` / ``--a.b=value`` pairs left over by argparse."""
    overrides: Dict[str, str] = {}
    i = 0
    while i < len(extra):
        token = extra[i]
        if not token.startswith("--") or "." not in token:
            raise ConfigurationError(f"Unrecognized argument {token}", details={"argument": token})
        key = token[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise ConfigurationError(f"Missing value for {token}", details={"argument": token})
            value = extra[i + 1]
            i += 2
        overrides[key] = value
    return overrides


def resolve_config(argv: Optional[Sequence[str]] = None):
    args, extra = build_parser().parse_known_args(argv)
    overrides: Dict[str, Any] = dotted_overrides(extra)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out:
        overrides["out_dir"] = args.out
    if args.data:
        overrides["data_dir"] = args.data
    if args.checkpoint:
        overrides["checkpoint"] = args.checkpoint
    if args.subjects:
        overrides["subjects"] = list(args.subjects)
    if args.folds is not None:
        overrides["cv.folds_to_run"] = args.folds
    if args.ablate:
        overrides[f"model.use_{args.ablate}"] = False
    return args.command, build_run_config(args.config, overrides)


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main application entry point; returns the process exit code."""
    setup_logging()
    try:
        command, run_config = resolve_config(argv)
        configure_torch(config.num_threads)
        PanicRunner(run_config).run(command)
        return 0
    except PanicError as e:
        logger.error(f"{type(e).__name__}: {e.message}")
        return e.exit_code
    except KeyboardInterrupt:
        logger.info("Interrupted")
        return 130


if __name__ == "__main__":
    sys.exit(main())
