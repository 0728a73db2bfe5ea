"""Unit tests for configuration resolution, CLI parsing and run storage."""

import os
import sys
import tempfile
import unittest
from pathlib import Path

import torch

sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from config import RunConfig, build_run_config, dump_dotted, parse_dotted
from exceptions import CheckpointError, ConfigurationError
from main import PanicRunner, dotted_overrides, main, resolve_config
from modules.proto_image import ProjectionRecord, ProjectionReport
from modules.tabular_gam import StandardizationStats
from run_storage import RunStore, load_checkpoint, save_checkpoint
from tests.helpers import random_tabular, random_volumes, toy_dataset, toy_model, toy_schema
from utils.seeding import SeedStreams


class TestRunConfig(unittest.TestCase):
    """Defaults < config file < dotted overrides."""

    def test_defaults(self):
        run_config = build_run_config()
        self.assertEqual(run_config.n_classes, 3)
        self.assertEqual(run_config.train.batch_size, 16)
        self.assertEqual(run_config.model.backbone_widths, [8, 16, 32, 64])

    def test_precedence(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "run.cfg"
            path.write_text("# small run\ntrain.epochs = 4\ntrain.lr = 0.01\n", encoding="utf-8")
            run_config = build_run_config(path, {"train.lr": "0.005"})
        self.assertEqual(run_config.train.epochs, 4)
        self.assertEqual(run_config.train.lr, 0.005)

    def test_dump_parse_round_trip(self):
        run_config = build_run_config(overrides={"seed": 7, "data.n_subjects": 40, "subjects": ["S0001"]})
        restored = RunConfig.model_validate(parse_dotted(dump_dotted(run_config)))
        self.assertEqual(restored, run_config)

    def test_invalid_values(self):
        for overrides in ({"loss.cluster": -1}, {"train.epochs": 0}, {"model.unknown": 1},
                          {"model.backbone_widths": [8, 16]}, {"interpret.reference_class": 5}):
            with self.assertRaises(ConfigurationError, msg=str(overrides)):
                build_run_config(overrides=overrides)

    def test_missing_config_file(self):
        with self.assertRaises(ConfigurationError):
            build_run_config("/nonexistent/run.cfg")

    def test_malformed_line(self):
        with self.assertRaises(ConfigurationError):
            parse_dotted("train.epochs 4\n")


class TestCommandLine(unittest.TestCase):
    """Argument parsing and exit codes."""

    def test_dotted_overrides(self):
        self.assertEqual(dotted_overrides(["--train.lr", "0.1", "--model.use_image=false"]),
                         {"train.lr": "0.1", "model.use_image": "false"})
        with self.assertRaises(ConfigurationError):
            dotted_overrides(["--verbose"])
        with self.assertRaises(ConfigurationError):
            dotted_overrides(["--train.lr"])

    def test_named_flags(self):
        command, run_config = resolve_config([
            "train", "--seed", "3", "--out", "runs/x", "--folds", "2", "--ablate", "image",
            "--data.n_subjects", "50",
        ])
        self.assertEqual(command, "train")
        self.assertEqual(run_config.seed, 3)
        self.assertEqual(run_config.out_dir, "runs/x")
        self.assertEqual(run_config.cv.folds_to_run, 2)
        self.assertFalse(run_config.model.use_image)
        self.assertEqual(run_config.data.n_subjects, 50)

    def test_root_seed_drives_generation(self):
        expected = SeedStreams(3).seed("data")
        runner = PanicRunner(build_run_config(overrides={"seed": 3}))
        self.assertEqual(runner._data_spec().seed, expected)
        runner = PanicRunner(build_run_config(overrides={"seed": 3, "data.seed": 11}))
        with self.assertLogs("main", level="WARNING") as logs:
            self.assertEqual(runner._data_spec().seed, expected)
        self.assertIn("data.seed=11 is ignored", logs.output[0])

    def test_invalid_config_exit_code(self):
        self.assertEqual(main(["train", "--loss.cluster=-1"]), 2)

    def test_missing_checkpoint_is_reported(self):
        with tempfile.TemporaryDirectory() as tmp:
            code = main(["evaluate", "--checkpoint", os.path.join(tmp, "none.pt"), "--out", tmp,
                         "--data", os.path.join(tmp, "data")])
        self.assertEqual(code, CheckpointError.exit_code)


class TestRunStorage(unittest.TestCase):
    """Run directory layout and checkpoints."""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.store = RunStore(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def test_config_and_metrics(self):
        run_config = build_run_config(overrides={"seed": 11})
        self.store.save_config(run_config)
        self.assertTrue((Path(self.tmp.name) / "config.txt").exists())
        self.assertEqual(self.store.load_config(), run_config)
        self.store.save_metrics({"test_bacc_mean": 0.5})
        self.assertEqual(self.store.load_metrics(), {"test_bacc_mean": 0.5})

    def test_checkpoint_round_trip(self):
        schema = toy_schema(2, 1)
        dataset = toy_dataset(schema)
        stats = StandardizationStats.fit(dataset.table, schema)
        model = toy_model(schema, seed=8)
        run_config = build_run_config(overrides={
            "model.n_prototypes": 2, "model.latent_dim": 8, "model.head_channels": 4,
            "model.backbone_widths": [2, 2, 2, 2], "model.backbone_blocks": [1, 1, 1, 1],
            "model.backbone_strides": [1, 1, 1, 1], "model.nam_hidden": [8, 8],
        })
        projection = ProjectionReport([ProjectionRecord(0, 0, "T000", 0.9)])
        path = save_checkpoint(self.store.checkpoint_path(0), model, stats, run_config, projection,
                               splits={"train": ["T000"]})
        loaded = load_checkpoint(path)

        tabular, volumes = random_tabular(schema, 3, seed=1), random_volumes(3, seed=2)
        with torch.no_grad():
            expected = model(tabular, volumes).logits
            actual = loaded.model(tabular, volumes).logits
        self.assertTrue(torch.equal(expected, actual))
        self.assertEqual(loaded.stats.to_dict(), stats.to_dict())
        self.assertEqual(loaded.projection.to_dict(), projection.to_dict())
        self.assertEqual(loaded.splits, {"train": ["T000"]})

    def test_foreign_file_rejected(self):
        path = Path(self.tmp.name) / "other.pt"
        torch.save({"weights": 1}, path)
        with self.assertRaises(CheckpointError):
            load_checkpoint(path)


if __name__ == "__main__":
    unittest.main()
