"""Unit tests for the fused model, its objective, evaluation and the trainer."""

import os
import sys
import unittest

import numpy as np
import pandas as pd
import torch

sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from config import LossWeights, build_run_config
from exceptions import DataError, NumericError
from modules.data import PanicDataset
from modules.panic_model import balanced_accuracy, evaluate, predict, total_loss
from modules.proto_image import AffineSpec, image_scores, loss_affine, loss_cluster, loss_occurrence, loss_separation
from modules.tabular_gam import StandardizationStats, nam_forward, tab_penalty
from modules.trainer import PHASE_ALL, PHASE_NAM, Trainer, build_model, phase_for
from tests.helpers import random_tabular, random_volumes, toy_dataset, toy_model, toy_schema
from utils.gradcheck import finite_difference_errors
from utils.seeding import SeedStreams

TOY_OVERRIDES = {
    "model.n_prototypes": 2,
    "model.latent_dim": 8,
    "model.head_channels": 4,
    "model.backbone_widths": [2, 2, 2, 2],
    "model.backbone_blocks": [1, 1, 1, 1],
    "model.backbone_strides": [1, 1, 1, 1],
    "model.nam_hidden": [8, 8],
    "train.batch_size": 4,
    "train.epochs": 2,
}


class TestForward(unittest.TestCase):
    """Additivity, normalization and prediction rules."""

    def setUp(self):
        self.schema = toy_schema(2, 1)
        self.model = toy_model(self.schema, seed=1)
        self.tabular = random_tabular(self.schema, 3, seed=2, missing_rate=0.2)
        self.volumes = random_volumes(3, seed=3)

    def test_zero_model_is_uniform(self):
        schema = toy_schema(0, 2)
        model = toy_model(schema, use_image=False)
        with torch.no_grad():
            model.bias.zero_()
            model.nam.categorical_weights.zero_()
            output = model(random_tabular(schema, 2), random_volumes(2))
        np.testing.assert_allclose(output.probabilities.numpy(), 1.0 / 3.0, atol=1e-12)

    def test_logits_equal_sum_of_branches(self):
        with torch.no_grad():
            output = self.model(self.tabular, self.volumes)
            contributions = nam_forward(self.model.nam, self.tabular)
            scores = image_scores(self.model.image, self.volumes)
        expected = self.model.bias + contributions.sum(dim=1) + scores.sum(dim=-1)
        np.testing.assert_allclose(output.logits.numpy(), expected.numpy(), atol=1e-10)

    def test_probabilities_normalized(self):
        with torch.no_grad():
            probabilities = self.model(self.tabular, self.volumes).probabilities
        np.testing.assert_allclose(probabilities.sum(dim=-1).numpy(), 1.0, atol=1e-6)
        self.assertTrue(torch.all(probabilities > 0))

    def test_argmax_ties_go_to_lowest_index(self):
        self.assertEqual(predict(torch.tensor([[1.0, 1.0, 0.0]])).item(), 0)
        self.assertEqual(predict(torch.tensor([[0.0, 2.0, 2.0]])).item(), 1)

    def test_shift_invariance(self):
        logits = torch.randn(5, 3, generator=torch.Generator().manual_seed(0))
        self.assertTrue(torch.equal(predict(logits), predict(logits + 7.5)))

    def test_ablated_image_contributes_nothing(self):
        model = toy_model(self.schema, seed=1, use_image=False)
        with torch.no_grad():
            first = model(self.tabular, self.volumes)
            second = model(self.tabular, random_volumes(3, seed=9))
        self.assertTrue(torch.all(first.scores == 0))
        self.assertTrue(torch.equal(first.logits, second.logits))

    def test_ablated_tabular_contributes_nothing(self):
        model = toy_model(self.schema, seed=1, use_tabular=False)
        with torch.no_grad():
            output = model(self.tabular, self.volumes)
        self.assertTrue(torch.all(output.contributions == 0))

    def test_logit_gradients_match_finite_differences(self):
        weights = torch.randn(3, 3, generator=torch.Generator().manual_seed(4), dtype=torch.float64)
        tabular = random_tabular(self.schema, 2, seed=5)
        volumes = random_volumes(2, seed=6)
        errors = finite_difference_errors(
            lambda: (self.model(tabular, volumes).logits * weights).sum(),
            [(n, p) for n, p in self.model.named_parameters() if not n.startswith("image.backbone")],
            max_entries=8,
            generator=torch.Generator().manual_seed(7),
        )
        self.assertLess(max(errors.values()), 1e-3, errors)


class TestTotalLoss(unittest.TestCase):
    """Composite objective."""

    def setUp(self):
        self.schema = toy_schema(2, 1)
        self.model = toy_model(self.schema, seed=2)
        self.tabular = random_tabular(self.schema, 4, seed=3)
        self.volumes = random_volumes(4, seed=4)
        self.labels = torch.tensor([0, 1, 2, 1])

    def test_zero_weights_give_cross_entropy(self):
        weights = LossWeights(tab=0, cluster=0, separation=0, occurrence=0, affine=0)
        output = self.model(self.tabular, self.volumes)
        losses = total_loss(self.model, output, self.labels, weights, self.volumes, AffineSpec.identity())
        self.assertEqual(float(losses.total), float(losses.cross_entropy))

    def test_weighted_sum_of_terms(self):
        weights = LossWeights(tab=0.3, cluster=0.2, separation=0.7, occurrence=0.01, affine=0.05)
        spec = AffineSpec(scale=0.9, rotation=(15.0, 0.0, -30.0))
        with torch.no_grad():
            output = self.model(self.tabular, self.volumes)
            losses = total_loss(self.model, output, self.labels, weights, self.volumes, spec)
            expected = (
                torch.nn.functional.cross_entropy(output.logits, self.labels)
                + 0.3 * tab_penalty(output.contributions)
                + 0.2 * loss_cluster(output.scores, self.labels)
                + 0.7 * loss_separation(output.scores, self.labels)
                + 0.01 * loss_occurrence(output.occurrence)
                + 0.05 * loss_affine(self.volumes, self.model.image, spec)
            )
        self.assertAlmostEqual(float(losses.total), float(expected), places=10)
        self.assertIn("affine_weighted", losses.as_dict())

    def test_confident_logits_drive_cross_entropy_to_zero(self):
        with torch.no_grad():
            output = self.model(self.tabular, self.volumes)
            output.logits = 50.0 * torch.nn.functional.one_hot(self.labels, 3).double()
            losses = total_loss(self.model, output, self.labels, LossWeights(), None, None)
        self.assertLess(float(losses.cross_entropy), 1e-10)

    def test_non_finite_loss_raises(self):
        with torch.no_grad():
            self.model.bias[0] = float("nan")
            output = self.model(self.tabular, self.volumes)
        with self.assertRaises(NumericError):
            total_loss(self.model, output, self.labels, LossWeights(), None, None)


class TestBalancedAccuracy(unittest.TestCase):
    """Metric definitions."""

    def test_perfect(self):
        self.assertEqual(balanced_accuracy([0, 1, 2, 2], [0, 1, 2, 2]), 1.0)

    def test_constant_predictor(self):
        self.assertAlmostEqual(balanced_accuracy([0, 0, 1, 2, 2, 2], [2] * 6), 1.0 / 3.0)

    def test_matches_per_class_recall(self):
        y_true = [0, 0, 0, 1, 1, 2, 2, 2, 2]
        y_pred = [0, 1, 0, 1, 2, 2, 2, 0, 2]
        expected = np.mean([2 / 3, 1 / 2, 3 / 4])
        self.assertAlmostEqual(balanced_accuracy(y_true, y_pred), expected)

    def test_evaluate_reports_confusion(self):
        schema = toy_schema(2, 1)
        dataset = toy_dataset(schema, n_subjects=9)
        stats = StandardizationStats.fit(dataset.table, schema)
        model = toy_model(schema, seed=3)
        result = evaluate(model, PanicDataset(dataset, stats), batch_size=4)
        self.assertEqual(result.confusion.sum(), 9)
        self.assertEqual(result.subject_ids, sorted(dataset.subject_ids))
        self.assertAlmostEqual(
            result.balanced_accuracy,
            float(np.mean(np.diag(result.confusion) / result.confusion.sum(axis=1))),
        )


class TestTrainer(unittest.TestCase):
    """Alternation, projection-gated validation and reproducibility."""

    def setUp(self):
        self.schema = toy_schema(2, 1)
        self.dataset = toy_dataset(self.schema, n_subjects=18)
        self.run_config = build_run_config(overrides=TOY_OVERRIDES)
        ids = self.dataset.subject_ids
        self.train_ids, self.val_ids = ids[:12], ids[12:]
        self.stats = StandardizationStats.fit(self.dataset.subset(self.train_ids).table, self.schema)
        self.train_set = PanicDataset(self.dataset, self.stats, self.train_ids)
        self.val_set = PanicDataset(self.dataset, self.stats, self.val_ids)

    def make_trainer(self, seed=0):
        seeds = SeedStreams(seed)
        model = build_model(self.run_config, self.schema, (8, 8, 8), seeds)
        return Trainer(model, self.run_config, seeds)

    def test_phase_schedule(self):
        self.assertEqual([phase_for(e) for e in range(4)], ["all", "nam", "all", "nam"])
        self.assertEqual([phase_for(e, 2) for e in range(4)], ["all", "all", "nam", "nam"])

    def test_nam_phase_leaves_image_branch_untouched(self):
        trainer = self.make_trainer()
        trainer._build_scheduler(steps_per_epoch=3)
        image_before = {k: v.clone() for k, v in trainer.model.image.state_dict().items()}
        nam_before = {k: v.clone() for k, v in trainer.model.nam.state_dict().items()}
        trainer._run_epoch(self.train_set, PHASE_NAM)
        for key, value in trainer.model.image.state_dict().items():
            self.assertTrue(torch.equal(value, image_before[key]), key)
        changed = any(not torch.equal(v, nam_before[k]) for k, v in trainer.model.nam.state_dict().items())
        self.assertTrue(changed)

    def test_warm_up_runs_fixed_epochs_without_validation(self):
        run_config = build_run_config(overrides={**TOY_OVERRIDES, "train.warmup_epochs": 3, "train.patience": 1})
        seeds = SeedStreams(0)
        trainer = Trainer(build_model(run_config, self.schema, (8, 8, 8), seeds), run_config, seeds)
        self.assertEqual(trainer.warm_up(self.train_set), 3)

    def test_warm_up_stops_on_validation_loss(self):
        run_config = build_run_config(overrides={**TOY_OVERRIDES, "train.warmup_epochs": 4, "train.patience": 1})
        seeds = SeedStreams(0)
        trainer = Trainer(build_model(run_config, self.schema, (8, 8, 8), seeds), run_config, seeds)
        with self.assertLogs("modules.trainer", level="INFO") as logs:
            ran = trainer.warm_up(self.train_set, self.val_set)
        val = [float(line.rsplit("val ", 1)[1]) for line in logs.output if "Warm-up epoch" in line]
        self.assertEqual(len(val), ran)
        self.assertLessEqual(ran, 4)
        if ran < 4:
            # stopped because the last epoch did not beat the best so far
            self.assertGreaterEqual(val[-1], min(val[:-1]) - 1e-4)

    def test_prototypes_stay_unit_length(self):
        trainer = self.make_trainer()
        trainer._build_scheduler(steps_per_epoch=3)
        before = trainer.model.image.bank.prototypes.detach().clone()
        trainer._run_epoch(self.train_set, PHASE_ALL)
        prototypes = trainer.model.image.bank.prototypes.detach()
        self.assertFalse(torch.equal(prototypes, before))
        norms = prototypes.norm(dim=-1)
        np.testing.assert_allclose(norms.numpy(), np.ones(tuple(norms.shape)), atol=1e-6)

    def test_validation_follows_projection(self):
        with self.assertLogs("modules.trainer", level="INFO") as logs:
            result = self.make_trainer().fit(self.train_set, self.val_set)
        self.assertTrue(all(line.split(":", 2)[2].startswith("[fold 0]") for line in logs.output))
        history = result.history
        self.assertEqual(len(history), 2)
        self.assertTrue((history["validation_event"] > history["projection_event"]).all())
        self.assertEqual(result.best_val_bacc, history["val_bacc"].max())
        self.assertEqual(list(history["phase"]), ["all", "nam"])

    def test_fixed_seed_is_reproducible(self):
        first = self.make_trainer(seed=5).fit(self.train_set, self.val_set).history
        second = self.make_trainer(seed=5).fit(self.train_set, self.val_set).history
        pd.testing.assert_frame_equal(first, second)

    def test_missing_training_class_rejected(self):
        two_class_ids = [s for s, y in zip(self.dataset.subject_ids, self.dataset.labels) if y != 2][:8]
        train_set = PanicDataset(self.dataset, self.stats, two_class_ids)
        with self.assertRaises(DataError):
            self.make_trainer().fit(train_set, self.val_set)


if __name__ == "__main__":
    unittest.main()
