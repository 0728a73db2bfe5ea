"""Unit tests for the tabular branch."""

import os
import sys
import tempfile
import unittest

import numpy as np
import pandas as pd
import torch

sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from exceptions import (
    ConfigurationError,
    DegenerateFeatureError,
    InvalidInputError,
    SchemaError,
)
from modules.tabular_gam import (
    FeatureKind,
    FeatureSchema,
    FeatureSpec,
    NamFunctionBank,
    StandardizationStats,
    TabularBatch,
    TabularSample,
    nam_forward,
    standardize,
    tab_penalty,
)
from tests.helpers import random_tabular, toy_schema
from utils.gradcheck import finite_difference_errors


class TestFeatureSchema(unittest.TestCase):
    """Schema validation and persistence."""

    def test_duplicate_names_rejected(self):
        with self.assertRaises(SchemaError):
            FeatureSchema([
                FeatureSpec("age", FeatureKind.CONTINUOUS, 0),
                FeatureSpec("age", FeatureKind.CATEGORICAL, 1),
            ])

    def test_columns_must_cover_range(self):
        with self.assertRaises(SchemaError):
            FeatureSchema([
                FeatureSpec("age", FeatureKind.CONTINUOUS, 0),
                FeatureSpec("sex", FeatureKind.CATEGORICAL, 2),
            ])

    def test_unknown_kind_is_configuration_error(self):
        with self.assertRaises(ConfigurationError):
            FeatureSpec("age", "ordinal", 0)

    def test_save_and_load(self):
        schema = toy_schema(2, 2)
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "schema.json")
            schema.save(path)
            loaded = FeatureSchema.load(path)
        self.assertEqual(loaded.names, schema.names)
        self.assertEqual([f.kind for f in loaded], [f.kind for f in schema])
        self.assertEqual(loaded["cat_1"].column_index, 3)

    def test_lookup_by_name_and_index(self):
        schema = toy_schema(2, 1)
        self.assertIs(schema["cat_0"], schema[2])
        with self.assertRaises(SchemaError):
            schema["missing"]


class TestTabularInputs(unittest.TestCase):
    """Sample and batch contracts."""

    def test_nan_marks_missing(self):
        sample = TabularSample.from_values([1.0, float("nan"), 2.0])
        self.assertEqual(sample.missing_mask.tolist(), [False, True, False])

    def test_non_finite_observed_value_rejected(self):
        with self.assertRaises(InvalidInputError):
            TabularSample(values=np.array([1.0, np.inf]), missing_mask=np.array([False, False]))

    def test_ragged_batch_rejected(self):
        samples = [TabularSample.from_values([1.0, 2.0]), TabularSample.from_values([1.0])]
        with self.assertRaises(InvalidInputError):
            TabularBatch.from_samples(samples)

    def test_wrong_feature_count_rejected(self):
        bank = NamFunctionBank(toy_schema(2, 1), n_classes=3)
        with self.assertRaises(InvalidInputError):
            bank(TabularBatch.from_array(np.zeros((2, 4))))


class TestNamFunctionBank(unittest.TestCase):
    """Per-feature functions: missing indicator, categorical linearity, penalty, gradients."""

    def setUp(self):
        torch.manual_seed(0)
        self.schema = toy_schema(2, 1)
        self.bank = NamFunctionBank(self.schema, n_classes=3, hidden=(8, 8)).double()
        with torch.no_grad():
            self.bank.missing_indicators.copy_(torch.randn(3, 3, dtype=torch.float64))
            self.bank.categorical_weights.copy_(torch.randn(1, 3, dtype=torch.float64))
        self.bank.eval()

    def test_missing_returns_indicator_exactly(self):
        values = np.array([[np.nan, 0.5, np.nan], [0.3, np.nan, 1.0]])
        out = self.bank(TabularBatch.from_array(values).to(torch.float64))
        self.assertTrue(torch.equal(out[0, 0], self.bank.missing_indicators[0]))
        self.assertTrue(torch.equal(out[0, 2], self.bank.missing_indicators[2]))
        self.assertTrue(torch.equal(out[1, 1], self.bank.missing_indicators[1]))

    def test_single_feature_missing_marker(self):
        for marker in (None, float("nan")):
            out = self.bank.feature_contribution("cont_1", marker)
            self.assertTrue(torch.equal(out, self.bank.missing_indicators[1]))

    def test_categorical_is_linear(self):
        beta = self.bank.categorical_weights[0]
        for x in (0.0, 1.0, 2.0):
            out = self.bank.feature_contribution("cat_0", x)
            np.testing.assert_allclose(out.detach().numpy(), (x * beta).detach().numpy(), atol=1e-12)
        zero = self.bank.feature_contribution("cat_0", 0.0)
        self.assertTrue(torch.all(zero == 0))

    def test_kind_mismatch_rejected(self):
        wrong = FeatureSpec("cont_0", FeatureKind.CATEGORICAL, 0)
        with self.assertRaises(ConfigurationError):
            self.bank.feature_contribution(wrong, 1.0)

    def test_batch_matches_single_feature_calls(self):
        batch = random_tabular(self.schema, 4, seed=1)
        out = self.bank(batch)
        for b in range(4):
            for spec in self.schema:
                single = self.bank.feature_contribution(spec, float(batch.values[b, spec.column_index]))
                np.testing.assert_allclose(out[b, spec.column_index].detach().numpy(),
                                           single.detach().numpy(), atol=1e-10)

    def test_eval_forward_is_deterministic(self):
        batch = random_tabular(self.schema, 5, seed=2, missing_rate=0.2)
        first = nam_forward(self.bank, batch, training=False)
        second = nam_forward(self.bank, batch, training=False)
        self.assertTrue(torch.equal(first, second))
        self.assertFalse(self.bank.training)

    def test_tab_penalty_value(self):
        contributions = torch.ones(2, 3, 4)
        # per sample: 12 squared ones / 4 classes
        self.assertAlmostEqual(float(tab_penalty(contributions)), 3.0)

    def test_tab_penalty_rejects_non_finite(self):
        contributions = torch.zeros(1, 2, 2)
        contributions[0, 0, 0] = float("nan")
        with self.assertRaises(InvalidInputError):
            tab_penalty(contributions)

    def test_shape_function_grid(self):
        grid = np.linspace(-2, 2, 7)
        curve = self.bank.shape_function("cont_0", grid)
        self.assertEqual(tuple(curve.shape), (7, 3))
        single = self.bank.feature_contribution("cont_0", float(grid[3]))
        np.testing.assert_allclose(curve[3].numpy(), single.detach().numpy(), atol=1e-10)

    def test_logit_gradients_match_finite_differences(self):
        batch = random_tabular(self.schema, 2, seed=3)
        weights = torch.randn(2, 3, 3, generator=torch.Generator().manual_seed(4), dtype=torch.float64)
        errors = finite_difference_errors(
            lambda: (self.bank(batch) * weights).sum(),
            self.bank.named_parameters(),
            max_entries=8,
            generator=torch.Generator().manual_seed(5),
        )
        self.assertLess(max(errors.values()), 1e-3, errors)

    def test_tab_penalty_gradients_match_finite_differences(self):
        batch = random_tabular(self.schema, 2, seed=6)
        errors = finite_difference_errors(
            lambda: tab_penalty(self.bank(batch)),
            self.bank.named_parameters(),
            max_entries=8,
            generator=torch.Generator().manual_seed(7),
        )
        self.assertLess(max(errors.values()), 1e-3, errors)

    def test_spectral_bound_after_power_iterations(self):
        bank = NamFunctionBank(self.schema, n_classes=3, hidden=(32, 32))
        batch = random_tabular(self.schema, 4, seed=8).to(torch.float32)
        bank.train()
        with torch.no_grad():
            for _ in range(100):
                bank(batch)
        bounds = bank.spectral_bounds(n_iter=50)
        self.assertEqual(len(bounds), 2 * 3)
        self.assertLessEqual(max(bounds.values()), 1.01)

    def test_zero_network_gives_zero(self):
        with torch.no_grad():
            for layer in self.bank.feature_nets[0].linear_layers():
                layer.parametrizations.weight.original.zero_()
                layer.bias.zero_()
        out = self.bank.feature_contribution("cont_0", 1.3)
        self.assertTrue(torch.equal(out, torch.zeros(3, dtype=torch.float64)))

        # power iteration on a zero matrix must not poison later updates
        self.bank.train()
        with torch.no_grad():
            self.bank(random_tabular(self.schema, 2, seed=9))
        self.bank.eval()
        self.assertTrue(torch.equal(self.bank.feature_contribution("cont_0", 1.3),
                                    torch.zeros(3, dtype=torch.float64)))

    def test_single_hidden_unit_matches_hand_evaluation(self):
        schema = toy_schema(1, 1)
        bank = NamFunctionBank(schema, n_classes=3, hidden=(1,), dropout=0.0, output_dropout=0.0).double()
        first, second = bank.feature_nets[0].linear_layers()
        w1 = np.array([[1.0], [-2.0], [0.5]])
        with torch.no_grad():
            first.parametrizations.weight.original.copy_(torch.tensor([[2.0]]))
            first.bias.copy_(torch.tensor([0.25]))
            second.parametrizations.weight.original.copy_(torch.from_numpy(w1))
            second.bias.copy_(torch.tensor([0.1, 0.2, 0.3]))
            # one power-iteration step is exact for single-column weights
            bank.train()
            bank(random_tabular(schema, 1, seed=10))
        bank.eval()

        # first layer: 2 / |2| = 1, so h = relu(0.5 + 0.25)
        hidden = max(0.5 + 0.25, 0.0)
        expected = w1[:, 0] / np.sqrt(1.0 + 4.0 + 0.25) * hidden + np.array([0.1, 0.2, 0.3])
        out = bank.feature_contribution("cont_0", 0.5)
        np.testing.assert_allclose(out.detach().numpy(), expected, atol=1e-12)


class TestStandardization(unittest.TestCase):
    """Training-split statistics and their application."""

    def setUp(self):
        self.schema = toy_schema(2, 1)
        self.table = pd.DataFrame({
            "cont_0": [1.0, 2.0, 3.0, np.nan],
            "cont_1": [10.0, 10.0, 14.0, 16.0],
            "cat_0": [0.0, 1.0, 2.0, 1.0],
        })

    def test_fit_uses_observed_values(self):
        stats = StandardizationStats.fit(self.table, self.schema)
        self.assertAlmostEqual(stats.stats["cont_0"].mean, 2.0)
        self.assertAlmostEqual(stats.stats["cont_0"].std, np.sqrt(2.0 / 3.0))
        self.assertEqual(stats.stats["cont_1"].minimum, 10.0)
        self.assertEqual(stats.stats["cont_1"].maximum, 16.0)
        self.assertNotIn("cat_0", stats.stats)

    def test_constant_feature_is_degenerate(self):
        table = self.table.assign(cont_1=5.0)
        with self.assertRaises(DegenerateFeatureError):
            StandardizationStats.fit(table, self.schema)

    def test_standardize_keeps_missing_and_categorical(self):
        stats = StandardizationStats.fit(self.table, self.schema)
        samples = standardize(self.table, stats, self.schema)
        self.assertTrue(samples[3].missing_mask[0])
        self.assertEqual(samples[2].values[2], 2.0)
        self.assertAlmostEqual(samples[1].values[0], 0.0)

    def test_raw_round_trip(self):
        stats = StandardizationStats.fit(self.table, self.schema)
        raw = np.array([9.0, 12.5, 20.0])
        np.testing.assert_allclose(stats.to_raw("cont_1", stats.to_standard("cont_1", raw)), raw)

    def test_persistence(self):
        stats = StandardizationStats.fit(self.table, self.schema)
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "stats.json")
            stats.save(path)
            loaded = StandardizationStats.load(path)
        self.assertEqual(loaded.to_dict(), stats.to_dict())


if __name__ == "__main__":
    unittest.main()
