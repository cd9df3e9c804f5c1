#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
Tests for the keyword-spotting network: placement, inference and bundles.
"""

import logging
import os
import tempfile
import unittest

import numpy as np

from src.utils.cost_model import KWS_PE_DIMS
from src.utils.errors import FormatError, PlacementInfeasible
from src.utils.kws_net import (
    INPUT_SCALE, KwsNetwork, build_random_network, load_frames, load_network, place_network,
    random_frames, reference_inference, run_inference, save_frames, save_network,
)
from src.utils.quant import QuantMatrix, read_records, requantize_relu, write_records

# Set up logging
logging.basicConfig(level=logging.INFO,
                    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')
logger = logging.getLogger(__name__)


class TestPlacement(unittest.TestCase):
    """Placement of hidden layers onto PEs."""

    def setUp(self):
        """Set up test fixtures."""
        self.net = build_random_network(seed=7)

    def test_full_network_uses_three_pes(self):
        placement = place_network(self.net)
        self.assertEqual(placement.pe_count, 3)
        self.assertEqual(placement.split_sizes(), [128, 128, 256])
        self.assertEqual([(a.n, a.d) for a in placement.assignments], KWS_PE_DIMS)
        for parts in placement.memory_by_pe().values():
            self.assertLessEqual(parts["total"], 92160)

    def test_small_network_single_pe(self):
        net = build_random_network(seed=1, dims=(10, 10, 3))
        placement = place_network(net)
        self.assertEqual(placement.pe_count, 1)
        self.assertEqual(placement.assignments[0].memory_bytes, 11 * 10 + 4 * 10)

    def test_uneven_split(self):
        placement = place_network(self.net, budget=30000)
        self.assertEqual([a.n for a in placement.for_layer(0)], [64, 64, 64, 64])
        self.assertEqual([a.n for a in placement.for_layer(1)], [86, 85, 85])
        self.assertEqual([a.pe_id for a in placement.assignments], list(range(7)))

    def test_infeasible_budget(self):
        with self.assertRaises(PlacementInfeasible):
            place_network(self.net, budget=100)


class TestHostOutput(unittest.TestCase):
    """The host output layer stays in real arithmetic."""

    def setUp(self):
        """Set up test fixtures."""
        self.net = build_random_network(seed=7)

    def test_output_layer_is_real(self):
        self.assertEqual(self.net.output_weights.dtype, np.float64)
        self.assertEqual(self.net.output_weights.shape, (256, 29))
        self.assertEqual(self.net.output_bias.shape, (29,))
        self.assertGreater(len(np.unique(self.net.output_weights)), 256)

    def test_caller_supplied_real_weights(self):
        weights = np.full((256, 29), 0.001234567)
        bias = np.linspace(-0.5, 0.5, 29)
        net = KwsNetwork(self.net.layers, INPUT_SCALE, weights, bias)
        hidden = np.arange(256) % 128
        expected = (hidden * self.net.layers[-1].out_scale) @ weights + bias
        np.testing.assert_allclose(net.host_output(hidden.astype(np.int8)), expected, rtol=1e-12)

    def test_output_shape_checks(self):
        with self.assertRaises(ValueError):
            KwsNetwork(self.net.layers, INPUT_SCALE, np.ones((255, 29)), np.zeros(29))
        with self.assertRaises(ValueError):
            KwsNetwork(self.net.layers, INPUT_SCALE, np.ones((256, 29)), np.zeros(28))
        with self.assertRaises(ValueError):
            KwsNetwork(self.net.layers, INPUT_SCALE, np.full((256, 29), np.nan), np.zeros(29))


class TestInference(unittest.TestCase):
    """Tiled, placed inference against the straight-line reference."""

    def setUp(self):
        """Set up test fixtures."""
        self.net = build_random_network(seed=7)
        self.placement = place_network(self.net)
        self.frames = random_frames(3)

    def test_matches_reference(self):
        logits, _ = run_inference(self.net, self.placement, self.frames)
        np.testing.assert_array_equal(logits, reference_inference(self.net, self.frames))
        self.assertEqual(logits.shape, (10, 29))

    def test_split_does_not_change_results(self):
        baseline, _ = run_inference(self.net, self.placement, self.frames)
        for budget in (30000, 10 ** 6):
            placement = place_network(self.net, budget=budget)
            logits, _ = run_inference(self.net, placement, self.frames)
            np.testing.assert_array_equal(logits, baseline, err_msg=f"budget {budget}")

    def test_worker_threads_do_not_change_results(self):
        serial, _ = run_inference(self.net, self.placement, self.frames)
        threaded, _ = run_inference(self.net, self.placement, self.frames, workers=3)
        np.testing.assert_array_equal(serial, threaded)

    def test_zero_frames_follow_bias_path(self):
        frames = np.zeros((10, 390), dtype=np.int8)
        logits, _ = run_inference(self.net, self.placement, frames)
        self.assertTrue(np.all(logits == logits[0]))

        first = self.net.layers[0]
        hidden = requantize_relu(first.bias_acc(INPUT_SCALE), INPUT_SCALE * first.weights.scale,
                                 first.out_scale)
        second = self.net.layers[1]
        acc = hidden.astype(np.int64) @ second.weights.data.astype(np.int64) + second.bias_acc(first.out_scale)
        hidden = requantize_relu(acc, first.out_scale * second.weights.scale, second.out_scale)
        np.testing.assert_allclose(logits[0], self.net.host_output(hidden), rtol=0, atol=1e-12)

    def test_cost_report(self):
        _, report = run_inference(self.net, self.placement, self.frames)
        self.assertAlmostEqual(report.energy_uj, 7.1, places=9)
        self.assertEqual(report.steps, 10)
        self.assertAlmostEqual(report.per_pe_cycles[0], 18995.34, places=6)
        self.assertAlmostEqual(report.per_pe_cycles[2], 20763.66, places=6)
        self.assertEqual(report.memory_bytes, {"M_w": 2 * 391 * 128 + 257 * 256, "M_i": 4 * 512})
        self.assertAlmostEqual(report.total_cycles, 10 * sum(report.per_pe_cycles.values()), places=6)

    def test_deterministic(self):
        a, _ = run_inference(self.net, self.placement, self.frames)
        b, _ = run_inference(build_random_network(seed=7), self.placement, random_frames(3))
        np.testing.assert_array_equal(a, b)

    def test_frame_validation(self):
        with self.assertRaises(ValueError):
            run_inference(self.net, self.placement, self.frames[:9])
        with self.assertRaises(ValueError):
            run_inference(self.net, self.placement, self.frames.astype(np.float64))


class TestBundles(unittest.TestCase):
    """Network bundle and frame files."""

    def setUp(self):
        """Set up test fixtures."""
        self.temp_dir = tempfile.TemporaryDirectory()
        self.net = build_random_network(seed=5, dims=(40, 24, 16, 5))

    def tearDown(self):
        self.temp_dir.cleanup()

    def test_network_round_trip(self):
        path = os.path.join(self.temp_dir.name, "net.qm01")
        save_network(path, self.net)
        loaded = load_network(path)
        self.assertEqual(loaded.dims, (40, 24, 16, 5))
        for a, b in zip(self.net.layers, loaded.layers):
            self.assertEqual(a.weights, b.weights)
            self.assertEqual(a.bias, b.bias)
            self.assertEqual(a.out_scale, b.out_scale)
        np.testing.assert_array_equal(loaded.output_weights, self.net.output_weights)
        np.testing.assert_array_equal(loaded.output_bias, self.net.output_bias)
        frames = random_frames(2, d=40)
        np.testing.assert_array_equal(reference_inference(loaded, frames),
                                      reference_inference(self.net, frames))

    def test_malformed_bundle(self):
        path = os.path.join(self.temp_dir.name, "bad.qm01")
        write_records(path, [QuantMatrix(np.ones((2, 2)), 1.0)] * 2)
        with self.assertRaises(FormatError):
            load_network(path)

    def test_bundle_without_real_output_section(self):
        path = os.path.join(self.temp_dir.name, "net.qm01")
        save_network(path, self.net)
        records = read_records(path, allow_real=True)
        write_records(path, records[:-2])
        with self.assertRaises(FormatError):
            load_network(path)
        write_records(path, records[:-2], [records[-2], np.ones((2, 5))])
        with self.assertRaises(FormatError):
            load_network(path)

    def test_frames_round_trip(self):
        path = os.path.join(self.temp_dir.name, "frames.qm01")
        frames = random_frames(4, d=40)
        save_frames(path, frames)
        np.testing.assert_array_equal(load_frames(path, d=40), frames)

    def test_frames_row_major_and_bad_shape(self):
        path = os.path.join(self.temp_dir.name, "frames.qm01")
        frames = random_frames(4, d=40)
        write_records(path, [QuantMatrix(frames, INPUT_SCALE)])
        np.testing.assert_array_equal(load_frames(path, d=40), frames)
        with self.assertRaises(FormatError):
            load_frames(path, d=41)


if __name__ == "__main__":
    unittest.main()
