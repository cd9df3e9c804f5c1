#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
Tests for quantization: stochastic rounding, requantization and QM01 files.
"""

import io
import logging
import os
import tempfile
import unittest

import numpy as np

from src.utils.errors import FormatError, InvalidScale
from src.utils.quant import (
    QuantMatrix, default_scale, quantize_nearest, quantize_stochastic, read_matrix,
    read_record, read_records, requantize_relu, to_fixed16, write_matrix, write_real,
    write_records,
)

# Set up logging
logging.basicConfig(level=logging.INFO,
                    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')
logger = logging.getLogger(__name__)


class TestStochasticRounding(unittest.TestCase):
    """Tests for quantize_stochastic."""

    def test_integer_is_fixed_point(self):
        qm = quantize_stochastic(np.full((10, 10), 3.0), scale=1.0, rng_seed=5)
        self.assertTrue(np.all(qm.data == 3))

    def test_saturation(self):
        qm = quantize_stochastic(np.array([[300.0, -300.0]]), scale=1.0)
        self.assertEqual(qm.data.tolist(), [[127, -128]])

    def test_mean_of_quarter(self):
        qm = quantize_stochastic(np.full(100000, 2.25), scale=1.0, rng_seed=11)
        self.assertAlmostEqual(float(qm.data.astype(np.float64).mean()), 2.25, delta=0.01)

    def test_unbiased_over_fractional_inputs(self):
        """20 fractional values x 1e5 draws, compared against the Monte-Carlo sigma."""
        values = np.linspace(-5.95, 6.05, 20)
        draws = 100000
        within_3_sigma = 0
        for k, v in enumerate(values):
            qm = quantize_stochastic(np.full(draws, v), scale=1.0, rng_seed=100 + k)
            frac = v - np.floor(v)
            sigma = np.sqrt(frac * (1 - frac) / draws)
            deviation = abs(qm.data.astype(np.float64).mean() - v)
            self.assertLessEqual(deviation, 4.5 * sigma + 1e-12, f"value {v}")
            within_3_sigma += deviation <= 3 * sigma + 1e-12
        self.assertGreaterEqual(within_3_sigma, 19)

    def test_deterministic_seed(self):
        m = np.random.default_rng(0).normal(size=(30, 20))
        self.assertEqual(quantize_stochastic(m, rng_seed=3), quantize_stochastic(m, rng_seed=3))
        self.assertNotEqual(quantize_stochastic(m, rng_seed=3), quantize_stochastic(m, rng_seed=4))

    def test_default_scale(self):
        m = np.array([[0.5, -127.0], [1.0, 0.0]])
        self.assertEqual(default_scale(m), 1.0)
        self.assertEqual(default_scale(np.zeros((2, 2))), 1.0)
        qm = quantize_stochastic(m)
        self.assertEqual(int(qm.data[0, 1]), -127)

    def test_invalid_scale(self):
        for scale in (0.0, -1.0):
            with self.assertRaises(InvalidScale):
                quantize_stochastic(np.ones((2, 2)), scale=scale)
        with self.assertRaises(InvalidScale):
            QuantMatrix(np.ones((2, 2)), 0.0)


class TestRequantization(unittest.TestCase):
    """Tests for requantize_relu and quantize_nearest."""

    def test_negative_is_zero(self):
        self.assertEqual(requantize_relu(np.array([-5]), 0.3, 0.7).tolist(), [0])

    def test_identity_region(self):
        self.assertEqual(requantize_relu(np.array([64]), 1.0, 1.0).tolist(), [64])

    def test_saturation(self):
        self.assertEqual(requantize_relu(np.array([10 ** 6]), 1.0, 1.0).tolist(), [127])

    def test_round_half_even(self):
        out = requantize_relu(np.array([5, 7, 9]), 1.0, 2.0)
        self.assertEqual(out.tolist(), [2, 4, 4])

    def test_monotone(self):
        acc = np.arange(-1000, 100000, 37)
        out = requantize_relu(acc, 0.013, 1.7)
        self.assertTrue(np.all(np.diff(out.astype(int)) >= 0))

    def test_quantize_nearest(self):
        out = quantize_nearest(np.array([0.5, 1.5, -2.5, 1000.0]), 1.0)
        self.assertEqual(out.tolist(), [0, 2, -2, 127])

    def test_to_real(self):
        qm = QuantMatrix(np.array([[2, -4]]), 0.5)
        np.testing.assert_array_equal(qm.to_real(), [[1.0, -2.0]])


class TestQuantMatrix(unittest.TestCase):
    """Entry checks of QuantMatrix."""

    def test_fractional_values_rejected(self):
        with self.assertRaises(ValueError):
            QuantMatrix(np.array([[0.7, -0.4, 1.9]]), 1.0)
        with self.assertRaises(ValueError):
            QuantMatrix(np.array([[np.nan, 1.0]]), 1.0)

    def test_whole_floats_accepted(self):
        qm = QuantMatrix(np.array([[3.0, -128.0, 127.0]]), 1.0)
        self.assertEqual(qm.data.dtype, np.int8)
        self.assertEqual(qm.data.tolist(), [[3, -128, 127]])

    def test_out_of_range_and_bad_dtype(self):
        with self.assertRaises(ValueError):
            QuantMatrix(np.array([[128]]), 1.0)
        with self.assertRaises(ValueError):
            QuantMatrix(np.array([[True, False]]), 1.0)


class TestFixed16(unittest.TestCase):
    """Tests for to_fixed16."""

    def test_rounds_to_half(self):
        out = to_fixed16(np.array([-1e-4, 0.1]))
        self.assertEqual(out.dtype, np.float16)
        self.assertEqual(out[0], np.float16(-1e-4))

    def test_rejects_non_finite(self):
        with self.assertRaises(ValueError):
            to_fixed16(np.array([np.nan]))
        with self.assertRaises(ValueError):
            to_fixed16(np.array([1e6]))


class TestQm01Files(unittest.TestCase):
    """Tests for the QM01 binary format."""

    def setUp(self):
        """Set up test fixtures."""
        self.temp_dir = tempfile.TemporaryDirectory()
        self.path = os.path.join(self.temp_dir.name, "weights.qm01")
        rng = np.random.default_rng(9)
        self.records = [QuantMatrix(rng.integers(-128, 128, size=(5, 3)), 0.125),
                        QuantMatrix(rng.integers(-128, 128, size=(1, 7)), 3.5)]

    def tearDown(self):
        self.temp_dir.cleanup()

    def test_header_layout(self):
        stream = io.BytesIO()
        write_matrix(stream, QuantMatrix(np.array([[1, -1]]), 0.5))
        raw = stream.getvalue()
        self.assertEqual(raw[:4], b"QM01")
        self.assertEqual(raw[4:8], (1).to_bytes(4, "little"))
        self.assertEqual(raw[8:12], (2).to_bytes(4, "little"))
        self.assertEqual(len(raw), 4 + 4 + 4 + 8 + 2)
        self.assertEqual(raw[-2:], bytes([1, 255]))

    def test_record_sequence(self):
        write_records(self.path, self.records)
        loaded = read_records(self.path)
        self.assertEqual(loaded, self.records)

    def test_bad_magic(self):
        with open(self.path, 'wb') as f:
            f.write(b"XXXX" + bytes(16))
        with self.assertRaises(FormatError):
            read_records(self.path)

    def test_truncated_payload(self):
        stream = io.BytesIO()
        write_matrix(stream, self.records[0])
        truncated = io.BytesIO(stream.getvalue()[:-3])
        with self.assertRaises(FormatError):
            read_matrix(truncated)

    def test_empty_file(self):
        open(self.path, 'wb').close()
        with self.assertRaises(FormatError):
            read_records(self.path)

    def test_real_records_follow_int8_records(self):
        real = np.array([[0.1, -2.5e-7], [3.0, 1e10]])
        write_records(self.path, self.records, [real])
        loaded = read_records(self.path, allow_real=True)
        self.assertEqual(loaded[:2], self.records)
        self.assertEqual(loaded[2].dtype, np.float64)
        np.testing.assert_array_equal(loaded[2], real)
        with self.assertRaises(FormatError):
            read_records(self.path)

    def test_real_record_layout(self):
        stream = io.BytesIO()
        write_real(stream, np.array([0.5, -1.0]))
        raw = stream.getvalue()
        self.assertEqual(raw[:4], b"RF64")
        self.assertEqual(len(raw), 4 + 4 + 4 + 2 * 8)
        stream.seek(0)
        np.testing.assert_array_equal(read_record(stream), [[0.5, -1.0]])
        stream.seek(0)
        with self.assertRaises(FormatError):
            read_matrix(stream)

    def test_truncated_real_record(self):
        stream = io.BytesIO()
        write_real(stream, np.ones((3, 3)))
        with self.assertRaises(FormatError):
            read_record(io.BytesIO(stream.getvalue()[:-1]))


if __name__ == "__main__":
    unittest.main()
