#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
Tests for the settings layer: defaults, JSON files and environment overrides.
"""

import json
import logging
import os
import tempfile
import unittest
from pathlib import Path
from unittest import mock

from src.utils.env_loader import get_setting, load_env_vars
from src.utils.errors import ConfigError
from src.utils.settings import Settings

# Set up logging
logging.basicConfig(level=logging.INFO,
                    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')
logger = logging.getLogger(__name__)


class TestSettings(unittest.TestCase):
    """Settings merging and validation."""

    def setUp(self):
        """Set up test fixtures."""
        self.temp_dir = tempfile.TemporaryDirectory()
        self.path = Path(self.temp_dir.name) / "settings.json"

    def tearDown(self):
        self.temp_dir.cleanup()

    def write(self, data):
        with open(self.path, 'w') as f:
            json.dump(data, f)

    def test_defaults(self):
        self.write({})
        settings = Settings(self.path, use_env=False)
        self.assertEqual(settings.get("hardware", "sram_budget_bytes"), 92160)
        self.assertEqual(settings.get("hardware", "clock_hz"), 2.5e8)
        self.assertIsNone(settings.get("hardware", "pj_per_cycle"))
        self.assertEqual(settings.get("adaptive", "tau_ref"), 0.002)
        self.assertEqual(settings.get("kws", "dims"), [390, 256, 256, 29])
        self.assertEqual(settings.get("kws", "missing", "fallback"), "fallback")

    def test_file_overrides(self):
        self.write({"control": {"kp": 3, "trials": 2}, "hardware": {"pj_per_cycle": 10}})
        settings = Settings(self.path, use_env=False)
        self.assertEqual(settings.get("control", "kp"), 3.0)
        self.assertIsInstance(settings.get("control", "kp"), float)
        self.assertEqual(settings.get("control", "trials"), 2)
        self.assertEqual(settings.get("hardware", "pj_per_cycle"), 10.0)
        self.assertEqual(settings.get("control", "kd"), 0.5)

    def test_unknown_keys_rejected(self):
        for data in ({"control": {"kq": 1.0}}, {"network": {}}, [1, 2]):
            self.write(data)
            with self.assertRaises(ConfigError, msg=str(data)):
                Settings(self.path, use_env=False)

    def test_mistyped_values_rejected(self):
        for data in ({"control": {"trials": 2.5}}, {"plant": {"inertia": "heavy"}},
                     {"kws": {"dims": [390, "x"]}}):
            self.write(data)
            with self.assertRaises(ConfigError, msg=str(data)):
                Settings(self.path, use_env=False)

    def test_invalid_json(self):
        with open(self.path, 'w') as f:
            f.write("{not json")
        with self.assertRaises(ConfigError):
            Settings(self.path, use_env=False)

    def test_missing_explicit_file(self):
        with self.assertRaises(ConfigError):
            Settings(self.path, use_env=False)

    def test_environment_overrides(self):
        self.write({"sweep": {"workers": 2}})
        with mock.patch.dict(os.environ, {"NEUROSIM_THREADS": "4", "NEUROSIM_SRAM_BUDGET": "65536"}):
            settings = Settings(self.path)
        self.assertEqual(settings.get("sweep", "workers"), 4)
        self.assertEqual(settings.get("hardware", "sram_budget_bytes"), 65536)

    def test_bad_environment_value(self):
        self.write({})
        with mock.patch.dict(os.environ, {"NEUROSIM_THREADS": "many"}):
            with self.assertRaises(ConfigError):
                Settings(self.path)

    def test_save_settings(self):
        self.write({"adaptive": {"n_neurons": 128}})
        settings = Settings(self.path, use_env=False)
        self.assertTrue(settings.save_settings())
        with open(self.path, 'r') as f:
            saved = json.load(f)
        self.assertEqual(saved["adaptive"]["n_neurons"], 128)
        self.assertEqual(set(saved), set(Settings.DEFAULT_SETTINGS))


class TestEnvLoader(unittest.TestCase):
    """.env loading."""

    def test_env_file(self):
        with tempfile.TemporaryDirectory() as temp_dir:
            env_file = os.path.join(temp_dir, ".env")
            with open(env_file, 'w') as f:
                f.write("# overrides\nNEUROSIM_CLOCK_HZ=1e8\nOTHER=1\n")
            with mock.patch.dict(os.environ, {}, clear=False):
                os.environ.pop("NEUROSIM_CLOCK_HZ", None)
                loaded = load_env_vars(env_file)
                self.assertEqual(loaded, {"NEUROSIM_CLOCK_HZ": "1e8"})
                self.assertEqual(get_setting("NEUROSIM_CLOCK_HZ"), "1e8")

    def test_missing_env_file(self):
        self.assertEqual(load_env_vars("/nonexistent/.env"), {})

    def test_blank_setting_uses_default(self):
        with mock.patch.dict(os.environ, {"NEUROSIM_THREADS": "  "}):
            self.assertEqual(get_setting("NEUROSIM_THREADS", "1"), "1")


if __name__ == "__main__":
    unittest.main()
