"""
Configuration settings for the neuromorphic PE simulator.

This file provides a centralized location for simulator settings: hardware
constants, benchmark sizes, LIF and plant parameters, and sweep options.
Defaults are merged with an optional JSON settings file and then overridden
by NEUROSIM_* environment variables.
"""

import copy
import json
import logging
from pathlib import Path
from typing import Dict, Any, Optional

from src.utils.env_loader import load_env_vars, get_setting
from src.utils.errors import ConfigError

logger = logging.getLogger(__name__)


class Settings:
    """Simulator settings manager."""

    # Default settings
    DEFAULT_SETTINGS = {
        "hardware": {
            "clock_hz": 2.5e8,
            "sram_budget_bytes": 92160,  # 90 KB of the 128 KB SRAM for network data
            "pj_per_cycle": None,        # None: calibrated against 7.1 uJ/inference
            "tick_seconds": 0.001
        },
        "kws": {
            "dims": [390, 256, 256, 29],
            "seed": 7,
            "margin_cycles": 4000,
            "steps_per_inference": 10,
            "energy_uj_per_inference": 7.1
        },
        "adaptive": {
            "n_neurons": 256,
            "d_in": 2,
            "d_out": 1,
            "tau_rc": 0.02,
            "tau_ref": 0.002,
            "dt": 0.001,
            "alpha": 1e-4,
            "target_rate_hz": 130.0,
            "max_rate_low": 100.0,
            "max_rate_high": 200.0,
            "intercept_low": -1.0,
            "intercept_high": 0.9,
            "calibration_samples": 256,
            "theta_range": 1.0,
            "omega_range": 5.0,
            "seed": 7
        },
        "plant": {
            "inertia": 0.05,
            "damping": 0.05,
            "gravity_torque": 0.02,
            "aging_torque": 0.5,
            "theta_bound": 6.283
        },
        "control": {
            "kp": 2.0,
            "kd": 0.5,
            "ki": 0.0,
            "setpoint_low": -0.25,
            "setpoint_high": 0.25,
            "period_s": 10.0,
            "trial_seconds": 20.0,
            "trials": 5
        },
        "sweep": {
            "workers": 1
        }
    }

    # Environment overrides: variable -> (category, key)
    ENV_OVERRIDES = {
        "NEUROSIM_THREADS": ("sweep", "workers"),
        "NEUROSIM_CLOCK_HZ": ("hardware", "clock_hz"),
        "NEUROSIM_SRAM_BUDGET": ("hardware", "sram_budget_bytes"),
        "NEUROSIM_PJ_PER_CYCLE": ("hardware", "pj_per_cycle"),
    }

    def __init__(self, settings_file: Optional[Path] = None, use_env: bool = True):
        """
        Initialize settings.

        Args:
            settings_file: Explicit JSON settings file; searched for when None
            use_env: Apply NEUROSIM_* environment overrides
        """
        self.settings_file = Path(settings_file) if settings_file else self._get_settings_file_path()
        self.settings = self._load_settings(use_env, explicit=settings_file is not None)

    def _get_settings_file_path(self) -> Path:
        """Get the path to the settings file."""
        # First try the current directory
        current_dir = Path.cwd() / "neurosim_settings.json"
        if current_dir.exists():
            return current_dir

        # Next try the user's home directory
        return Path.home() / ".neurosim" / "settings.json"

    def _load_settings(self, use_env: bool, explicit: bool) -> Dict[str, Any]:
        """Load settings from defaults, the settings file and the environment."""
        merged_settings = copy.deepcopy(self.DEFAULT_SETTINGS)

        if self.settings_file.exists():
            try:
                with open(self.settings_file, 'r') as f:
                    file_settings = json.load(f)
            except json.JSONDecodeError as e:
                raise ConfigError(f"Settings file {self.settings_file} is not valid JSON: {e}")
            logger.info(f"Loaded settings from {self.settings_file}")
            self.merge(merged_settings, file_settings, source=str(self.settings_file))
        elif explicit:
            raise ConfigError(f"Settings file {self.settings_file} does not exist")

        if use_env:
            load_env_vars()
            for env_name, (category, key) in self.ENV_OVERRIDES.items():
                value = get_setting(env_name)
                if value is not None:
                    merged_settings[category][key] = self._coerce(
                        value, self.DEFAULT_SETTINGS[category][key], f"{env_name}")
                    logger.debug(f"{env_name} overrides {category}.{key}")

        return merged_settings

    @classmethod
    def merge(cls, target: Dict[str, Any], overrides: Dict[str, Any], source: str = "config") -> None:
        """
        Merge overrides into target, rejecting unknown categories and keys.

        Args:
            target: Settings dictionary to update in place
            overrides: Nested {category: {key: value}} overrides
            source: Name used in error messages

        Raises:
            ConfigError: On unknown keys or mistyped values
        """
        if not isinstance(overrides, dict):
            raise ConfigError(f"{source}: top level must be an object")
        for category, values in overrides.items():
            if category not in cls.DEFAULT_SETTINGS:
                raise ConfigError(f"{source}: unknown settings category '{category}'")
            if not isinstance(values, dict):
                raise ConfigError(f"{source}: category '{category}' must be an object")
            for key, value in values.items():
                if key not in cls.DEFAULT_SETTINGS[category]:
                    raise ConfigError(f"{source}: unknown setting '{category}.{key}'")
                target[category][key] = cls._coerce(
                    value, cls.DEFAULT_SETTINGS[category][key], f"{source}: {category}.{key}")

    @staticmethod
    def _coerce(value: Any, default: Any, name: str) -> Any:
        """Convert a value to the type of its default, raising ConfigError on mismatch."""
        try:
            if isinstance(value, str):
                if isinstance(default, list):
                    return [int(v) for v in value.split(',')]
                if isinstance(default, bool):
                    return value.lower() in ('1', 'true', 'yes')
                if isinstance(default, int):
                    return int(value)
                return float(value)
            if isinstance(default, bool):
                if not isinstance(value, bool):
                    raise TypeError("expected a boolean")
                return value
            if isinstance(default, int):
                if isinstance(value, bool) or not isinstance(value, int):
                    raise TypeError("expected an integer")
                return value
            if isinstance(default, float) or default is None:
                if value is None and default is None:
                    return None
                if isinstance(value, bool) or not isinstance(value, (int, float)):
                    raise TypeError("expected a number")
                return float(value)
            if isinstance(default, list):
                if not isinstance(value, list) or not all(isinstance(v, int) for v in value):
                    raise TypeError("expected a list of integers")
                return list(value)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"{name}: invalid value {value!r} ({e})")
        return value

    def get(self, category: str, key: str, default=None):
        """
        Get a setting value.

        Args:
            category: Category of the setting (hardware, kws, adaptive, ...)
            key: Setting key
            default: Default value if not found

        Returns:
            Setting value or default
        """
        if category in self.settings and key in self.settings[category]:
            return self.settings[category][key]
        return default

    def section(self, category: str) -> Dict[str, Any]:
        """Return a copy of one settings category."""
        return dict(self.settings[category])

    def save_settings(self) -> bool:
        """Save current settings to file."""
        try:
            self.settings_file.parent.mkdir(parents=True, exist_ok=True)
            with open(self.settings_file, 'w') as f:
                json.dump(self.settings, f, indent=2, sort_keys=True)
            logger.info(f"Saved settings to {self.settings_file}")
            return True
        except OSError as e:
            logger.error(f"Error saving settings: {e}")
            return False
