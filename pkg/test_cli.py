#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
End-to-end tests of the neurosim command line.
"""

import contextlib
import csv
import io
import json
import logging
import os
import tempfile
import unittest

from src.main import EXIT_CONFIG, EXIT_IO, EXIT_OK, MAP_COLUMNS, SWEEP_COLUMNS, main

# Set up logging
logging.basicConfig(level=logging.INFO,
                    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')
logger = logging.getLogger(__name__)


class TestCli(unittest.TestCase):
    """Subcommands, output files and exit codes."""

    def setUp(self):
        """Set up test fixtures."""
        self.temp_dir = tempfile.TemporaryDirectory()
        self.config = self.path("settings.json")
        self.write_config({"control": {"trial_seconds": 1.0, "trials": 2},
                           "adaptive": {"n_neurons": 64}})

    def tearDown(self):
        self.temp_dir.cleanup()

    def path(self, name):
        return os.path.join(self.temp_dir.name, name)

    def write_config(self, data):
        with open(self.config, 'w') as f:
            json.dump(data, f)

    def run_cli(self, *argv):
        with contextlib.redirect_stdout(io.StringIO()) as stdout:
            code = main(["--config", self.config] + list(argv))
        return code, stdout.getvalue()

    def read_csv(self, name):
        with open(self.path(name), newline='') as f:
            return list(csv.reader(f))

    def test_kws_run_is_reproducible(self):
        code, stdout = self.run_cli("kws", "run", "--out", self.path("a.json"))
        self.assertEqual(code, EXIT_OK)
        self.assertIn("Worst PE", stdout)
        self.assertEqual(self.run_cli("kws", "run", "--out", self.path("b.json"))[0], EXIT_OK)
        with open(self.path("a.json"), 'rb') as a, open(self.path("b.json"), 'rb') as b:
            self.assertEqual(a.read(), b.read())

        with open(self.path("a.json")) as f:
            report = json.load(f)
        self.assertEqual(sorted(report["per_pe_cycles"]), ["0", "1", "2"])
        self.assertLess(report["step_cycles_worst"], 21000)
        self.assertEqual(report["inferences_per_sec_modeled"], 1000.0)
        self.assertAlmostEqual(report["energy_uj_modeled"], 7.1, places=9)
        self.assertEqual(len(report["logits"]), 10)

    def test_kws_run_with_saved_bundle(self):
        bundle = self.path("net.qm01")
        self.assertEqual(self.run_cli("kws", "run", "--out", self.path("a.json"),
                                      "--save-weights", bundle)[0], EXIT_OK)
        self.assertEqual(self.run_cli("kws", "run", "--out", self.path("b.json"),
                                      "--weights", bundle)[0], EXIT_OK)
        with open(self.path("a.json")) as a, open(self.path("b.json")) as b:
            self.assertEqual(json.load(a)["logits"], json.load(b)["logits"])

    def test_adaptive_run_csv(self):
        code, stdout = self.run_cli("adaptive", "run", "--case", "aging", "--out", self.path("trial.csv"),
                                    "--snapshot", self.path("pop.snap"))
        self.assertEqual(code, EXIT_OK)
        self.assertIn("Total over 2 trials", stdout)
        rows = self.read_csv("trial.csv")
        self.assertEqual(rows[0], ["step", "theta", "target", "u_pd", "u_adapt", "spike_count"])
        self.assertEqual(len(rows), 1 + 2 * 1000)
        self.assertEqual(rows[-1][0], "1999")
        self.assertTrue(os.path.exists(self.path("pop.snap")))

    def test_cost_sweep(self):
        code, _ = self.run_cli("cost", "sweep", "--bench", "adaptive", "--out", self.path("grid.csv"),
                               "--workers", "3")
        self.assertEqual(code, EXIT_OK)
        rows = self.read_csv("grid.csv")
        self.assertEqual(rows[0], SWEEP_COLUMNS)
        self.assertEqual(len(rows) - 1, 5 * 5 * 4 * 1)
        by_point = {(r[0], r[1], r[2]): r for r in rows[1:]}
        self.assertEqual(by_point[("1024", "1", "38")][6], "True")
        self.assertEqual(by_point[("1024", "100", "1")][6], "False")

    def test_cost_sweep_kws_grid_file(self):
        grid = self.path("grid.json")
        with open(grid, 'w') as f:
            json.dump({"n": [128, 256], "d": [390]}, f)
        code, _ = self.run_cli("cost", "sweep", "--bench", "kws", "--grid", grid,
                               "--out", self.path("kws.csv"))
        self.assertEqual(code, EXIT_OK)
        rows = self.read_csv("kws.csv")
        self.assertEqual([r[6] for r in rows[1:]], ["True", "False"])
        self.assertEqual(rows[2][5], "101120")
        self.assertEqual([(r[2], r[3]) for r in rows[1:]], [("", ""), ("", "")])

    def test_cost_map(self):
        self.assertEqual(self.run_cli("cost", "map", "--out", self.path("map.csv"))[0], EXIT_OK)
        rows = self.read_csv("map.csv")
        self.assertEqual(rows[0], MAP_COLUMNS)
        by_point = {(r[0], r[1]): r for r in rows[1:]}
        self.assertEqual(by_point[("1024", "1")][2:], ["38", "True"])
        self.assertEqual(by_point[("4096", "100")][2:], ["0", "False"])

    def test_bad_grid_values(self):
        for grid in ({"p": [1.5]}, {"p": [-0.1]}, {"n": [0]}, {"d_out": [2.5]}):
            path = self.path("grid.json")
            with open(path, 'w') as f:
                json.dump(grid, f)
            code, _ = self.run_cli("cost", "sweep", "--grid", path, "--out", self.path("grid.csv"))
            self.assertEqual(code, EXIT_CONFIG, str(grid))
        with open(path, 'w') as f:
            json.dump({"d_in": [0]}, f)
        self.assertEqual(self.run_cli("cost", "map", "--grid", path)[0], EXIT_CONFIG)

    def test_repeat_runs_write_identical_files(self):
        commands = [
            ("adaptive", "run", "--case", "aging"),
            ("cost", "sweep", "--workers", "3"),
            ("cost", "sweep", "--bench", "kws", "--workers", "3"),
        ]
        for i, command in enumerate(commands):
            first, second = self.path(f"{i}a.out"), self.path(f"{i}b.out")
            self.assertEqual(self.run_cli(*command, "--out", first)[0], EXIT_OK)
            self.assertEqual(self.run_cli(*command, "--out", second)[0], EXIT_OK)
            with open(first, 'rb') as a, open(second, 'rb') as b:
                self.assertEqual(a.read(), b.read(), " ".join(command))

    def test_cost_speedup(self):
        self.assertEqual(self.run_cli("cost", "speedup", "--out", self.path("speedup.csv"))[0], EXIT_OK)
        rows = self.read_csv("speedup.csv")
        self.assertEqual(rows[0], ["n", "d_in", "t_i_mac", "t_i_no_mac", "speedup"])
        self.assertEqual(len(rows), 1 + 3 * 4)

    def test_fit(self):
        self.assertEqual(self.run_cli("fit", "--out", self.path("fit.json"))[0], EXIT_OK)
        with open(self.path("fit.json")) as f:
            result = json.load(f)
        self.assertEqual(result["printed"]["nd"], 0.13)
        self.assertEqual(set(result["fitted"]), {"const", "n", "nd", "d"})
        self.assertTrue(any(v["n"] == 256 and v["d"] == 256 for v in result["structural_violations"]))

    def test_demo(self):
        self.write_config({"control": {"trial_seconds": 0.5, "trials": 1}, "adaptive": {"n_neurons": 32}})
        self.assertEqual(self.run_cli("demo", "--out", self.path("demo.json"))[0], EXIT_OK)
        with open(self.path("demo.json")) as f:
            result = json.load(f)
        self.assertEqual(set(result["aging"]), {"pd", "adaptive", "adaptive_to_pd_rms_ratio"})

    def test_bad_config_exit_code(self):
        self.write_config({"control": {"gain": 1.0}})
        self.assertEqual(self.run_cli("fit", "--out", self.path("fit.json"))[0], EXIT_CONFIG)

    def test_bad_flag_values(self):
        self.assertEqual(self.run_cli("cost", "sweep", "--workers", "0")[0], EXIT_CONFIG)
        self.assertEqual(self.run_cli("adaptive", "run", "--trials", "0")[0], EXIT_CONFIG)
        with contextlib.redirect_stderr(io.StringIO()):
            self.assertEqual(self.run_cli("kws", "run", "--seed", "x")[0], EXIT_CONFIG)

    def test_missing_file_exit_code(self):
        code, _ = self.run_cli("kws", "run", "--weights", self.path("missing.qm01"),
                               "--out", self.path("a.json"))
        self.assertEqual(code, EXIT_IO)

    def test_malformed_file_exit_code(self):
        with open(self.path("bad.qm01"), 'wb') as f:
            f.write(b"QM01" + bytes(3))
        for flag in ("--weights", "--frames"):
            code, _ = self.run_cli("kws", "run", flag, self.path("bad.qm01"), "--out", self.path("a.json"))
            self.assertEqual(code, EXIT_IO, flag)

    def test_help_lists_output_fields(self):
        code, stdout = self.run_cli("--help")
        self.assertEqual(code, EXIT_OK)
        for field in ("per_pe_cycles", "inferences_per_sec_modeled", "energy_uj_modeled", "u_adapt",
                      "cycles_total", "feasible", "max_d_out"):
            self.assertIn(field, stdout)


if __name__ == "__main__":
    unittest.main()
