#!/usr/bin/env python3
"""
NeuroSim - processing element simulator
Runs the keyword-spotting and adaptive-control benchmarks on a simulated
Arm + MAC array PE and evaluates the analytical cycle, memory and energy models.

Outputs:
    kws run        report.json  per_pe_cycles, step_cycles_worst,
                                inferences_per_sec_modeled, energy_uj_modeled,
                                placement, memory_by_pe, logits, loihi_reference
    adaptive run   trial.csv    step, theta, target, u_pd, u_adapt, spike_count
    cost sweep     grid.csv     n, d_in, d_out, p, cycles_total, bytes_total,
                                feasible, energy_uj (kws rows leave d_out and p empty;
                                d_in is the layer input width D)
    cost map       max_dout.csv n, d_in, max_d_out, feasible
    cost speedup   speedup.csv  n, d_in, t_i_mac, t_i_no_mac, speedup
    fit            fit.json     printed, fitted, samples, structural_violations
    demo           demo.json    per case and controller tracking metrics
"""

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Dict, List, Optional

from tabulate import tabulate

from src.utils.adaptive_pop import save_snapshot
from src.utils.cost_model import (
    LOIHI_REFERENCE, FITTED_COEFFS, KWS_PE_DIMS, CostReport, adaptive_cycles, adaptive_memory,
    calibrate_pj_per_cycle, cycles_per_tick, energy_model, fit_cycle_model,
    inferences_per_second, kws_cycles, kws_inference_cycles, kws_memory, max_dout_map,
    speedup_curve, structural_consistency, timer_tick_us,
)
from src.utils.errors import ConfigError, FormatError, NeuroSimException
from src.utils.kws_net import (
    build_random_network, load_frames, load_network, place_network, random_frames,
    run_inference, save_network,
)
from src.utils.mac_array import mac_array_utilization, tile_cycles
from src.utils.plant_control import CASES, CONTROLLERS, run_case, write_trials_csv
from src.utils.settings import Settings

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_SIMULATION = 4

DEFAULT_GRIDS = {
    "adaptive": {"n": [64, 128, 256, 512, 1024], "d_in": [1, 2, 10, 50, 100],
                 "d_out": [1, 2, 10, 38], "p": [0.13]},
    "kws": {"n": [32, 64, 128, 256], "d": [64, 128, 256, 390]},
    "speedup": {"n": [64, 256, 1024], "d_in": [1, 10, 50, 100]},
    "map": {"n": [64, 128, 256, 512, 1024, 2048, 4096], "d_in": [1, 2, 10, 50, 100]},
}

SWEEP_COLUMNS = ["n", "d_in", "d_out", "p", "cycles_total", "bytes_total", "feasible", "energy_uj"]
MAP_COLUMNS = ["n", "d_in", "max_d_out", "feasible"]


class RunConfig:
    """Validated parameters of one CLI run, built from Settings and flags."""

    def __init__(self, settings: Settings, benchmark: str, seed: Optional[int] = None,
                 out: Optional[str] = None, workers: Optional[int] = None,
                 grid: Optional[Dict[str, List]] = None):
        hardware = settings.section("hardware")
        self.settings = settings
        self.benchmark = benchmark
        self.seed = seed
        self.out = Path(out) if out else None
        self.budget_bytes = hardware["sram_budget_bytes"]
        self.clock_hz = hardware["clock_hz"]
        self.tick_seconds = hardware["tick_seconds"]
        self.grid = grid
        kws = settings.section("kws")
        if hardware["pj_per_cycle"] is None:
            cycles = kws_inference_cycles(KWS_PE_DIMS, kws["steps_per_inference"])
            self.pj_per_cycle = calibrate_pj_per_cycle(kws["energy_uj_per_inference"], cycles)
        else:
            self.pj_per_cycle = hardware["pj_per_cycle"]
        self.workers = workers if workers is not None else settings.get("sweep", "workers", 1)

    def validate(self) -> 'RunConfig':
        """
        Check every value before a run starts.

        Raises:
            ConfigError: On any invalid value
        """
        if self.budget_bytes <= 0:
            raise ConfigError(f"sram_budget_bytes must be positive, got {self.budget_bytes}")
        if self.clock_hz <= 0:
            raise ConfigError(f"clock_hz must be positive, got {self.clock_hz}")
        if self.tick_seconds <= 0:
            raise ConfigError(f"tick_seconds must be positive, got {self.tick_seconds}")
        if self.pj_per_cycle <= 0:
            raise ConfigError(f"pj_per_cycle must be positive, got {self.pj_per_cycle}")
        if self.workers < 1:
            raise ConfigError(f"worker count must be at least 1, got {self.workers}")
        if self.seed is not None and self.seed < 0:
            raise ConfigError(f"seed must not be negative, got {self.seed}")
        if self.grid is not None:
            for key, values in self.grid.items():
                if not isinstance(values, list) or not values:
                    raise ConfigError(f"grid entry '{key}' must be a non-empty list")
                if any(isinstance(v, bool) or not isinstance(v, (int, float)) for v in values):
                    raise ConfigError(f"grid entry '{key}' must hold numbers")
                if key == "p":
                    if any(not 0.0 <= v <= 1.0 for v in values):
                        raise ConfigError(f"grid entry 'p' must hold firing probabilities in [0, 1], got {values}")
                elif any(not isinstance(v, int) or v < 1 for v in values):
                    raise ConfigError(f"grid entry '{key}' must hold whole dimensions of at least 1, got {values}")
        return self


def setup_logging(verbose: bool = False) -> None:
    """Configure logging to stderr."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        stream=sys.stderr
    )
    logging.getLogger().setLevel(logging.DEBUG if verbose else logging.INFO)


def write_json(path: Path, data: Dict[str, Any]) -> None:
    with open(path, 'w') as f:
        json.dump(data, f, indent=2, sort_keys=True)
        f.write('\n')
    logger.info(f"Wrote {path}")


def write_csv(path: Path, columns: List[str], rows: List[Dict[str, Any]]) -> None:
    with open(path, 'w', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(columns)
        for row in rows:
            writer.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in columns])
    logger.info(f"Wrote {len(rows)} rows to {path}")


def load_grid(source: str, bench: str) -> Dict[str, List]:
    """Return the named default grid or read one from a JSON file."""
    if source == "default":
        return dict(DEFAULT_GRIDS[bench])
    try:
        with open(source, 'r') as f:
            grid = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"grid file {source} is not valid JSON: {e}")
    if not isinstance(grid, dict):
        raise ConfigError(f"grid file {source} must hold an object")
    allowed = set(DEFAULT_GRIDS[bench])
    unknown = set(grid) - allowed
    if unknown:
        raise ConfigError(f"grid file {source}: unknown keys {sorted(unknown)} for {bench}")
    merged = dict(DEFAULT_GRIDS[bench])
    merged.update(grid)
    return merged


# --- commands -----------------------------------------------------------------

def cmd_kws_run(args, config: RunConfig) -> int:
    kws = config.settings.section("kws")
    seed = kws["seed"] if config.seed is None else config.seed
    net = load_network(args.weights) if args.weights else build_random_network(seed, kws["dims"])
    if args.save_weights:
        save_network(args.save_weights, net)
    steps = kws["steps_per_inference"]
    frames = (load_frames(args.frames, net.dims[0], steps) if args.frames
              else random_frames(seed + 1, net.dims[0], steps))

    placement = place_network(net, config.budget_bytes)
    logits, report = run_inference(net, placement, frames, steps, FITTED_COEFFS,
                                   config.pj_per_cycle, config.clock_hz, config.workers)
    worst = max(report.per_pe_cycles.values())
    result = {
        "per_pe_cycles": {str(pe): cycles for pe, cycles in report.per_pe_cycles.items()},
        "step_cycles_worst": worst,
        "margin_cycles": kws["margin_cycles"],
        "timer_tick_us": timer_tick_us(worst + kws["margin_cycles"], config.clock_hz),
        "inferences_per_sec_modeled": inferences_per_second(worst, kws["margin_cycles"],
                                                            config.clock_hz, steps),
        "energy_uj_modeled": report.energy_uj,
        "pj_per_cycle": config.pj_per_cycle,
        "clock_hz": config.clock_hz,
        "dims": list(net.dims),
        "seed": seed,
        "placement": [{"pe": a.pe_id, "layer": a.layer_id, "neurons": [a.neurons.start, a.neurons.stop],
                       "memory_bytes": a.memory_bytes} for a in placement.assignments],
        "memory_by_pe": {str(pe): parts for pe, parts in placement.memory_by_pe().items()},
        "cost": report.to_dict(),
        "logits": logits.tolist(),
        "loihi_reference": {k: LOIHI_REFERENCE[k] for k in
                            ("kws_inferences_per_second", "kws_energy_uj_per_inference")},
    }
    write_json(config.out or Path("report.json"), result)

    table = [[a.pe_id, a.layer_id, a.n, a.d, a.memory_bytes, f"{report.per_pe_cycles[a.pe_id]:.2f}"]
             for a in placement.assignments]
    print(tabulate(table, headers=["PE", "Layer", "Neurons", "Inputs", "Bytes", "Cycles/step"], tablefmt="grid"))
    print(f"Worst PE {worst:.2f} cycles/step, {result['inferences_per_sec_modeled']:.1f} inferences/s, "
          f"{report.energy_uj:.3f} uJ/inference")
    return EXIT_OK


def cmd_adaptive_run(args, config: RunConfig) -> int:
    logs, pop = run_case(args.case, args.controller, config.settings.section("adaptive"),
                         config.settings.section("plant"), config.settings.section("control"),
                         args.trials, config.seed, config.pj_per_cycle)
    write_trials_csv(config.out or Path("trial.csv"), logs)
    if args.snapshot and pop is not None:
        save_snapshot(args.snapshot, pop)

    table = [[log.trial + 1, f"{log.rms_error():.5f}", f"{log.mean_abs_error():.5f}",
              f"{log.spike_count.mean():.1f}", f"{log.report.energy_uj:.3f}"] for log in logs]
    print(tabulate(table, headers=["Trial", "RMS (2nd half)", "Mean |e|", "Spikes/step", "Energy uJ"],
                   tablefmt="grid"))
    total = CostReport(clock_hz=config.clock_hz)
    for log in logs:
        total.add(log.report)
    print(f"Total over {len(logs)} trials: {total.total_cycles:.0f} cycles, "
          f"{total.duration_s:.3f} s of PE time, {total.energy_uj:.3f} uJ")
    return EXIT_OK


def _adaptive_point(point, config: RunConfig) -> Dict[str, Any]:
    n, d_in, d_out, p = point
    report = adaptive_cycles(n, d_in, d_out, p, clock_hz=config.clock_hz)
    nbytes = adaptive_memory(n, d_in, d_out)
    cycles = report.total_cycles
    feasible = nbytes <= config.budget_bytes and cycles <= cycles_per_tick(config.clock_hz, config.tick_seconds)
    return {"n": n, "d_in": d_in, "d_out": d_out, "p": float(p), "cycles_total": cycles,
            "bytes_total": nbytes, "feasible": feasible,
            "energy_uj": energy_model(cycles, config.pj_per_cycle)}


def _kws_point(point, config: RunConfig) -> Dict[str, Any]:
    n, d = point
    cycles = kws_cycles(n, d)[2]
    nbytes = kws_memory(n, d)
    return {"n": n, "d_in": d, "d_out": "", "p": "", "cycles_total": cycles, "bytes_total": nbytes,
            "feasible": nbytes <= config.budget_bytes,
            "energy_uj": energy_model(cycles, config.pj_per_cycle)}


def cmd_cost_sweep(args, config: RunConfig) -> int:
    grid = config.grid
    if args.bench == "adaptive":
        points = [(n, d_in, d_out, p) for n in grid["n"] for d_in in grid["d_in"]
                  for d_out in grid["d_out"] for p in grid["p"]]
        evaluate = _adaptive_point
    else:
        points = [(n, d) for n in grid["n"] for d in grid["d"]]
        evaluate = _kws_point

    logger.info(f"Sweeping {len(points)} {args.bench} grid points on {config.workers} workers")
    with ThreadPoolExecutor(max_workers=config.workers) as pool:
        rows = list(pool.map(lambda point: evaluate(point, config), points))

    write_csv(config.out or Path("grid.csv"), SWEEP_COLUMNS, rows)
    feasible = sum(1 for row in rows if row["feasible"])
    print(tabulate([[args.bench, len(rows), feasible, len(rows) - feasible]],
                   headers=["Bench", "Points", "Feasible", "Infeasible"], tablefmt="grid"))
    return EXIT_OK


def cmd_cost_map(args, config: RunConfig) -> int:
    grid = max_dout_map(config.grid["n"], config.grid["d_in"], config.budget_bytes)
    write_csv(config.out or Path("max_dout.csv"), MAP_COLUMNS, grid.rows())
    table = [[n] + [int(v) for v in grid.max_dout[i]] for i, n in enumerate(grid.n_list)]
    print(tabulate(table, headers=["N \\ D_in"] + [str(d) for d in grid.d_in_list], tablefmt="grid"))
    return EXIT_OK


def cmd_cost_speedup(args, config: RunConfig) -> int:
    rows = speedup_curve(config.grid["n"], config.grid["d_in"])
    write_csv(config.out or Path("speedup.csv"), ["n", "d_in", "t_i_mac", "t_i_no_mac", "speedup"], rows)
    print(tabulate([[r["n"], r["d_in"], f"{r['speedup']:.2f}"] for r in rows],
                   headers=["N", "D_in", "Speedup"], tablefmt="grid"))
    return EXIT_OK


def cmd_fit(args, config: RunConfig) -> int:
    n_list = [4, 16, 32, 64, 128, 200, 256]
    d_list = [16, 32, 64, 128, 256, 390]
    samples = [(n, d, float(tile_cycles(d, n))) for n in n_list for d in d_list]
    fitted = fit_cycle_model(samples)
    violations = structural_consistency(n_list, d_list)
    result = {
        "printed": FITTED_COEFFS.to_dict()["t_mm"],
        "fitted": fitted,
        "samples": len(samples),
        "structural_violations": violations,
        "utilization": [{"n": n, "d": d, "utilization": mac_array_utilization(d, n)}
                        for n in n_list for d in d_list],
    }
    write_json(config.out or Path("fit.json"), result)
    keys = ["const", "n", "nd", "d"]
    print(tabulate([["printed T_mm"] + [result["printed"][k] for k in keys],
                    ["fitted array"] + [f"{fitted[k]:.4f}" for k in keys]],
                   headers=["Model", "const", "N", "N*D", "D"], tablefmt="grid"))
    return EXIT_OK


def cmd_demo(args, config: RunConfig) -> int:
    summary: Dict[str, Any] = {}
    table = []
    for case in CASES:
        summary[case] = {}
        for controller in CONTROLLERS:
            logs, _ = run_case(case, controller, config.settings.section("adaptive"),
                               config.settings.section("plant"), config.settings.section("control"),
                               args.trials, config.seed, config.pj_per_cycle)
            last = logs[-1]
            summary[case][controller] = {
                "rms_second_half_last_trial": last.rms_error(),
                "steady_state_error": last.steady_state_error(),
                "trial_mean_abs_error": [log.mean_abs_error() for log in logs],
                "firing_probability": last.firing_probability(config.settings.get("adaptive", "n_neurons"))
                if controller == "adaptive" else 0.0,
                "energy_uj_per_trial": last.report.energy_uj,
            }
            table.append([case, controller, f"{last.rms_error():.5f}", f"{last.steady_state_error():.5f}"])
        summary[case]["adaptive_to_pd_rms_ratio"] = (summary[case]["adaptive"]["rms_second_half_last_trial"]
                                                     / summary[case]["pd"]["rms_second_half_last_trial"])
    summary["loihi_reference"] = LOIHI_REFERENCE
    write_json(config.out or Path("demo.json"), summary)
    print(tabulate(table, headers=["Case", "Controller", "RMS (2nd half)", "Steady-state |e|"], tablefmt="grid"))
    return EXIT_OK


# --- argument parsing ---------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="neurosim", description="NeuroSim - Arm + MAC array processing element simulator",
        formatter_class=argparse.RawDescriptionHelpFormatter, epilog=__doc__.split("Outputs:")[1])
    parser.add_argument("-v", "--verbose", action="store_true", help="Enable debug logging")
    parser.add_argument("--config", help="JSON settings file (unknown keys are rejected)")

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="Seed of weights, populations and inputs")
    common.add_argument("--out", help="Output file path")
    common.add_argument("--workers", type=int, help="Worker threads (NEUROSIM_THREADS sets the default)")

    commands = parser.add_subparsers(dest="command", help="Command to run")

    kws = commands.add_parser("kws", help="Keyword-spotting benchmark").add_subparsers(dest="action")
    kws_run = kws.add_parser("run", parents=[common], help="Run one 10-frame inference and write report.json")
    kws_run.add_argument("--weights", help="Network bundle (QM01 record sequence)")
    kws_run.add_argument("--frames", help="Input frames (QM01, 390 x 10 int8)")
    kws_run.add_argument("--save-weights", help="Write the network bundle used for the run")

    adaptive = commands.add_parser("adaptive", help="Adaptive-control benchmark").add_subparsers(dest="action")
    adaptive_run = adaptive.add_parser("run", parents=[common], help="Run closed-loop trials and write trial.csv")
    adaptive_run.add_argument("--case", choices=CASES, default="normal", help="Plant case")
    adaptive_run.add_argument("--controller", choices=CONTROLLERS, default="adaptive", help="Controller")
    adaptive_run.add_argument("--trials", type=int, help="Number of trials")
    adaptive_run.add_argument("--snapshot", help="Write the final population snapshot")

    cost = commands.add_parser("cost", help="Analytical cost models").add_subparsers(dest="action")
    sweep = cost.add_parser("sweep", parents=[common], help="Cycle/memory/energy grid as CSV")
    sweep.add_argument("--bench", choices=["kws", "adaptive"], default="adaptive", help="Benchmark model")
    sweep.add_argument("--grid", default="default", help="'default' or a JSON file of grid lists")
    cost_map = cost.add_parser("map", parents=[common], help="Largest D_out fitting the SRAM budget as CSV")
    cost_map.add_argument("--grid", default="default", help="'default' or a JSON file with n and d_in lists")
    speedup = cost.add_parser("speedup", parents=[common], help="MAC array input-processing speedup as CSV")
    speedup.add_argument("--grid", default="default", help="'default' or a JSON file with n and d_in lists")

    commands.add_parser("fit", parents=[common], help="Fit the T_mm model to structural array cycles")
    demo = commands.add_parser("demo", parents=[common], help="Normal/aging x PD/adaptive comparison")
    demo.add_argument("--trials", type=int, help="Number of trials per run")
    return parser


def _dispatch(args, parser: argparse.ArgumentParser) -> int:
    settings = Settings(settings_file=args.config)
    # --workers wins; otherwise sweep.workers, which NEUROSIM_THREADS overrides
    workers = getattr(args, "workers", None)

    command = (args.command, getattr(args, "action", None))
    grid = None
    if command == ("cost", "sweep"):
        grid = load_grid(args.grid, args.bench)
    elif command == ("cost", "speedup"):
        grid = load_grid(args.grid, "speedup")
    elif command == ("cost", "map"):
        grid = load_grid(args.grid, "map")
    config = RunConfig(settings, command[0], getattr(args, "seed", None), getattr(args, "out", None),
                       workers, grid).validate()
    if getattr(args, "trials", None) is not None and args.trials < 1:
        raise ConfigError(f"trials must be at least 1, got {args.trials}")

    handlers = {
        ("kws", "run"): cmd_kws_run,
        ("adaptive", "run"): cmd_adaptive_run,
        ("cost", "sweep"): cmd_cost_sweep,
        ("cost", "map"): cmd_cost_map,
        ("cost", "speedup"): cmd_cost_speedup,
        ("fit", None): cmd_fit,
        ("demo", None): cmd_demo,
    }
    handler = handlers.get(command)
    if handler is None:
        parser.print_help(sys.stderr)
        return EXIT_CONFIG
    return handler(args, config)


def main(argv: Optional[List[str]] = None) -> int:
    """
    Main entry point.

    Args:
        argv: Arguments without the program name; sys.argv[1:] when None

    Returns:
        0 on success, 2 on configuration errors, 3 on file errors,
        4 on simulator errors
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_CONFIG

    setup_logging(args.verbose)
    try:
        return _dispatch(args, parser)
    except ConfigError as e:
        print(f"Configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, FormatError) as e:
        print(f"File error: {e}", file=sys.stderr)
        return EXIT_IO
    except (NeuroSimException, OverflowError, ValueError) as e:
        logger.error(f"Simulation failed: {e}")
        return EXIT_SIMULATION


if __name__ == "__main__":
    sys.exit(main())
