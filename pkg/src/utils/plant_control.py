"""
Closed-loop harness for the adaptive controller.

A torque-driven single-joint arm (a rigid pendulum with viscous damping,
angle measured from horizontal) is driven by a PD controller. The adaptive
population sees the normalized joint angle and velocity and adds its output
to the PD command; the PD command is the error signal of its learning rule.
"Aging" adds a constant payload torque to the gravity load.
"""

import csv
import logging
import math
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple, Union

import numpy as np

from src.utils.adaptive_pop import AdaptivePopulation, build_adaptive_population
from src.utils.cost_model import (
    CostReport, DEFAULT_PJ_PER_CYCLE, adaptive_cycles, cycles_per_tick,
)
from src.utils.errors import DivergenceError

logger = logging.getLogger(__name__)

CSV_COLUMNS = ["step", "theta", "target", "u_pd", "u_adapt", "spike_count"]
CASES = ("normal", "aging")
CONTROLLERS = ("pd", "adaptive")


class ArmPlant:
    """One-joint arm: J w' = u - b w - (g + m) cos(theta), semi-implicit Euler."""

    def __init__(self, inertia: float = 0.05, damping: float = 0.05, gravity_torque: float = 0.02,
                 extra_mass_torque: float = 0.0, dt: float = 0.001, theta_bound: float = 6.283):
        if inertia <= 0 or dt <= 0:
            raise ValueError(f"inertia and dt must be positive, got {inertia}, {dt}")
        self.inertia = inertia
        self.damping = damping
        self.gravity_torque = gravity_torque
        self.extra_mass_torque = extra_mass_torque
        self.dt = dt
        self.theta_bound = theta_bound
        self.reset()

    def reset(self, theta: float = 0.0, omega: float = 0.0) -> None:
        self.theta = theta
        self.omega = omega

    def step(self, torque: float) -> None:
        """
        Integrate one time step under the given motor torque.

        Raises:
            DivergenceError: If the state is not finite or |theta| exceeds the bound
        """
        load = (self.gravity_torque + self.extra_mass_torque) * math.cos(self.theta)
        accel = (torque - self.damping * self.omega - load) / self.inertia
        self.omega += accel * self.dt
        self.theta += self.omega * self.dt
        if not (math.isfinite(self.theta) and math.isfinite(self.omega)) or abs(self.theta) > self.theta_bound:
            raise DivergenceError(f"arm diverged: theta={self.theta}, omega={self.omega}")

    def __repr__(self):
        return f"ArmPlant(theta={self.theta:.4f}, omega={self.omega:.4f})"


class PdController:
    """PD controller with an optional integral term (off when ki = 0)."""

    def __init__(self, kp: float, kd: float, ki: float = 0.0, target: float = 0.0, dt: float = 0.001):
        if kp <= 0 or kd < 0 or ki < 0:
            raise ValueError(f"controller gains must be kp > 0, kd >= 0, ki >= 0; got {kp}, {kd}, {ki}")
        self.kp = kp
        self.kd = kd
        self.ki = ki
        self.target = target
        self.dt = dt
        self.integral = 0.0

    def reset(self) -> None:
        self.integral = 0.0


def pd_step(ctl: PdController, theta: float, omega: float) -> float:
    """u = kp (target - theta) - kd omega (+ ki times the integrated error)."""
    error = ctl.target - theta
    u = ctl.kp * error - ctl.kd * omega
    if ctl.ki:
        ctl.integral += error * ctl.dt
        u += ctl.ki * ctl.integral
    return u


class SquareWave:
    """Target trajectory alternating between two setpoints, starting high."""

    def __init__(self, low: float, high: float, period_s: float, dt: float = 0.001):
        if period_s <= 0:
            raise ValueError(f"period must be positive, got {period_s}")
        self.low = low
        self.high = high
        self.half_period_steps = max(int(round(period_s / (2 * dt))), 1)

    def __call__(self, step: int) -> float:
        return self.high if (step // self.half_period_steps) % 2 == 0 else self.low


def square_wave(low: float, high: float, period_s: float, dt: float = 0.001) -> SquareWave:
    return SquareWave(low, high, period_s, dt)


class TrialLog:
    """Per-step trace of one trial plus its cost report."""

    def __init__(self, steps: int, trial: int = 0):
        self.trial = trial
        self.theta = np.zeros(steps)
        self.target = np.zeros(steps)
        self.u_pd = np.zeros(steps)
        self.u_adapt = np.zeros(steps)
        self.spike_count = np.zeros(steps, dtype=np.int64)
        self.report = CostReport()

    @property
    def steps(self) -> int:
        return self.theta.shape[0]

    @property
    def error(self) -> np.ndarray:
        return self.target - self.theta

    def rms_error(self, start_fraction: float = 0.5) -> float:
        """RMS tracking error from start_fraction of the trial to its end."""
        start = int(self.steps * start_fraction)
        return float(np.sqrt(np.mean(self.error[start:] ** 2)))

    def mean_abs_error(self) -> float:
        return float(np.mean(np.abs(self.error)))

    def steady_state_error(self, window: int = 500) -> float:
        """Mean |error| over the last `window` steps before each target change and at the end."""
        changes = np.flatnonzero(np.diff(self.target)) + 1
        ends = list(changes) + [self.steps]
        parts = [np.abs(self.error[max(end - window, 0):end]) for end in ends]
        return float(np.mean(np.concatenate(parts)))

    def firing_probability(self, n: int) -> float:
        return float(self.spike_count.mean() / n) if n else 0.0


def write_trials_csv(path: Union[str, Path], logs: List[TrialLog]) -> None:
    """Write trials back to back; the step column counts across trials."""
    offset = 0
    with open(path, 'w', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(CSV_COLUMNS)
        for log in logs:
            for k in range(log.steps):
                writer.writerow([offset + k, repr(float(log.theta[k])), repr(float(log.target[k])),
                                 repr(float(log.u_pd[k])), repr(float(log.u_adapt[k])),
                                 int(log.spike_count[k])])
            offset += log.steps
    logger.info(f"Wrote {offset} steps of {len(logs)} trials to {path}")


def _normalized_input(plant: ArmPlant, theta_range: float, omega_range: float) -> np.ndarray:
    return np.array([plant.theta / theta_range, plant.omega / omega_range])


def closed_loop_run(pop: Optional[AdaptivePopulation], ctl: PdController, plant: ArmPlant,
                    trajectory: Callable[[int], float], steps: int,
                    theta_range: float = 1.0, omega_range: float = 5.0,
                    pj_per_cycle: float = DEFAULT_PJ_PER_CYCLE, trial: int = 0) -> TrialLog:
    """
    Run the PD (+ adaptive) loop for a number of steps.

    Per step the PD command is computed from the current state; the
    population, when present, encodes [theta, omega] (normalized), spikes and
    decodes u_adapt; the plant receives u_pd + u_adapt; the decoders learn
    with error -u_pd so that the adaptive output takes over the PD effort.

    Args:
        pop: Adaptive population, or None for a PD-only run
        ctl: PD controller
        plant: Arm plant (state is advanced in place)
        trajectory: Maps a step index to the target angle
        steps: Number of time steps
        theta_range, omega_range: Normalization of the network input
        pj_per_cycle: Energy calibration constant
        trial: Trial index stored in the log

    Returns:
        TrialLog

    Raises:
        DivergenceError: If the arm leaves its angle bound
    """
    if steps < 1:
        raise ValueError(f"steps must be at least 1, got {steps}")
    if pop is not None and (pop.d_in != 2 or pop.d_out != 1):
        raise ValueError(f"closed loop needs d_in=2 and d_out=1, got {pop.d_in} and {pop.d_out}")

    log = TrialLog(steps, trial)
    for k in range(steps):
        ctl.target = trajectory(k)
        u_pd = pd_step(ctl, plant.theta, plant.omega)
        u_adapt = 0.0
        if pop is not None:
            y, spikes = pop.step(_normalized_input(plant, theta_range, omega_range))
            u_adapt = float(y[0])
            pop.learn(spikes, np.array([-u_pd]))
            log.spike_count[k] = int(spikes.sum())

        log.theta[k] = plant.theta
        log.target[k] = ctl.target
        log.u_pd[k] = u_pd
        log.u_adapt[k] = u_adapt
        plant.step(u_pd + u_adapt)

    if pop is not None:
        # Cycle models are linear in P, so the mean firing probability prices the whole trial
        p_mean = log.firing_probability(pop.n)
        step_report = pop.step_cost(p_mean)
        worst = adaptive_cycles(pop.n, pop.d_in, pop.d_out, float(log.spike_count.max()) / pop.n)
        if worst.total_cycles > cycles_per_tick(tick_seconds=plant.dt):
            logger.warning(f"Worst step needs {worst.total_cycles:.0f} cycles, "
                           f"more than one {plant.dt * 1e3:.1f} ms tick")
        log.report = CostReport(cycles={phase: value * steps for phase, value in step_report.cycles.items()},
                                memory_bytes=step_report.memory_bytes, steps=steps)
        log.report.per_pe_cycles = {0: worst.total_cycles}
        log.report.apply_energy(pj_per_cycle)

    logger.debug(f"Trial {trial}: rms {log.rms_error():.4f} rad, "
                 f"mean spikes/step {log.spike_count.mean():.1f}")
    return log


def run_trials(pop: Optional[AdaptivePopulation], ctl: PdController, plant: ArmPlant,
               trajectory: Callable[[int], float], trials: int, steps_per_trial: int,
               theta_range: float = 1.0, omega_range: float = 5.0,
               pj_per_cycle: float = DEFAULT_PJ_PER_CYCLE) -> List[TrialLog]:
    """
    Run several trials; plant, controller and neuron state reset each trial, decoders carry over.
    """
    logs = []
    for trial in range(trials):
        plant.reset()
        ctl.reset()
        if pop is not None:
            pop.population.reset()
        log = closed_loop_run(pop, ctl, plant, trajectory, steps_per_trial,
                              theta_range, omega_range, pj_per_cycle, trial)
        logger.info(f"Trial {trial + 1}/{trials}: second-half rms error {log.rms_error():.4f} rad")
        logs.append(log)
    return logs


def run_case(case: str, controller: str, adaptive_cfg: Dict, plant_cfg: Dict, control_cfg: Dict,
             trials: Optional[int] = None, seed: Optional[int] = None,
             pj_per_cycle: float = DEFAULT_PJ_PER_CYCLE) -> Tuple[List[TrialLog], Optional[AdaptivePopulation]]:
    """
    Build plant, controller and (for the adaptive controller) population from settings and run trials.

    Args:
        case: "normal" or "aging"
        controller: "pd" or "adaptive"
        adaptive_cfg, plant_cfg, control_cfg: Settings sections of the same names
        trials: Trial count; control_cfg["trials"] when None
        seed: Population seed; adaptive_cfg["seed"] when None
        pj_per_cycle: Energy calibration constant

    Returns:
        (one TrialLog per trial, the population or None for the PD controller)
    """
    if case not in CASES:
        raise ValueError(f"unknown case '{case}', expected one of {CASES}")
    if controller not in CONTROLLERS:
        raise ValueError(f"unknown controller '{controller}', expected one of {CONTROLLERS}")

    dt = adaptive_cfg["dt"]
    plant = ArmPlant(plant_cfg["inertia"], plant_cfg["damping"], plant_cfg["gravity_torque"],
                     plant_cfg["aging_torque"] if case == "aging" else 0.0, dt, plant_cfg["theta_bound"])
    ctl = PdController(control_cfg["kp"], control_cfg["kd"], control_cfg["ki"], dt=dt)
    trajectory = square_wave(control_cfg["setpoint_low"], control_cfg["setpoint_high"],
                             control_cfg["period_s"], dt)

    pop = None
    if controller == "adaptive":
        pop = build_adaptive_population(
            adaptive_cfg["n_neurons"], adaptive_cfg["d_in"], adaptive_cfg["d_out"],
            adaptive_cfg["seed"] if seed is None else seed,
            adaptive_cfg["tau_rc"], adaptive_cfg["tau_ref"], dt, adaptive_cfg["alpha"],
            adaptive_cfg["max_rate_low"], adaptive_cfg["max_rate_high"],
            adaptive_cfg["intercept_low"], adaptive_cfg["intercept_high"],
            adaptive_cfg["target_rate_hz"], adaptive_cfg["calibration_samples"])

    steps = int(round(control_cfg["trial_seconds"] / dt))
    logger.info(f"Running {case} case with {controller} controller")
    logs = run_trials(pop, ctl, plant, trajectory, trials or control_cfg["trials"], steps,
                      adaptive_cfg["theta_range"], adaptive_cfg["omega_range"], pj_per_cycle)
    return logs, pop
