"""
Analytical cycle, memory and energy models of one processing element.

Cycle polynomials are the fitted models of the prototype chip (vector-matrix
multiply and ReLU update for keyword spotting; input processing, LIF update,
event-based output processing and weight update for adaptive control).
Memory models count the bytes each network needs in the 90 KB of SRAM left
for network data. Energy is linear in active cycles with one calibrated
picojoule-per-cycle constant.
"""

import copy
import json
import logging
import math
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from sklearn.linear_model import LinearRegression

from src.utils.mac_array import tile_cycles

logger = logging.getLogger(__name__)

DEFAULT_CLOCK_HZ = 2.5e8
DEFAULT_SRAM_BUDGET = 90 * 1024
DEFAULT_TICK_SECONDS = 0.001
KWS_STEPS_PER_INFERENCE = 10
KWS_ENERGY_UJ_PER_INFERENCE = 7.1
REFERENCE_FIRING_PROBABILITY = 0.13

# Per-PE (neurons, input dimensions) of the 390-256-256 network split over 3 PEs
KWS_PE_DIMS = [(128, 390), (128, 390), (256, 256)]

# Loihi-side figures, kept only to annotate reports
LOIHI_REFERENCE = {
    "kws_inferences_per_second": 296,
    "kws_energy_uj_per_inference": 37.0,
    "adaptive_time_ratio_spinn_to_loihi": {"d_in=1,d_out=1,n=1024": "1 : 0.37",
                                           "d_in=100,d_out=1,n=512": "0.49 : 1"},
    "adaptive_energy_ratio_spinn_to_loihi": {"d_in=1,d_out=1,n=1024": "1 : 0.81",
                                             "d_in=100,d_out=1,n=512": "0.36 : 1"},
}

PHASES = ("input", "neuron", "output", "learning")


class CycleCoeffs:
    """
    Named coefficient sets of the fitted cycle polynomials.

    Keys per family: const, n (x N), nd (x N*D), d (x D), np (x N*P),
    ndp (x N*D_out*P).
    """

    FITTED = {
        "t_mm": {"const": 74.0, "n": 5.38, "nd": 0.13, "d": 24.0},
        "t_relu": {"const": 117.5, "n": 17.70},
        "t_i_mac": {"const": 131.21, "n": 5.07, "nd": 0.13, "d": 35.79},
        "t_i_no_mac": {"const": 102.52, "n": 22.54, "nd": 7.07, "d": 25.54},
        "t_n": {"const": 509.18, "n": 28.19, "np": -26.90},
        "t_o": {"ndp": 5.8, "np": 19.31},
        "t_w": {"ndp": 8.28, "np": 28.04},
    }

    def __init__(self, overrides: Optional[Dict[str, Dict[str, float]]] = None):
        self.families = copy.deepcopy(self.FITTED)
        for family, values in (overrides or {}).items():
            if family not in self.families:
                raise KeyError(f"unknown cycle model family '{family}'")
            self.families[family].update({k: float(v) for k, v in values.items()})

    @classmethod
    def from_json(cls, path: Union[str, Path]) -> 'CycleCoeffs':
        """Load coefficient overrides from a JSON file."""
        with open(path, 'r') as f:
            return cls(json.load(f))

    def get(self, family: str, key: str) -> float:
        return self.families[family].get(key, 0.0)

    def to_dict(self) -> Dict[str, Dict[str, float]]:
        return copy.deepcopy(self.families)


FITTED_COEFFS = CycleCoeffs()


class CostReport:
    """Cycles by phase, bytes by memory component and modeled energy."""

    def __init__(self, cycles: Optional[Dict[str, float]] = None,
                 memory_bytes: Optional[Dict[str, int]] = None,
                 energy_uj: float = 0.0, clock_hz: float = DEFAULT_CLOCK_HZ,
                 steps: int = 0):
        """
        Initialize a report.

        Args:
            cycles: Cycles per phase (input, neuron, output, learning)
            memory_bytes: Bytes per memory component (M_w/M_i or M_ib/M_o/M_ic/M_n)
            energy_uj: Modeled active energy in microjoules
            clock_hz: PE clock frequency
            steps: Number of simulated time steps covered by the report
        """
        self.cycles = {phase: 0.0 for phase in PHASES}
        for phase, value in (cycles or {}).items():
            if phase not in self.cycles:
                raise KeyError(f"unknown phase '{phase}'")
            if value < 0:
                raise ValueError(f"phase '{phase}' has negative cycles {value}")
            self.cycles[phase] = float(value)
        self.memory_bytes = dict(memory_bytes or {})
        self.energy_uj = float(energy_uj)
        self.clock_hz = clock_hz
        self.steps = steps
        self.per_pe_cycles: Dict[int, float] = {}

    @property
    def total_cycles(self) -> float:
        return sum(self.cycles.values())

    @property
    def total_bytes(self) -> int:
        return sum(self.memory_bytes.values())

    @property
    def duration_s(self) -> float:
        """Wall time of the charged cycles at the configured clock."""
        return self.total_cycles / self.clock_hz

    def add(self, other: 'CostReport') -> 'CostReport':
        """Accumulate another report into this one (memory keeps the larger footprint)."""
        for phase in PHASES:
            self.cycles[phase] += other.cycles[phase]
        for component, value in other.memory_bytes.items():
            self.memory_bytes[component] = max(self.memory_bytes.get(component, 0), value)
        for pe_id, value in other.per_pe_cycles.items():
            self.per_pe_cycles[pe_id] = self.per_pe_cycles.get(pe_id, 0.0) + value
        self.energy_uj += other.energy_uj
        self.steps += other.steps
        return self

    def apply_energy(self, pj_per_cycle: Union[float, Dict[str, float]]) -> 'CostReport':
        """
        Set energy from the charged cycles.

        Args:
            pj_per_cycle: One constant, or a constant per phase
        """
        if isinstance(pj_per_cycle, dict):
            self.energy_uj = sum(energy_model(self.cycles[phase], pj_per_cycle[phase])
                                 for phase in PHASES)
        else:
            self.energy_uj = energy_model(self.total_cycles, pj_per_cycle)
        return self

    def to_dict(self) -> Dict:
        return {
            "cycles": dict(self.cycles),
            "cycles_total": self.total_cycles,
            "memory_bytes": dict(self.memory_bytes),
            "bytes_total": self.total_bytes,
            "energy_uj": self.energy_uj,
            "clock_hz": self.clock_hz,
            "steps": self.steps,
        }

    def __repr__(self):
        return (f"CostReport(cycles={self.total_cycles:.2f}, bytes={self.total_bytes}, "
                f"energy_uj={self.energy_uj:.4f})")


# --- cycle models -------------------------------------------------------------

def kws_cycles(n: int, d: int, coeffs: CycleCoeffs = FITTED_COEFFS) -> Tuple[float, float, float]:
    """
    Cycles of one keyword-spotting time step on one PE.

    T_mm = 74.0 + 5.38 N + 0.13 N D + 24.0 D
    T_relu = 17.70 N + 117.5
    T_total = T_mm + T_relu

    Args:
        n: Neurons on the PE
        d: Input dimensions

    Returns:
        (t_mm, t_relu, t_total)
    """
    if n < 1 or d < 1:
        raise ValueError(f"kws_cycles needs positive dimensions, got n={n}, d={d}")
    t_mm = (coeffs.get("t_mm", "const") + coeffs.get("t_mm", "n") * n
            + coeffs.get("t_mm", "nd") * n * d + coeffs.get("t_mm", "d") * d)
    t_relu = coeffs.get("t_relu", "n") * n + coeffs.get("t_relu", "const")
    return t_mm, t_relu, t_mm + t_relu


def input_cycles(n: int, d_in: int, use_mac: bool = True,
                 coeffs: CycleCoeffs = FITTED_COEFFS) -> float:
    """Input processing cycles with (T_i_mac) or without (T_i_no_mac) the MAC array."""
    family = "t_i_mac" if use_mac else "t_i_no_mac"
    return (coeffs.get(family, "const") + coeffs.get(family, "n") * n
            + coeffs.get(family, "nd") * n * d_in + coeffs.get(family, "d") * d_in)


def adaptive_cycles(n: int, d_in: int, d_out: int, p: float, use_mac: bool = True,
                    coeffs: CycleCoeffs = FITTED_COEFFS,
                    clock_hz: float = DEFAULT_CLOCK_HZ) -> CostReport:
    """
    Cycles of one adaptive-control time step on one PE.

    T_n = 28.19 N - 26.90 N P + 509.18
    T_o = 5.8 N D_out P + 19.31 N P
    T_w = 8.28 N D_out P + 28.04 N P
    T_total = T_i + T_n + T_o + T_w

    Args:
        n: Neurons
        d_in: Input dimensions
        d_out: Output dimensions
        p: Firing probability per step, in [0, 1]
        use_mac: Charge the MAC-array input model instead of the Arm-only one

    Returns:
        CostReport with the four phases filled in
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"firing probability must lie in [0, 1], got {p}")
    t_i = input_cycles(n, d_in, use_mac, coeffs)
    t_n = coeffs.get("t_n", "n") * n + coeffs.get("t_n", "np") * n * p + coeffs.get("t_n", "const")
    t_o = coeffs.get("t_o", "ndp") * n * d_out * p + coeffs.get("t_o", "np") * n * p
    t_w = coeffs.get("t_w", "ndp") * n * d_out * p + coeffs.get("t_w", "np") * n * p
    return CostReport(cycles={"input": t_i, "neuron": t_n, "output": t_o, "learning": t_w},
                      clock_hz=clock_hz, steps=1)


def mac_speedup(n: int, d_in: int, coeffs: CycleCoeffs = FITTED_COEFFS) -> float:
    """Input processing speedup of the MAC array over the Arm-only loop."""
    return input_cycles(n, d_in, False, coeffs) / input_cycles(n, d_in, True, coeffs)


def speedup_curve(n_list: Sequence[int], d_in_list: Sequence[int],
                  coeffs: CycleCoeffs = FITTED_COEFFS) -> List[Dict[str, float]]:
    """Rows (n, d_in, t_i_mac, t_i_no_mac, speedup) for plotting."""
    rows = []
    for n in n_list:
        for d_in in d_in_list:
            t_mac = input_cycles(n, d_in, True, coeffs)
            t_arm = input_cycles(n, d_in, False, coeffs)
            rows.append({"n": n, "d_in": d_in, "t_i_mac": t_mac,
                         "t_i_no_mac": t_arm, "speedup": t_arm / t_mac})
    return rows


def event_based_saving(n: int, d_out: int, p: float = REFERENCE_FIRING_PROBABILITY,
                       coeffs: CycleCoeffs = FITTED_COEFFS) -> float:
    """Fractional reduction of output+learning cycles against firing every step."""
    event = adaptive_cycles(n, 1, d_out, p, coeffs=coeffs)
    dense = adaptive_cycles(n, 1, d_out, 1.0, coeffs=coeffs)
    charged = event.cycles["output"] + event.cycles["learning"]
    full = dense.cycles["output"] + dense.cycles["learning"]
    return 1.0 - charged / full


# --- memory models ------------------------------------------------------------

def kws_memory_breakdown(n: int, d: int) -> Dict[str, int]:
    """M_w = (D + 1) N int8 weights and biases; M_i = 4 N for 32-bit MAC results."""
    if n < 1 or d < 1:
        raise ValueError(f"kws_memory needs positive dimensions, got n={n}, d={d}")
    return {"M_w": (d + 1) * n, "M_i": 4 * n}


def kws_memory(n: int, d: int) -> int:
    """Total keyword-spotting bytes on one PE: M_w + M_i."""
    return sum(kws_memory_breakdown(n, d).values())


def adaptive_memory_breakdown(n: int, d_in: int, d_out: int) -> Dict[str, int]:
    """
    Adaptive-control bytes per component.

    M_ib = (D_in + 1) N   int8 encoders and bias
    M_o  = 2 D_out N      16 bit float decoders
    M_ic = 4 N            32-bit input currents
    M_n  = 8 N            membrane potential and refractory time
    """
    if n < 1 or d_in < 1 or d_out < 1:
        raise ValueError(f"adaptive_memory needs positive dimensions, got {n}, {d_in}, {d_out}")
    return {"M_ib": (d_in + 1) * n, "M_o": 2 * d_out * n, "M_ic": 4 * n, "M_n": 8 * n}


def adaptive_memory(n: int, d_in: int, d_out: int) -> int:
    """Total adaptive-control bytes on one PE."""
    return sum(adaptive_memory_breakdown(n, d_in, d_out).values())


def max_dout(n: int, d_in: int, budget: int = DEFAULT_SRAM_BUDGET) -> int:
    """Largest D_out that fits the budget, or 0 when nothing fits."""
    free = budget - (d_in + 1) * n - 12 * n
    return max(free // (2 * n), 0)


class FeasibilityGrid:
    """Maximum output dimensions over a grid of neuron counts and input dimensions."""

    def __init__(self, n_list: Sequence[int], d_in_list: Sequence[int], budget: int):
        self.n_list = list(n_list)
        self.d_in_list = list(d_in_list)
        self.budget = budget
        self.max_dout = np.array([[max_dout(n, d_in, budget) for d_in in self.d_in_list]
                                  for n in self.n_list], dtype=np.int64)
        self.feasible = self.max_dout > 0

    def rows(self) -> List[Dict[str, int]]:
        """Flatten the grid to (n, d_in, max_d_out, feasible) rows."""
        out = []
        for i, n in enumerate(self.n_list):
            for j, d_in in enumerate(self.d_in_list):
                out.append({"n": n, "d_in": d_in, "max_d_out": int(self.max_dout[i, j]),
                            "feasible": bool(self.feasible[i, j])})
        return out


def max_dout_map(n_list: Sequence[int], d_in_list: Sequence[int],
                 budget: int = DEFAULT_SRAM_BUDGET) -> FeasibilityGrid:
    """
    Invert the adaptive memory model over a grid.

    Args:
        n_list: Neuron counts (grid rows)
        d_in_list: Input dimensions (grid columns)
        budget: SRAM bytes available for network data

    Returns:
        FeasibilityGrid; entries with no room for one output are infeasible
    """
    if budget <= 0:
        raise ValueError(f"budget must be positive, got {budget}")
    return FeasibilityGrid(n_list, d_in_list, budget)


# --- time and energy ----------------------------------------------------------

def cycles_per_tick(clock_hz: float = DEFAULT_CLOCK_HZ,
                    tick_seconds: float = DEFAULT_TICK_SECONDS) -> float:
    """Cycles available in one real-time tick (250,000 at 250 MHz and 1 ms)."""
    return clock_hz * tick_seconds


def timer_tick_us(step_cycles: float, clock_hz: float = DEFAULT_CLOCK_HZ) -> int:
    """Shortest whole-microsecond timer tick that fits the given cycles."""
    return math.ceil(round(step_cycles / clock_hz * 1e6, 9))


def inferences_per_second(step_cycles_worst: float, margin_cycles: float = 4000,
                          clock_hz: float = DEFAULT_CLOCK_HZ,
                          steps_per_inference: int = KWS_STEPS_PER_INFERENCE) -> float:
    """
    Keyword-spotting throughput under a microsecond timer tick.

    The tick must cover the slowest PE plus the safety margin; one inference
    spans steps_per_inference ticks.
    """
    tick_us = timer_tick_us(step_cycles_worst + margin_cycles, clock_hz)
    return 1e6 / (tick_us * steps_per_inference)


def energy_model(cycles: float, pj_per_cycle: float) -> float:
    """
    Active energy of a number of cycles.

    Args:
        cycles: Active cycles
        pj_per_cycle: Picojoules per active cycle

    Returns:
        Energy in microjoules
    """
    if pj_per_cycle <= 0:
        raise ValueError(f"pj_per_cycle must be positive, got {pj_per_cycle}")
    return cycles * pj_per_cycle * 1e-6


def kws_inference_cycles(pe_dims: Sequence[Tuple[int, int]] = KWS_PE_DIMS,
                         steps: int = KWS_STEPS_PER_INFERENCE,
                         coeffs: CycleCoeffs = FITTED_COEFFS) -> float:
    """Active cycles of one inference summed over all PEs and time steps."""
    return steps * sum(kws_cycles(n, d, coeffs)[2] for n, d in pe_dims)


def calibrate_pj_per_cycle(energy_uj: float = KWS_ENERGY_UJ_PER_INFERENCE,
                           cycles: Optional[float] = None) -> float:
    """pJ per cycle that makes `cycles` cost `energy_uj` (the 3-PE keyword-spotting inference by default)."""
    if cycles is None:
        cycles = kws_inference_cycles()
    return energy_uj * 1e6 / cycles


DEFAULT_PJ_PER_CYCLE = calibrate_pj_per_cycle()


# --- model consistency and re-fitting ----------------------------------------

def structural_consistency(n_list: Sequence[int], d_list: Sequence[int],
                           coeffs: CycleCoeffs = FITTED_COEFFS) -> List[Dict[str, float]]:
    """
    Compare array-only tile cycles against the fitted T_mm.

    The fitted model includes Arm-side overhead, so it should bound the
    array-only count from above. Grid points where it does not are logged
    and returned.
    """
    violations = []
    for n in n_list:
        for d in d_list:
            structural = tile_cycles(d, n)
            fitted = kws_cycles(n, d, coeffs)[0]
            if structural > fitted:
                logger.warning(f"Structural tile cycles {structural} exceed fitted T_mm "
                               f"{fitted:.2f} at n={n}, d={d}")
                violations.append({"n": n, "d": d, "structural": structural, "fitted": fitted})
    return violations


def fit_cycle_model(samples: Sequence[Tuple[int, int, float]]) -> Dict[str, float]:
    """
    Regress T = const + a N + b N D + c D from (n, d, cycles) samples.

    Args:
        samples: Measured or simulated cycle counts

    Returns:
        Coefficients keyed like the t_mm family
    """
    if len(samples) < 4:
        raise ValueError("fitting four coefficients needs at least four samples")
    features = np.array([[n, n * d, d] for n, d, _ in samples], dtype=np.float64)
    target = np.array([c for _, _, c in samples], dtype=np.float64)
    model = LinearRegression().fit(features, target)
    coeffs = {"const": float(model.intercept_), "n": float(model.coef_[0]),
              "nd": float(model.coef_[1]), "d": float(model.coef_[2])}
    logger.info(f"Fitted cycle model on {len(samples)} samples: {coeffs}")
    return coeffs
