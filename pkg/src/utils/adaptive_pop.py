"""
Adaptive-control neural population on one simulated PE.

Inputs are converted to int8 and multiplied with fixed random encoders on
the MAC array; LIF neurons integrate the resulting currents; the output is
the sum of the 16 bit float decoder rows of the neurons that spiked, and
only those rows are touched by the delta-rule update.

Snapshot layout (little endian), written by save_snapshot:
    QM01 record   encoder weights D_in x N (gain folded in)
    QM01 record   bias row 1 x N
    QM01 record   1 x 1 input scale
    DF16 section  b"DF16", u32 rows, u32 cols, f64 alpha, rows*cols float16
    LIF0 section  b"LIF0", u32 n, f64 tau_rc, f64 tau_ref, f64 dt,
                  n float32 voltages, n int32 refractory counters,
                  n float64 gains, n float64 biases
"""

import logging
import math
import struct
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np

from src.utils.cost_model import CostReport, adaptive_cycles, adaptive_memory_breakdown
from src.utils.errors import FormatError
from src.utils.mac_array import MacJob, mac_multiply
from src.utils.quant import (
    QuantMatrix, quantize_nearest, quantize_stochastic, read_matrix, to_fixed16, write_matrix,
)

logger = logging.getLogger(__name__)

V_THRESHOLD = 1.0
INPUT_SCALE = 1.0 / 127

DF16_HEADER = struct.Struct("<4sIId")
LIF_HEADER = struct.Struct("<4sIddd")


class LifPopulation:
    """Leaky integrate-and-fire state of N neurons, advanced with forward Euler."""

    def __init__(self, n: int, tau_rc: float = 0.02, tau_ref: float = 0.002, dt: float = 0.001,
                 gain: Optional[np.ndarray] = None, bias: Optional[np.ndarray] = None):
        """
        Initialize a population at rest.

        Args:
            n: Neuron count
            tau_rc: Membrane time constant in seconds
            tau_ref: Absolute refractory period in seconds
            dt: Time step in seconds
            gain: NEF gain per neuron, already folded into the encoder weights
            bias: NEF bias current per neuron, already folded into the encoder bias
        """
        if n < 1:
            raise ValueError(f"population needs at least one neuron, got {n}")
        if tau_rc <= 0 or tau_ref < 0 or dt <= 0:
            raise ValueError(f"invalid LIF constants tau_rc={tau_rc}, tau_ref={tau_ref}, dt={dt}")
        self.n = n
        self.tau_rc = tau_rc
        self.tau_ref = tau_ref
        self.dt = dt
        self.v_threshold = V_THRESHOLD
        self.refractory_steps = int(round(tau_ref / dt))
        self.gain = np.ones(n) if gain is None else np.asarray(gain, dtype=np.float64).reshape(-1)
        self.bias = np.zeros(n) if bias is None else np.asarray(bias, dtype=np.float64).reshape(-1)
        if self.gain.shape != (n,) or self.bias.shape != (n,):
            raise ValueError(f"gain and bias need {n} entries, got {self.gain.shape} and {self.bias.shape}")
        self.reset()

    def reset(self) -> None:
        """Return every neuron to v = 0 with no refractory time left."""
        self.voltage = np.zeros(self.n, dtype=np.float32)
        self.refractory = np.zeros(self.n, dtype=np.int32)

    def __repr__(self):
        return f"LifPopulation(n={self.n}, tau_rc={self.tau_rc}, tau_ref={self.tau_ref}, dt={self.dt})"


class EncoderMatrix:
    """Fixed int8 input weights (gain folded in) plus an int8 bias row."""

    def __init__(self, weights: QuantMatrix, bias: QuantMatrix, input_scale: float = INPUT_SCALE):
        if bias.shape != (1, weights.cols):
            raise ValueError(f"bias shape {bias.shape} does not match {weights.cols} neurons")
        self.weights = weights
        self.bias = bias
        self.input_scale = float(input_scale)

    @property
    def d_in(self) -> int:
        return self.weights.rows

    @property
    def n(self) -> int:
        return self.weights.cols

    def currents_from_acc(self, acc: np.ndarray) -> np.ndarray:
        """Rescale MAC accumulators to real currents and add the bias."""
        return np.asarray(acc, dtype=np.float64) * (self.input_scale * self.weights.scale) + self.bias.to_real()[0]

    def nbytes(self) -> int:
        """M_ib = (D_in + 1) N."""
        return self.weights.nbytes() + self.bias.nbytes()


class DecoderMatrix:
    """16 bit float output weights N x D_out with the learning rate."""

    def __init__(self, omega: np.ndarray, alpha: float):
        if alpha < 0:
            raise ValueError(f"learning rate must not be negative, got {alpha}")
        self.omega = to_fixed16(np.atleast_2d(omega))
        self.alpha = float(alpha)

    @classmethod
    def zeros(cls, n: int, d_out: int, alpha: float) -> 'DecoderMatrix':
        return cls(np.zeros((n, d_out)), alpha)

    @property
    def n(self) -> int:
        return self.omega.shape[0]

    @property
    def d_out(self) -> int:
        return self.omega.shape[1]


def input_process(enc: EncoderMatrix, x: np.ndarray) -> np.ndarray:
    """
    Encode one input vector into neuron currents.

    The input is range checked and converted to int8 (values beyond the
    input scale saturate), multiplied on the MAC array and rescaled.

    Args:
        enc: Encoder weights and bias
        x: Real input of length D_in

    Returns:
        Real currents, length N
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.shape[0] != enc.d_in:
        raise ValueError(f"input has {x.shape[0]} dimensions, encoder expects {enc.d_in}")
    limit = 127 * enc.input_scale
    if np.any(np.abs(x) > limit):
        logger.debug(f"Input {x} saturates the int8 range +-{limit:.3f}")
    result = mac_multiply(MacJob(quantize_nearest(x, enc.input_scale), enc.weights))
    return enc.currents_from_acc(result.acc)


def neuron_update(pop: LifPopulation, currents: np.ndarray) -> np.ndarray:
    """
    Advance every neuron by one time step.

    Refractory neurons count down and stay silent. The others integrate
    dv = (J - v) dt / tau_rc; a voltage above threshold spikes, resets to 0
    and starts the refractory countdown. Voltages never go below 0.

    Returns:
        Boolean spike vector, length N
    """
    currents = np.asarray(currents, dtype=np.float64)
    if currents.shape != (pop.n,):
        raise ValueError(f"expected {pop.n} currents, got shape {currents.shape}")

    active = pop.refractory == 0
    pop.refractory[~active] -= 1

    v = pop.voltage.astype(np.float64)
    v[active] += (currents[active] - v[active]) * (pop.dt / pop.tau_rc)
    np.maximum(v, 0.0, out=v)

    spikes = active & (v > pop.v_threshold)
    v[spikes] = 0.0
    pop.refractory[spikes] = pop.refractory_steps
    pop.voltage = v.astype(np.float32)
    return spikes


def output_process(dec: DecoderMatrix, spikes: np.ndarray) -> np.ndarray:
    """Sum of the decoder rows of the spiking neurons (a_i = 1 per spike)."""
    spikes = np.asarray(spikes, dtype=bool)
    if spikes.shape != (dec.n,):
        raise ValueError(f"expected {dec.n} spike flags, got shape {spikes.shape}")
    return dec.omega[spikes].astype(np.float64).sum(axis=0)


def weight_update(dec: DecoderMatrix, spikes: np.ndarray, error: np.ndarray) -> None:
    """
    Delta rule on the rows of spiking neurons: omega[i] -= alpha * error.

    Arithmetic is done in double precision and stored back as float16.
    """
    error = np.asarray(error, dtype=np.float64).reshape(-1)
    if error.shape[0] != dec.d_out:
        raise ValueError(f"error has {error.shape[0]} dimensions, decoder has {dec.d_out}")
    spikes = np.asarray(spikes, dtype=bool)
    if dec.alpha == 0.0 or not spikes.any():
        return
    rows = dec.omega[spikes].astype(np.float64) - dec.alpha * error
    dec.omega[spikes] = to_fixed16(rows)


# --- rate models and NEF parameters -------------------------------------------

def lif_rate(j: np.ndarray, tau_rc: float = 0.02, tau_ref: float = 0.002) -> np.ndarray:
    """Closed-form LIF rate 1 / (tau_ref + tau_rc ln(1 + 1/(J - 1))), zero for J <= 1."""
    j = np.asarray(j, dtype=np.float64)
    rate = np.zeros_like(j)
    above = j > V_THRESHOLD
    rate[above] = 1.0 / (tau_ref + tau_rc * np.log1p(1.0 / (j[above] - 1.0)))
    return rate


def discrete_lif_rate(j: np.ndarray, tau_rc: float = 0.02, tau_ref: float = 0.002,
                      dt: float = 0.001) -> np.ndarray:
    """
    Steady-state rate of the forward-Euler LIF model used by neuron_update.

    From v = 0 the voltage after k steps is J (1 - (1 - dt/tau_rc)^k); the
    first k where it exceeds 1, plus the refractory steps, is the period.
    """
    j = np.asarray(j, dtype=np.float64)
    rate = np.zeros_like(j)
    above = j > V_THRESHOLD
    a = dt / tau_rc
    if a >= 1.0:
        k = np.ones(int(above.sum()))
    else:
        k = np.floor(np.log1p(-1.0 / j[above]) / math.log1p(-a)) + 1
    rate[above] = 1.0 / ((k + int(round(tau_ref / dt))) * dt)
    return rate


def nef_gain_bias(max_rates: np.ndarray, intercepts: np.ndarray, tau_rc: float = 0.02,
                  tau_ref: float = 0.002) -> Tuple[np.ndarray, np.ndarray]:
    """
    Gain and bias giving each neuron its max rate at e.x = 1 and threshold at e.x = intercept.

    Returns:
        (gain, bias) with J(e.x) = gain * e.x + bias
    """
    max_rates = np.asarray(max_rates, dtype=np.float64)
    intercepts = np.asarray(intercepts, dtype=np.float64)
    if np.any(max_rates * tau_ref >= 1.0):
        raise ValueError(f"max rates must stay below 1/tau_ref = {1.0 / tau_ref:.1f} Hz")
    if np.any(intercepts >= 1.0):
        raise ValueError("intercepts must be below 1")
    j_max = 1.0 / (1.0 - np.exp((tau_ref - 1.0 / max_rates) / tau_rc))
    gain = (j_max - V_THRESHOLD) / (1.0 - intercepts)
    bias = V_THRESHOLD - gain * intercepts
    return gain, bias


class AdaptivePopulation:
    """Population, encoder and decoder of one adaptive-control PE."""

    def __init__(self, population: LifPopulation, encoder: EncoderMatrix, decoder: DecoderMatrix):
        if not population.n == encoder.n == decoder.n:
            raise ValueError(f"neuron counts disagree: population {population.n}, "
                             f"encoder {encoder.n}, decoder {decoder.n}")
        self.population = population
        self.encoder = encoder
        self.decoder = decoder

    @property
    def n(self) -> int:
        return self.population.n

    @property
    def d_in(self) -> int:
        return self.encoder.d_in

    @property
    def d_out(self) -> int:
        return self.decoder.d_out

    def step(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Input processing, neuron update and output processing for one time step."""
        spikes = neuron_update(self.population, input_process(self.encoder, x))
        return output_process(self.decoder, spikes), spikes

    def learn(self, spikes: np.ndarray, error: np.ndarray) -> None:
        weight_update(self.decoder, spikes, error)

    def memory_breakdown(self):
        return adaptive_memory_breakdown(self.n, self.d_in, self.d_out)

    def step_cost(self, p: float, use_mac: bool = True) -> CostReport:
        """Cycle and memory report of one time step at firing probability p."""
        report = adaptive_cycles(self.n, self.d_in, self.d_out, p, use_mac)
        report.memory_bytes = self.memory_breakdown()
        return report


def _sample_inputs(samples: int, d_in: int, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).uniform(-1.0, 1.0, size=(samples, d_in))


def calibrate_population(encoder: EncoderMatrix, tau_rc: float, tau_ref: float, dt: float,
                         target_rate_hz: float = 130.0, samples: int = 256,
                         seed: int = 0) -> Tuple[float, float]:
    """
    Find the current scale that puts the mean population rate at the target.

    Rates are taken from discrete_lif_rate on the quantized currents of
    inputs drawn uniformly from [-1, 1]^D_in. Scaling weights and bias
    together scales the currents, so the mean rate is monotone in the scale
    and a log-domain bisection converges.

    Returns:
        (current scale, mean rate at that scale in Hz)
    """
    x = _sample_inputs(samples, encoder.d_in, seed)
    x_q = quantize_nearest(x, encoder.input_scale).astype(np.int64)
    currents = encoder.currents_from_acc(x_q @ encoder.weights.data.astype(np.int64))

    def mean_rate(scale: float) -> float:
        return float(discrete_lif_rate(scale * currents, tau_rc, tau_ref, dt).mean())

    lo, hi = 1e-2, 1e3
    if mean_rate(hi) < target_rate_hz:
        logger.warning(f"Target rate {target_rate_hz} Hz is out of reach; "
                       f"best mean rate is {mean_rate(hi):.1f} Hz")
        return hi, mean_rate(hi)
    for _ in range(60):
        mid = math.sqrt(lo * hi)
        if mean_rate(mid) < target_rate_hz:
            lo = mid
        else:
            hi = mid
    logger.info(f"Calibrated current scale {hi:.4f}: mean rate {mean_rate(hi):.2f} Hz")
    return hi, mean_rate(hi)


def build_adaptive_population(n: int = 256, d_in: int = 2, d_out: int = 1, seed: int = 7,
                              tau_rc: float = 0.02, tau_ref: float = 0.002, dt: float = 0.001,
                              alpha: float = 1e-4, max_rate_low: float = 100.0,
                              max_rate_high: float = 200.0, intercept_low: float = -1.0,
                              intercept_high: float = 0.9, target_rate_hz: Optional[float] = 130.0,
                              calibration_samples: int = 256) -> AdaptivePopulation:
    """
    Build a seeded population with quantized random encoders and zero decoders.

    Args:
        n: Neuron count
        d_in: Input dimensions
        d_out: Output dimensions
        seed: Seed of encoders, rates, intercepts and weight rounding
        tau_rc, tau_ref, dt: LIF constants
        alpha: Learning rate
        max_rate_low, max_rate_high: Range of the uniform max-rate draw in Hz
        intercept_low, intercept_high: Range of the uniform intercept draw
        target_rate_hz: Mean rate to calibrate to; None keeps the raw NEF parameters
        calibration_samples: Inputs used by the calibration

    Returns:
        AdaptivePopulation
    """
    rng = np.random.default_rng(seed)
    directions = rng.normal(size=(n, d_in))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    max_rates = rng.uniform(max_rate_low, max_rate_high, size=n)
    intercepts = rng.uniform(intercept_low, intercept_high, size=n)
    gain, bias = nef_gain_bias(max_rates, intercepts, tau_rc, tau_ref)

    weights = quantize_stochastic((directions * gain[:, None]).T, rng_seed=int(rng.integers(2 ** 31)))
    bias_row = quantize_stochastic(bias.reshape(1, -1), rng_seed=int(rng.integers(2 ** 31)))
    encoder = EncoderMatrix(weights, bias_row)

    if target_rate_hz is not None:
        scale, _ = calibrate_population(encoder, tau_rc, tau_ref, dt, target_rate_hz,
                                        calibration_samples, int(rng.integers(2 ** 31)))
        # The int8 payload is unchanged; only the scales absorb the calibration
        encoder = EncoderMatrix(QuantMatrix(weights.data, weights.scale * scale),
                                QuantMatrix(bias_row.data, bias_row.scale * scale))
        gain, bias = gain * scale, bias * scale

    population = LifPopulation(n, tau_rc, tau_ref, dt, gain, bias)
    return AdaptivePopulation(population, encoder, DecoderMatrix.zeros(n, d_out, alpha))


# --- snapshots ----------------------------------------------------------------

def save_snapshot(path: Union[str, Path], bundle: AdaptivePopulation) -> None:
    """Write encoder, decoder and LIF state to one binary file."""
    pop, dec = bundle.population, bundle.decoder
    with open(path, 'wb') as f:
        write_matrix(f, bundle.encoder.weights)
        write_matrix(f, bundle.encoder.bias)
        write_matrix(f, QuantMatrix(np.ones((1, 1), dtype=np.int8), bundle.encoder.input_scale))
        f.write(DF16_HEADER.pack(b"DF16", dec.n, dec.d_out, dec.alpha))
        f.write(dec.omega.astype('<f2').tobytes())
        f.write(LIF_HEADER.pack(b"LIF0", pop.n, pop.tau_rc, pop.tau_ref, pop.dt))
        f.write(pop.voltage.astype('<f4').tobytes())
        f.write(pop.refractory.astype('<i4').tobytes())
        f.write(pop.gain.astype('<f8').tobytes())
        f.write(pop.bias.astype('<f8').tobytes())
    logger.debug(f"Saved snapshot of {pop.n} neurons to {path}")


def _read_exact(f, size: int, what: str) -> bytes:
    data = f.read(size)
    if len(data) != size:
        raise FormatError(f"truncated {what}: expected {size} bytes, got {len(data)}")
    return data


def load_snapshot(path: Union[str, Path]) -> AdaptivePopulation:
    """
    Read a snapshot written by save_snapshot.

    Raises:
        FormatError: On a bad section header or a truncated payload
    """
    with open(path, 'rb') as f:
        weights = read_matrix(f)
        bias = read_matrix(f)
        scale_record = read_matrix(f)
        if weights is None or bias is None or scale_record is None:
            raise FormatError(f"{path}: missing encoder records")

        magic, rows, cols, alpha = DF16_HEADER.unpack(_read_exact(f, DF16_HEADER.size, "DF16 header"))
        if magic != b"DF16":
            raise FormatError(f"{path}: bad decoder magic {magic!r}")
        omega = np.frombuffer(_read_exact(f, 2 * rows * cols, "DF16 payload"), dtype='<f2')
        omega = omega.reshape(rows, cols).astype(np.float16)

        magic, n, tau_rc, tau_ref, dt = LIF_HEADER.unpack(_read_exact(f, LIF_HEADER.size, "LIF header"))
        if magic != b"LIF0":
            raise FormatError(f"{path}: bad LIF magic {magic!r}")
        voltage = np.frombuffer(_read_exact(f, 4 * n, "LIF voltages"), dtype='<f4').astype(np.float32)
        refractory = np.frombuffer(_read_exact(f, 4 * n, "LIF refractory"), dtype='<i4').astype(np.int32)
        nef_gain = np.frombuffer(_read_exact(f, 8 * n, "LIF gains"), dtype='<f8').astype(np.float64)
        nef_bias = np.frombuffer(_read_exact(f, 8 * n, "LIF biases"), dtype='<f8').astype(np.float64)

    try:
        encoder = EncoderMatrix(weights, bias, scale_record.scale)
        population = LifPopulation(n, tau_rc, tau_ref, dt, nef_gain, nef_bias)
        population.voltage = voltage
        population.refractory = refractory
        return AdaptivePopulation(population, encoder, DecoderMatrix(omega, alpha))
    except ValueError as e:
        raise FormatError(f"{path}: inconsistent snapshot: {e}")
