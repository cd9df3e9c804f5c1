"""
Keyword-spotting benchmark on simulated processing elements.

A 390-256-256-29 multilayer perceptron with int8 weights and ReLU
activations. Hidden layers run on PEs through the MAC array; a layer whose
weights and accumulators do not fit one PE's SRAM budget is split evenly
over several PEs. The 29-unit output layer runs in real arithmetic on the
host. One inference consumes 10 input frames.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np

from src.utils.cost_model import (
    CostReport, DEFAULT_CLOCK_HZ, DEFAULT_PJ_PER_CYCLE, DEFAULT_SRAM_BUDGET,
    KWS_STEPS_PER_INFERENCE, FITTED_COEFFS, CycleCoeffs, kws_cycles,
    kws_memory, kws_memory_breakdown,
)
from src.utils.errors import FormatError, PlacementInfeasible
from src.utils.mac_array import MacJob, mac_multiply
from src.utils.quant import (
    QuantMatrix, default_scale, quantize_stochastic,
    read_records, requantize_relu, write_records,
)

logger = logging.getLogger(__name__)

KWS_DIMS = (390, 256, 256, 29)
INPUT_SCALE = 1.0 / 127


class KwsLayer:
    """One hidden layer: int8 weights D x N, int8 bias row and the output activation scale."""

    def __init__(self, weights: QuantMatrix, bias: QuantMatrix, out_scale: float):
        if bias.shape != (1, weights.cols):
            raise ValueError(f"bias shape {bias.shape} does not match {weights.cols} neurons")
        if out_scale <= 0:
            raise ValueError(f"out_scale must be positive, got {out_scale}")
        self.weights = weights
        self.bias = bias
        self.out_scale = float(out_scale)

    @property
    def d(self) -> int:
        return self.weights.rows

    @property
    def n(self) -> int:
        return self.weights.cols

    def bias_acc(self, in_scale: float) -> np.ndarray:
        """Bias converted into the accumulator domain as 32-bit integers."""
        acc_unit = in_scale * self.weights.scale
        return np.rint(self.bias.data[0].astype(np.float64) * self.bias.scale / acc_unit).astype(np.int32)

    def columns(self, start: int, stop: int) -> 'KwsLayer':
        """The neurons [start, stop) as a layer of their own."""
        return KwsLayer(self.weights.column_slice(start, stop),
                        self.bias.column_slice(start, stop), self.out_scale)


class KwsNetwork:
    """Quantized hidden layers plus the real-valued host output layer."""

    def __init__(self, layers: List[KwsLayer], input_scale: float,
                 output_weights: np.ndarray, output_bias: np.ndarray):
        """
        Initialize a network.

        Args:
            layers: Hidden layers, input side first
            input_scale: Real value of one input frame unit
            output_weights: Real host output matrix, shape (last hidden width, outputs)
            output_bias: Real host output bias, length outputs
        """
        if not layers:
            raise ValueError("a network needs at least one hidden layer")
        for prev, layer in zip(layers, layers[1:]):
            if layer.d != prev.n:
                raise ValueError(f"layer input {layer.d} does not match previous layer width {prev.n}")
        output_weights = np.array(output_weights, dtype=np.float64)
        output_bias = np.array(output_bias, dtype=np.float64).reshape(-1)
        if output_weights.ndim != 2 or output_weights.shape[0] != layers[-1].n:
            raise ValueError(f"output weights of shape {output_weights.shape} do not take "
                             f"{layers[-1].n} hidden inputs")
        if output_bias.shape != (output_weights.shape[1],):
            raise ValueError(f"output bias of length {output_bias.shape[0]} does not match "
                             f"{output_weights.shape[1]} outputs")
        if not (np.all(np.isfinite(output_weights)) and np.all(np.isfinite(output_bias))):
            raise ValueError("output layer holds non-finite values")
        self.layers = layers
        self.input_scale = float(input_scale)
        self.output_weights = output_weights
        self.output_bias = output_bias

    @property
    def outputs(self) -> int:
        return self.output_weights.shape[1]

    @property
    def dims(self) -> Tuple[int, ...]:
        return (self.layers[0].d,) + tuple(layer.n for layer in self.layers) + (self.outputs,)

    def layer_in_scale(self, layer_id: int) -> float:
        """Real value of one input unit of a hidden layer."""
        return self.input_scale if layer_id == 0 else self.layers[layer_id - 1].out_scale

    def host_output(self, hidden: np.ndarray) -> np.ndarray:
        """Real-valued output layer applied to the last hidden activations."""
        real = hidden.astype(np.float64) * self.layers[-1].out_scale
        return real @ self.output_weights + self.output_bias

    def __repr__(self):
        return f"KwsNetwork(dims={self.dims})"


class PeAssignment:
    """A contiguous neuron range of one layer mapped onto one PE."""

    def __init__(self, pe_id: int, layer_id: int, neurons: range, d: int):
        self.pe_id = pe_id
        self.layer_id = layer_id
        self.neurons = neurons
        self.d = d

    @property
    def n(self) -> int:
        return len(self.neurons)

    @property
    def memory_bytes(self) -> int:
        return kws_memory(self.n, self.d)

    def __repr__(self):
        return (f"PeAssignment(pe={self.pe_id}, layer={self.layer_id}, "
                f"neurons={self.neurons.start}..{self.neurons.stop - 1})")


class PePlacement:
    """Mapping of every hidden-layer neuron onto a PE."""

    def __init__(self, assignments: List[PeAssignment], sram_budget_bytes: int = DEFAULT_SRAM_BUDGET):
        self.assignments = assignments
        self.sram_budget_bytes = sram_budget_bytes

    @property
    def pe_count(self) -> int:
        return len(self.assignments)

    def for_layer(self, layer_id: int) -> List[PeAssignment]:
        return [a for a in self.assignments if a.layer_id == layer_id]

    def split_sizes(self) -> List[int]:
        return [a.n for a in self.assignments]

    def memory_by_pe(self) -> Dict[int, Dict[str, int]]:
        """Per-PE memory components M_w, M_i and their total."""
        report = {}
        for a in self.assignments:
            parts = kws_memory_breakdown(a.n, a.d)
            parts["total"] = sum(parts.values())
            report[a.pe_id] = parts
        return report

    def validate(self, net: KwsNetwork) -> None:
        """Check full coverage of every layer and the per-PE budget."""
        for layer_id, layer in enumerate(net.layers):
            covered = sorted(i for a in self.for_layer(layer_id) for i in a.neurons)
            if covered != list(range(layer.n)):
                raise PlacementInfeasible(f"layer {layer_id} neurons are not assigned exactly once")
        for a in self.assignments:
            if a.memory_bytes > self.sram_budget_bytes:
                raise PlacementInfeasible(
                    f"PE {a.pe_id} needs {a.memory_bytes} bytes, budget is {self.sram_budget_bytes}")

    def __repr__(self):
        return f"PePlacement(pes={self.pe_count}, split={self.split_sizes()})"


def place_network(net: KwsNetwork, budget: int = DEFAULT_SRAM_BUDGET) -> PePlacement:
    """
    Place hidden layers on PEs under a per-PE SRAM budget.

    Each layer gets the smallest number of PEs for which an even split fits
    the budget; PE ids are handed out layer by layer.

    Args:
        net: The network to place
        budget: Bytes per PE available for weights, biases and accumulators

    Returns:
        PePlacement

    Raises:
        PlacementInfeasible: If a single neuron does not fit one PE
    """
    if budget <= 0:
        raise ValueError(f"budget must be positive, got {budget}")
    assignments = []
    pe_id = 0
    for layer_id, layer in enumerate(net.layers):
        if kws_memory(1, layer.d) > budget:
            raise PlacementInfeasible(
                f"layer {layer_id}: one neuron needs {kws_memory(1, layer.d)} bytes, budget is {budget}")
        k = 1
        while kws_memory(math.ceil(layer.n / k), layer.d) > budget:
            k += 1
        start = 0
        for i in range(k):
            size = layer.n // k + (1 if i < layer.n % k else 0)
            assignments.append(PeAssignment(pe_id, layer_id, range(start, start + size), layer.d))
            start += size
            pe_id += 1
        if k > 1:
            logger.info(f"Layer {layer_id} ({layer.d}x{layer.n}) needs "
                        f"{kws_memory(layer.n, layer.d)} bytes; split over {k} PEs")
    placement = PePlacement(assignments, budget)
    placement.validate(net)
    return placement


def _dense_layer(x: np.ndarray, layer: KwsLayer, in_scale: float) -> np.ndarray:
    """Untiled integer layer: one int64 matmul, bias, ReLU and requantization."""
    acc = x.astype(np.int64) @ layer.weights.data.astype(np.int64) + layer.bias_acc(in_scale)
    return requantize_relu(acc, in_scale * layer.weights.scale, layer.out_scale)


def _check_frames(frames: np.ndarray, d: int, steps: int) -> np.ndarray:
    frames = np.asarray(frames)
    if frames.shape != (steps, d):
        raise ValueError(f"expected {steps} frames of {d} values, got shape {frames.shape}")
    if not np.issubdtype(frames.dtype, np.integer) or frames.min() < -128 or frames.max() > 127:
        raise ValueError("frames must hold int8 values")
    return frames.astype(np.int8)


def reference_inference(net: KwsNetwork, frames: np.ndarray,
                        steps: int = KWS_STEPS_PER_INFERENCE) -> np.ndarray:
    """Straight-line inference without tiling or placement (same quantization)."""
    frames = _check_frames(frames, net.layers[0].d, steps)
    logits = np.zeros((steps, net.outputs))
    for t, frame in enumerate(frames):
        x = frame
        for layer_id, layer in enumerate(net.layers):
            x = _dense_layer(x, layer, net.layer_in_scale(layer_id))
        logits[t] = net.host_output(x)
    return logits


def _run_pe(x: np.ndarray, layer: KwsLayer, in_scale: float, assignment: PeAssignment) -> np.ndarray:
    part = layer.columns(assignment.neurons.start, assignment.neurons.stop)
    result = mac_multiply(MacJob(x, part.weights))
    acc = result.acc.astype(np.int64) + part.bias_acc(in_scale)
    return requantize_relu(acc, in_scale * layer.weights.scale, layer.out_scale)


def run_inference(net: KwsNetwork, placement: PePlacement, frames: np.ndarray,
                  steps: int = KWS_STEPS_PER_INFERENCE,
                  coeffs: CycleCoeffs = FITTED_COEFFS,
                  pj_per_cycle: float = DEFAULT_PJ_PER_CYCLE,
                  clock_hz: float = DEFAULT_CLOCK_HZ,
                  workers: int = 1) -> Tuple[np.ndarray, CostReport]:
    """
    Run one inference on the placed network.

    Args:
        net: The network
        placement: PE placement of the hidden layers
        frames: int8 frames, shape (steps, D)
        steps: Frames per inference
        coeffs: Cycle model coefficients
        pj_per_cycle: Energy calibration constant
        clock_hz: PE clock frequency
        workers: Threads evaluating the PEs of one layer in parallel

    Returns:
        (logits of shape (steps, outputs), CostReport over the whole inference)

    Raises:
        OverflowError: If a MAC accumulator leaves the 29-bit range
    """
    frames = _check_frames(frames, net.layers[0].d, steps)
    logits = np.zeros((steps, net.outputs))

    # Cycles per time step are data independent; charge them per PE
    per_pe_cycles = {}
    step_cycles = {"input": 0.0, "neuron": 0.0}
    memory = {"M_w": 0, "M_i": 0}
    for a in placement.assignments:
        t_mm, t_relu, t_total = kws_cycles(a.n, a.d, coeffs)
        per_pe_cycles[a.pe_id] = t_total
        step_cycles["input"] += t_mm
        step_cycles["neuron"] += t_relu
        for component, value in kws_memory_breakdown(a.n, a.d).items():
            memory[component] += value

    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for t, frame in enumerate(frames):
            x = frame
            for layer_id, layer in enumerate(net.layers):
                in_scale = net.layer_in_scale(layer_id)
                pes = placement.for_layer(layer_id)
                if pool is not None:
                    outs = list(pool.map(lambda a: _run_pe(x, layer, in_scale, a), pes))
                else:
                    outs = [_run_pe(x, layer, in_scale, a) for a in pes]
                # barrier: the next layer sees the concatenated activations
                x = np.concatenate(outs)
            logits[t] = net.host_output(x)
    finally:
        if pool is not None:
            pool.shutdown()

    report = CostReport(cycles={phase: value * steps for phase, value in step_cycles.items()},
                        memory_bytes=memory, clock_hz=clock_hz, steps=steps)
    report.per_pe_cycles = per_pe_cycles
    report.apply_energy(pj_per_cycle)
    logger.info(f"Inference over {steps} frames on {placement.pe_count} PEs: "
                f"worst PE {max(per_pe_cycles.values()):.2f} cycles/step, "
                f"{report.energy_uj:.4f} uJ")
    return logits, report


def _calibrated_layer(x: np.ndarray, d: int, n: int, in_scale: float,
                      rng: np.random.Generator) -> Tuple[KwsLayer, np.ndarray]:
    w = rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, n))
    b = rng.normal(0.0, 0.1, size=(1, n))
    weights = quantize_stochastic(w, rng_seed=int(rng.integers(2 ** 31)))
    bias = quantize_stochastic(b, rng_seed=int(rng.integers(2 ** 31)))

    # Output scale from the largest ReLU activation over the calibration frames
    sizing = KwsLayer(weights, bias, 1.0)
    acc = x.astype(np.int64) @ weights.data.astype(np.int64) + sizing.bias_acc(in_scale)
    real = np.maximum(acc, 0) * (in_scale * weights.scale)
    layer = KwsLayer(weights, bias, default_scale(real))
    return layer, requantize_relu(acc, in_scale * weights.scale, layer.out_scale)


def build_random_network(seed: int = 7, dims: Sequence[int] = KWS_DIMS,
                         calibration_frames: int = 16) -> KwsNetwork:
    """
    Build a seeded random network with calibrated activation scales.

    Weights are drawn from N(0, 1/sqrt(D)) and quantized with stochastic
    rounding. Each layer's output scale maps the largest activation seen on
    random calibration frames onto 127.

    Args:
        seed: Seed of weights, biases and calibration frames
        dims: Layer widths, input first and host output last
        calibration_frames: Number of random frames used for scale calibration

    Returns:
        KwsNetwork
    """
    if len(dims) < 3:
        raise ValueError(f"dims needs an input, at least one hidden layer and an output, got {dims}")
    rng = np.random.default_rng(seed)
    x = rng.integers(-128, 128, size=(calibration_frames, dims[0])).astype(np.int8)

    layers = []
    in_scale = INPUT_SCALE
    for d, n in zip(dims[:-2], dims[1:-1]):
        layer, x = _calibrated_layer(x, d, n, in_scale, rng)
        layers.append(layer)
        in_scale = layer.out_scale

    output_weights = rng.normal(0.0, 1.0 / math.sqrt(dims[-2]), size=(dims[-2], dims[-1]))
    output_bias = rng.normal(0.0, 0.1, size=dims[-1])

    net = KwsNetwork(layers, INPUT_SCALE, output_weights, output_bias)
    logger.debug(f"Built random network {net.dims} with seed {seed}")
    return net


def random_frames(seed: int, d: int = KWS_DIMS[0], steps: int = KWS_STEPS_PER_INFERENCE) -> np.ndarray:
    """Seeded int8 input frames, shape (steps, d)."""
    return np.random.default_rng(seed).integers(-128, 128, size=(steps, d)).astype(np.int8)


def _scale_record(scale: float) -> QuantMatrix:
    return QuantMatrix(np.ones((1, 1), dtype=np.int8), scale)


def save_network(path: Union[str, Path], net: KwsNetwork) -> None:
    """
    Write a network bundle.

    Layout: QM01 input scale (1x1), then QM01 weights, bias and output
    scale (1x1) for each hidden layer, then the host output weights and
    output bias (1 x outputs) as RF64 records.
    """
    records = [_scale_record(net.input_scale)]
    for layer in net.layers:
        records += [layer.weights, layer.bias, _scale_record(layer.out_scale)]
    write_records(path, records, [net.output_weights, net.output_bias.reshape(1, -1)])
    logger.info(f"Saved network {net.dims} to {path}")


def load_network(path: Union[str, Path]) -> KwsNetwork:
    """
    Read a network bundle written by save_network.

    Raises:
        FormatError: If the record sequence does not describe a network
    """
    records = read_records(path, allow_real=True)
    quantized = [r for r in records if isinstance(r, QuantMatrix)]
    real = records[len(quantized):]
    if (len(real) != 2 or any(isinstance(r, QuantMatrix) for r in real)
            or len(quantized) < 4 or (len(quantized) - 1) % 3 != 0):
        raise FormatError(f"{path}: {len(quantized)} QM01 and {len(real)} RF64 records "
                          f"do not form a network bundle")

    def scale_of(qm: QuantMatrix) -> float:
        if qm.shape != (1, 1) or qm.data[0, 0] != 1:
            raise FormatError(f"{path}: expected a 1x1 scale record, got {qm}")
        return qm.scale

    input_scale = scale_of(quantized[0])
    layers = []
    body = quantized[1:]
    try:
        for i in range(0, len(body), 3):
            layers.append(KwsLayer(body[i], body[i + 1], scale_of(body[i + 2])))
        output_bias = real[1]
        if output_bias.shape[0] != 1:
            raise ValueError(f"output bias record has shape {output_bias.shape}, expected one row")
        return KwsNetwork(layers, input_scale, real[0], output_bias[0])
    except ValueError as e:
        raise FormatError(f"{path}: inconsistent network bundle: {e}")


def save_frames(path: Union[str, Path], frames: np.ndarray, scale: float = INPUT_SCALE) -> None:
    """Write frames as one QM01 record of shape D x steps (one column per frame)."""
    write_records(path, [QuantMatrix(np.asarray(frames).T, scale)])


def load_frames(path: Union[str, Path], d: int = KWS_DIMS[0],
                steps: int = KWS_STEPS_PER_INFERENCE) -> np.ndarray:
    """
    Read input frames from a QM01 file.

    Accepts D x steps (one column per frame) or steps x D records.

    Returns:
        int8 frames of shape (steps, d)
    """
    qm = read_records(path)[0]
    if qm.shape == (d, steps):
        return qm.data.T.copy()
    if qm.shape == (steps, d):
        return qm.data.copy()
    raise FormatError(f"{path}: frame record has shape {qm.shape}, expected ({d}, {steps})")
