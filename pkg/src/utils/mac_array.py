"""
Functional model of the 4 x 16 int8 MAC array.

Operand A (the input vector) is fed 16 values per cycle and operand B (the
weight matrix) 4 values per cycle. A vector-matrix product D x N is cut into
tiles of at most 16 rows by 4 columns; each tile occupies the array for 16
feed cycles, one operand-A column per cycle. Partial tiles are zero padded:
padding adds nothing to the sums but costs full cycles.

Accumulators are held in 32-bit storage and must stay inside the 29-bit
signed range of the hardware.
"""

import logging
import math
from typing import List, Tuple

import numpy as np

from src.utils.quant import QuantMatrix, require_int8

logger = logging.getLogger(__name__)

ARRAY_ROWS = 16          # operand A values per cycle
ARRAY_COLS = 4           # operand B values per cycle
FEED_CYCLES_PER_TILE = 16
ACC_BITS = 29
ACC_MIN = -(1 << (ACC_BITS - 1))
ACC_MAX = (1 << (ACC_BITS - 1)) - 1


class MacJob:
    """A vector-matrix multiplication request for the MAC array."""

    def __init__(self, operand_a: np.ndarray, operand_b: QuantMatrix):
        """
        Initialize a job.

        Args:
            operand_a: Signed int8 input vector of length D
            operand_b: QuantMatrix of shape D x N

        Raises:
            ValueError: If the operand shapes disagree or a dimension is zero
        """
        operand_a = np.asarray(operand_a)
        if operand_a.ndim != 1:
            raise ValueError(f"operand A must be a vector, got shape {operand_a.shape}")
        operand_a = require_int8(operand_a, "operand A")
        d, n = operand_b.shape
        if operand_a.shape[0] != d:
            raise ValueError(f"operand A has length {operand_a.shape[0]}, operand B has {d} rows")
        if d < 1 or n < 1:
            raise ValueError(f"MAC job dimensions must be positive, got D={d}, N={n}")
        self.operand_a = operand_a
        self.operand_b = operand_b
        self.d = d
        self.n = n

    def __repr__(self):
        return f"MacJob(d={self.d}, n={self.n})"


class MacResult:
    """Accumulator outputs of a MAC job plus the array cycle count."""

    def __init__(self, acc: np.ndarray, tile_cycles: int):
        self.acc = acc
        self.tile_cycles = tile_cycles

    def __repr__(self):
        return f"MacResult(n={self.acc.shape[0]}, tile_cycles={self.tile_cycles})"


def tile_schedule(d: int, n: int) -> List[Tuple[range, range]]:
    """
    Partition the D x N index space into MAC array tiles.

    Tiles are at most 16 rows by 4 columns; the order is column block major,
    then row block.

    Args:
        d: Input dimension count
        n: Output dimension count

    Returns:
        List of (row_range, col_range) tiles
    """
    if d < 1 or n < 1:
        raise ValueError(f"tile_schedule needs positive dimensions, got d={d}, n={n}")
    tiles = []
    for col_start in range(0, n, ARRAY_COLS):
        cols = range(col_start, min(col_start + ARRAY_COLS, n))
        for row_start in range(0, d, ARRAY_ROWS):
            tiles.append((range(row_start, min(row_start + ARRAY_ROWS, d)), cols))
    return tiles


def tile_cycles(d: int, n: int) -> int:
    """Structural cycle count: ceil(N/4) * ceil(D/16) * 16."""
    return math.ceil(n / ARRAY_COLS) * math.ceil(d / ARRAY_ROWS) * FEED_CYCLES_PER_TILE


def mac_array_utilization(d: int, n: int) -> float:
    """Fraction of MAC slots doing useful work after zero padding."""
    row_blocks = math.ceil(d / ARRAY_ROWS)
    col_blocks = math.ceil(n / ARRAY_COLS)
    return (d * n) / (row_blocks * ARRAY_ROWS * col_blocks * ARRAY_COLS)


def mac_multiply(job: MacJob) -> MacResult:
    """
    Run a job on the MAC array.

    acc[j] = sum_i a[i] * B[i][j] in exact integer arithmetic. The running
    accumulator of every column block is checked after each row block, the
    way the hardware accumulates tile by tile.

    Args:
        job: The MAC job

    Returns:
        MacResult with int32 accumulators and the structural cycle count

    Raises:
        OverflowError: If an accumulator leaves the 29-bit signed range
    """
    d, n = job.d, job.n
    row_blocks = math.ceil(d / ARRAY_ROWS)
    col_blocks = math.ceil(n / ARRAY_COLS)

    # Zero-pad both operands to whole tiles
    a = np.zeros(row_blocks * ARRAY_ROWS, dtype=np.int64)
    a[:d] = job.operand_a
    b = np.zeros((row_blocks * ARRAY_ROWS, col_blocks * ARRAY_COLS), dtype=np.int64)
    b[:d, :n] = job.operand_b.data

    a_tiles = a.reshape(row_blocks, ARRAY_ROWS)
    b_tiles = b.reshape(row_blocks, ARRAY_ROWS, col_blocks, ARRAY_COLS)
    # partial[r, c, j]: contribution of row block r to column j of column block c
    partial = np.einsum('rk,rkcj->rcj', a_tiles, b_tiles)
    running = np.cumsum(partial, axis=0)

    if running.size and (running.min() < ACC_MIN or running.max() > ACC_MAX):
        worst = int(running.max()) if running.max() > ACC_MAX else int(running.min())
        raise OverflowError(
            f"MAC accumulator value {worst} exceeds the {ACC_BITS}-bit range "
            f"(D={d}, N={n}); the operand scaling is too large")

    acc = running[-1].reshape(-1)[:n].astype(np.int32)
    cycles = row_blocks * col_blocks * FEED_CYCLES_PER_TILE
    logger.debug(f"mac_multiply D={d} N={n}: {row_blocks * col_blocks} tiles, {cycles} cycles")
    return MacResult(acc, cycles)
