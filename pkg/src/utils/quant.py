"""
Quantization helpers for the MAC array operands.

Weights are stored as symmetric per-matrix int8 (zero point 0) produced with
stochastic rounding; activations are requantized with round-half-even and
saturation. Decoder weights of the adaptive benchmark are 16 bit floats.

QM01 file layout (little endian):
    4 bytes   magic b"QM01"
    u32       rows
    u32       cols
    f64       scale
    rows*cols int8 payload, row major
A file may hold several records back to back. Real-valued matrices that are
never quantized use RF64 records in the same stream:
    4 bytes   magic b"RF64"
    u32       rows
    u32       cols
    rows*cols f64 payload, row major
"""

import logging
import struct
from pathlib import Path
from typing import BinaryIO, List, Optional, Sequence, Union

import numpy as np

from src.utils.errors import InvalidScale, FormatError

logger = logging.getLogger(__name__)

QM01_MAGIC = b"QM01"
QM01_HEADER = struct.Struct("<4sIId")
RF64_MAGIC = b"RF64"
RF64_HEADER = struct.Struct("<4sII")

INT8_MIN = -128
INT8_MAX = 127


def require_int8(values: np.ndarray, what: str) -> np.ndarray:
    """
    Return values as int8, refusing anything that would change in the cast.

    Float arrays are accepted only when every entry is a whole number.

    Raises:
        ValueError: On non-integral, non-finite or out-of-range entries
    """
    values = np.asarray(values)
    if values.dtype.kind not in "iu":
        if values.dtype.kind != "f":
            raise ValueError(f"{what} entries must be integers, got dtype {values.dtype}")
        if values.size and not np.all(np.isfinite(values) & (values == np.trunc(values))):
            raise ValueError(f"{what} entries must be whole numbers; quantize real values first")
    if values.size and (values.min() < INT8_MIN or values.max() > INT8_MAX):
        raise ValueError(f"{what} entries must lie in [-128, 127]")
    return values.astype(np.int8)


class QuantMatrix:
    """Row-major int8 matrix with a positive per-matrix scale (real = scale * int)."""

    zero_point = 0

    def __init__(self, data: np.ndarray, scale: float):
        """
        Initialize a quantized matrix.

        Args:
            data: Integer array of shape (rows, cols); 1-D input becomes one row
            scale: Positive real scale

        Raises:
            ValueError: If an entry is not an integer in [-128, 127]
            InvalidScale: If scale is not strictly positive and finite
        """
        data = np.asarray(data)
        if data.ndim == 1:
            data = data.reshape(1, -1)
        if data.ndim != 2:
            raise ValueError(f"QuantMatrix expects a 2-D array, got shape {data.shape}")
        data = require_int8(data, "QuantMatrix")
        if not np.isfinite(scale) or scale <= 0:
            raise InvalidScale(f"scale must be positive, got {scale}")
        self.data = np.ascontiguousarray(data, dtype=np.int8)
        self.scale = float(scale)

    @property
    def shape(self):
        return self.data.shape

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    def to_real(self) -> np.ndarray:
        """Return the dequantized matrix as float64."""
        return self.data.astype(np.float64) * self.scale

    def column_slice(self, start: int, stop: int) -> 'QuantMatrix':
        """Return the columns [start, stop) as a new matrix with the same scale."""
        return QuantMatrix(self.data[:, start:stop], self.scale)

    def nbytes(self) -> int:
        """Payload size in bytes (one byte per entry)."""
        return int(self.data.size)

    def __eq__(self, other):
        if not isinstance(other, QuantMatrix):
            return NotImplemented
        return self.scale == other.scale and np.array_equal(self.data, other.data)

    def __repr__(self):
        return f"QuantMatrix(shape={self.shape}, scale={self.scale:.6g})"


def default_scale(m: np.ndarray) -> float:
    """
    Symmetric scale mapping the largest magnitude onto 127.

    Args:
        m: Real-valued array

    Returns:
        max_abs(m) / 127, or 1.0 for an all-zero array
    """
    max_abs = float(np.max(np.abs(m))) if np.size(m) else 0.0
    return max_abs / INT8_MAX if max_abs > 0 else 1.0


def _check_scale(scale: float) -> None:
    if not np.isfinite(scale) or scale <= 0:
        raise InvalidScale(f"scale must be positive, got {scale}")


def quantize_stochastic(m: np.ndarray, scale: Optional[float] = None, rng_seed: int = 0) -> QuantMatrix:
    """
    Quantize a real matrix to int8 with stochastic rounding.

    Each value v = x / scale rounds down with probability 1 - frac(v) and up
    with probability frac(v), so the expectation equals v for in-range values.
    Results outside the int8 range saturate.

    Args:
        m: Real matrix (1-D input is treated as one row)
        scale: Positive scale; default_scale(m) when None
        rng_seed: Seed of the rounding noise

    Returns:
        QuantMatrix with the given scale

    Raises:
        InvalidScale: If scale <= 0
    """
    m = np.asarray(m, dtype=np.float64)
    if scale is None:
        scale = default_scale(m)
    _check_scale(scale)

    rng = np.random.default_rng(rng_seed)
    scaled = m / scale
    lower = np.floor(scaled)
    frac = scaled - lower
    rounded = lower + (rng.random(scaled.shape) < frac)
    q = np.clip(rounded, INT8_MIN, INT8_MAX).astype(np.int8)
    return QuantMatrix(q, scale)


def quantize_nearest(x: np.ndarray, scale: float) -> np.ndarray:
    """
    Round-half-even int8 conversion with saturation.

    Args:
        x: Real values
        scale: Positive scale

    Returns:
        int8 array of the same shape
    """
    _check_scale(scale)
    return np.clip(np.rint(np.asarray(x, dtype=np.float64) / scale), INT8_MIN, INT8_MAX).astype(np.int8)


def requantize_relu(acc: np.ndarray, in_scale: float, out_scale: float) -> np.ndarray:
    """
    Apply ReLU to accumulator values and requantize them to the int8 output scale.

    out[j] = clamp(round_half_even(max(acc[j], 0) * in_scale / out_scale), 0, 127)

    Args:
        acc: 32-bit accumulator values
        in_scale: Real value of one accumulator unit
        out_scale: Real value of one output unit

    Returns:
        int8 activations in [0, 127]
    """
    _check_scale(in_scale)
    _check_scale(out_scale)
    relu = np.maximum(np.asarray(acc, dtype=np.int64), 0).astype(np.float64)
    return np.clip(np.rint(relu * (in_scale / out_scale)), 0, INT8_MAX).astype(np.int8)


def to_fixed16(values: np.ndarray) -> np.ndarray:
    """
    Round values to IEEE half precision for decoder storage.

    Args:
        values: Real values

    Returns:
        float16 array

    Raises:
        ValueError: If any value is NaN or becomes infinite in half precision
    """
    with np.errstate(over='ignore'):
        rounded = np.asarray(values).astype(np.float16)
    if not np.all(np.isfinite(rounded)):
        raise ValueError("decoder weights must stay finite in 16 bit floating point")
    return rounded


def write_matrix(stream: BinaryIO, qm: QuantMatrix) -> None:
    """Append one QM01 record to an open binary stream."""
    stream.write(QM01_HEADER.pack(QM01_MAGIC, qm.rows, qm.cols, qm.scale))
    stream.write(qm.data.tobytes(order='C'))


def write_real(stream: BinaryIO, m: np.ndarray) -> None:
    """Append one RF64 record (float64 matrix, row major) to an open binary stream."""
    m = np.atleast_2d(np.asarray(m, dtype=np.float64))
    if m.ndim != 2:
        raise ValueError(f"RF64 records hold 2-D matrices, got shape {m.shape}")
    stream.write(RF64_HEADER.pack(RF64_MAGIC, m.shape[0], m.shape[1]))
    stream.write(m.astype('<f8').tobytes(order='C'))


def _read_exact(stream: BinaryIO, size: int, what: str) -> bytes:
    data = stream.read(size)
    if len(data) != size:
        raise FormatError(f"truncated {what}: expected {size} bytes, got {len(data)}")
    return data


def read_record(stream: BinaryIO) -> Optional[Union[QuantMatrix, np.ndarray]]:
    """
    Read one QM01 or RF64 record from an open binary stream.

    Returns:
        A QuantMatrix for QM01, a float64 array for RF64, or None at end of stream

    Raises:
        FormatError: On a bad magic number or a truncated record
    """
    magic = stream.read(4)
    if not magic:
        return None
    if len(magic) < 4:
        raise FormatError("truncated record header")

    if magic == QM01_MAGIC:
        rest = _read_exact(stream, QM01_HEADER.size - 4, "QM01 header")
        _, rows, cols, scale = QM01_HEADER.unpack(magic + rest)
        payload = _read_exact(stream, rows * cols, "QM01 payload")
        data = np.frombuffer(payload, dtype=np.int8).reshape(rows, cols).copy()
        try:
            return QuantMatrix(data, scale)
        except InvalidScale as e:
            raise FormatError(f"QM01 record has invalid scale: {e}")

    if magic == RF64_MAGIC:
        rest = _read_exact(stream, RF64_HEADER.size - 4, "RF64 header")
        _, rows, cols = RF64_HEADER.unpack(magic + rest)
        payload = _read_exact(stream, 8 * rows * cols, "RF64 payload")
        m = np.frombuffer(payload, dtype='<f8').reshape(rows, cols).astype(np.float64)
        if not np.all(np.isfinite(m)):
            raise FormatError("RF64 record holds non-finite values")
        return m

    raise FormatError(f"bad magic {magic!r}, expected {QM01_MAGIC!r} or {RF64_MAGIC!r}")


def read_matrix(stream: BinaryIO) -> Optional[QuantMatrix]:
    """
    Read one QM01 record from an open binary stream.

    Returns:
        The matrix, or None at end of stream

    Raises:
        FormatError: On a bad magic number, a truncated payload or an RF64 record
    """
    record = read_record(stream)
    if isinstance(record, np.ndarray):
        raise FormatError("expected a QM01 record, found RF64")
    return record


def write_records(path: Union[str, Path], records: List[QuantMatrix],
                  real_records: Sequence[np.ndarray] = ()) -> None:
    """Write QM01 records, then any RF64 records, to a file."""
    with open(path, 'wb') as f:
        for qm in records:
            write_matrix(f, qm)
        for m in real_records:
            write_real(f, m)
    logger.debug(f"Wrote {len(records)} QM01 and {len(real_records)} RF64 records to {path}")


def read_records(path: Union[str, Path], allow_real: bool = False) -> List[Union[QuantMatrix, np.ndarray]]:
    """
    Read every record in a file.

    Args:
        path: File to read
        allow_real: Accept RF64 records; otherwise only QM01 records are valid

    Raises:
        FormatError: On an empty file, a malformed record or an unexpected RF64 record
    """
    records = []
    with open(path, 'rb') as f:
        while True:
            record = read_record(f)
            if record is None:
                break
            if isinstance(record, np.ndarray) and not allow_real:
                raise FormatError(f"{path}: unexpected RF64 record")
            records.append(record)
    if not records:
        raise FormatError(f"{path} contains no records")
    return records
