"""Bit-string helpers. A bit string is a 1-D ``uint8`` array of 0/1 values,
most significant bit first."""
import numpy as np


def bits_needed(count):
    """Bits to index ``count`` distinct values, i.e. ceil(log2(count))."""
    if count < 1:
        raise ValueError("count must be >= 1")
    return int(count - 1).bit_length()


def uint_to_bits(values, width):
    values = np.atleast_1d(np.asarray(values, dtype=np.uint64))
    if width == 0:
        if np.any(values):
            raise ValueError("nonzero value in zero-width field")
        return np.zeros(0, dtype=np.uint8)
    if width < 64 and np.any(values >> np.uint64(width)):
        raise ValueError(f"value does not fit in {width} bits")
    shifts = np.arange(width - 1, -1, -1, dtype=np.uint64)
    return ((values[:, None] >> shifts[None, :]) & np.uint64(1)).astype(np.uint8).ravel()


def bits_to_uint(bits, width):
    bits = np.asarray(bits, dtype=np.uint64)
    if width == 0:
        return np.zeros(0, dtype=np.uint64)
    if bits.size % width:
        raise ValueError("bit count is not a multiple of the field width")
    fields = bits.reshape(-1, width)
    weights = np.uint64(1) << np.arange(width - 1, -1, -1, dtype=np.uint64)
    return (fields * weights[None, :]).sum(axis=1, dtype=np.uint64)


def float64_to_bits(x):
    """IEEE-754 big-endian bit pattern of each float64 value."""
    raw = np.asarray(x, dtype=">f8").tobytes()
    return np.unpackbits(np.frombuffer(raw, dtype=np.uint8))


def bits_to_float64(bits):
    bits = np.asarray(bits, dtype=np.uint8)
    if bits.size % 64:
        raise ValueError("bit count is not a multiple of 64")
    return np.frombuffer(np.packbits(bits).tobytes(), dtype=">f8").astype(np.float64)


def to_bytes(bits):
    """Pack to bytes, zero-padding the final byte."""
    return np.packbits(np.asarray(bits, dtype=np.uint8)).tobytes()


def from_bytes(data, n_bits=None):
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8))
    if n_bits is not None:
        if n_bits > bits.size:
            raise ValueError(f"need {n_bits} bits, have {bits.size}")
        bits = bits[:n_bits]
    return bits
