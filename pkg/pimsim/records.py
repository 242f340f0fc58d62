"""
Fixed-width record layouts shared by host and DPU code.

All lanes are 64-bit little-endian so every record is 8-byte aligned in
both memory spaces.
"""

import numpy as np

# Reserved empty-slot key of scratchpad hash tables; generators never emit it.
EMPTY_KEY = np.iinfo(np.int64).min

KV_DTYPE = np.dtype([('key', '<i8'), ('value', '<u8')])
"""Key plus row index, 16 bytes."""

PAIR_DTYPE = np.dtype([('inner', '<i8'), ('outer', '<i8')])
"""Join result: inner row index, outer row index."""

LANE_DTYPE = np.dtype('<i8')


def record_dtype(payload_lanes: int) -> np.dtype:
    """A key lane followed by payload_lanes signed 64-bit lanes."""
    return np.dtype([('key', '<i8')] + [(f'p{i}', '<i8') for i in range(payload_lanes)])


def payload_matrix(records: np.ndarray) -> np.ndarray:
    """View the payload lanes of a record array as an (n, lanes) int64 matrix."""
    width = records.dtype.itemsize // 8
    return records.view('<i8').reshape(-1, width)[:, 1:]


def kv_records(keys, values) -> np.ndarray:
    out = np.empty(len(keys), dtype=KV_DTYPE)
    out['key'] = keys
    out['value'] = values
    return out
