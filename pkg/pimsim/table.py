"""
Column-store tables.

Every column is a fixed-width integer lane:

  int32    32-bit signed integer
  int64    64-bit signed integer
  decimal  fixed-point, stored as int64 hundredths (DECIMAL_SCALE)
  date     days since 1970-01-01, stored as int32

Tables persist in a little-endian binary file:

  magic        8 bytes  b'PIMCOL01'
  name         u16 length + UTF-8 bytes
  columns      u32
  per column   u16 length + UTF-8 name, u8 lane code, u64 row count
  payload      each column's values in header order, packed at lane width
"""

import csv
import datetime
import io
import os
import struct
from typing import Dict, Iterable, List, Optional

import numpy as np

from pimsim.errors import ConfigError, InvalidSizeError

MAGIC = b'PIMCOL01'
DECIMAL_SCALE = 100
EPOCH = datetime.date(1970, 1, 1)

LANES = {
    'int32': (0, '<i4'),
    'int64': (1, '<i8'),
    'decimal': (2, '<i8'),
    'date': (3, '<i4'),
}
_LANE_BY_CODE = {code: lane for lane, (code, _) in LANES.items()}


def date_code(value) -> int:
    """Days since 1970-01-01 for a date or an ISO 'YYYY-MM-DD' string."""
    if isinstance(value, str):
        value = datetime.date.fromisoformat(value)
    return (value - EPOCH).days


def code_date(days: int) -> str:
    return (EPOCH + datetime.timedelta(days=int(days))).isoformat()


class ColumnTable:
    """
    Named, ordered set of equal-length integer columns.

    Values are kept as int64 arrays in memory whatever the lane; the lane
    decides the stored width and how the CSV export renders the value.
    """

    def __init__(self, name: str, columns: Optional[Dict[str, Iterable]] = None,
                 lanes: Optional[Dict[str, str]] = None):
        self.name = name
        self._columns: Dict[str, np.ndarray] = {}
        self._lanes: Dict[str, str] = {}
        lanes = lanes or {}
        for col, values in (columns or {}).items():
            self.add_column(col, values, lanes.get(col, 'int64'))

    def add_column(self, name: str, values, lane: str = 'int64') -> None:
        if lane not in LANES:
            raise ConfigError(f"unknown lane {lane!r} for column {name}")
        values = np.asarray(values, dtype=np.int64).reshape(-1)
        if self._columns and len(values) != self.row_count:
            raise InvalidSizeError(
                f"{self.name}.{name} has {len(values)} rows, table has {self.row_count}")
        if lane in ('int32', 'date') and len(values) and (
                values.min() < np.iinfo(np.int32).min or values.max() > np.iinfo(np.int32).max):
            raise ConfigError(f"{self.name}.{name} does not fit a 32-bit lane")
        self._columns[name] = values
        self._lanes[name] = lane

    @property
    def row_count(self) -> int:
        return len(next(iter(self._columns.values()))) if self._columns else 0

    @property
    def column_names(self) -> List[str]:
        return list(self._columns)

    def lane(self, name: str) -> str:
        return self._lanes[name]

    def __contains__(self, name) -> bool:
        return name in self._columns

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self._columns[name]
        except KeyError:
            raise ConfigError(f"table {self.name} has no column {name!r}")

    def __len__(self):
        return self.row_count

    def __repr__(self):
        return f"<ColumnTable {self.name} {self.row_count} rows x {len(self._columns)} columns>"

    @property
    def nbytes(self) -> int:
        return sum(self.row_count * np.dtype(LANES[lane][1]).itemsize for lane in self._lanes.values())

    def take(self, rows, name: Optional[str] = None) -> 'ColumnTable':
        rows = np.asarray(rows, dtype=np.int64)
        return ColumnTable(name or self.name, {c: v[rows] for c, v in self._columns.items()}, dict(self._lanes))

    def select_columns(self, names, name: Optional[str] = None) -> 'ColumnTable':
        return ColumnTable(name or self.name, {c: self[c] for c in names}, {c: self._lanes[c] for c in names})

    def sort_by(self, keys, descending=()) -> 'ColumnTable':
        """Stable sort by the given columns, first key most significant."""
        if not self.row_count:
            return self.take([])
        order = np.lexsort([(-self[k] if k in descending else self[k]) for k in reversed(list(keys))])
        return self.take(order)

    def head(self, n: int) -> 'ColumnTable':
        return self.take(np.arange(min(n, self.row_count)))

    def rows(self) -> List[tuple]:
        cols = [self._columns[c].tolist() for c in self._columns]
        return list(zip(*cols))

    # -- comparison ------------------------------------------------------------

    def first_difference(self, other: 'ColumnTable') -> Optional[str]:
        """None when both tables hold the same columns and rows in the same order."""
        if self.column_names != other.column_names:
            return f"columns {self.column_names} != {other.column_names}"
        if self.row_count != other.row_count:
            return f"{self.row_count} rows != {other.row_count} rows"
        for name in self.column_names:
            diff = np.flatnonzero(self[name] != other[name])
            if len(diff):
                i = int(diff[0])
                return f"row {i}: {dict(zip(self.column_names, self.rows()[i]))} != " \
                       f"{dict(zip(other.column_names, other.rows()[i]))}"
        return None

    def equals(self, other: 'ColumnTable') -> bool:
        return self.first_difference(other) is None

    # -- persistence -------------------------------------------------------------

    def save(self, path) -> None:
        with open(path, 'wb') as f:
            f.write(self.to_bytes())

    def to_bytes(self) -> bytes:
        out = io.BytesIO()
        name = self.name.encode('utf-8')
        out.write(MAGIC)
        out.write(struct.pack('<H', len(name)))
        out.write(name)
        out.write(struct.pack('<I', len(self._columns)))
        for col, lane in self._lanes.items():
            encoded = col.encode('utf-8')
            out.write(struct.pack('<H', len(encoded)))
            out.write(encoded)
            out.write(struct.pack('<BQ', LANES[lane][0], self.row_count))
        for col, lane in self._lanes.items():
            out.write(self._columns[col].astype(LANES[lane][1]).tobytes())
        return out.getvalue()

    @classmethod
    def load(cls, path) -> 'ColumnTable':
        with open(path, 'rb') as f:
            return cls.from_bytes(f.read())

    @classmethod
    def from_bytes(cls, data: bytes) -> 'ColumnTable':
        if data[:8] != MAGIC:
            raise ConfigError("not a column table file (bad magic)")
        try:
            pos = 8
            (length,) = struct.unpack_from('<H', data, pos)
            pos += 2
            name = data[pos:pos + length].decode('utf-8')
            pos += length
            (ncols,) = struct.unpack_from('<I', data, pos)
            pos += 4
            header = []
            for _ in range(ncols):
                (length,) = struct.unpack_from('<H', data, pos)
                pos += 2
                col = data[pos:pos + length].decode('utf-8')
                pos += length
                code, rows = struct.unpack_from('<BQ', data, pos)
                pos += 9
                header.append((col, _LANE_BY_CODE[code], rows))
            table = cls(name)
            for col, lane, rows in header:
                dtype = np.dtype(LANES[lane][1])
                values = np.frombuffer(data, dtype=dtype, count=rows, offset=pos) if rows else np.zeros(0, dtype)
                pos += rows * dtype.itemsize
                table.add_column(col, values, lane)
        except (struct.error, KeyError, ValueError) as exc:
            raise ConfigError(f"corrupt column table file: {exc}")
        return table

    def to_csv(self, target=None) -> str:
        """Render as CSV (dates ISO, decimals with two places); also written to target if given."""
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator='\n')
        writer.writerow(self.column_names)
        lanes = [self._lanes[c] for c in self.column_names]
        for row in self.rows():
            writer.writerow([_render(v, lane) for v, lane in zip(row, lanes)])
        text = buffer.getvalue()
        if target is not None:
            with open(target, 'w', newline='') as f:
                f.write(text)
        return text


def _render(value: int, lane: str) -> str:
    if lane == 'date':
        return code_date(value)
    if lane == 'decimal':
        sign = '-' if value < 0 else ''
        whole, frac = divmod(abs(int(value)), DECIMAL_SCALE)
        return f"{sign}{whole}.{frac:02d}"
    return str(int(value))


def save_tables(tables: Dict[str, ColumnTable], directory) -> List[str]:
    """Write one <name>.pimcol file per table; returns the paths."""
    os.makedirs(directory, exist_ok=True)
    paths = []
    for name, table in sorted(tables.items()):
        path = os.path.join(directory, f"{name}.pimcol")
        table.save(path)
        paths.append(path)
    return paths


def load_tables(directory) -> Dict[str, ColumnTable]:
    tables = {}
    for entry in sorted(os.listdir(directory)):
        if entry.endswith('.pimcol'):
            table = ColumnTable.load(os.path.join(directory, entry))
            tables[table.name] = table
    return tables
