"""Full-size embedding table with prefix masks and the BETS sparse file format.

A row's mask is stored as a single length ``d_n``: the first ``d_n``
coordinates are active and the rest are zero at lookup time. Stored values
beyond ``d_n`` are kept so the same table can be re-masked later.

BETS layout (little endian)::

    magic   4s   b"BETS"
    version u32  1
    rows    u32
    d_max   u32
    reserved u64 0
    row_sizes  rows x u32
    values     sum(row_sizes) x f32, row-major, retained prefix only
"""

import struct

import numpy as np

MAGIC = b"BETS"
VERSION = 1
HEADER = struct.Struct("<4sIIIQ")


class EmbeddingFormatError(ValueError):
    pass


class MaskedEmbeddingTable:
    def __init__(self, values, row_sizes=None):
        values = np.array(values, dtype=np.float64)
        if values.ndim != 2 or values.shape[1] < 1:
            raise ValueError("values must be a (rows, d_max) matrix with d_max >= 1")
        self.values = values
        self.d_max = values.shape[1]
        if row_sizes is None:
            self.row_sizes = np.full(values.shape[0], self.d_max, dtype=np.int64)
            self.has_action = False
        else:
            self.row_sizes = self._check_sizes(row_sizes)
            self.has_action = True

    @property
    def num_rows(self):
        return self.values.shape[0]

    @property
    def retained(self):
        """Number of active parameters, i.e. the entry count of the 0/1 mask."""
        return int(self.row_sizes.sum())

    @property
    def sparsity(self):
        return 1.0 - self.retained / (self.num_rows * self.d_max)

    def _check_sizes(self, sizes):
        sizes = np.asarray(sizes, dtype=np.int64).reshape(-1)
        if sizes.shape[0] != self.num_rows:
            raise ValueError(f"action covers {sizes.shape[0]} rows, table has {self.num_rows}")
        bad = np.flatnonzero((sizes < 1) | (sizes > self.d_max))
        if len(bad):
            n = int(bad[0])
            raise ValueError(f"row {n}: size {int(sizes[n])} outside [1, {self.d_max}]")
        return sizes.copy()

    def mask(self):
        return np.arange(self.d_max)[None, :] < self.row_sizes[:, None]

    def masked(self):
        return np.where(self.mask(), self.values, 0.0)

    def lookup(self, n):
        if not 0 <= n < self.num_rows:
            raise IndexError(f"row {n} out of range for {self.num_rows} rows")
        out = np.zeros(self.d_max)
        d = self.row_sizes[n]
        out[:d] = self.values[n, :d]
        return out

    def copy(self):
        new = MaskedEmbeddingTable(self.values.copy())
        new.row_sizes = self.row_sizes.copy()
        new.has_action = self.has_action
        return new


def init_table(num_rows, d_max, init_scale=0.1, seed=0):
    if d_max < 1:
        raise ValueError("d_max must be >= 1")
    rng = np.random.default_rng(seed)
    return MaskedEmbeddingTable(rng.uniform(-init_scale, init_scale, size=(num_rows, d_max)))


def apply_action(table, action):
    """Replace the table's row sizes with those of ``action``.

    ``action`` is a SizeAction (anything with ``.sizes``) or a plain size
    sequence ordered users first, then items.
    """
    sizes = getattr(action, "sizes", action)
    table.row_sizes = table._check_sizes(sizes)
    table.has_action = True


def export_sparse(table, path):
    if not table.has_action:
        raise EmbeddingFormatError("export requires an applied action")
    mask = table.mask()
    payload = np.ascontiguousarray(table.values[mask], dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, VERSION, table.num_rows, table.d_max, 0))
        fh.write(table.row_sizes.astype("<u4").tobytes())
        fh.write(payload.tobytes())


def import_sparse(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < HEADER.size:
        raise EmbeddingFormatError(f"{path}: truncated header")
    magic, version, rows, d_max, _ = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise EmbeddingFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise EmbeddingFormatError(f"{path}: unsupported version {version}")
    off = HEADER.size
    if len(data) < off + 4 * rows:
        raise EmbeddingFormatError(f"{path}: truncated row sizes")
    sizes = np.frombuffer(data, dtype="<u4", count=rows, offset=off).astype(np.int64)
    if rows and (sizes.min() < 1 or sizes.max() > d_max):
        raise EmbeddingFormatError(f"{path}: row size outside [1, {d_max}]")
    off += 4 * rows
    total = int(sizes.sum())
    if len(data) != off + 4 * total:
        raise EmbeddingFormatError(f"{path}: expected {total} values, file size mismatch")
    payload = np.frombuffer(data, dtype="<f4", count=total, offset=off)
    values = np.zeros((rows, d_max))
    table = MaskedEmbeddingTable(values, sizes)
    table.values[table.mask()] = payload
    return table
