"""Time-indexed field storage, RAM- or disk-backed.

States on large grids do not fit in memory on small machines (a single
128^3 scalar over 9 time samples is ~150 MB, a full state fourteen times
that), so a FieldSeries transparently spills slices to a temporary
directory and keeps a small LRU window in RAM.  Slices are float64 arrays;
round-tripping through ``np.save`` is bit-exact.
"""

from __future__ import annotations

import os
import shutil
import tempfile
import weakref
from collections import OrderedDict

import numpy as np

__all__ = ["FieldSeries", "series_like", "AUTO_DISK_BYTES"]

# series larger than this go to disk (per series, total bytes)
AUTO_DISK_BYTES = int(os.environ.get("BCIF_SERIES_RAM_LIMIT", 200 * 1024**2))
_LRU_SLOTS = 4


class FieldSeries:
    """A sequence of equal-shaped arrays indexed by time sample."""

    def __init__(self, n_time: int, slice_shape, backing: str = "auto"):
        self.n_time = n_time
        self.slice_shape = tuple(slice_shape)
        nbytes = n_time * int(np.prod(self.slice_shape)) * 8
        if backing == "auto":
            backing = "disk" if nbytes > AUTO_DISK_BYTES else "ram"
        self.backing = backing
        self._ram: list = [None] * n_time
        self._dir = None
        self._lru: OrderedDict[int, np.ndarray] = OrderedDict()
        if backing == "disk":
            self._dir = tempfile.mkdtemp(prefix="bcif_series_")
            self._finalizer = weakref.finalize(self, shutil.rmtree, self._dir, True)

    def _path(self, j):
        return os.path.join(self._dir, "%04d.npy" % j)

    def set(self, j: int, arr: np.ndarray):
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        if arr.shape != self.slice_shape:
            raise ValueError("slice shape %s != %s" % (arr.shape, self.slice_shape))
        if self.backing == "ram":
            self._ram[j] = arr
        else:
            np.save(self._path(j), arr)
            self._lru[j] = arr
            self._lru.move_to_end(j)
            while len(self._lru) > _LRU_SLOTS:
                self._lru.popitem(last=False)

    def get(self, j: int) -> np.ndarray:
        if self.backing == "ram":
            if self._ram[j] is None:
                raise KeyError("slice %d not set" % j)
            return self._ram[j]
        if j in self._lru:
            self._lru.move_to_end(j)
            return self._lru[j]
        arr = np.load(self._path(j))
        self._lru[j] = arr
        while len(self._lru) > _LRU_SLOTS:
            self._lru.popitem(last=False)
        return arr

    def __len__(self):
        return self.n_time

    @classmethod
    def from_function(cls, n_time, slice_shape, fn, backing="auto"):
        out = cls(n_time, slice_shape, backing=backing)
        for j in range(n_time):
            out.set(j, fn(j))
        return out

    @classmethod
    def zeros(cls, n_time, slice_shape, backing="auto"):
        # a zero series is never worth spilling
        out = cls(n_time, slice_shape, backing="ram")
        z = np.zeros(slice_shape)
        for j in range(n_time):
            out._ram[j] = z
        return out

    def is_zero(self) -> bool:
        """Cheap exact-zero test used to skip whole branches of the
        construction (zero flux means no temperature waves, etc.)."""
        if self.backing == "ram":
            return all(a is not None and not a.any() for a in self._ram)
        return all(not self.get(j).any() for j in range(self.n_time))


def series_like(series: FieldSeries, slice_shape=None) -> FieldSeries:
    return FieldSeries(series.n_time, slice_shape or series.slice_shape, backing=series.backing)
