"""Binary field snapshots and state directories.

One snapshot file holds one field (scalar, vector or packed symmetric
matrix) over all time samples:

    magic   "BCIF"            4 bytes
    version u32 (= 1)
    dim     u32 (= 3)
    n1 n2 n3 u32 x 3          samples per axis
    n_time  u32
    kind    u32               0 scalar, 1 vector, 2 sym-matrix
    data    float64 little-endian, row-major with x1 fastest,
            time-major blocks (components within a block)

A state directory holds the five field files plus a flat key=value
``state.txt`` with the scalar metadata.  Round trips are bit-exact.
"""

from __future__ import annotations

import os
import warnings

import numpy as np

from bcif.grid import Grid, GridSpec
from bcif.profiles import ClosedForm1D, EnergyProfile, HeatSource, TrigPoly1D
from bcif.scheme import ReynoldsState
from bcif.series import FieldSeries
from bcif.timeops import TimeGrid

__all__ = [
    "SnapshotFormatError",
    "write_field",
    "read_field",
    "save_state",
    "load_state",
    "KIND_SCALAR",
    "KIND_VECTOR",
    "KIND_SYM_MATRIX",
]

MAGIC = b"BCIF"
VERSION = 1
KIND_SCALAR, KIND_VECTOR, KIND_SYM_MATRIX = 0, 1, 2
_NCOMP = {KIND_SCALAR: 1, KIND_VECTOR: 3, KIND_SYM_MATRIX: 6}


class SnapshotFormatError(ValueError):
    pass


def _header(n: int, n_time: int, kind: int) -> bytes:
    head = np.array([VERSION, 3, n, n, n, n_time, kind], dtype="<u4")
    return MAGIC + head.tobytes()


def write_field(path, series: FieldSeries, kind: int):
    n_time = series.n_time
    shape = series.slice_shape
    n = shape[-1]
    ncomp = _NCOMP[kind]
    if (ncomp == 1 and len(shape) != 3) or (ncomp > 1 and shape[0] != ncomp):
        raise SnapshotFormatError("series shape %s does not match kind %d" % (shape, kind))
    with open(path, "wb") as fh:
        fh.write(_header(n, n_time, kind))
        for j in range(n_time):
            arr = series.get(j)
            comps = arr[None] if ncomp == 1 else arr
            for c in range(ncomp):
                # on disk x1 varies fastest
                fh.write(np.ascontiguousarray(comps[c].transpose(2, 1, 0), dtype="<f8").tobytes())


def read_field(path):
    """Returns (kind, FieldSeries)."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise SnapshotFormatError("bad magic %r in %s" % (magic, path))
        head = np.frombuffer(fh.read(7 * 4), dtype="<u4")
        version, dim, n1, n2, n3, n_time, kind = (int(x) for x in head)
        if version > VERSION:
            warnings.warn(
                "snapshot version %d is newer than supported %d; attempting to read"
                % (version, VERSION)
            )
        if dim != 3 or not (n1 == n2 == n3):
            raise SnapshotFormatError("unsupported geometry in %s" % path)
        if kind not in _NCOMP:
            raise SnapshotFormatError("unknown field kind %d" % kind)
        ncomp = _NCOMP[kind]
        n = n1
        shape = (n, n, n) if ncomp == 1 else (ncomp, n, n, n)
        series = FieldSeries(n_time, shape)
        count = n * n * n
        for j in range(n_time):
            comps = []
            for _ in range(ncomp):
                flat = np.frombuffer(fh.read(count * 8), dtype="<f8")
                if flat.size != count:
                    raise SnapshotFormatError("truncated snapshot %s" % path)
                comps.append(flat.reshape(n, n, n).transpose(2, 1, 0))
            series.set(j, comps[0] if ncomp == 1 else np.stack(comps))
    return kind, series


def _form_to_kv(prefix: str, form: ClosedForm1D) -> dict:
    return {
        prefix + "_poly": ",".join("%.17g" % c for c in form.poly),
        prefix + "_cos": "%.17g" % form.cos_amp,
        prefix + "_sin": "%.17g" % form.sin_amp,
        prefix + "_freq": "%d" % form.freq,
    }


def _form_from_kv(prefix: str, kv: dict) -> ClosedForm1D:
    return ClosedForm1D(
        poly=tuple(float(x) for x in kv[prefix + "_poly"].split(",")),
        cos_amp=float(kv[prefix + "_cos"]),
        sin_amp=float(kv[prefix + "_sin"]),
        freq=int(kv[prefix + "_freq"]),
    )


def _trig_to_kv(prefix: str, poly: TrigPoly1D) -> dict:
    return {
        prefix + "_mean": "%.17g" % poly.mean,
        prefix + "_coscoef": ",".join("%.17g" % c for c in poly.cos_coeffs) or "-",
        prefix + "_sincoef": ",".join("%.17g" % c for c in poly.sin_coeffs) or "-",
    }


def _trig_from_kv(prefix: str, kv: dict) -> TrigPoly1D:
    def parse(s):
        return () if s == "-" else tuple(float(x) for x in s.split(","))

    return TrigPoly1D(
        mean=float(kv[prefix + "_mean"]),
        cos_coeffs=parse(kv[prefix + "_coscoef"]),
        sin_coeffs=parse(kv[prefix + "_sincoef"]),
    )


def save_state(dirpath, state: ReynoldsState):
    os.makedirs(dirpath, exist_ok=True)
    write_field(os.path.join(dirpath, "v.bcif"), state.v, KIND_VECTOR)
    write_field(os.path.join(dirpath, "p.bcif"), state.p, KIND_SCALAR)
    write_field(os.path.join(dirpath, "theta.bcif"), state.theta, KIND_SCALAR)
    write_field(os.path.join(dirpath, "R.bcif"), state.R, KIND_SYM_MATRIX)
    write_field(os.path.join(dirpath, "f.bcif"), state.f, KIND_VECTOR)
    kv = {
        "delta": "%.17g" % state.delta,
        "mode": state.mode,
        "stage_position": "%d" % state.stage_position,
        "n_per_axis": "%d" % state.grid.n,
        "padding_factor": "%.17g" % state.grid.spec.padding_factor,
        "n_time": "%d" % state.tgrid.n_time,
    }
    if state.energy is not None:
        kv.update(_form_to_kv("energy", state.energy.form))
    if state.heat is not None:
        kv.update(_form_to_kv("heat_a", state.heat.a))
        kv.update(_trig_to_kv("heat_b", state.heat.b))
    with open(os.path.join(dirpath, "state.txt"), "w") as fh:
        for k in sorted(kv):
            fh.write("%s=%s\n" % (k, kv[k]))


def load_state(dirpath, workers: int = 1) -> ReynoldsState:
    kv = {}
    with open(os.path.join(dirpath, "state.txt")) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            k, _, v = line.partition("=")
            kv[k] = v
    grid = Grid(
        GridSpec(
            n_per_axis=int(kv["n_per_axis"]),
            padding_factor=float(kv["padding_factor"]),
        ),
        workers=workers,
    )
    tgrid = TimeGrid(int(kv["n_time"]))
    fields = {}
    for name, want in (
        ("v", KIND_VECTOR),
        ("p", KIND_SCALAR),
        ("theta", KIND_SCALAR),
        ("R", KIND_SYM_MATRIX),
        ("f", KIND_VECTOR),
    ):
        kind, series = read_field(os.path.join(dirpath, name + ".bcif"))
        if kind != want or series.n_time != tgrid.n_time:
            raise SnapshotFormatError("field %s has wrong kind or sampling" % name)
        fields[name] = series
    energy = None
    if "energy_poly" in kv:
        energy = EnergyProfile(_form_from_kv("energy", kv))
    heat = None
    if "heat_a_poly" in kv:
        heat = HeatSource(a=_form_from_kv("heat_a", kv), b=_trig_from_kv("heat_b", kv))
    return ReynoldsState(
        grid=grid,
        tgrid=tgrid,
        delta=float(kv["delta"]),
        mode=kv["mode"],
        heat=heat,
        energy=energy,
        stage_position=int(kv["stage_position"]),
        **fields,
    )
