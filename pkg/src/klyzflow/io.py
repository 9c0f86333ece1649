"""Run directory layout, snapshots and plot data.

::

    <run>/config.yaml          normalized config
    <run>/series.jsonl         one JSON object per line (samples, audits, monitor rows, termination)
    <run>/snapshots/NNNNN.bin  raw little-endian float64 arrays
    <run>/snapshots/NNNNN.json sidecar: field names, shapes, offsets, time, grid
    <run>/plot/*.csv           plot-ready tables
"""
from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from .flow import FlowState
from .grid import Grid

SNAPSHOT_FIELDS = ("background", "background_alpha", "phi", "f", "g_coeff", "alpha_coeff", "log_omega")


class MissingRun(FileNotFoundError):
    pass


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return v
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def json_line(obj: dict) -> str:
    return json.dumps(_clean(obj), sort_keys=True, allow_nan=False)


class JsonlWriter:
    def __init__(self, path: Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "w")

    def write(self, obj: dict) -> None:
        self._fh.write(json_line(obj) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_jsonl(path: Path) -> list[dict]:
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return rows


def write_snapshot(directory: Path, index: int, state: FlowState) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for name in SNAPSHOT_FIELDS:
        arr = getattr(state, name)
        if arr is None:
            continue
        arr = np.asarray(arr)
        is_complex = np.iscomplexobj(arr)
        data = np.stack([arr.real, arr.imag], axis=-1) if is_complex else arr
        data = np.ascontiguousarray(data, dtype="<f8")
        chunks.append(data.tobytes())
        entries.append({"name": name, "shape": list(arr.shape), "complex": is_complex, "offset": offset})
        offset += data.nbytes
    stem = f"{index:05d}"
    (directory / f"{stem}.bin").write_bytes(b"".join(chunks))
    meta = {
        "t": state.t,
        "grid": state.grid.to_dict(),
        "dtype": "float64",
        "endianness": "little",
        "fields": entries,
        "gauge": list(state.gauge),
    }
    (directory / f"{stem}.json").write_text(json_line(meta) + "\n")


def read_snapshot(directory: Path, index: int) -> FlowState:
    directory = Path(directory)
    stem = f"{index:05d}"
    meta = json.loads((directory / f"{stem}.json").read_text())
    raw = (directory / f"{stem}.bin").read_bytes()
    grid = Grid.from_dict(meta["grid"])
    values = {}
    for e in meta["fields"]:
        shape = tuple(e["shape"])
        count = int(np.prod(shape)) * (2 if e["complex"] else 1)
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=e["offset"])
        if e["complex"]:
            arr = arr.reshape(shape + (2,))
            arr = arr[..., 0] + 1j * arr[..., 1]
        else:
            arr = arr.reshape(shape)
        values[e["name"]] = np.array(arr)
    return FlowState(grid=grid, t=float(meta["t"]), gauge=tuple(meta["gauge"]), **values)


def list_snapshots(directory: Path) -> list[int]:
    directory = Path(directory)
    if not directory.is_dir():
        return []
    return sorted(int(p.stem) for p in directory.glob("*.json"))


def load_samples(run_dir: Path) -> list[FlowState]:
    snap = Path(run_dir) / "snapshots"
    return [read_snapshot(snap, i) for i in list_snapshots(snap)]


def _fmt(v) -> str:
    if isinstance(v, str):
        return v
    if v is None:
        return ""
    return repr(float(v))


SERIES_COLUMNS = ("t", "sup_rm", "sup_ric", "sup_alpha", "sup_scalar", "area")
MONITOR_COLUMNS = (
    "t", "U", "U_check", "gronwall_margin", "integral_margin", "margin_a1",
    "lp_ball_integral", "lp_rhs_log", "normalized_lp",
)


def emit_plot_data(run_dir: Path) -> list[Path]:
    """Write plot/series.csv and plot/monitor.csv from the run's JSONL stream."""
    run_dir = Path(run_dir)
    stream = run_dir / "series.jsonl"
    if not stream.exists():
        raise MissingRun(f"no series.jsonl in {run_dir}")
    rows = read_jsonl(stream)
    out_dir = run_dir / "plot"
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for name, kind, cols in (("series", "sample", SERIES_COLUMNS), ("monitor", "monitor", MONITOR_COLUMNS)):
        path = out_dir / f"{name}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for r in rows:
                if r.get("kind") == kind:
                    w.writerow([_fmt(r.get(c)) for c in cols])
        written.append(path)
    return written

