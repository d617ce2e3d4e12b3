"""Versioned delimited-text tables and frame archives.

Every text table starts with a ``# pulsepair <kind> v<N>`` line followed by a
CSV header row.  Floats are written with 17 significant digits and read with
round-trip parsing, so write -> read -> write is byte-identical.
"""

from __future__ import annotations

import hashlib
import io as _io
import zipfile
from pathlib import Path

import numpy as np
import pandas as pd

from .scenario import ElementSpectrum, WindowSpectra

TABLE_VERSION = 1
FRAMES_VERSION = 1


class SchemaError(ValueError):
    pass


def header_line(kind: str, version: int = TABLE_VERSION) -> str:
    return f"# pulsepair {kind} v{version}"


def write_table(path, data, kind: str) -> None:
    """Write a structured array or a list of dicts as a versioned CSV table."""
    if isinstance(data, np.ndarray):
        df = pd.DataFrame({name: data[name] for name in data.dtype.names})
    else:
        df = pd.DataFrame(list(data))
    buf = _io.StringIO()
    buf.write(header_line(kind) + "\n")
    df.to_csv(buf, index=False, float_format="%.17g", lineterminator="\n")
    Path(path).write_text(buf.getvalue())


def read_table_frame(path, kind: str | None = None) -> pd.DataFrame:
    with open(path) as fh:
        first = fh.readline().rstrip("\n")
        parts = first.split()
        if len(parts) != 4 or parts[:2] != ["#", "pulsepair"]:
            raise SchemaError(f"{path}: missing pulsepair header line")
        if kind is not None and parts[2] != kind:
            raise SchemaError(f"{path}: expected a {kind} table, found {parts[2]}")
        if parts[3] != f"v{TABLE_VERSION}":
            raise SchemaError(f"{path}: unsupported version {parts[3]}")
        return pd.read_csv(fh, float_precision="round_trip", keep_default_na=True)


def read_table(path, dtype: np.dtype, kind: str | None = None) -> np.ndarray:
    """Read a table written by :func:`write_table` into a structured array."""
    df = read_table_frame(path, kind)
    missing = [n for n in dtype.names if n not in df.columns]
    if missing:
        raise SchemaError(f"{path}: missing columns {missing}")
    out = np.empty(len(df), dtype)
    for name in dtype.names:
        out[name] = df[name].to_numpy()
    return out


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# --------------------------------------------------------------------------
# frames


def pack_windows(windows) -> dict:
    """Columnar arrays for a sequence of windows."""
    windows = list(windows)
    nw = len(windows)
    sizes = np.array([w.bins.size for w in windows], dtype=np.int64)
    ssz = np.array([w.east.seg_ids.size for w in windows], dtype=np.int64)
    cross = [(i, p, d) for i, w in enumerate(windows) for p, d in w.east.cross_terms]
    cat = lambda xs, dt: np.concatenate(xs).astype(dt) if xs else np.empty(0, dt)
    return {
        "version": np.array(FRAMES_VERSION),
        "frame": np.array([w.frame for w in windows], dtype=np.int64),
        "window": np.array([w.window_index for w in windows], dtype=np.int64),
        "mjd": np.array([w.mjd for w in windows], dtype=np.float64),
        "beam_ra_hr": np.array([w.beam_ra_hr for w in windows], dtype=np.float64),
        "dense": np.array([w.dense for w in windows], dtype=bool),
        "floor_east": np.array([np.nan if w.east.floor is None else w.east.floor for w in windows]),
        "floor_west": np.array([np.nan if w.west.floor is None else w.west.floor for w in windows]),
        "wide_east": np.array([w.east.wide_power for w in windows], dtype=np.float64),
        "wide_west": np.array([w.west.wide_power for w in windows], dtype=np.float64),
        "vis_noise": np.array([w.east.vis_noise for w in windows], dtype=np.complex128).reshape(nw),
        "n_bins": sizes,
        "bins": cat([w.bins for w in windows], np.int64),
        "east": cat([w.east.values for w in windows], np.complex128),
        "west": cat([w.west.values for w in windows], np.complex128),
        "n_segs": ssz,
        "seg_ids": cat([w.east.seg_ids for w in windows], np.int64),
        "seg_east": cat([w.east.seg_power for w in windows], np.float64),
        "seg_west": cat([w.west.seg_power for w in windows], np.float64),
        "cross_row": np.array([c[0] for c in cross], dtype=np.int64),
        "cross_power": np.array([c[1] for c in cross], dtype=np.float64),
        "cross_delay": np.array([c[2] for c in cross], dtype=np.float64),
    }


def unpack_windows(d) -> list:
    if int(d["version"]) != FRAMES_VERSION:
        raise SchemaError("unsupported frames version")
    nw = d["frame"].size
    bo = np.concatenate([[0], np.cumsum(d["n_bins"])])
    so = np.concatenate([[0], np.cumsum(d["n_segs"])])
    cross = {}
    for r, p, dl in zip(d["cross_row"], d["cross_power"], d["cross_delay"]):
        cross.setdefault(int(r), []).append((float(p), float(dl)))
    out = []
    for i in range(nw):
        bins = d["bins"][bo[i]:bo[i + 1]]
        seg = d["seg_ids"][so[i]:so[i + 1]]
        fe = None if np.isnan(d["floor_east"][i]) else float(d["floor_east"][i])
        fw = None if np.isnan(d["floor_west"][i]) else float(d["floor_west"][i])
        vn = complex(d["vis_noise"][i])
        ct = tuple(cross.get(i, ()))
        east = ElementSpectrum("east", bins, d["east"][bo[i]:bo[i + 1]], fe, float(d["wide_east"][i]), seg,
                               d["seg_east"][so[i]:so[i + 1]], vn, ct)
        west = ElementSpectrum("west", bins, d["west"][bo[i]:bo[i + 1]], fw, float(d["wide_west"][i]), seg,
                               d["seg_west"][so[i]:so[i + 1]], complex(np.conj(vn)), tuple((p, -dl) for p, dl in ct))
        out.append(WindowSpectra(int(d["frame"][i]), int(d["window"][i]), float(d["mjd"][i]),
                                 float(d["beam_ra_hr"][i]), east, west, bool(d["dense"][i])))
    return out


def save_frames(path, windows) -> None:
    """Write an ``.npz`` archive with fixed member timestamps (byte-reproducible)."""
    arrays = pack_windows(windows)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            buf = _io.BytesIO()
            np.lib.format.write_array(buf, np.asarray(arrays[name]), allow_pickle=False)
            zf.writestr(info, buf.getvalue())


def load_frames(path) -> list:
    with np.load(path) as d:
        return unpack_windows({k: d[k] for k in d.files})
