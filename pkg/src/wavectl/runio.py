"""Run-directory I/O: snapshots, slab archives, energy tables and manifests."""
from __future__ import annotations

import csv
import hashlib
import json
import os
from pathlib import Path

import numpy as np

SNAPSHOT_HEADER = "nx ny dx dt t field"


def write_snapshot(path, field_, dx, dt, t, name="u", binary=False):
    """Grid dump with a one-line ASCII header ``nx ny dx dt t field``.

    Text: nx lines of ny values (row i is x-index i).  Binary: the header
    line, then nx*ny little-endian float64 values in the same order.
    """
    a = np.asarray(field_, dtype=float)
    nx, ny = a.shape
    header = f"{nx} {ny} {dx:.17g} {dt:.17g} {t:.17g} {name}\n"
    if binary:
        with open(path, "wb") as fh:
            fh.write(header.encode("ascii"))
            fh.write(a.astype("<f8").tobytes(order="C"))
    else:
        with open(path, "w") as fh:
            fh.write(header)
            for row in a:
                fh.write(" ".join(f"{v:.17g}" for v in row))
                fh.write("\n")


def read_snapshot(path):
    """Returns (field, meta) for either snapshot flavour."""
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii").split()
        nx, ny = int(header[0]), int(header[1])
        meta = {"nx": nx, "ny": ny, "dx": float(header[2]), "dt": float(header[3]), "t": float(header[4]),
                "field": header[5]}
        rest = fh.read()
    if len(rest) == 8 * nx * ny:
        try:
            arr = np.frombuffer(rest, dtype="<f8").reshape(nx, ny)
            return arr.copy(), meta
        except ValueError:
            pass
    arr = np.loadtxt(rest.decode("ascii").splitlines(), ndmin=2)
    return arr.reshape(nx, ny), meta


def write_slabs(directory, history, grid):
    """Boundary slabs as slabs.npy (steps x nodes) with times.npy, nodes.npy and index.json."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    np.save(d / "slabs.npy", np.ascontiguousarray(history.slab_u))
    np.save(d / "times.npy", np.asarray(history.times))
    np.save(d / "nodes.npy", np.asarray(history.slab_nodes))
    nodes = np.asarray(history.slab_nodes)
    index = {
        "n_steps": int(history.slab_u.shape[0]), "n_nodes": int(nodes.size),
        "grid_shape": list(grid.shape), "dx": grid.h,
        "files": {"slabs": "slabs.npy", "times": "times.npy", "nodes": "nodes.npy"},
        "node_order": "flat index i*ny + j into the (nx, ny) grid",
    }
    with open(d / "index.json", "w") as fh:
        json.dump(index, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_energy_csv(path, rows):
    """rows: iterable of (step, t, potential, kinetic, energy, rel_drift)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "t", "potential", "kinetic", "energy", "rel_drift"])
        for step, t, p, k, e, r in rows:
            w.writerow([int(step), f"{t:.17g}", f"{p:.17g}", f"{k:.17g}", f"{e:.17g}", f"{r:.17g}"])


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(_jsonable(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.ndarray):
        return _jsonable(v.tolist())
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, float) and not np.isfinite(v):
        return None
    return v


def sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir, payload):
    """manifest.json listing every other file of the run directory with its sha256."""
    out = Path(out_dir)
    files = {}
    for root, _, names in os.walk(out):
        for n in names:
            p = Path(root) / n
            rel = p.relative_to(out).as_posix()
            if rel == "manifest.json":
                continue
            files[rel] = sha256(p)
    payload = dict(payload)
    payload["files"] = dict(sorted(files.items()))
    write_json(out / "manifest.json", payload)
    return payload
