"""File formats: OBJ meshes, node-major field CSVs and report CSVs.

Every float is written with 17 significant digits so values round-trip
exactly.  Header lines are written as ``#`` comments.
"""

from __future__ import annotations

import csv

import numpy as np

from .grid import Grid


def _comments(fh, header_lines):
    for line in header_lines:
        fh.write(f"# {line}\n")


def export_mesh(y, path, header_lines=()):
    """OBJ with vertices in row-major node order and one quad per grid cell.

    ``y`` is a SurfaceImmersion or a (n1, n2, 3) array.
    """
    pos = np.asarray(getattr(y, "y", y), dtype=float)
    if pos.ndim != 3 or pos.shape[-1] != 3:
        raise ValueError(f"expected positions of shape (n1, n2, 3), got {pos.shape}")
    n1, n2, _ = pos.shape
    idx = np.arange(n1 * n2).reshape(n1, n2) + 1
    with open(path, "w") as fh:
        _comments(fh, header_lines)
        for p in pos.reshape(-1, 3):
            fh.write(f"v {p[0]:.17g} {p[1]:.17g} {p[2]:.17g}\n")
        for i in range(n1 - 1):
            for j in range(n2 - 1):
                fh.write(f"f {idx[i, j]} {idx[i + 1, j]} {idx[i + 1, j + 1]} {idx[i, j + 1]}\n")


def read_obj(path):
    """Minimal OBJ reader: (vertices (n, 3), faces as lists of 0-based indices)."""
    verts, faces = [], []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "v":
                verts.append([float(t) for t in parts[1:4]])
            elif parts[0] == "f":
                faces.append([int(t.split("/")[0]) - 1 for t in parts[1:]])
    verts = np.array(verts, dtype=float).reshape(-1, 3)
    for face in faces:
        if min(face) < 0 or max(face) >= len(verts):
            raise ValueError("face index out of range")
    return verts, faces


def export_csv(report, path, header_lines=()):
    """Sweep report CSV (h, energy, beta_fit_cumulative, converged)."""
    report.write_csv(path, header_lines)


def write_field_csv(grid: Grid, fields, path, header_lines=()):
    """Node-major CSV: columns x1, x2 then one column per named scalar field."""
    X, Y = grid.mesh
    names = list(fields)
    cols = [X.ravel(), Y.ravel()] + [np.asarray(fields[k], dtype=float).ravel() for k in names]
    with open(path, "w", newline="") as fh:
        _comments(fh, header_lines)
        w = csv.writer(fh)
        w.writerow(["x1", "x2"] + names)
        for row in zip(*cols):
            w.writerow([f"{v:.17g}" for v in row])


def read_field_csv(path):
    """(x1 axis, x2 axis, {name: (n1, n2) array}) from a node-major field CSV."""
    with open(path) as fh:
        rows = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.reader(rows)
    head = next(reader)
    data = np.array([[float(v) for v in r] for r in reader if r], dtype=float)
    if head[:2] != ["x1", "x2"]:
        raise ValueError("field CSV must start with columns x1, x2")
    x1, x2 = np.unique(data[:, 0]), np.unique(data[:, 1])
    if len(x1) * len(x2) != len(data):
        raise ValueError("field CSV is not a full tensor grid")
    order = np.lexsort((data[:, 1], data[:, 0]))
    data = data[order]
    shape = (len(x1), len(x2))
    return x1, x2, {name: data[:, k + 2].reshape(shape) for k, name in enumerate(head[2:])}


def read_sym2_field(path):
    """2x2 symmetric field from a CSV with columns m11, m12, m22 (plus x1, x2)."""
    x1, x2, cols = read_field_csv(path)
    missing = [c for c in ("m11", "m12", "m22") if c not in cols]
    if missing:
        raise ValueError(f"{path}: missing columns {missing}")
    M = np.empty(cols["m11"].shape + (2, 2))
    M[..., 0, 0] = cols["m11"]
    M[..., 1, 1] = cols["m22"]
    M[..., 0, 1] = M[..., 1, 0] = cols["m12"]
    return x1, x2, M


def write_table_csv(path, columns, rows, header_lines=()):
    with open(path, "w", newline="") as fh:
        _comments(fh, header_lines)
        w = csv.writer(fh)
        w.writerow(list(columns))
        for row in rows:
            w.writerow([f"{v:.17g}" if isinstance(v, float) else v for v in row])
