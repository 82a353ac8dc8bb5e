"""Point-cloud file I/O: ASCII PLY and whitespace-separated XYZ text."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import MapFormatError
from .geometry import PointCloud

_FLOAT_TYPES = {"float", "float32", "double", "float64"}


def write_ply(cloud: PointCloud, path) -> None:
    """Write an ASCII PLY with x,y,z and, when present, nx,ny,nz (float64)."""
    path = Path(path)
    props = ["x", "y", "z"]
    data = cloud.points
    if cloud.has_normals:
        props += ["nx", "ny", "nz"]
        data = np.hstack([cloud.points, cloud.normals])
    lines = ["ply", "format ascii 1.0", f"element vertex {len(cloud)}"]
    lines += [f"property double {p}" for p in props]
    lines.append("end_header")
    with path.open("w") as fh:
        fh.write("\n".join(lines) + "\n")
        np.savetxt(fh, data, fmt="%.10g")


def read_ply(path) -> PointCloud:
    """Read an ASCII PLY; accepts float or double vertex properties."""
    path = Path(path)
    with path.open("r") as fh:
        line = fh.readline().strip()
        if line != "ply":
            raise MapFormatError(f"{path}: not a PLY file")
        n_vertex = None
        props: list[str] = []
        in_vertex = False
        while True:
            line = fh.readline()
            if not line:
                raise MapFormatError(f"{path}: unexpected end of header")
            tokens = line.split()
            if not tokens:
                continue
            if tokens[0] == "format" and tokens[1] != "ascii":
                raise MapFormatError(f"{path}: only ascii PLY is supported")
            if tokens[0] == "element":
                in_vertex = tokens[1] == "vertex"
                if in_vertex:
                    n_vertex = int(tokens[2])
            elif tokens[0] == "property" and in_vertex:
                if tokens[1] not in _FLOAT_TYPES:
                    raise MapFormatError(f"{path}: unsupported property type {tokens[1]}")
                props.append(tokens[2])
            elif tokens[0] == "end_header":
                break
        if n_vertex is None:
            raise MapFormatError(f"{path}: missing vertex element")
        rows = np.loadtxt(fh, max_rows=n_vertex, ndmin=2) if n_vertex else np.zeros((0, len(props)))
    try:
        col = {name: i for i, name in enumerate(props)}
        pts = rows[:, [col["x"], col["y"], col["z"]]]
        normals = None
        if {"nx", "ny", "nz"} <= col.keys():
            normals = rows[:, [col["nx"], col["ny"], col["nz"]]]
    except KeyError as exc:
        raise MapFormatError(f"{path}: missing vertex property {exc}") from exc
    return PointCloud(pts, normals)


def write_xyz(cloud: PointCloud, path) -> None:
    """Write whitespace-separated rows: x y z [nx ny nz]."""
    data = cloud.points
    if cloud.has_normals:
        data = np.hstack([cloud.points, cloud.normals])
    np.savetxt(path, data, fmt="%.10g")


def read_xyz(path) -> PointCloud:
    """Read whitespace-separated rows of 3 (points) or 6 (plus normals) columns."""
    rows = np.loadtxt(path, ndmin=2)
    if rows.size == 0:
        return PointCloud.empty()
    if rows.shape[1] >= 6:
        return PointCloud(rows[:, :3], rows[:, 3:6])
    if rows.shape[1] >= 3:
        return PointCloud(rows[:, :3])
    raise MapFormatError(f"{path}: expected 3 or 6 columns, got {rows.shape[1]}")


def write_polyline_ply(points: np.ndarray, path) -> None:
    """Write an ASCII PLY polyline (vertices plus edge list) for visualization."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    n = pts.shape[0]
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {n}",
        "property double x",
        "property double y",
        "property double z",
        f"element edge {max(n - 1, 0)}",
        "property int vertex1",
        "property int vertex2",
        "end_header",
    ]
    with Path(path).open("w") as fh:
        fh.write("\n".join(lines) + "\n")
        np.savetxt(fh, pts, fmt="%.10g")
        for i in range(n - 1):
            fh.write(f"{i} {i + 1}\n")
