"""ASCII XYZ and PLY point-cloud readers and writers.

XYZ files hold one point per line, whitespace-separated: ``x y z``, optionally
followed by ``r g b`` (0-255) and/or an integer ``label``; ``#`` starts a
comment. PLY files must be ASCII with a ``vertex`` element carrying ``x y z``
and optionally ``red green blue`` and ``label``.
"""
from __future__ import annotations

from pathlib import Path
from typing import List, Optional, Union

import numpy as np

from .exceptions import FormatError
from .graph import PointCloud

XYZ_SUFFIXES = {".xyz", ".txt"}
PLY_SUFFIXES = {".ply"}
_PLY_INT_TYPES = {"char", "uchar", "short", "ushort", "int", "uint",
                  "int8", "uint8", "int16", "uint16", "int32", "uint32"}


class ParseError(FormatError):
    def __init__(self, path, lineno: int, msg: str):
        super().__init__(f"{path}:{lineno}: {msg}")
        self.lineno = lineno


def _parse_label(token: str, path, lineno: int) -> int:
    try:
        value = float(token)
    except ValueError:
        raise ParseError(path, lineno, f"label {token!r} is not a number") from None
    if value != int(value) or value < 0:
        raise ParseError(path, lineno, f"label {token!r} is not a non-negative integer")
    return int(value)


def read_xyz(path: Union[str, Path]) -> PointCloud:
    pos: List[List[float]] = []
    rgb: List[List[float]] = []
    labels: List[int] = []
    width: Optional[int] = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            tokens = line.split("#", 1)[0].split()
            if not tokens:
                continue
            if len(tokens) not in (3, 4, 6, 7):
                raise ParseError(path, lineno, f"expected 3, 4, 6 or 7 columns, got {len(tokens)}")
            if width is None:
                width = len(tokens)
            elif len(tokens) != width:
                raise ParseError(path, lineno, f"column count {len(tokens)} differs from {width}")
            try:
                values = [float(t) for t in tokens[: 6 if width >= 6 else 3]]
            except ValueError as exc:
                raise ParseError(path, lineno, str(exc)) from None
            if not np.all(np.isfinite(values)):
                raise ParseError(path, lineno, "non-finite coordinate")
            pos.append(values[:3])
            if width >= 6:
                rgb.append([v / 255.0 for v in values[3:6]])
            if width in (4, 7):
                labels.append(_parse_label(tokens[-1], path, lineno))
    if not pos:
        raise FormatError(f"{path}: no points")
    return PointCloud(
        np.array(pos),
        np.array(rgb) if rgb else None,
        np.array(labels, dtype=np.int64) if labels else None,
    )


def read_ply(path: Union[str, Path]) -> PointCloud:
    with open(path, "r", encoding="utf-8", errors="replace") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ParseError(path, 1, "missing 'ply' magic line")
    elements = []  # (name, count, [(type, name)])
    body_start = None
    for lineno, raw in enumerate(lines[1:], start=2):
        parts = raw.split()
        if not parts or parts[0] in ("comment", "obj_info"):
            continue
        if parts[0] == "format":
            if len(parts) < 2 or parts[1] != "ascii":
                raise FormatError(f"{path}: only ASCII PLY is supported, got {' '.join(parts[1:])}")
        elif parts[0] == "element":
            if len(parts) != 3:
                raise ParseError(path, lineno, "malformed element line")
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if not elements:
                raise ParseError(path, lineno, "property before any element")
            if parts[1] == "list":
                elements[-1][2].append(("list", parts[-1]))
            else:
                elements[-1][2].append((parts[1], parts[2]))
        elif parts[0] == "end_header":
            body_start = lineno
            break
        else:
            raise ParseError(path, lineno, f"unexpected header keyword {parts[0]!r}")
    if body_start is None:
        raise FormatError(f"{path}: missing end_header")

    cursor = body_start  # index into ``lines`` of the first body line
    vertex = None
    for name, count, props in elements:
        if name == "vertex":
            vertex = (count, props, cursor)
        cursor += count
    if vertex is None:
        raise FormatError(f"{path}: no vertex element")
    count, props, start = vertex
    names = [p[1] for p in props]
    for axis in ("x", "y", "z"):
        if axis not in names:
            raise FormatError(f"{path}: vertex element lacks property {axis!r}")
    if any(p[0] == "list" for p in props):
        raise FormatError(f"{path}: list properties on vertices are not supported")
    has_rgb = all(c in names for c in ("red", "green", "blue"))
    has_label = "label" in names
    types = dict((p[1], p[0]) for p in props)

    pos, rgb, labels = [], [], []
    for j in range(count):
        lineno = start + j + 1
        if start + j >= len(lines):
            raise ParseError(path, lineno, "file ends before all vertices were read")
        tokens = lines[start + j].split()
        if len(tokens) != len(props):
            raise ParseError(path, lineno, f"expected {len(props)} values, got {len(tokens)}")
        try:
            row = dict(zip(names, (float(t) for t in tokens)))
        except ValueError as exc:
            raise ParseError(path, lineno, str(exc)) from None
        pos.append([row["x"], row["y"], row["z"]])
        if has_rgb:
            # integer color channels are 0-255, float ones are taken as 0-1
            scale = 255.0 if types["red"] in _PLY_INT_TYPES else 1.0
            rgb.append([row["red"] / scale, row["green"] / scale, row["blue"] / scale])
        if has_label:
            labels.append(_parse_label(tokens[names.index("label")], path, lineno))
    if not pos:
        raise FormatError(f"{path}: no points")
    return PointCloud(
        np.array(pos),
        np.array(rgb) if has_rgb else None,
        np.array(labels, dtype=np.int64) if has_label else None,
    )


def ingest(path: Union[str, Path]) -> PointCloud:
    """Read a cloud, choosing the parser by file extension."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix in XYZ_SUFFIXES:
        return read_xyz(path)
    if suffix in PLY_SUFFIXES:
        return read_ply(path)
    raise FormatError(f"unknown point-cloud extension {path.suffix!r} (expected .xyz, .txt or .ply)")


def _rgb_columns(cloud: PointCloud) -> Optional[np.ndarray]:
    if cloud.extras is None:
        return None
    if cloud.extras.shape[1] != 3:
        raise FormatError("only 3-channel (RGB) extras can be written")
    return cloud.extras * 255.0


def write_xyz(cloud: PointCloud, path: Union[str, Path]) -> None:
    rgb = _rgb_columns(cloud)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# x y z" + (" r g b" if rgb is not None else "")
                 + (" label" if cloud.labels is not None else "") + "\n")
        for i in range(cloud.n_points):
            cols = [repr(float(v)) for v in cloud.positions[i]]
            if rgb is not None:
                cols += [repr(float(v)) for v in rgb[i]]
            if cloud.labels is not None:
                cols.append(str(int(cloud.labels[i])))
            fh.write(" ".join(cols) + "\n")


def write_ply(cloud: PointCloud, path: Union[str, Path]) -> None:
    rgb = _rgb_columns(cloud)
    header = ["ply", "format ascii 1.0", f"element vertex {cloud.n_points}",
              "property double x", "property double y", "property double z"]
    if rgb is not None:
        # written as 0-1 floats so values survive the round trip unquantized
        header += ["property double red", "property double green", "property double blue"]
    if cloud.labels is not None:
        header.append("property int label")
    header.append("end_header")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(header) + "\n")
        for i in range(cloud.n_points):
            cols = [repr(float(v)) for v in cloud.positions[i]]
            if rgb is not None:
                cols += [repr(float(v)) for v in cloud.extras[i]]
            if cloud.labels is not None:
                cols.append(str(int(cloud.labels[i])))
            fh.write(" ".join(cols) + "\n")


def write_cloud(cloud: PointCloud, path: Union[str, Path]) -> None:
    suffix = Path(path).suffix.lower()
    if suffix in XYZ_SUFFIXES:
        write_xyz(cloud, path)
    elif suffix in PLY_SUFFIXES:
        write_ply(cloud, path)
    else:
        raise FormatError(f"unknown point-cloud extension {Path(path).suffix!r}")
