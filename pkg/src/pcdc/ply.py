"""Minimal PLY reader/writer for point geometry.

Supports ascii and binary_little_endian files with an x/y/z vertex element;
extra vertex properties are read past and dropped. Only what the CLI needs.
"""

from __future__ import annotations

import numpy as np

from .errors import CodecError

_TYPE_MAP = {
    "char": "i1",
    "int8": "i1",
    "uchar": "u1",
    "uint8": "u1",
    "short": "i2",
    "int16": "i2",
    "ushort": "u2",
    "uint16": "u2",
    "int": "i4",
    "int32": "i4",
    "uint": "u4",
    "uint32": "u4",
    "float": "f4",
    "float32": "f4",
    "double": "f8",
    "float64": "f8",
}


def read_ply(path: str) -> np.ndarray:
    """Return vertex positions as (N, 3) float64."""
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(b"ply"):
        raise CodecError(f"{path}: not a PLY file")
    end = data.find(b"end_header")
    if end < 0:
        raise CodecError(f"{path}: missing end_header")
    end = data.index(b"\n", end) + 1
    header = data[:end].decode("ascii", errors="replace").splitlines()
    body = data[end:]

    fmt = None
    elements = []  # (name, count, [(prop_name, dtype_code)])
    for line in header:
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            elements.append((tok[1], int(tok[2]), []))
        elif tok[0] == "property":
            if not elements:
                raise CodecError(f"{path}: property before any element")
            if tok[1] == "list":
                elements[-1][2].append((tok[-1], "list:" + tok[2] + ":" + tok[3]))
            else:
                code = _TYPE_MAP.get(tok[1])
                if code is None:
                    raise CodecError(f"{path}: unsupported property type {tok[1]}")
                elements[-1][2].append((tok[2], code))
    if fmt not in ("ascii", "binary_little_endian"):
        raise CodecError(f"{path}: unsupported format {fmt}")

    coords = None
    if fmt == "ascii":
        lines = body.split(b"\n")
        row = 0
        for name, count, props in elements:
            if name == "vertex":
                names = [p[0] for p in props]
                try:
                    ix, iy, iz = names.index("x"), names.index("y"), names.index("z")
                except ValueError:
                    raise CodecError(f"{path}: vertex element lacks x/y/z") from None
                out = np.empty((count, 3))
                for i in range(count):
                    parts = lines[row + i].split()
                    out[i] = (float(parts[ix]), float(parts[iy]), float(parts[iz]))
                coords = out
            row += count
    else:
        pos = 0
        for name, count, props in elements:
            if count and any(code.startswith("list:") for _, code in props):
                # Variable-length rows cannot be skipped without parsing them.
                raise CodecError(f"{path}: binary list properties are unsupported (element {name})")
            dtype = np.dtype([(p, "<" + code) for p, code in props])
            nbytes = dtype.itemsize * count
            if pos + nbytes > len(body):
                raise CodecError(f"{path}: vertex data truncated")
            if name == "vertex":
                rows = np.frombuffer(body, dtype=dtype, count=count, offset=pos)
                try:
                    coords = np.stack(
                        [rows["x"], rows["y"], rows["z"]], axis=-1
                    ).astype(np.float64)
                except KeyError:
                    raise CodecError(f"{path}: vertex element lacks x/y/z") from None
            pos += nbytes
    if coords is None:
        raise CodecError(f"{path}: no vertex element")
    return coords


def write_ply(path: str, coords: np.ndarray, binary: bool = True):
    """Write positions as float32 vertices."""
    coords = np.asarray(coords, dtype=np.float32)
    n = len(coords)
    fmt = "binary_little_endian" if binary else "ascii"
    header = (
        "ply\n"
        f"format {fmt} 1.0\n"
        f"element vertex {n}\n"
        "property float x\n"
        "property float y\n"
        "property float z\n"
        "end_header\n"
    )
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        if binary:
            f.write(np.ascontiguousarray(coords, dtype="<f4").tobytes())
        else:
            np.savetxt(f, coords, fmt="%.1f")
