"""File formats: PLY (binary/ascii), PFM, 8-bit PNG, OBJ and atomic JSON."""
from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def read_ply(path: str | Path) -> dict[str, dict[str, np.ndarray]]:
    """Parse a PLY file into ``{element: {property: array}}``.

    Supports ``binary_little_endian`` and ``ascii`` encodings; list
    properties (faces) are returned as an ``(n, k)`` array assuming a
    constant list length.
    """
    raw = Path(path).read_bytes()
    end = raw.index(b"end_header")
    end = raw.index(b"\n", end) + 1
    header = raw[:end].decode("ascii").splitlines()
    if not header or header[0].strip() != "ply":
        raise ValueError(f"{path}: not a PLY file")
    fmt = None
    elements: list[tuple[str, int, list]] = []
    for line in header[1:]:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if parts[1] == "list":
                elements[-1][2].append((parts[4], ("list", _PLY_TYPES[parts[2]], _PLY_TYPES[parts[3]])))
            else:
                elements[-1][2].append((parts[2], _PLY_TYPES[parts[1]]))
    body = raw[end:]
    out: dict[str, dict[str, np.ndarray]] = {}
    if fmt == "ascii":
        tokens = body.split()
        pos = 0
        for name, count, props in elements:
            cols: dict[str, list] = {p[0]: [] for p in props}
            for _ in range(count):
                for pname, ptype in props:
                    if isinstance(ptype, tuple):
                        k = int(tokens[pos])
                        cols[pname].append([float(t) for t in tokens[pos + 1: pos + 1 + k]])
                        pos += 1 + k
                    else:
                        cols[pname].append(float(tokens[pos]))
                        pos += 1
            out[name] = {k: np.asarray(v) for k, v in cols.items()}
        return out
    if fmt != "binary_little_endian":
        raise ValueError(f"{path}: unsupported PLY format {fmt}")
    offset = 0
    for name, count, props in elements:
        if any(isinstance(p[1], tuple) for p in props):
            # constant-length lists only (triangle faces)
            (pname, (_, ctype, itype)), = props
            k = int(np.frombuffer(body, dtype="<" + ctype, count=1, offset=offset)[0]) if count else 3
            dt = np.dtype([("n", "<" + ctype), ("idx", "<" + itype, (k,))])
            arr = np.frombuffer(body, dtype=dt, count=count, offset=offset)
            out[name] = {pname: np.array(arr["idx"])}
        else:
            dt = np.dtype([(p, "<" + t) for p, t in props])
            arr = np.frombuffer(body, dtype=dt, count=count, offset=offset)
            out[name] = {p: np.array(arr[p]) for p, _ in props}
        offset += dt.itemsize * count
    return out


def write_points_ply(path: str | Path, points: np.ndarray, normals: np.ndarray | None = None) -> None:
    cols = [np.asarray(points, dtype=np.float64)]
    names = ["x", "y", "z"]
    if normals is not None:
        cols.append(np.asarray(normals, dtype=np.float64))
        names += ["nx", "ny", "nz"]
    data = np.concatenate(cols, axis=1).astype("<f4")
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {len(data)}"]
    header += [f"property float {n}" for n in names] + ["end_header"]
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(data.tobytes())


def read_points_ply(path: str | Path) -> tuple[np.ndarray, np.ndarray | None]:
    v = read_ply(path)["vertex"]
    pts = np.stack([v["x"], v["y"], v["z"]], 1).astype(np.float64)
    normals = None
    if "nx" in v:
        normals = np.stack([v["nx"], v["ny"], v["nz"]], 1).astype(np.float64)
    return pts, normals


def write_mesh_ply(path: str | Path, vertices: np.ndarray, triangles: np.ndarray) -> None:
    verts = np.asarray(vertices, dtype="<f4")
    faces = np.zeros(len(triangles), dtype=[("n", "u1"), ("idx", "<i4", (3,))])
    faces["n"] = 3
    faces["idx"] = triangles
    header = [
        "ply", "format binary_little_endian 1.0",
        f"element vertex {len(verts)}", "property float x", "property float y", "property float z",
        f"element face {len(faces)}", "property list uchar int vertex_indices", "end_header",
    ]
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(verts.tobytes())
        fh.write(faces.tobytes())


def write_obj(path: str | Path, vertices: np.ndarray, triangles: np.ndarray) -> None:
    with open(path, "w") as fh:
        for v in vertices:
            fh.write(f"v {v[0]:.7g} {v[1]:.7g} {v[2]:.7g}\n")
        for t in np.asarray(triangles) + 1:
            fh.write(f"f {t[0]} {t[1]} {t[2]}\n")


def write_pfm(path: str | Path, data: np.ndarray) -> None:
    """Little-endian float32 PFM (scale -1.0); rows stored bottom-to-top."""
    arr = np.asarray(data, dtype="<f4")
    if arr.ndim == 2:
        kind = "Pf"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        kind = "PF"
    else:
        raise ValueError("PFM holds (H, W) or (H, W, 3) arrays")
    h, w = arr.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"{kind}\n{w} {h}\n-1.0\n".encode("ascii"))
        fh.write(np.ascontiguousarray(arr[::-1]).tobytes())


def read_pfm(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        kind = fh.readline().strip()
        w, h = map(int, fh.readline().split())
        scale = float(fh.readline())
        dtype = "<f4" if scale < 0 else ">f4"
        channels = 3 if kind == b"PF" else 1
        data = np.frombuffer(fh.read(), dtype=dtype, count=w * h * channels)
    shape = (h, w, 3) if channels == 3 else (h, w)
    return data.reshape(shape)[::-1].astype(np.float64)


def write_png(path: str | Path, image: np.ndarray) -> None:
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    Image.fromarray(np.round(arr * 255.0).astype(np.uint8)).save(path, optimize=False)


def read_png(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def write_json_atomic(path: str | Path, payload) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    with os.fdopen(fd, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)
