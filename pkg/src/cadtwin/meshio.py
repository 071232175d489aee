"""OBJ and little-endian binary PLY readers/writers."""

from __future__ import annotations

from pathlib import Path
from typing import Optional

import numpy as np

from .geometry import TriMesh

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}
_NP_TO_PLY = {"f8": "double", "f4": "float", "i4": "int", "u1": "uchar", "i8": "int"}


class PlyFormatError(ValueError):
    pass


def write_ply(path, vertex_props: dict[str, np.ndarray], faces: Optional[np.ndarray] = None) -> None:
    Path(path).write_bytes(ply_bytes(vertex_props, faces))


def ply_bytes(vertex_props: dict[str, np.ndarray], faces: Optional[np.ndarray] = None) -> bytes:
    """Encode a binary little-endian PLY.

    ``vertex_props`` maps property name to a 1-D array; dtype decides the PLY
    type (float64 -> double). Faces are written as ``uchar``/``int`` lists.
    """
    names = list(vertex_props)
    n = len(vertex_props[names[0]]) if names else 0
    cols = []
    for k in names:
        a = np.asarray(vertex_props[k])
        if a.dtype.kind == "f":
            a = a.astype("<f8") if a.dtype.itemsize == 8 else a.astype("<f4")
        elif a.dtype.kind in "iu":
            a = a.astype("<i4")
        cols.append((k, a))
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    for k, a in cols:
        header.append(f"property {_NP_TO_PLY[a.dtype.str[1:]]} {k}")
    nf = 0 if faces is None else len(faces)
    if faces is not None:
        header += [f"element face {nf}", "property list uchar int vertex_indices"]
    header.append("end_header")
    rec = np.zeros(n, dtype=[(k, a.dtype.str) for k, a in cols])
    for k, a in cols:
        rec[k] = a
    out = [("\n".join(header) + "\n").encode("ascii"), rec.tobytes()]
    if faces is not None:
        frec = np.zeros(nf, dtype=[("n", "u1"), ("idx", "<i4", (3,))])
        frec["n"] = 3
        frec["idx"] = np.asarray(faces, dtype=np.int64)
        out.append(frec.tobytes())
    return b"".join(out)


def read_ply(path) -> tuple[dict[str, np.ndarray], Optional[np.ndarray]]:
    return parse_ply(Path(path).read_bytes(), str(path))


def parse_ply(data: bytes, path: str = "<bytes>") -> tuple[dict[str, np.ndarray], Optional[np.ndarray]]:
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise PlyFormatError(f"{path}: not a PLY file")
    body_start = data.index(b"\n", end) + 1
    lines = data[:body_start].decode("ascii").splitlines()
    fmt = None
    elements: list[tuple[str, int, list]] = []
    for line in lines[1:]:
        tok = line.split()
        if not tok or tok[0] in ("comment", "obj_info", "end_header"):
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            elements.append((tok[1], int(tok[2]), []))
        elif tok[0] == "property":
            elements[-1][2].append(tok[1:])
    if fmt not in ("binary_little_endian", "ascii"):
        raise PlyFormatError(f"{path}: unsupported PLY format {fmt}")
    props: dict[str, np.ndarray] = {}
    faces = None
    if fmt == "ascii":
        rows = data[body_start:].decode("ascii").split("\n")
        pos = 0
        for name, count, plist in elements:
            chunk = rows[pos:pos + count]
            pos += count
            if name == "vertex":
                arr = np.array([r.split() for r in chunk], dtype=np.float64).reshape(count, -1)
                for i, p in enumerate(plist):
                    props[p[-1]] = arr[:, i].astype(_PLY_TYPES[p[0]])
            elif name == "face":
                faces = np.array([r.split()[1:4] for r in chunk], dtype=np.int64).reshape(-1, 3)
        return props, faces
    off = body_start
    for name, count, plist in elements:
        if any(p[0] == "list" for p in plist):
            if len(plist) != 1:
                raise PlyFormatError(f"{path}: mixed list/scalar element {name}")
            _, ct, it, _ = plist[0]
            ct, it = np.dtype("<" + _PLY_TYPES[ct]), np.dtype("<" + _PLY_TYPES[it])
            rec = np.dtype([("n", ct), ("idx", it, (3,))])
            need = off + rec.itemsize * count
            if need > len(data):
                raise PlyFormatError(f"{path}: truncated {name} block")
            arr = np.frombuffer(data, dtype=rec, count=count, offset=off)
            if count and (arr["n"] != 3).any():
                raise PlyFormatError(f"{path}: only triangle faces are supported")
            off = need
            if name == "face":
                faces = arr["idx"].astype(np.int64)
            continue
        rec = np.dtype([(p[1], "<" + _PLY_TYPES[p[0]]) for p in plist])
        need = off + rec.itemsize * count
        if need > len(data):
            raise PlyFormatError(f"{path}: truncated {name} block")
        arr = np.frombuffer(data, dtype=rec, count=count, offset=off)
        off = need
        if name == "vertex":
            for p in plist:
                props[p[1]] = np.array(arr[p[1]])
    return props, faces


def mesh_ply_bytes(mesh: TriMesh, extra: Optional[dict[str, np.ndarray]] = None) -> bytes:
    props = {"x": mesh.vertices[:, 0], "y": mesh.vertices[:, 1], "z": mesh.vertices[:, 2]}
    if mesh.uv is not None:
        props["u"] = mesh.uv[:, 0]
        props["v"] = mesh.uv[:, 1]
    props.update(extra or {})
    return ply_bytes(props, mesh.faces)


def save_mesh_ply(path, mesh: TriMesh, extra: Optional[dict[str, np.ndarray]] = None) -> None:
    Path(path).write_bytes(mesh_ply_bytes(mesh, extra))


def mesh_from_props(props: dict, faces) -> TriMesh:
    v = np.stack([props["x"], props["y"], props["z"]], axis=1).astype(np.float64)
    uv = None
    if "u" in props and "v" in props:
        uv = np.stack([props["u"], props["v"]], axis=1).astype(np.float64)
    return TriMesh(v, faces if faces is not None else np.zeros((0, 3), np.int64), uv)


def load_mesh_ply(path) -> TriMesh:
    return mesh_from_props(*read_ply(path))


def save_obj(path, mesh: TriMesh) -> None:
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    if mesh.uv is not None:
        lines += [f"vt {u!r} {v!r}" for u, v in mesh.uv.tolist()]
        lines += [f"f {a + 1}/{a + 1} {b + 1}/{b + 1} {c + 1}/{c + 1}" for a, b, c in mesh.faces.tolist()]
    else:
        lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces.tolist()]
    Path(path).write_text("\n".join(lines) + "\n")


def load_obj(path) -> TriMesh:
    """Triangle OBJ reader. UVs are kept only when they map 1:1 onto vertices."""
    verts, uvs, faces, face_uv = [], [], [], []
    for line in Path(path).read_text().splitlines():
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "v":
            verts.append([float(t) for t in tok[1:4]])
        elif tok[0] == "vt":
            uvs.append([float(t) for t in tok[1:3]])
        elif tok[0] == "f":
            idx = [t.split("/") for t in tok[1:]]
            vi = [int(t[0]) for t in idx]
            vt = [int(t[1]) if len(t) > 1 and t[1] else 0 for t in idx]
            vi = [i - 1 if i > 0 else len(verts) + i for i in vi]
            vt = [i - 1 if i > 0 else len(uvs) + i for i in vt]
            for k in range(1, len(vi) - 1):
                faces.append([vi[0], vi[k], vi[k + 1]])
                face_uv.append([vt[0], vt[k], vt[k + 1]])
    uv = None
    if uvs and face_uv:
        per_vertex = np.full((len(verts), 2), np.nan)
        ok = True
        for f, t in zip(faces, face_uv):
            for vi, ti in zip(f, t):
                if ti < 0:
                    ok = False
                    break
                if np.isnan(per_vertex[vi, 0]):
                    per_vertex[vi] = uvs[ti]
                elif not np.allclose(per_vertex[vi], uvs[ti]):
                    ok = False
            if not ok:
                break
        if ok and not np.isnan(per_vertex).any():
            uv = per_vertex
    return TriMesh(np.array(verts, dtype=np.float64).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3), uv)


def load_mesh(path) -> TriMesh:
    p = Path(path)
    if p.suffix.lower() == ".obj":
        return load_obj(p)
    if p.suffix.lower() == ".ply":
        return load_mesh_ply(p)
    raise ValueError(f"unsupported mesh format: {p.suffix}")


def save_mesh(path, mesh: TriMesh) -> None:
    p = Path(path)
    if p.suffix.lower() == ".obj":
        save_obj(p, mesh)
    else:
        save_mesh_ply(p, mesh)
