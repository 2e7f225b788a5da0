"""PNG / PFM images and PLY / OBJ geometry."""

import re
import sys

import numpy as np
from PIL import Image


class FormatError(ValueError):
    """A file exists but its contents are malformed."""


def srgb_to_linear(c):
    c = np.asarray(c, dtype=np.float64)
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def linear_to_srgb(c):
    c = np.clip(np.asarray(c, dtype=np.float64), 0.0, 1.0)
    return np.where(c <= 0.0031308, c * 12.92, 1.055 * c ** (1 / 2.4) - 0.055)


def quantize_srgb8(linear):
    """Linear floats -> 8-bit sRGB codes."""
    return np.round(linear_to_srgb(linear) * 255.0).astype(np.uint8)


_SRGB8_LUT = srgb_to_linear(np.arange(256) / 255.0)


def dequantize_srgb8(codes):
    return _SRGB8_LUT[np.asarray(codes)]


def write_png(path, linear_rgb):
    Image.fromarray(quantize_srgb8(linear_rgb)).save(path)


def write_png_raw(path, values01):
    """Write [0, 1] data without gamma (normal maps, masks)."""
    codes = np.round(np.clip(values01, 0, 1) * 255.0).astype(np.uint8)
    Image.fromarray(codes).save(path)


def read_png(path):
    """8-bit sRGB PNG -> linear RGB floats in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"))
    return dequantize_srgb8(arr)


def write_pfm(path, data):
    data = np.asarray(data, dtype=np.float32)
    color = data.ndim == 3 and data.shape[2] == 3
    if not (data.ndim == 2 or color):
        raise ValueError("PFM stores (H, W) or (H, W, 3) arrays")
    h, w = data.shape[:2]
    with open(path, "wb") as f:
        f.write(b"PF\n" if color else b"Pf\n")
        f.write(f"{w} {h}\n".encode())
        f.write(b"-1.0\n")  # little endian
        f.write(np.ascontiguousarray(np.flipud(data)).astype("<f4").tobytes())


def read_pfm(path):
    with open(path, "rb") as f:
        header = f.readline().strip()
        if header not in (b"PF", b"Pf"):
            raise FormatError(f"{path}: not a PFM file")
        dims = f.readline().split()
        scale = float(f.readline())
        w, h = int(dims[0]), int(dims[1])
        dtype = "<f4" if scale < 0 else ">f4"
        ch = 3 if header == b"PF" else 1
        data = np.frombuffer(f.read(), dtype=dtype)
    if data.size != w * h * ch:
        raise FormatError(f"{path}: truncated PFM data")
    data = data.reshape((h, w, ch) if ch == 3 else (h, w))
    return np.flipud(data).astype(np.float64)


_PLY_TYPES = {
    "char": "i1", "uchar": "u1", "int8": "i1", "uint8": "u1",
    "short": "i2", "ushort": "u2", "int16": "i2", "uint16": "u2",
    "int": "i4", "uint": "u4", "int32": "i4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def write_ply(path, vertices, faces=None, normals=None, colors=None):
    """Binary little-endian PLY. ``colors`` are uint8 RGB or floats in [0, 1]."""
    v = np.asarray(vertices, dtype=np.float32)
    fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    if normals is not None:
        fields += [("nx", "<f4"), ("ny", "<f4"), ("nz", "<f4")]
    if colors is not None:
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
        colors = np.asarray(colors)
        if colors.dtype != np.uint8:
            colors = np.round(np.clip(colors, 0, 1) * 255).astype(np.uint8)
    rec = np.empty(len(v), dtype=fields)
    rec["x"], rec["y"], rec["z"] = v[:, 0], v[:, 1], v[:, 2]
    if normals is not None:
        n = np.asarray(normals, dtype=np.float32)
        rec["nx"], rec["ny"], rec["nz"] = n[:, 0], n[:, 1], n[:, 2]
    if colors is not None:
        rec["red"], rec["green"], rec["blue"] = colors[:, 0], colors[:, 1], colors[:, 2]
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {len(v)}"]
    names = {"<f4": "float", "u1": "uchar"}
    header += [f"property {names[t]} {n}" for n, t in fields]
    if faces is not None:
        header += [f"element face {len(faces)}", "property list uchar int vertex_indices"]
    header.append("end_header")
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(rec.tobytes())
        if faces is not None:
            frec = np.empty(len(faces), dtype=[("n", "u1"), ("idx", "<i4", (3,))])
            frec["n"] = 3
            frec["idx"] = np.asarray(faces, dtype=np.int32)
            f.write(frec.tobytes())


def read_ply(path):
    """Read vertices (and faces, colors, normals when present) from a PLY file.

    Supports binary little/big endian and ASCII vertex data; faces must be
    triangles. Returns a dict with keys ``vertices`` and optionally
    ``faces``, ``colors`` (uint8) and ``normals``.
    """
    with open(path, "rb") as f:
        if f.readline().strip() != b"ply":
            raise FormatError(f"{path}: missing ply magic")
        fmt, elements = None, []
        while True:
            line = f.readline()
            if not line:
                raise FormatError(f"{path}: unterminated header")
            tok = line.decode("ascii", "replace").split()
            if not tok or tok[0] == "comment":
                continue
            if tok[0] == "format":
                fmt = tok[1]
            elif tok[0] == "element":
                elements.append([tok[1], int(tok[2]), []])
            elif tok[0] == "property":
                elements[-1][2].append(tok[1:])
            elif tok[0] == "end_header":
                break
        body = f.read()
    if fmt not in ("binary_little_endian", "binary_big_endian", "ascii"):
        raise FormatError(f"{path}: unsupported format {fmt}")
    out = {}
    if fmt == "ascii":
        rows = body.decode("ascii").split("\n")
        pos = 0
        for name, count, props in elements:
            lines = [r for r in rows[pos:pos + count]]
            pos += count
            if name == "vertex":
                table = np.array([[float(x) for x in r.split()] for r in lines]).reshape(count, -1)
                _assign_vertex(out, {p[-1]: table[:, i] for i, p in enumerate(props)})
            elif name == "face":
                toks = [r.split() for r in lines]
                if any(t[0] != "3" for t in toks):
                    raise FormatError(f"{path}: only triangle faces are supported")
                out["faces"] = np.array([[int(x) for x in t[1:4]] for t in toks], dtype=np.int64).reshape(-1, 3)
        return out
    end = "<" if fmt == "binary_little_endian" else ">"
    off = 0
    for name, count, props in elements:
        if props and props[0][0] == "list":
            cnt_t, idx_t = _PLY_TYPES[props[0][1]], _PLY_TYPES[props[0][2]]
            dt = np.dtype([("n", end + cnt_t), ("idx", end + idx_t, (3,))])
            need = dt.itemsize * count
            if off + need > len(body):
                raise FormatError(f"{path}: truncated face data")
            rec = np.frombuffer(body, dtype=dt, count=count, offset=off)
            if count and np.any(rec["n"] != 3):
                raise FormatError(f"{path}: only triangle faces are supported")
            if name == "face":
                out["faces"] = rec["idx"].astype(np.int64)
            off += need
        else:
            dt = np.dtype([(p[1], end + _PLY_TYPES[p[0]]) for p in props])
            need = dt.itemsize * count
            if off + need > len(body):
                raise FormatError(f"{path}: truncated {name} data")
            rec = np.frombuffer(body, dtype=dt, count=count, offset=off)
            off += need
            if name == "vertex":
                _assign_vertex(out, {n: rec[n] for n in dt.names})
    if "vertices" not in out:
        raise FormatError(f"{path}: no vertex element")
    return out


def _assign_vertex(out, cols):
    out["vertices"] = np.stack([cols["x"], cols["y"], cols["z"]], 1).astype(np.float64)
    if "red" in cols:
        out["colors"] = np.stack([cols["red"], cols["green"], cols["blue"]], 1).astype(np.uint8)
    if "nx" in cols:
        out["normals"] = np.stack([cols["nx"], cols["ny"], cols["nz"]], 1).astype(np.float64)


def write_obj(path, vertices, faces, normals=None):
    with open(path, "w") as f:
        for p in vertices:
            f.write(f"v {p[0]:.7g} {p[1]:.7g} {p[2]:.7g}\n")
        if normals is not None:
            for n in normals:
                f.write(f"vn {n[0]:.7g} {n[1]:.7g} {n[2]:.7g}\n")
        for t in np.asarray(faces) + 1:
            if normals is not None:
                f.write(f"f {t[0]}//{t[0]} {t[1]}//{t[1]} {t[2]}//{t[2]}\n")
            else:
                f.write(f"f {t[0]} {t[1]} {t[2]}\n")


def read_obj(path):
    verts, faces = [], []
    with open(path) as f:
        for line in f:
            tok = line.split()
            if not tok:
                continue
            if tok[0] == "v":
                verts.append([float(x) for x in tok[1:4]])
            elif tok[0] == "f":
                faces.append([int(re.split("/", t)[0]) - 1 for t in tok[1:4]])
    return np.array(verts), np.array(faces, dtype=np.int64)


assert sys.byteorder in ("little", "big")
