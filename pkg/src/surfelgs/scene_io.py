"""Datasets on disk, analytic synthetic scenes and image metrics.

Dataset layout (all paths relative to the dataset root)::

    cameras.json      {"version": 1, "scene_extent": float, "frames": [...],
                       "ground_truth": {...}?}
    points.ply        binary little-endian vertices (x, y, z float, optional uchar rgb)
    images/*.png      8-bit sRGB, decoded to linear RGB on load

Each frame record has ``image`` (relative path), ``fx``, ``fy``, ``cx``,
``cy``, ``width``, ``height``, ``world_to_camera`` (16 numbers, row-major,
x right / y down / z forward), optional ``near`` / ``far`` and ``split``
("train" or "test"). Frames are ordered by image filename on load.

``ground_truth`` (written for generated scenes) holds ``kind``, the mesh
path and one depth PFM per frame (camera z, 0 where the ray misses).
"""

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import fileio
from .geometry import CameraModel
from .losses import ssim as _ssim

CAMERAS_FILE = "cameras.json"
POINTS_FILE = "points.ply"
SCHEMA_VERSION = 1
PSNR_CAP = 99.0
KINDS = ("sphere", "cube", "two-planes")


class DatasetError(Exception):
    """Dataset files are missing, malformed or inconsistent."""


@dataclass
class GroundTruth:
    kind: str
    params: dict
    mesh_vertices: np.ndarray
    mesh_faces: np.ndarray
    depths: list = field(default_factory=list)     # per view, (H, W), 0 = miss


@dataclass
class SceneDataset:
    cameras: list
    images: list
    names: list
    init_points: np.ndarray
    init_colors: np.ndarray = None       # uint8 (N, 3) or None
    train_idx: np.ndarray = None
    test_idx: np.ndarray = None
    scene_extent: float = 1.0
    ground_truth: GroundTruth = None

    def __post_init__(self):
        if len(self.cameras) != len(self.images) or len(self.cameras) != len(self.names):
            raise DatasetError("cameras, images and names differ in length")
        for cam, img, name in zip(self.cameras, self.images, self.names):
            if img.shape != (cam.height, cam.width, 3):
                raise DatasetError(f"{name}: image is {img.shape[1]}x{img.shape[0]}, "
                                   f"camera says {cam.width}x{cam.height}")
        if not self.scene_extent > 0:
            raise DatasetError("scene_extent must be positive")
        n = len(self.cameras)
        if self.train_idx is None:
            self.train_idx = np.arange(n)
        if self.test_idx is None:
            self.test_idx = np.zeros(0, dtype=np.int64)
        self.init_points = np.asarray(self.init_points, dtype=np.float64).reshape(-1, 3)

    def __len__(self):
        return len(self.cameras)


def camera_extent(cameras):
    """1.1 x the largest camera distance from the mean camera position."""
    centers = np.array([c.center for c in cameras])
    d = np.linalg.norm(centers - centers.mean(0), axis=1).max()
    return float(1.1 * d) if d > 0 else 1.0


# ---------------------------------------------------------------- disk I/O

def _frame_record(cam, image, split):
    return dict(image=image, fx=cam.fx, fy=cam.fy, cx=cam.cx, cy=cam.cy, width=cam.width,
                height=cam.height, world_to_camera=[float(x) for x in cam.world_to_camera.ravel()],
                near=cam.near, far=cam.far, split=split)


def _parse_camera(rec, where):
    try:
        E = np.array(rec["world_to_camera"], dtype=np.float64)
        if E.size != 16:
            raise DatasetError(f"{where}: world_to_camera needs 16 numbers")
        return CameraModel(float(rec["fx"]), float(rec["fy"]), float(rec["cx"]), float(rec["cy"]),
                           int(rec["width"]), int(rec["height"]), E.reshape(4, 4),
                           float(rec.get("near", 0.2)), float(rec.get("far", 1000.0)))
    except KeyError as e:
        raise DatasetError(f"{where}: missing field {e}") from None
    except ValueError as e:
        raise DatasetError(f"{where}: {e}") from None


def save_dataset(ds, root):
    os.makedirs(os.path.join(root, "images"), exist_ok=True)
    test = set(int(i) for i in ds.test_idx)
    frames = []
    for i, (cam, img, name) in enumerate(zip(ds.cameras, ds.images, ds.names)):
        rel = f"images/{name}.png"
        fileio.write_png(os.path.join(root, rel), img)
        frames.append(_frame_record(cam, rel, "test" if i in test else "train"))
    doc = dict(version=SCHEMA_VERSION, scene_extent=ds.scene_extent, frames=frames)
    if ds.ground_truth is not None:
        gt = ds.ground_truth
        os.makedirs(os.path.join(root, "ground_truth"), exist_ok=True)
        fileio.write_ply(os.path.join(root, "ground_truth", "mesh.ply"), gt.mesh_vertices, gt.mesh_faces)
        depth_files = []
        for name, d in zip(ds.names, gt.depths):
            rel = f"ground_truth/depth_{name}.pfm"
            fileio.write_pfm(os.path.join(root, rel), d)
            depth_files.append(rel)
        doc["ground_truth"] = dict(kind=gt.kind, params=gt.params, mesh="ground_truth/mesh.ply",
                                   depths=depth_files)
    with open(os.path.join(root, CAMERAS_FILE), "w") as f:
        json.dump(doc, f, indent=1)
    fileio.write_ply(os.path.join(root, POINTS_FILE), ds.init_points, colors=ds.init_colors)


def load_dataset(root, threads=None):
    """Read a dataset directory. Frames are sorted by image path."""
    path = os.path.join(root, CAMERAS_FILE)
    if not os.path.isfile(path):
        raise DatasetError(f"missing {path}")
    try:
        with open(path) as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise DatasetError(f"{path}: malformed JSON ({e})") from None
    if not isinstance(doc, dict) or not isinstance(doc.get("frames"), list) or not doc["frames"]:
        raise DatasetError(f"{path}: expected an object with a non-empty 'frames' list")
    if doc.get("version", SCHEMA_VERSION) != SCHEMA_VERSION:
        raise DatasetError(f"{path}: unsupported schema version {doc.get('version')}")
    gt_doc = doc.get("ground_truth")
    order = sorted(range(len(doc["frames"])), key=lambda i: doc["frames"][i].get("image", ""))
    frames = [doc["frames"][i] for i in order]
    cams, files = [], []
    for rec in frames:
        if "image" not in rec:
            raise DatasetError(f"{path}: frame without 'image'")
        cams.append(_parse_camera(rec, rec["image"]))
        files.append(os.path.join(root, rec["image"]))
    for fpath in files:
        if not os.path.isfile(fpath):
            raise DatasetError(f"missing image {fpath}")
    with ThreadPoolExecutor(threads) as ex:
        images = list(ex.map(fileio.read_png, files))
    names = [os.path.splitext(os.path.basename(r["image"]))[0] for r in frames]
    split = np.array([r.get("split", "train") for r in frames])
    ppath = os.path.join(root, POINTS_FILE)
    if not os.path.isfile(ppath):
        raise DatasetError(f"missing {ppath}")
    try:
        pts = fileio.read_ply(ppath)
    except fileio.FormatError as e:
        raise DatasetError(str(e)) from None
    extent = doc.get("scene_extent")
    gt = None
    if gt_doc:
        mesh = fileio.read_ply(os.path.join(root, gt_doc["mesh"]))
        depth_by_name = {os.path.basename(p)[len("depth_"):-len(".pfm")]: p for p in gt_doc.get("depths", [])}
        depths = [fileio.read_pfm(os.path.join(root, depth_by_name[n])) if n in depth_by_name else None
                  for n in names]
        gt = GroundTruth(gt_doc["kind"], gt_doc.get("params", {}), mesh["vertices"],
                         mesh.get("faces", np.zeros((0, 3), dtype=np.int64)), depths)
    return SceneDataset(cams, images, names, pts["vertices"], pts.get("colors"),
                        np.flatnonzero(split != "test"), np.flatnonzero(split == "test"),
                        float(extent) if extent is not None else camera_extent(cams), gt)


# --------------------------------------------------------- synthetic scenes

def look_at(eye, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)):
    """World-to-camera matrix for a camera at ``eye`` looking at ``target`` (y down)."""
    eye = np.asarray(eye, dtype=np.float64)
    f = np.asarray(target, dtype=np.float64) - eye
    f /= np.linalg.norm(f)
    r = np.cross(f, up)
    r /= np.linalg.norm(r)
    d = np.cross(f, r)
    E = np.eye(4)
    E[:3, :3] = np.stack([r, d, f])
    E[:3, 3] = -E[:3, :3] @ eye
    return E


def ring_cameras(n_views, resolution, distance=3.0, elevation_deg=25.0, focal_scale=0.9,
                 near=0.2, far=100.0):
    """Cameras on a ring around the z axis, alternating elevation 0, +e, -e."""
    cams = []
    pattern = (0.0, 1.0, -1.0)
    for i in range(n_views):
        az = 2 * np.pi * i / n_views
        el = np.deg2rad(elevation_deg) * pattern[i % 3]
        eye = distance * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        f = focal_scale * resolution
        cams.append(CameraModel(f, f, resolution / 2.0, resolution / 2.0, resolution, resolution,
                                look_at(eye), near, far))
    return cams


def texture(p):
    """Smooth procedural albedo in linear RGB."""
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    r = 0.45 + 0.3 * np.sin(3.1 * x + 1.7 * y + 0.3)
    g = 0.45 + 0.3 * np.sin(2.6 * y - 1.9 * z + 1.1)
    b = 0.45 + 0.3 * np.sin(2.9 * z + 2.2 * x + 2.0)
    return np.stack([r, g, b], axis=-1)


DEFAULT_PARAMS = {
    "sphere": {"radius": 1.0},
    "cube": {"half_size": 0.7},
    "two-planes": {"half_size": 0.8},
}


def _hit_sphere(o, d, radius):
    b = d @ o
    a = np.sum(d * d, -1)
    c = o @ o - radius * radius
    disc = b * b - a * c
    t = np.where(disc >= 0, (-b - np.sqrt(np.maximum(disc, 0))) / a, np.inf)
    return np.where(t > 0, t, np.inf)


def _hit_cube(o, d, h):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (-h - o) * inv
        t2 = (h - o) * inv
    tmin = np.nanmax(np.minimum(t1, t2), -1)
    tmax = np.nanmin(np.maximum(t1, t2), -1)
    return np.where((tmax >= tmin) & (tmin > 0), tmin, np.inf)


def _hit_planes(o, d, h):
    best = np.full(d.shape[:-1], np.inf)
    # squares z = 0 and x = 0, both |other coords| <= h
    for axis, others in ((2, (0, 1)), (0, (1, 2))):
        with np.errstate(divide="ignore", invalid="ignore"):
            t = -o[axis] / d[..., axis]
        p = o + t[..., None] * d
        inside = (np.abs(p[..., others[0]]) <= h) & (np.abs(p[..., others[1]]) <= h) & (t > 0)
        best = np.where(inside & (t < best), t, best)
    return best


def trace(kind, cam, px, py, params=None):
    """Camera depth and linear color of the object along the rays through pixel coords (px, py).

    Depth is +inf and color 0 where the ray misses.
    """
    params = DEFAULT_PARAMS[kind] if params is None else params
    px, py = np.broadcast_arrays(np.asarray(px, float), np.asarray(py, float))
    dc = np.stack([(px - cam.cx) / cam.fx, (py - cam.cy) / cam.fy, np.ones_like(px)], -1)
    d = dc @ cam.rotation   # world direction with unit camera depth
    o = cam.center
    if kind == "sphere":
        t = _hit_sphere(o, d, params["radius"])
    elif kind == "cube":
        t = _hit_cube(o, d, params["half_size"])
    elif kind == "two-planes":
        t = _hit_planes(o, d, params["half_size"])
    else:
        raise ValueError(f"unknown scene kind {kind!r}")
    hit = np.isfinite(t)
    p = o + np.where(hit, t, 0.0)[..., None] * d
    color = np.where(hit[..., None], texture(p), 0.0)
    return t, color


def render_ground_truth(kind, cam, params=None, supersample=4):
    """Supersampled image (linear RGB), center-ray depth (0 = miss) and coverage fraction."""
    s = supersample
    offs = (np.arange(s) + 0.5) / s
    ys, xs = np.mgrid[0:cam.height, 0:cam.width]
    color = np.zeros((cam.height, cam.width, 3))
    cover = np.zeros((cam.height, cam.width))
    for oy in offs:
        for ox in offs:
            t, c = trace(kind, cam, xs + ox, ys + oy, params)
            color += c
            cover += np.isfinite(t)
    color /= s * s
    cover /= s * s
    t, _ = trace(kind, cam, xs + 0.5, ys + 0.5, params)
    depth = np.where(np.isfinite(t), t, 0.0)
    return color, depth, cover


def icosphere(level=4, radius=1.0):
    t = (1 + np.sqrt(5)) / 2
    v = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0), (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
         (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    f = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4), (11, 10, 2),
         (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9), (4, 9, 5),
         (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.array(p, float) / np.linalg.norm(p) for p in v]
    faces = f
    for _ in range(level):
        cache, new = {}, []

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    return radius * np.array(verts), np.array(faces, dtype=np.int64)


def analytic_mesh(kind, params=None):
    params = DEFAULT_PARAMS[kind] if params is None else params
    if kind == "sphere":
        return icosphere(5, params["radius"])
    h = params["half_size"]
    if kind == "cube":
        v = np.array([[x, y, z] for x in (-h, h) for y in (-h, h) for z in (-h, h)])
        f = np.array([[0, 1, 3], [0, 3, 2], [4, 6, 7], [4, 7, 5], [0, 4, 5], [0, 5, 1],
                      [2, 3, 7], [2, 7, 6], [0, 2, 6], [0, 6, 4], [1, 5, 7], [1, 7, 3]])
        return v, f
    if kind == "two-planes":
        v = np.array([[-h, -h, 0], [h, -h, 0], [h, h, 0], [-h, h, 0],
                      [0, -h, -h], [0, h, -h], [0, h, h], [0, -h, h]], float)
        f = np.array([[0, 1, 2], [0, 2, 3], [4, 5, 6], [4, 6, 7]])
        return v, f
    raise ValueError(f"unknown scene kind {kind!r}")


def sample_mesh(vertices, faces, n, rng):
    """Area-weighted uniform samples on a triangle mesh."""
    tri = vertices[faces]
    area = 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
    if area.sum() <= 0:
        raise ValueError("mesh has zero area")
    pick = rng.choice(len(faces), size=n, p=area / area.sum())
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    t = tri[pick]
    return ((1 - r1)[:, None] * t[:, 0] + (r1 * (1 - r2))[:, None] * t[:, 1]
            + (r1 * r2)[:, None] * t[:, 2])


def generate_synthetic_scene(kind="sphere", n_views=24, resolution=128, seed=0, n_points=2000,
                             point_noise=0.02, supersample=4, test_every=8, params=None):
    """Ray-traced textured object seen from ring cameras, with analytic ground truth.

    Images pass through 8-bit sRGB so a saved dataset reloads exactly. Every
    ``test_every``-th view (starting at 0) is held out. Initial points are
    uniform surface samples plus Gaussian noise of std ``point_noise``.
    """
    if n_views < 2:
        raise ValueError("need at least 2 views")
    if kind not in KINDS:
        raise ValueError(f"unknown scene kind {kind!r}")
    params = dict(DEFAULT_PARAMS[kind] if params is None else params)
    rng = np.random.default_rng(seed)
    cams = ring_cameras(n_views, resolution)
    images, depths = [], []
    for cam in cams:
        img, depth, _ = render_ground_truth(kind, cam, params, supersample)
        images.append(fileio.dequantize_srgb8(fileio.quantize_srgb8(img)))
        depths.append(depth.astype(np.float32).astype(np.float64))
    verts, faces = analytic_mesh(kind, params)
    pts = sample_mesh(verts, faces, n_points, rng)
    if kind == "sphere":
        pts *= params["radius"] / np.linalg.norm(pts, axis=1, keepdims=True)
    colors = fileio.quantize_srgb8(texture(pts))
    pts = pts + point_noise * rng.standard_normal(pts.shape)
    pts = pts.astype(np.float32).astype(np.float64)
    idx = np.arange(n_views)
    test = idx[idx % test_every == 0] if test_every else idx[:0]
    train = idx[~np.isin(idx, test)]
    gt = GroundTruth(kind, params, verts, faces, depths)
    return SceneDataset(cams, images, [f"{i:03d}" for i in range(n_views)], pts, colors,
                        train, test, camera_extent(cams), gt)


# ----------------------------------------------------------------- metrics

def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b):
    """10 log10(1 / MSE) for [0, 1] images, capped at 99 dB."""
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse <= 10 ** (-PSNR_CAP / 10):
        return PSNR_CAP
    return min(PSNR_CAP, 10 * np.log10(1.0 / mse))


def ssim(a, b):
    a, b = _check_pair(a, b)
    return _ssim(a, b)
