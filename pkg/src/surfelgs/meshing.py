"""Mesh extraction: per-view depth renders fused into a TSDF volume, then marching cubes."""

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from skimage.measure import marching_cubes

from . import fileio
from .rasterizer import render
from .scene_io import sample_mesh

WEIGHT_CAP = 64.0
MIN_ALPHA = 0.5


@dataclass
class TsdfVolume:
    """Voxel grid of truncated signed distances (normalized to [-1, 1]) and weights.

    Voxel (i, j, k) has its center at ``origin + (i, j, k) * voxel_size``.
    """

    origin: np.ndarray
    voxel_size: float
    dims: tuple
    truncation: float
    tsdf: np.ndarray = None
    weight: np.ndarray = None

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        self.dims = tuple(int(d) for d in self.dims)
        if min(self.dims) <= 0 or not self.voxel_size > 0 or not self.truncation > 0:
            raise ValueError("dims, voxel_size and truncation must be positive")
        if self.tsdf is None:
            self.tsdf = np.ones(self.dims)
        if self.weight is None:
            self.weight = np.zeros(self.dims)

    @classmethod
    def around(cls, lo, hi, voxel_size, truncation=None, pad=None):
        """Volume covering the box [lo, hi] plus ``pad`` (default: the truncation)."""
        truncation = 5 * voxel_size if truncation is None else truncation
        pad = truncation if pad is None else pad
        lo = np.asarray(lo, float) - pad
        hi = np.asarray(hi, float) + pad
        dims = np.ceil((hi - lo) / voxel_size).astype(int) + 1
        return cls(lo, voxel_size, dims, truncation)

    def voxel_centers(self, axis0_slice=slice(None)):
        i = np.arange(self.dims[0])[axis0_slice]
        g = np.meshgrid(i, np.arange(self.dims[1]), np.arange(self.dims[2]), indexing="ij")
        return self.origin + np.stack(g, -1) * self.voxel_size


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    normals: np.ndarray = None
    colors: np.ndarray = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.triangles) and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise ValueError("triangle index out of range")

    def __len__(self):
        return len(self.triangles)

    @property
    def empty(self):
        return len(self.triangles) == 0

    def sample(self, n, seed=0):
        if self.empty:
            raise ValueError("cannot sample an empty mesh")
        return sample_mesh(self.vertices, self.triangles, n, np.random.default_rng(seed))

    def save(self, path):
        if path.lower().endswith(".obj"):
            fileio.write_obj(path, self.vertices, self.triangles, self.normals)
        else:
            fileio.write_ply(path, self.vertices, self.triangles, self.normals, self.colors)


def render_fusion_depths(model, cameras, mode="median", background=None):
    """Per-view depth maps for fusion; pixels with alpha < 0.5 are set to 0 (invalid)."""
    if mode not in ("median", "expected"):
        raise ValueError("mode must be 'median' or 'expected'")
    depths = []
    for cam in cameras:
        out = render(model, cam, background=background)
        if mode == "median":
            d = out.median_depth
        else:
            d = out.mean_depth   # already normalized by the accumulated alpha
        depths.append(np.where(out.alpha >= MIN_ALPHA, d, 0.0))
    return depths


def tsdf_integrate(volume, depth, cam, slab=32):
    """Fuse one depth map (0 = invalid) into ``volume`` in place.

    Voxels in front of the surface (sdf > truncation) are integrated as +1 so
    free space carves away floaters; voxels more than one truncation behind
    are left untouched. Weights are capped at 64.
    """
    depth = np.asarray(depth, dtype=np.float64)
    h, w = depth.shape
    tr = volume.truncation
    for s0 in range(0, volume.dims[0], slab):
        sl = slice(s0, min(s0 + slab, volume.dims[0]))
        pts = volume.voxel_centers(sl)
        q = cam.to_camera(pts)
        z = q[..., 2]
        zsafe = np.where(z > 0, z, 1.0)
        u = np.floor(cam.fx * q[..., 0] / zsafe + cam.cx).astype(np.int64)
        v = np.floor(cam.fy * q[..., 1] / zsafe + cam.cy).astype(np.int64)
        inside = (z > 0) & (u >= 0) & (u < w) & (v >= 0) & (v < h)
        d = np.where(inside, depth[np.clip(v, 0, h - 1), np.clip(u, 0, w - 1)], 0.0)
        sdf = d - z
        upd = inside & (d > 0) & (sdf > -tr)
        val = np.clip(sdf / tr, -1.0, 1.0)
        T = volume.tsdf[sl]
        W = volume.weight[sl]
        w_new = W + 1.0
        T[upd] = (T[upd] * W[upd] + val[upd]) / w_new[upd]
        W[upd] = np.minimum(w_new[upd], WEIGHT_CAP)
    return volume


def filter_depth_edges(depth, max_step):
    """Invalidate silhouette pixels and pixels whose depth jumps by more than
    ``max_step`` to a 4-neighbour (grazing surfaces). Their center ray can land
    behind voxels that are actually inside the object."""
    d = np.asarray(depth, dtype=np.float64)
    p = np.pad(d, 1, mode="constant")
    c = p[1:-1, 1:-1]
    keep = c > 0
    for nb in (p[:-2, 1:-1], p[2:, 1:-1], p[1:-1, :-2], p[1:-1, 2:]):
        keep &= (nb > 0) & (np.abs(nb - c) <= max_step)
    return np.where(keep, d, 0.0)


def fuse(depths, cameras, volume, edge_filter=True):
    for d, cam in zip(depths, cameras):
        if edge_filter:
            d = filter_depth_edges(d, 0.5 * volume.truncation)
        tsdf_integrate(volume, d, cam)
    return volume


def extract_mesh(volume):
    """Marching cubes at tsdf = 0, skipping cells that touch unobserved voxels.

    Returns an empty mesh when there is no zero crossing.
    """
    observed = volume.weight > 0
    if not observed.any():
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    t = volume.tsdf[observed]
    if t.min() > 0 or t.max() < 0:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    try:
        verts, faces, normals, _ = marching_cubes(volume.tsdf, level=0.0, mask=observed,
                                                  allow_degenerate=False)
    except (ValueError, RuntimeError):
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    # every vertex sits on a grid edge; drop triangles touching an edge with an unobserved end
    lo = np.clip(np.floor(verts).astype(np.int64), 0, np.array(volume.dims) - 1)
    hi = np.clip(np.ceil(verts).astype(np.int64), 0, np.array(volume.dims) - 1)
    ok_v = observed[tuple(lo.T)] & observed[tuple(hi.T)]
    faces = faces[ok_v[faces].all(1)]
    used = np.unique(faces)
    remap = np.full(len(verts), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    verts, normals, faces = verts[used], normals[used], remap[faces]
    verts = verts.astype(np.float64) * volume.voxel_size + volume.origin
    tri = verts[faces]
    area = np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
    faces = faces[area > 0]
    # tsdf is positive outside, so the gradient points outward; skimage returns -gradient
    return TriangleMesh(verts, faces, -normals.astype(np.float64))


def default_volume(model, voxel_size=None, truncation=None, resolution=128, min_opacity=0.5):
    """Box around the reasonably opaque splat centers.

    Without ``voxel_size`` the longest box side is split into ``resolution``
    voxels; the truncation defaults to 5 voxels.
    """
    keep = model.opacities >= min_opacity
    pts = model.means[keep] if keep.any() else model.means
    lo, hi = np.percentile(pts, 0.5, axis=0), np.percentile(pts, 99.5, axis=0)
    if voxel_size is None:
        voxel_size = float((hi - lo).max()) * 1.1 / resolution
    truncation = 5 * voxel_size if truncation is None else truncation
    return TsdfVolume.around(lo, hi, voxel_size, truncation, pad=max(truncation, 0.05 * (hi - lo).max()))


def mesh_from_model(model, cameras, mode="median", voxel_size=None, truncation=None, background=None):
    depths = render_fusion_depths(model, cameras, mode, background)
    vol = default_volume(model, voxel_size, truncation)
    fuse(depths, cameras, vol)
    return extract_mesh(vol), vol


def nearest_distances(a, b):
    """For each point of a, distance to the nearest point of b."""
    d, _ = cKDTree(b).query(a, k=1)
    return d


def chamfer_points(a, b):
    """Symmetric mean nearest-neighbour distance between point sets."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("chamfer distance of an empty point set")
    return 0.5 * (nearest_distances(a, b).mean() + nearest_distances(b, a).mean())


def chamfer_distance(mesh_a, mesh_b, samples=100000, seed=0):
    """Chamfer distance between surfaces from ``samples`` seeded area-uniform points each."""
    if mesh_a.empty or mesh_b.empty:
        raise ValueError("chamfer distance of an empty mesh")
    return chamfer_points(mesh_a.sample(samples, seed), mesh_b.sample(samples, seed + 1))
