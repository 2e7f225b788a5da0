"""Tile-binned front-to-back surfel rasterizer.

``project`` turns a :class:`SplatModel` into per-camera arrays (the 4x3
non-zero part of ``W @ H``, projected centers, pixel rectangles, colors,
camera-facing normals). ``bin_and_sort`` builds the tile lists and
``render_forward`` blends them with the selected kernel backend.
"""

from dataclasses import dataclass

import numpy as np

from . import _backend
from . import _kernels_numpy as knp
from .geometry import LOWPASS_SIGMA, bounds_from_corners, splat_corners, world_to_screen
from .sh import sh_basis

TILE_SIZE = 16
MAX_CONTRIB = 64
K_SIGMA = 3.0
NGRAD = 19


class EmptyModelError(ValueError):
    """Raised when asked to render a model with no primitives."""


@dataclass
class Projected:
    """Per-splat quantities for one camera (all arrays have N rows)."""

    W: np.ndarray            # (4, 4) world -> screen
    R: np.ndarray            # (N, 3, 3) tangent frame columns t_u, t_v, t_w
    scales: np.ndarray       # (N, 2)
    Tm: np.ndarray           # (N, 4, 3) columns u, v, center of W @ H
    cpix: np.ndarray         # (N, 2) projected center, pixels
    depth: np.ndarray        # (N,) camera depth of the center
    rect: np.ndarray         # (N, 4) inclusive pixel rectangle, (0, 0, -1, -1) if culled
    visible: np.ndarray      # (N,) bool
    opacity: np.ndarray      # (N,)
    colors: np.ndarray       # (N, 3)
    normals: np.ndarray      # (N, 3) flipped toward the camera
    flip: np.ndarray         # (N,) +1 / -1 applied to t_w
    view_dirs: np.ndarray    # (N, 3) unit camera -> center
    view_dist: np.ndarray    # (N,)
    sh_degree: int


@dataclass
class TileGrid:
    tile_size: int
    tiles_x: int
    tiles_y: int
    entries: np.ndarray      # (E,) splat index per (tile, splat) pair, tile-major, depth-sorted
    ranges: np.ndarray       # (tiles_x * tiles_y, 2) [start, end) into entries
    pair_tile: np.ndarray    # (E,) tile id of each entry

    def tile_list(self, t):
        a, b = self.ranges[t]
        return self.entries[a:b]


@dataclass
class ReplayLists:
    """Per-pixel blend lists, capped at K entries, in blend order."""

    slot: np.ndarray         # (H, W, K) index into TileGrid.entries
    w: np.ndarray            # blend weight omega_i
    z: np.ndarray            # intersection depth
    g: np.ndarray            # filtered Gaussian value
    T: np.ndarray            # transmittance before the splat
    count: np.ndarray        # (H, W)
    median_index: np.ndarray  # (H, W) list index of the median splat, -1 if none
    entries: np.ndarray

    def ids(self, iy, ix):
        n = self.count[iy, ix]
        return self.entries[self.slot[iy, ix, :n]]

    def pixel(self, iy, ix):
        """[(splat id, omega, z, G, T), ...] for one pixel."""
        n = self.count[iy, ix]
        ids = self.ids(iy, ix)
        return [(int(ids[k]), float(self.w[iy, ix, k]), float(self.z[iy, ix, k]),
                 float(self.g[iy, ix, k]), float(self.T[iy, ix, k])) for k in range(n)]


@dataclass
class RenderOutput:
    color: np.ndarray
    alpha: np.ndarray
    mean_depth: np.ndarray
    median_depth: np.ndarray
    normal: np.ndarray
    distortion: np.ndarray
    n_contrib: np.ndarray
    normal_sum: np.ndarray
    capped: np.ndarray
    replay: ReplayLists
    proj: Projected
    grid: TileGrid
    background: np.ndarray

    @property
    def n_capped(self):
        return int(self.capped.sum())


def ndc_depth(z, near, far):
    """Perspective depth remap: 0 at the near plane, 1 at the far plane."""
    return far * (z - near) / (z * (far - near))


def project(model, cam, k_sigma=K_SIGMA, sigma=LOWPASS_SIGMA):
    if len(model) == 0:
        raise EmptyModelError("model has no primitives")
    W = world_to_screen(cam)
    R = model.rotations
    s = model.scales
    tu, tv, tw = R[:, :, 0], R[:, :, 1], R[:, :, 2]
    W3, w4 = W[:, :3], W[:, 3]
    Tm = np.empty((len(model), 4, 3))
    Tm[:, :, 0] = (s[:, :1] * tu) @ W3.T
    Tm[:, :, 1] = (s[:, 1:] * tv) @ W3.T
    Tm[:, :, 2] = model.means @ W3.T + w4
    depth = Tm[:, 2, 2]
    cpix = Tm[:, 0:2, 2] / Tm[:, 3:4, 2]

    corners = splat_corners(model.means, tu, tv, s[:, 0], s[:, 1], k_sigma)
    cxy, cz = cam.project(corners)
    rect = bounds_from_corners(cxy, cz, cam.near, cam.width, cam.height, k_sigma * sigma)
    culled = depth <= cam.near
    rect[culled] = (0, 0, -1, -1)
    visible = rect[:, 0] <= rect[:, 2]

    offs = model.means - cam.center
    dist = np.linalg.norm(offs, axis=1)
    dirs = offs / np.maximum(dist, 1e-12)[:, None]
    Y, _ = sh_basis(model.sh_degree, dirs)
    colors = np.einsum("nk,nkc->nc", Y, model.sh[:, :Y.shape[1]]) + 0.5
    flip = np.where(np.sum(tw * offs, axis=1) > 0, -1.0, 1.0)
    normals = tw * flip[:, None]
    return Projected(W, R, s, Tm, cpix, depth, rect, visible, model.opacities, colors, normals,
                     flip, dirs, dist, model.sh_degree)


def bin_and_sort(proj, cam, tile_size=TILE_SIZE):
    """Assign visible splats to every tile their rectangle touches; sort by (depth, index)."""
    tiles_x = -(-cam.width // tile_size)
    tiles_y = -(-cam.height // tile_size)
    vis = np.flatnonzero(proj.visible)
    r = proj.rect[vis]
    tx0, ty0 = r[:, 0] // tile_size, r[:, 1] // tile_size
    nx = r[:, 2] // tile_size - tx0 + 1
    ny = r[:, 3] // tile_size - ty0 + 1
    counts = nx * ny
    total = int(counts.sum())
    first = np.repeat(np.cumsum(counts) - counts, counts)
    local = np.arange(total) - first
    nx_r = np.repeat(nx, counts)
    tile = (np.repeat(ty0, counts) + local // nx_r) * tiles_x + np.repeat(tx0, counts) + local % nx_r
    splat = np.repeat(vis, counts)
    order = np.lexsort((splat, proj.depth[splat], tile))
    entries = splat[order].astype(np.int64)
    pair_tile = tile[order].astype(np.int64)
    n_tiles = tiles_x * tiles_y
    bounds = np.searchsorted(pair_tile, np.arange(n_tiles + 1))
    ranges = np.stack([bounds[:-1], bounds[1:]], axis=1).astype(np.int64)
    return TileGrid(tile_size, tiles_x, tiles_y, entries, ranges, pair_tile)


def _alloc(h, w, K):
    return dict(
        color=np.zeros((h, w, 3)), alpha=np.zeros((h, w)), mean=np.zeros((h, w)),
        median=np.zeros((h, w)), nsum=np.zeros((h, w, 3)), dist=np.zeros((h, w)),
        count=np.zeros((h, w), dtype=np.int64), medk=np.full((h, w), -1, dtype=np.int64),
        capped=np.zeros((h, w), dtype=bool),
        slot=np.zeros((h, w, K), dtype=np.int64), w=np.zeros((h, w, K)), z=np.zeros((h, w, K)),
        g=np.zeros((h, w, K)), T=np.zeros((h, w, K)),
    )


def _slot_lookup(proj, grid):
    """Map (splat, pixel) -> entry slot, for the splat-major numpy kernel."""
    # entries are sorted by (tile, depth, idx); per splat, enumerate its slots by tile id
    key = grid.pair_tile * (len(proj.depth) + 1) + grid.entries
    order = np.argsort(key, kind="stable")
    skey = key[order]
    ts = grid.tile_size

    def slot_of(s, iy, ix):
        t = (iy // ts) * grid.tiles_x + ix // ts
        k = np.searchsorted(skey, t * (len(proj.depth) + 1) + s)
        return order[k]

    return slot_of


def render_forward(proj, cam, grid, background=None, max_contrib=MAX_CONTRIB, backend=None):
    backend = _backend.resolve(backend)
    h, w = cam.height, cam.width
    bg = np.zeros(3) if background is None else np.asarray(background, dtype=np.float64)
    o = _alloc(h, w, max_contrib)
    inv2var = 1.0 / (2.0 * LOWPASS_SIGMA ** 2)
    if backend == "numba":
        from . import _kernels_numba as knb
        knb.forward(grid.ranges, grid.entries, grid.tiles_x, grid.tile_size, w, h, proj.Tm,
                    proj.cpix, proj.opacity, proj.colors, proj.normals, proj.rect, bg,
                    cam.near, cam.far, max_contrib, inv2var,
                    o["color"], o["alpha"], o["mean"], o["median"], o["nsum"], o["dist"],
                    o["count"], o["medk"], o["capped"], o["slot"], o["w"], o["z"], o["g"], o["T"])
    else:
        vis = np.flatnonzero(proj.visible)
        order = vis[np.lexsort((vis, proj.depth[vis]))]
        knp.forward(order, _slot_lookup(proj, grid), w, h, proj.Tm, proj.cpix, proj.opacity,
                    proj.colors, proj.normals, proj.rect, bg, cam.near, cam.far, max_contrib,
                    inv2var, o)
    nsum = o["nsum"]
    norm = np.linalg.norm(nsum, axis=-1, keepdims=True)
    normal = np.where(norm > 0, nsum / np.where(norm > 0, norm, 1.0), 0.0)
    replay = ReplayLists(o["slot"], o["w"], o["z"], o["g"], o["T"], o["count"], o["medk"],
                         grid.entries)
    return RenderOutput(o["color"], o["alpha"], o["mean"], o["median"], normal, o["dist"],
                        o["count"], nsum, o["capped"], replay, proj, grid, bg)


def render(model, cam, background=None, max_contrib=MAX_CONTRIB, backend=None,
           tile_size=TILE_SIZE):
    """Project, bin and blend ``model`` as seen by ``cam``."""
    proj = project(model, cam)
    grid = bin_and_sort(proj, cam, tile_size)
    return render_forward(proj, cam, grid, background, max_contrib, backend)


def render_channels_for_loss(out):
    """The replay lists recorded by the forward pass."""
    return out.replay


def render_reference(proj, cam, background=None, max_contrib=MAX_CONTRIB):
    """Brute-force renderer: no tiles, every pixel scans all visible splats.

    Always compiled with numba so its arithmetic matches the tile kernel
    bit-for-bit.
    """
    h, w = cam.height, cam.width
    bg = np.zeros(3) if background is None else np.asarray(background, dtype=np.float64)
    vis = np.flatnonzero(proj.visible)
    order = vis[np.lexsort((vis, proj.depth[vis]))].astype(np.int64)
    out = dict(color=np.zeros((h, w, 3)), alpha=np.zeros((h, w)), mean=np.zeros((h, w)),
               median=np.zeros((h, w)), dist=np.zeros((h, w)),
               count=np.zeros((h, w), dtype=np.int64))
    inv2var = 1.0 / (2.0 * LOWPASS_SIGMA ** 2)
    from . import _kernels_numba as knb

    knb.reference(order, w, h, proj.Tm, proj.cpix, proj.opacity, proj.colors, proj.normals, proj.rect, bg,
       cam.near, cam.far, max_contrib, inv2var, out["color"], out["alpha"], out["mean"],
       out["median"], out["dist"], out["count"])
    return out
