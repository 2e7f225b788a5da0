"""Surfel primitive and perspective-correct ray-splat intersection.

A splat is a flat Gaussian disk: center ``p``, orthonormal tangents ``t_u``,
``t_v`` and per-axis scales. Its plane is mapped to screen space by the
homogeneous matrix ``W @ H``; a pixel ray is written as two homogeneous planes
and pulled back to the splat's uv space with ``(W @ H).T``, so no matrix is
ever inverted.
"""

from dataclasses import dataclass, field

import numpy as np

LOWPASS_SIGMA = np.sqrt(2.0) / 2.0
DEGENERATE_RTOL = 1e-9


class Degenerate(Exception):
    """The pixel ray is (numerically) parallel to the splat plane."""


@dataclass(frozen=True)
class SplatGeometry:
    center: np.ndarray
    tangent_u: np.ndarray
    tangent_v: np.ndarray
    scale_u: float
    scale_v: float

    def __post_init__(self):
        for name in ("center", "tangent_u", "tangent_v"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        tu, tv = self.tangent_u, self.tangent_v
        if abs(np.linalg.norm(tu) - 1) > 1e-6 or abs(np.linalg.norm(tv) - 1) > 1e-6:
            raise ValueError("tangent vectors must be unit length")
        if abs(tu @ tv) > 1e-6:
            raise ValueError("tangent vectors must be orthogonal")
        if not (self.scale_u > 0 and self.scale_v > 0):
            raise ValueError("scales must be positive")

    @property
    def normal(self):
        return np.cross(self.tangent_u, self.tangent_v)

    @classmethod
    def from_quaternion(cls, center, quat, scales):
        R = quat_to_rotmat(np.asarray(quat, dtype=np.float64))
        return cls(center, R[:, 0], R[:, 1], float(scales[0]), float(scales[1]))


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera. ``world_to_camera`` is a rigid 4x4 (x right, y down, z forward)."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    world_to_camera: np.ndarray = field(default_factory=lambda: np.eye(4))
    near: float = 0.2
    far: float = 1000.0

    def __post_init__(self):
        E = np.asarray(self.world_to_camera, dtype=np.float64)
        object.__setattr__(self, "world_to_camera", E)
        if E.shape != (4, 4):
            raise ValueError("world_to_camera must be 4x4")
        R = E[:3, :3]
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-6) or abs(np.linalg.det(R) - 1) > 1e-6:
            raise ValueError("world_to_camera rotation is not orthonormal with det +1")
        if not np.allclose(E[3], [0, 0, 0, 1]):
            raise ValueError("world_to_camera bottom row must be (0, 0, 0, 1)")
        if not (self.near > 0 and self.far > self.near):
            raise ValueError("need 0 < near < far")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")

    @property
    def rotation(self):
        return self.world_to_camera[:3, :3]

    @property
    def center(self):
        """Camera position in world coordinates."""
        R = self.rotation
        return -R.T @ self.world_to_camera[:3, 3]

    def to_camera(self, points):
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.world_to_camera[:3, 3]

    def project(self, points):
        """World points -> (pixel xy, camera depth)."""
        q = self.to_camera(points)
        z = q[..., 2]
        xy = np.stack([self.fx * q[..., 0] / z + self.cx, self.fy * q[..., 1] / z + self.cy], axis=-1)
        return xy, z

    def pixel_rays(self):
        """Unit-depth camera-space directions through every pixel center, (H, W, 3)."""
        xs = (np.arange(self.width) + 0.5 - self.cx) / self.fx
        ys = (np.arange(self.height) + 0.5 - self.cy) / self.fy
        X, Y = np.meshgrid(xs, ys)
        return np.stack([X, Y, np.ones_like(X)], axis=-1)


def quat_to_rotmat(q):
    """Rotation matrix from a (w, x, y, z) quaternion; normalizes first. Batched over leading axes."""
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def rotmat_grad_to_quat(q, dR):
    """Pull a gradient on ``quat_to_rotmat(q)`` back to the unnormalized quaternion."""
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    qn = q / norm
    w, x, y, z = qn[..., 0], qn[..., 1], qn[..., 2], qn[..., 3]
    G = dR
    gw = 2 * (-z * G[..., 0, 1] + y * G[..., 0, 2] + z * G[..., 1, 0]
              - x * G[..., 1, 2] - y * G[..., 2, 0] + x * G[..., 2, 1])
    gx = (2 * (y * G[..., 0, 1] + z * G[..., 0, 2] + y * G[..., 1, 0] - w * G[..., 1, 2]
               + z * G[..., 2, 0] + w * G[..., 2, 1])
          - 4 * x * (G[..., 1, 1] + G[..., 2, 2]))
    gy = (2 * (x * G[..., 0, 1] + w * G[..., 0, 2] + x * G[..., 1, 0] + z * G[..., 1, 2]
               - w * G[..., 2, 0] + z * G[..., 2, 1])
          - 4 * y * (G[..., 0, 0] + G[..., 2, 2]))
    gz = (2 * (-w * G[..., 0, 1] + x * G[..., 0, 2] + w * G[..., 1, 0] + y * G[..., 1, 2]
               + x * G[..., 2, 0] + y * G[..., 2, 1])
          - 4 * z * (G[..., 0, 0] + G[..., 1, 1]))
    gq = np.stack([gw, gx, gy, gz], axis=-1)
    # through q / |q|
    return (gq - qn * np.sum(gq * qn, axis=-1, keepdims=True)) / norm


def build_splat_transform(g):
    """Homogeneous 4x4 H with H @ (u, v, 1, 1) = (p + s_u t_u u + s_v t_v v, 1)."""
    H = np.zeros((4, 4))
    H[:3, 0] = g.scale_u * g.tangent_u
    H[:3, 1] = g.scale_v * g.tangent_v
    H[:3, 3] = g.center
    H[3, 3] = 1.0
    return H


def world_to_screen(cam):
    """4x4 W mapping homogeneous world points to (x z, y z, z, z) with (x, y) in pixels."""
    P = np.array([
        [cam.fx, 0.0, cam.cx, 0.0],
        [0.0, cam.fy, cam.cy, 0.0],
        [0.0, 0.0, 1.0, 0.0],
        [0.0, 0.0, 1.0, 0.0],
    ])
    return P @ cam.world_to_camera


def pixel_planes(x, y):
    """Homogeneous x- and y-planes whose intersection is the ray through screen point (x, y).

    Callers pass pixel centers, i.e. ``(ix + 0.5, iy + 0.5)``.
    """
    return np.array([-1.0, 0.0, 0.0, x]), np.array([0.0, -1.0, 0.0, y])


def transform_planes(W, H, h_x, h_y):
    WH = W @ H
    return WH.T @ h_x, WH.T @ h_y


def intersect(h_u, h_v):
    """Solve h_u . (u, v, 1, 1) = h_v . (u, v, 1, 1) = 0 for (u, v).

    Components follow the 1-based naming h^1, h^2, h^4 of the closed form;
    h^3 multiplies the zero third column of H and is never needed.
    Raises :class:`Degenerate` for an edge-on configuration.
    """
    a1, a2, a4 = h_u[0], h_u[1], h_u[3]
    b1, b2, b4 = h_v[0], h_v[1], h_v[3]
    den = a1 * b2 - a2 * b1
    n1, n2, n3, n4 = a2 * b4, a4 * b2, a4 * b1, a1 * b4
    if abs(den) <= DEGENERATE_RTOL * max(abs(n1), abs(n2), abs(n3), abs(n4)):
        raise Degenerate(f"denominator {den:.3e} too small")
    return (n1 - n2) / den, (n3 - n4) / den


def intersection_depth(W, H, u, v):
    return float((W @ H @ np.array([u, v, 1.0, 1.0]))[2])


def gaussian_value(u, v):
    return np.exp(-0.5 * (u * u + v * v))


def filtered_value(g_intersect, pixel, center_proj, sigma=LOWPASS_SIGMA):
    """Object-space low-pass: the intersection value floored by a screen-space Gaussian."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    d = np.asarray(pixel, dtype=np.float64) - np.asarray(center_proj, dtype=np.float64)
    return max(g_intersect, float(np.exp(-(d @ d) / (2 * sigma * sigma))))


def ray_splat(g, cam, x, y):
    """Full ray-splat evaluation for one splat and one screen point.

    Returns ``(u, v, z, value)`` where value is the unfiltered Gaussian; raises
    :class:`Degenerate` for edge-on splats.
    """
    W, H = world_to_screen(cam), build_splat_transform(g)
    h_u, h_v = transform_planes(W, H, *pixel_planes(x, y))
    u, v = intersect(h_u, h_v)
    return u, v, intersection_depth(W, H, u, v), gaussian_value(u, v)


def bounds_from_corners(corners_xy, corners_z, near, width, height, pad):
    """Pixel-index rectangle (x0, y0, x1, y1), inclusive, or None when culled.

    A pixel ``(ix, iy)`` belongs to the rectangle when its center lies inside
    the continuous box spanned by the projected corners dilated by ``pad``.
    Batched: ``corners_xy`` is (N, 4, 2), ``corners_z`` is (N, 4); returns an
    (N, 4) int array with culled rows set to (0, 0, -1, -1).
    """
    behind = np.any(corners_z <= 1e-6 * near, axis=1)
    lo = np.min(corners_xy, axis=1) - pad
    hi = np.max(corners_xy, axis=1) + pad
    # corners behind the eye project nonsensically: widen to the whole image
    lo[behind] = -np.inf
    hi[behind] = np.inf
    x0 = np.ceil(np.clip(lo[:, 0] - 0.5, -1, width))
    y0 = np.ceil(np.clip(lo[:, 1] - 0.5, -1, height))
    x1 = np.floor(np.clip(hi[:, 0] - 0.5, -1, width))
    y1 = np.floor(np.clip(hi[:, 1] - 0.5, -1, height))
    rect = np.stack([np.maximum(x0, 0), np.maximum(y0, 0),
                     np.minimum(x1, width - 1), np.minimum(y1, height - 1)], axis=1).astype(np.int64)
    empty = (rect[:, 0] > rect[:, 2]) | (rect[:, 1] > rect[:, 3])
    rect[empty] = (0, 0, -1, -1)
    return rect


def splat_corners(centers, tu, tv, su, sv, k_sigma):
    """World-space corners of the k-sigma square around each splat, (N, 4, 3)."""
    du = (k_sigma * su)[:, None] * tu
    dv = (k_sigma * sv)[:, None] * tv
    return np.stack([centers + du + dv, centers + du - dv, centers - du + dv, centers - du - dv], axis=1)


def screen_bounds(g, cam, k_sigma=3.0, sigma=LOWPASS_SIGMA):
    """Conservative pixel rectangle for one splat, or None when culled.

    The k-sigma ellipse is contained in its k-sigma square, whose projection
    is the convex hull of the projected corners. The box is dilated by
    ``k_sigma * sigma`` pixels so the screen-space low-pass footprint fits too.
    """
    if k_sigma <= 0:
        raise ValueError("k_sigma must be positive")
    _, zc = cam.project(g.center)
    if zc <= cam.near:
        return None
    corners = splat_corners(g.center[None], g.tangent_u[None], g.tangent_v[None],
                            np.array([g.scale_u]), np.array([g.scale_v]), k_sigma)
    xy, z = cam.project(corners)
    rect = bounds_from_corners(xy, z, cam.near, cam.width, cam.height, k_sigma * sigma)[0]
    if rect[0] > rect[2]:
        return None
    return tuple(int(r) for r in rect)
