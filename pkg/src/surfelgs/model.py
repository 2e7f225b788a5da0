"""Learnable splat parameters, stored unconstrained."""

from dataclasses import dataclass

import numpy as np

from .geometry import SplatGeometry, quat_to_rotmat
from .sh import MAX_DEGREE, num_coeffs

PARAM_NAMES = ("means", "quats", "log_scales", "opacity_logits", "sh")


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p / (1.0 - p))


@dataclass
class SplatModel:
    """N surfels.

    means (N, 3), quats (N, 4) as (w, x, y, z), log_scales (N, 2),
    opacity_logits (N,), sh (N, K, 3) with K = (max_sh_degree + 1)**2.
    ``sh_degree`` is the active degree used when rendering.
    """

    means: np.ndarray
    quats: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    sh: np.ndarray
    sh_degree: int = 0

    def __post_init__(self):
        for name in PARAM_NAMES:
            setattr(self, name, np.ascontiguousarray(getattr(self, name), dtype=np.float64))
        n = self.means.shape[0]
        for name in PARAM_NAMES:
            arr = getattr(self, name)
            if arr.shape[0] != n:
                raise ValueError(f"{name} has {arr.shape[0]} rows, expected {n}")
        if self.means.shape[1:] != (3,) or self.quats.shape[1:] != (4,) or self.log_scales.shape[1:] != (2,):
            raise ValueError("bad parameter shapes")
        if self.opacity_logits.ndim != 1 or self.sh.ndim != 3 or self.sh.shape[2] != 3:
            raise ValueError("bad parameter shapes")
        K = self.sh.shape[1]
        if K not in [num_coeffs(d) for d in range(MAX_DEGREE + 1)]:
            raise ValueError(f"sh has {K} coefficients, not a full degree")
        if not 0 <= self.sh_degree <= self.max_sh_degree:
            raise ValueError("active sh_degree exceeds stored coefficients")

    def __len__(self):
        return self.means.shape[0]

    @property
    def max_sh_degree(self):
        return int(round(np.sqrt(self.sh.shape[1]))) - 1

    @property
    def scales(self):
        return np.exp(self.log_scales)

    @property
    def opacities(self):
        return sigmoid(self.opacity_logits)

    @property
    def rotations(self):
        return quat_to_rotmat(self.quats)

    def geometry(self, i):
        return SplatGeometry.from_quaternion(self.means[i], self.quats[i], self.scales[i])

    def params(self):
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self):
        return SplatModel(**{k: v.copy() for k, v in self.params().items()}, sh_degree=self.sh_degree)

    def subset(self, mask_or_index):
        return SplatModel(**{k: v[mask_or_index].copy() for k, v in self.params().items()},
                          sh_degree=self.sh_degree)

    def flat(self):
        return np.concatenate([getattr(self, k).ravel() for k in PARAM_NAMES])

    def with_flat(self, vec):
        out, off = {}, 0
        for k in PARAM_NAMES:
            a = getattr(self, k)
            out[k] = np.asarray(vec[off:off + a.size], dtype=np.float64).reshape(a.shape).copy()
            off += a.size
        return SplatModel(**out, sh_degree=self.sh_degree)

    @classmethod
    def concat(cls, parts):
        parts = list(parts)
        return cls(**{k: np.concatenate([getattr(p, k) for p in parts]) for k in PARAM_NAMES},
                   sh_degree=parts[0].sh_degree)

    @classmethod
    def empty(cls, max_sh_degree=MAX_DEGREE):
        K = num_coeffs(max_sh_degree)
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 2)), np.zeros(0), np.zeros((0, K, 3)))

    def renormalized(self):
        m = self.copy()
        m.quats /= np.linalg.norm(m.quats, axis=1, keepdims=True)
        return m
