"""Optimization loop: Adam updates, adaptive density control, schedules, checkpoints."""

import configparser
import dataclasses
import json
import os
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import fileio
from .gradients import render_backward
from .losses import LossWeights, total_loss
from .model import PARAM_NAMES, SplatModel, logit
from .rasterizer import render
from .scene_io import psnr
from .sh import num_coeffs, rgb_to_sh0

REFERENCE_ITERATIONS = 30000


class NonFiniteLoss(FloatingPointError):
    """The loss or its gradient became NaN / Inf during training."""


class CheckpointError(Exception):
    """Checkpoint file is corrupt, truncated or from another format version."""


@dataclass
class TrainConfig:
    """Training hyperparameters.

    Step counts below are for a 30k-iteration run; :meth:`for_iterations`
    rescales them (and the learning-rate decay horizon) to shorter runs.
    """

    iterations: int = 30000
    seed: int = 0
    # density control
    densify_grad_threshold: float = 0.0002
    densify_start: int = 500
    densify_stop: int = 15000
    densify_interval: int = 100
    percent_dense: float = 0.01
    split_factor: float = 1.6
    prune_opacity: float = 0.05
    prune_interval: int = 3000
    opacity_reset_interval: int = 0      # 0 = off
    max_splats: int = 0                  # 0 = unbounded
    # learning rates
    lr_means: float = 1.6e-4
    lr_means_final: float = 1.6e-6
    lr_quats: float = 1e-3
    lr_scales: float = 5e-3
    lr_opacity: float = 0.05
    lr_sh: float = 2.5e-3
    lr_sh_rest_factor: float = 1.0 / 20.0
    # appearance
    sh_degree: int = 3
    sh_interval: int = 1000
    # regularizers
    alpha_d: float = 1000.0
    beta_n: float = 0.05
    lambda_ssim: float = 0.2
    distortion_start: int = 3000
    normal_start: int = 7000
    use_distortion: bool = True
    use_normal: bool = True
    background: tuple = (0.0, 0.0, 0.0)
    log_interval: int = 10

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if not (self.densify_grad_threshold > 0 and self.prune_opacity > 0 and self.split_factor > 1):
            raise ValueError("densify/prune thresholds must be positive and split_factor > 1")
        if self.iterations and not (self.densify_start < self.densify_stop <= self.iterations):
            raise ValueError("need densify_start < densify_stop <= iterations")
        if min(self.densify_interval, self.prune_interval, self.sh_interval) <= 0:
            raise ValueError("intervals must be positive")
        if not 0 <= self.sh_degree <= 3:
            raise ValueError("sh_degree must be in [0, 3]")
        self.background = tuple(float(x) for x in self.background)

    @classmethod
    def for_iterations(cls, iterations, **overrides):
        """Defaults with every step count scaled by iterations / 30000."""
        f = iterations / REFERENCE_ITERATIONS
        base = cls()
        scaled = {k: max(1, int(round(getattr(base, k) * f))) for k in
                  ("densify_start", "densify_stop", "densify_interval", "prune_interval",
                   "sh_interval", "distortion_start", "normal_start")}
        scaled["densify_stop"] = min(scaled["densify_stop"], max(iterations, 2))
        scaled["densify_start"] = min(scaled["densify_start"], scaled["densify_stop"] - 1)
        scaled.update(overrides)
        return cls(iterations=iterations, **scaled)

    def loss_weights(self):
        return LossWeights(self.alpha_d, self.beta_n, self.lambda_ssim)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["background"] = list(self.background)
        return d

    def save(self, path):
        cp = configparser.ConfigParser()
        cp["train"] = {k: json.dumps(v) for k, v in self.to_dict().items()}
        with open(path, "w") as f:
            cp.write(f)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path):
        """Read an INI file with a [train] section of key = JSON value lines."""
        cp = configparser.ConfigParser()
        if not cp.read(path):
            raise FileNotFoundError(path)
        if "train" not in cp:
            raise ValueError(f"{path}: missing [train] section")
        return cls.from_dict({k: json.loads(v) for k, v in cp["train"].items()})


@dataclass
class OptimizerState:
    """Adam moments per parameter array (rows match the model) and the step count."""

    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros_like(cls, model):
        p = model.params()
        return cls({k: np.zeros_like(a) for k, a in p.items()}, {k: np.zeros_like(a) for k, a in p.items()})

    def select(self, index):
        return OptimizerState({k: a[index] for k, a in self.m.items()},
                              {k: a[index] for k, a in self.v.items()}, self.step)

    def append_zeros(self, n):
        def ext(a):
            return np.concatenate([a, np.zeros((n,) + a.shape[1:])])
        return OptimizerState({k: ext(a) for k, a in self.m.items()},
                              {k: ext(a) for k, a in self.v.items()}, self.step)


ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-15


def adam_update(params, grads, state, lrs):
    """One Adam step in place on ``params``. ``lrs`` maps name -> scalar or broadcastable array."""
    b1, b2 = ADAM_BETAS
    state.step += 1
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    for k in PARAM_NAMES:
        g = grads[k]
        m = state.m[k]
        v = state.v[k]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        params[k] -= lrs[k] * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)


@dataclass
class DensifyStats:
    grad_accum: np.ndarray
    denom: np.ndarray

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n), np.zeros(n))

    def add(self, screen_grad_norm, visible):
        self.grad_accum += np.where(visible, screen_grad_norm, 0.0)
        self.denom += visible

    def mean(self):
        return np.where(self.denom > 0, self.grad_accum / np.maximum(self.denom, 1), 0.0)


def init_from_points(points, colors=None, sh_degree=3, seed=0, scene_extent=1.0, opacity=0.1):
    """One isotropic splat per point.

    Scale is the mean distance to the 3 nearest other points (scene_extent / 100
    when a point has no neighbours), orientation is a seeded random rotation and
    colors are 8-bit sRGB (mid-gray when absent).
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(pts)
    if n == 0:
        raise ValueError("init_from_points needs at least one point")
    k = min(3, n - 1)
    if k == 0:
        scale = np.full(n, scene_extent / 100.0)
    else:
        d, _ = cKDTree(pts).query(pts, k=k + 1)
        scale = d[:, 1:].mean(1)
        scale = np.where(scale > 0, scale, scene_extent / 100.0)
    rng = np.random.default_rng(seed)
    q = rng.standard_normal((n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    rgb = np.full((n, 3), 0.5) if colors is None else fileio.dequantize_srgb8(np.asarray(colors, dtype=np.uint8))
    sh = np.zeros((n, num_coeffs(sh_degree), 3))
    sh[:, 0] = rgb_to_sh0(rgb)
    log_s = np.repeat(np.log(scale)[:, None], 2, axis=1)
    return SplatModel(pts.copy(), q, log_s, np.full(n, float(logit(opacity))), sh, sh_degree=0)


def _split_children(model, idx, split_factor, rng, n_children=2):
    """Children sampled on each parent's disk, scales divided by ``split_factor``."""
    parent = model.subset(np.repeat(idx, n_children))
    R = parent.rotations
    s = parent.scales
    z = rng.standard_normal((len(parent), 2)) * s
    parent.means = parent.means + R[:, :, 0] * z[:, :1] + R[:, :, 1] * z[:, 1:]
    parent.log_scales = parent.log_scales - np.log(split_factor)
    return parent


def adaptive_density_control(model, state, stats, config, scene_extent, rng, prune=False):
    """Clone small / split large high-gradient splats, optionally prune transparent ones.

    Returns (model, optimizer state). New rows start with zero moments.
    """
    avg = stats.mean()
    big_grad = avg >= config.densify_grad_threshold
    big = model.scales.max(1) > config.percent_dense * scene_extent
    clone = np.flatnonzero(big_grad & ~big)
    split = np.flatnonzero(big_grad & big)
    if config.max_splats:
        room = max(0, config.max_splats - len(model))
        # grow the highest-gradient candidates first; a split adds one net splat
        cand = np.concatenate([clone, split])
        keep = cand[np.argsort(-avg[cand], kind="stable")][:room]
        clone = np.intersect1d(clone, keep)
        split = np.intersect1d(split, keep)
    parts = [model]
    if len(clone):
        parts.append(model.subset(clone))
    if len(split):
        parts.append(_split_children(model, split, config.split_factor, rng))
    n_new = sum(len(p) for p in parts[1:])
    out = SplatModel.concat(parts) if n_new else model.copy()
    state = state.append_zeros(n_new) if n_new else state
    keep = np.ones(len(out), dtype=bool)
    keep[split] = False
    if prune:
        keep &= out.opacities >= config.prune_opacity
    out = out.subset(keep).renormalized()
    return out, state.select(keep)


def prune_transparent(model, state, config):
    keep = model.opacities >= config.prune_opacity
    return model.subset(keep), state.select(keep)


def means_lr(config, step, scene_extent):
    """Exponential decay from lr_means to lr_means_final over the run, times extent."""
    if config.lr_means <= 0 or config.lr_means_final <= 0:
        return 0.0 if config.lr_means <= 0 else config.lr_means * scene_extent
    t = np.clip(step / max(config.iterations, 1), 0.0, 1.0)
    lr = np.exp((1 - t) * np.log(config.lr_means) + t * np.log(config.lr_means_final))
    return float(lr * scene_extent)


@dataclass
class TrainState:
    model: SplatModel
    optimizer: OptimizerState
    stats: DensifyStats
    rng: np.random.Generator
    scene_extent: float
    step: int = 0
    view_queue: list = field(default_factory=list)

    def next_view(self, train_idx):
        if not self.view_queue:
            self.view_queue = [int(i) for i in self.rng.permutation(np.asarray(train_idx))]
        return self.view_queue.pop()


def new_state(dataset, config):
    model = init_from_points(dataset.init_points, dataset.init_colors, config.sh_degree, config.seed,
                             dataset.scene_extent)
    return TrainState(model, OptimizerState.zeros_like(model), DensifyStats.zeros(len(model)),
                      np.random.default_rng(config.seed + 1), dataset.scene_extent)


def _learning_rates(model, config, step, extent):
    lr_sh = np.full((1, model.sh.shape[1], 1), config.lr_sh * config.lr_sh_rest_factor)
    lr_sh[0, 0] = config.lr_sh
    return dict(means=means_lr(config, step, extent), quats=config.lr_quats, log_scales=config.lr_scales,
                opacity_logits=config.lr_opacity, sh=lr_sh)


def _abort(state, config, dump_dir, what, view):
    path = None
    if dump_dir:
        os.makedirs(dump_dir, exist_ok=True)
        path = os.path.join(dump_dir, f"nonfinite_{state.step:06d}.ckpt")
        save_checkpoint(path, state, config)
    raise NonFiniteLoss(f"step {state.step}: {what} view={view} n_splats={len(state.model)} dump={path}")


def training_step(state, dataset, config, dump_dir=None):
    """Render one training view, backpropagate the total loss and take an Adam step.

    Mutates ``state`` and returns a metrics dict.
    """
    model = state.model
    view = state.next_view(dataset.train_idx)
    cam = dataset.cameras[view]
    target = dataset.images[view]
    out = render(model, cam, background=config.background)
    use_d = config.use_distortion and state.step >= config.distortion_start
    use_n = config.use_normal and state.step >= config.normal_start
    terms = total_loss(out, target, cam, config.loss_weights(), use_distortion=use_d, use_normal=use_n)
    if not (np.isfinite(terms.total) and all(np.all(np.isfinite(g)) for g in terms.grads.values())):
        _abort(state, config, dump_dir, f"loss={terms.total!r}", view)
    grads = render_backward(model, cam, out, terms.grads)
    if not grads.all_finite():
        _abort(state, config, dump_dir, "non-finite parameter gradient", view)
    state.stats.add(grads.screen_grad_norm, out.proj.visible)
    params = model.params()
    adam_update(params, grads.params(), state.optimizer, _learning_rates(model, config, state.step, state.scene_extent))
    state.step += 1
    return dict(step=state.step, view=view, loss=terms.total, photometric=terms.photometric,
                distortion=terms.distortion if use_d else None, normal=terms.normal if use_n else None,
                psnr=float(psnr(np.clip(out.color, 0, 1), target)), n_splats=len(model),
                sh_degree=model.sh_degree)


def after_step(state, config):
    """Schedules that run between steps: SH warm-up, densify, prune, opacity reset."""
    step = state.step
    model = state.model
    if step % config.sh_interval == 0 and model.sh_degree < model.max_sh_degree:
        model.sh_degree += 1
    densify = config.densify_start <= step <= config.densify_stop and step % config.densify_interval == 0
    prune = step % config.prune_interval == 0
    if densify:
        state.model, state.optimizer = adaptive_density_control(
            model, state.optimizer, state.stats, config, state.scene_extent, state.rng, prune=prune)
        state.stats = DensifyStats.zeros(len(state.model))
    elif prune:
        keep = model.opacities >= config.prune_opacity
        state.model, state.optimizer = prune_transparent(model, state.optimizer, config)
        state.stats = DensifyStats(state.stats.grad_accum[keep], state.stats.denom[keep])
    if config.opacity_reset_interval and step % config.opacity_reset_interval == 0 and step < config.densify_stop:
        m = state.model
        m.opacity_logits = np.minimum(m.opacity_logits, float(logit(0.01)))
        state.optimizer.m["opacity_logits"][:] = 0
        state.optimizer.v["opacity_logits"][:] = 0


def train(dataset, config, state=None, log=None, dump_dir=None, callback=None):
    """Run the loop from ``state`` (fresh when None) to ``config.iterations``.

    ``log`` is a file-like receiving one JSON record per logged step.
    """
    state = new_state(dataset, config) if state is None else state
    while state.step < config.iterations:
        metrics = training_step(state, dataset, config, dump_dir)
        after_step(state, config)
        metrics["n_splats"] = len(state.model)
        if log is not None and (state.step % config.log_interval == 0 or state.step == config.iterations):
            log.write(json.dumps(metrics) + "\n")
        if callback is not None:
            callback(state, metrics)
    return state


# ------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"SURFELGS"
CKPT_VERSION = 1
_HEADER = struct.Struct("<8sIIQIIQ")   # magic, version, flags, n, K, sh_degree, step


def _arrays(state):
    m = state.model
    yield from (m.means, m.quats, m.log_scales, m.opacity_logits, m.sh)
    for k in PARAM_NAMES:
        yield state.optimizer.m[k]
    for k in PARAM_NAMES:
        yield state.optimizer.v[k]
    yield state.stats.grad_accum
    yield state.stats.denom


def save_checkpoint(path, state, config=None):
    """Little-endian binary checkpoint with a CRC32 trailer.

    Layout: header (magic, version, flags, N, K, active SH degree, step),
    float64 arrays (parameters, Adam m, Adam v, densify stats), then a
    length-prefixed JSON block (optimizer step, scene extent, view queue,
    RNG state, config) and the CRC32 of everything before it.
    """
    m = state.model
    body = bytearray(_HEADER.pack(CKPT_MAGIC, CKPT_VERSION, 0, len(m), m.sh.shape[1], m.sh_degree, state.step))
    for a in _arrays(state):
        body += np.ascontiguousarray(a, dtype="<f8").tobytes()
    meta = dict(opt_step=state.optimizer.step, scene_extent=state.scene_extent,
                view_queue=state.view_queue, rng=state.rng.bit_generator.state,
                config=config.to_dict() if config is not None else None)
    blob = json.dumps(meta, sort_keys=True).encode()
    body += struct.pack("<Q", len(blob)) + blob
    body += struct.pack("<I", zlib.crc32(body))
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(body)
    os.replace(tmp, path)


def load_checkpoint(path):
    """Returns (TrainState, config dict or None)."""
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < _HEADER.size + 4:
        raise CheckpointError(f"{path}: truncated")
    magic, version, _flags, n, K, sh_degree, step = _HEADER.unpack_from(data)
    if magic != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint")
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: version {version}, expected {CKPT_VERSION}")
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != crc:
        raise CheckpointError(f"{path}: checksum mismatch (corrupt or truncated)")
    shapes = [(n, 3), (n, 4), (n, 2), (n,), (n, K, 3)]
    shapes = shapes + shapes + shapes + [(n,), (n,)]
    off = _HEADER.size
    arrays = []
    for shp in shapes:
        cnt = int(np.prod(shp))
        arrays.append(np.frombuffer(data, "<f8", cnt, off).reshape(shp).astype(np.float64))
        off += 8 * cnt
    (blen,) = struct.unpack_from("<Q", data, off)
    meta = json.loads(data[off + 8:off + 8 + blen])
    model = SplatModel(*arrays[:5], sh_degree=sh_degree)
    opt = OptimizerState(dict(zip(PARAM_NAMES, arrays[5:10])), dict(zip(PARAM_NAMES, arrays[10:15])),
                         meta["opt_step"])
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng"]
    state = TrainState(model, opt, DensifyStats(arrays[15], arrays[16]), rng, meta["scene_extent"], step,
                       list(meta["view_queue"]))
    return state, meta.get("config")
