"""surfelgs command line: train, render, mesh, eval, gradcheck, gen-scene.

Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.
"""

import argparse
import hashlib
import json
import os
import sys
import time

import numpy as np

from . import _backend, fileio
from .fileio import FormatError
from .rasterizer import EmptyModelError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
CHANNELS = ("color", "depth", "normal", "alpha")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _echo(command, params):
    print(json.dumps(dict(command=command, **params), sort_keys=True), file=sys.stderr)


class RunDir:
    """Output directory with a manifest of every file written."""

    def __init__(self, root, command, params):
        self.root = root
        os.makedirs(root, exist_ok=True)
        self.files = []
        self.meta = dict(command=command, params=params, started=time.strftime("%Y-%m-%dT%H:%M:%S"))

    def path(self, rel):
        p = os.path.join(self.root, rel)
        os.makedirs(os.path.dirname(p), exist_ok=True)
        self.files.append(rel)
        return p

    def close(self, **extra):
        entries = []
        for rel in self.files:
            p = os.path.join(self.root, rel)
            if os.path.isfile(p):
                with open(p, "rb") as f:
                    entries.append(dict(path=rel, sha256=hashlib.sha256(f.read()).hexdigest()))
        with open(os.path.join(self.root, "manifest.json"), "w") as f:
            json.dump(dict(self.meta, files=entries, **extra), f, indent=1)


def _load_ckpt_model(path):
    from .trainer import load_checkpoint

    state, _ = load_checkpoint(path)
    if len(state.model) == 0:
        raise EmptyModelError(f"{path}: checkpoint has no splats")
    return state


# ------------------------------------------------------------------ commands

def cmd_gen_scene(a):
    from .scene_io import generate_synthetic_scene, save_dataset

    params = dict(kind=a.kind, views=a.views, resolution=a.resolution, seed=a.seed, points=a.points, out=a.out)
    _echo("gen-scene", params)
    ds = generate_synthetic_scene(a.kind, a.views, a.resolution, a.seed, n_points=a.points)
    save_dataset(ds, a.out)
    print(json.dumps(dict(views=len(ds), train=len(ds.train_idx), test=len(ds.test_idx), out=a.out)))
    return EXIT_OK


def _train_config(a):
    from .trainer import TrainConfig

    overrides = {}
    if a.config:
        overrides.update(TrainConfig.load(a.config).to_dict())
        overrides.pop("iterations", None)
    for flag, key in (("alpha_d", "alpha_d"), ("beta_n", "beta_n"), ("seed", "seed"),
                      ("max_splats", "max_splats")):
        v = getattr(a, flag)
        if v is not None:
            overrides[key] = v
    if a.no_normal_loss:
        overrides["use_normal"] = False
    if a.no_distortion_loss:
        overrides["use_distortion"] = False
    iters = a.iters
    if iters is None:
        iters = TrainConfig.load(a.config).iterations if a.config else 30000
    if iters == 0:
        return TrainConfig(iterations=0, **{k: v for k, v in overrides.items()})
    return TrainConfig.for_iterations(iters, **overrides)


def cmd_train(a):
    from .scene_io import load_dataset, psnr
    from .rasterizer import render
    from .trainer import new_state, save_checkpoint, train

    cfg = _train_config(a)
    _echo("train", dict(data=a.data, out=a.out, threads=a.threads, **cfg.to_dict()))
    ds = load_dataset(a.data)
    run = RunDir(a.out, "train", dict(data=os.path.abspath(a.data), **cfg.to_dict()))
    cfg.save(run.path("config.ini"))
    state = new_state(ds, cfg)
    save_checkpoint(run.path("checkpoints/init.ckpt"), state, cfg)
    if cfg.iterations > 0:
        with open(run.path("metrics.ndjson"), "w") as log:
            state = train(ds, cfg, state, log=log, dump_dir=os.path.join(a.out, "dumps"))
        save_checkpoint(run.path("checkpoints/final.ckpt"), state, cfg)
        scores = []
        for i in ds.test_idx:
            img = np.clip(render(state.model, ds.cameras[i], background=cfg.background).color, 0, 1)
            fileio.write_png(run.path(f"test_renders/{ds.names[i]}.png"), img)
            scores.append(psnr(img, ds.images[i]))
        summary = dict(steps=state.step, n_splats=len(state.model),
                       test_psnr=float(np.mean(scores)) if scores else None)
    else:
        summary = dict(steps=0, n_splats=len(state.model), test_psnr=None)
    run.close(summary=summary)
    print(json.dumps(summary))
    return EXIT_OK


def cmd_render(a):
    from .rasterizer import render
    from .scene_io import load_dataset

    chans = [c.strip() for c in a.channels.split(",") if c.strip()]
    if not chans:
        raise UsageError("--channels is empty")
    bad = set(chans) - set(CHANNELS)
    if bad:
        raise UsageError(f"unknown channels {sorted(bad)}; choose from {CHANNELS}")
    _echo("render", dict(ckpt=a.ckpt, data=a.data, view=a.view, channels=chans, out=a.out))
    ds = load_dataset(a.data)
    if not 0 <= a.view < len(ds):
        raise UsageError(f"--view {a.view} out of range [0, {len(ds)})")
    state = _load_ckpt_model(a.ckpt)
    out = render(state.model, ds.cameras[a.view])
    run = RunDir(a.out, "render", dict(ckpt=a.ckpt, view=a.view, channels=chans))
    name = ds.names[a.view]
    for c in chans:
        if c == "color":
            fileio.write_png(run.path(f"{name}_color.png"), out.color)
        elif c == "alpha":
            fileio.write_png_raw(run.path(f"{name}_alpha.png"), out.alpha)
        elif c == "normal":
            fileio.write_png_raw(run.path(f"{name}_normal.png"), out.normal * 0.5 + 0.5)
            fileio.write_pfm(run.path(f"{name}_normal.pfm"), out.normal)
        elif c == "depth":
            d = out.median_depth
            fileio.write_pfm(run.path(f"{name}_depth.pfm"), d)
            valid = d > 0
            lo, hi = (d[valid].min(), d[valid].max()) if valid.any() else (0.0, 1.0)
            vis = np.where(valid, 1 - (d - lo) / max(hi - lo, 1e-12), 0.0)
            fileio.write_png_raw(run.path(f"{name}_depth.png"), vis)
    run.close()
    return EXIT_OK


def cmd_mesh(a):
    from .meshing import mesh_from_model
    from .scene_io import load_dataset

    _echo("mesh", dict(ckpt=a.ckpt, data=a.data, voxel=a.voxel, trunc=a.trunc, depth_mode=a.depth_mode, out=a.out))
    state = _load_ckpt_model(a.ckpt)
    ds = load_dataset(a.data)
    cams = [ds.cameras[i] for i in ds.train_idx]
    mesh, vol = mesh_from_model(state.model, cams, a.depth_mode, a.voxel, a.trunc)
    mesh.save(a.out)
    print(json.dumps(dict(vertices=len(mesh.vertices), triangles=len(mesh), voxel=vol.voxel_size,
                          truncation=vol.truncation, dims=list(vol.dims), out=a.out)))
    return EXIT_OK


def cmd_eval(a):
    from .meshing import TriangleMesh, chamfer_distance, mesh_from_model
    from .rasterizer import render
    from .scene_io import load_dataset, psnr, ssim

    _echo("eval", dict(ckpt=a.ckpt, data=a.data, mesh=a.mesh, depth_mode=a.depth_mode))
    state = _load_ckpt_model(a.ckpt)
    ds = load_dataset(a.data)
    views = ds.test_idx if len(ds.test_idx) else ds.train_idx
    ps, ss = [], []
    for i in views:
        img = np.clip(render(state.model, ds.cameras[i]).color, 0, 1)
        p, s = psnr(img, ds.images[i]), ssim(img, ds.images[i])
        ps.append(p)
        ss.append(s)
        print(json.dumps(dict(metric="psnr", view=ds.names[i], value=p)))
        print(json.dumps(dict(metric="ssim", view=ds.names[i], value=s)))
    print(json.dumps(dict(metric="psnr", view="mean", value=float(np.mean(ps)))))
    print(json.dumps(dict(metric="ssim", view="mean", value=float(np.mean(ss)))))
    gt = ds.ground_truth
    if gt is None or len(gt.mesh_faces) == 0:
        print("notice: no ground-truth mesh in dataset, chamfer omitted", file=sys.stderr)
        return EXIT_OK
    if a.mesh:
        m = fileio.read_ply(a.mesh) if a.mesh.lower().endswith(".ply") else dict(zip(("vertices", "faces"), fileio.read_obj(a.mesh)))
        mesh = TriangleMesh(m["vertices"], m.get("faces", np.zeros((0, 3))))
    else:
        mesh, _ = mesh_from_model(state.model, [ds.cameras[i] for i in ds.train_idx], a.depth_mode)
    if mesh.empty:
        print("notice: extracted mesh is empty, chamfer omitted", file=sys.stderr)
        return EXIT_OK
    cd = chamfer_distance(mesh, TriangleMesh(gt.mesh_vertices, gt.mesh_faces))
    print(json.dumps(dict(metric="chamfer", view="mesh", value=cd)))
    return EXIT_OK


def cmd_gradcheck(a):
    from .gradients import gradcheck_suite

    if a.precision != "double":
        raise UsageError("only --precision double is supported")
    seeds = list(range(a.seed, a.seed + a.scenes))
    _echo("gradcheck", dict(seed=a.seed, scenes=a.scenes, precision=a.precision, rtol=a.rtol,
                            min_pass=a.min_pass))
    ok = True
    for seed, r in zip(seeds, gradcheck_suite(seeds, rtol=a.rtol)):
        passed = r.pass_fraction >= a.min_pass and np.all(np.isfinite(r.analytic))
        ok &= bool(passed)
        print(json.dumps(dict(seed=seed, checked=int(r.checked.sum()), excluded=int(r.excluded.sum()),
                              pass_fraction=r.pass_fraction, max_rel_err=r.max_rel_err,
                              status="pass" if passed else "fail")))
    return EXIT_OK if ok else EXIT_NUMERIC


# -------------------------------------------------------------------- parser

def build_parser():
    p = _Parser(prog="surfelgs", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=None, help="cap on worker threads")
    p.add_argument("--backend", choices=("numba", "numpy"), default=None)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-scene", help="write a synthetic dataset")
    g.add_argument("--kind", choices=("sphere", "cube", "two-planes"), default="sphere")
    g.add_argument("--views", type=int, default=24)
    g.add_argument("--resolution", type=int, default=128)
    g.add_argument("--points", type=int, default=2000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_scene)

    t = sub.add_parser("train", help="optimize splats on a dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--iters", type=int, default=None)
    t.add_argument("--config", default=None, help="INI file with a [train] section")
    t.add_argument("--alpha-d", type=float, default=None)
    t.add_argument("--beta-n", type=float, default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--max-splats", type=int, default=None)
    t.add_argument("--no-normal-loss", action="store_true")
    t.add_argument("--no-distortion-loss", action="store_true")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("render", help="write channel images for one view")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--view", type=int, default=0)
    r.add_argument("--channels", default="color,depth,normal,alpha")
    r.add_argument("--out", default="renders")
    r.set_defaults(func=cmd_render)

    m = sub.add_parser("mesh", help="TSDF-fuse rendered depths into a mesh")
    m.add_argument("--ckpt", required=True)
    m.add_argument("--data", required=True)
    m.add_argument("--voxel", type=float, default=None)
    m.add_argument("--trunc", type=float, default=None)
    m.add_argument("--depth-mode", choices=("median", "expected"), default="median")
    m.add_argument("--out", default="mesh.ply")
    m.set_defaults(func=cmd_mesh)

    e = sub.add_parser("eval", help="PSNR / SSIM / Chamfer as JSON lines")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--mesh", default=None)
    e.add_argument("--depth-mode", choices=("median", "expected"), default="median")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference check of the backward pass")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--scenes", type=int, default=3)
    c.add_argument("--precision", default="double")
    c.add_argument("--rtol", type=float, default=1e-5)
    c.add_argument("--min-pass", type=float, default=0.99)
    c.set_defaults(func=cmd_gradcheck)
    return p


def _validate(a):
    for name in ("threads", "iters", "views", "resolution", "points", "scenes", "max_splats"):
        v = getattr(a, name, None)
        if v is not None and v < 0:
            raise UsageError(f"--{name.replace('_', '-')} must be >= 0")
    if getattr(a, "views", 2) < 2:
        raise UsageError("--views must be at least 2")
    for name in ("voxel", "trunc"):
        v = getattr(a, name, None)
        if v is not None and v <= 0:
            raise UsageError(f"--{name} must be positive")


def main(argv=None):
    from .gradients import NonFiniteGradient
    from .scene_io import DatasetError
    from .trainer import CheckpointError, NonFiniteLoss

    parser = build_parser()
    a = parser.parse_args(argv)
    try:
        _validate(a)
        if a.threads:
            _backend.set_threads(a.threads)
        if a.backend:
            _backend.DEFAULT_BACKEND = _backend.resolve(a.backend)
        return a.func(a)
    except UsageError as e:
        print(f"surfelgs: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (NonFiniteLoss, NonFiniteGradient, FloatingPointError) as e:
        print(f"surfelgs: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DatasetError, CheckpointError, FormatError, EmptyModelError, FileNotFoundError,
            ValueError, OSError) as e:
        print(f"surfelgs: data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
