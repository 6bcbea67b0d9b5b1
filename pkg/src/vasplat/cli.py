"""Command-line entry point: ``vasplat <command> [flags]``.

Exit status: 0 on success, 1 on invalid input or usage, 2 on runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path


log = logging.getLogger("vasplat")

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_help(sys.stderr)
        raise UsageError(message)


def _build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="vasplat", description="Gaussian splatting surface reconstruction toolkit.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="ray-trace a synthetic dataset")
    g.add_argument("--kind", default="sphere", choices=["sphere", "cube", "tilted_plane", "two_spheres"])
    g.add_argument("--texture", default="checker", choices=["checker", "value_noise"])
    g.add_argument("--views", type=int, default=16)
    g.add_argument("--res", type=int, default=128)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--features", action="store_true", help="also write built-in feature files")
    g.add_argument("--out", required=True)

    def common(sp, scene=True):
        if scene:
            sp.add_argument("--scene", required=True)
        sp.add_argument("--out", required=True)
        sp.add_argument("--threads", type=int, default=None)

    t = sub.add_parser("train", help="optimise a cloud on a dataset")
    common(t)
    t.add_argument("--config")
    t.add_argument("--iters", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--preset", default="full")
    t.add_argument("--checkpoint", help="start from this cloud instead of the dataset's points")

    r = sub.add_parser("render", help="render color/depth/normal maps from a checkpoint")
    common(r)
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--config")

    m = sub.add_parser("mesh", help="fuse rendered depths and extract a mesh")
    common(m)
    m.add_argument("--checkpoint", required=True)
    m.add_argument("--config")
    m.add_argument("--voxel", type=float, default=None)
    m.add_argument("--truncation", type=float, default=None)

    e = sub.add_parser("eval", help="score a mesh (and optionally a cloud) against ground truth")
    common(e)
    e.add_argument("--mesh", required=True)
    e.add_argument("--checkpoint")
    e.add_argument("--threshold", type=float, default=0.05)
    e.add_argument("--seed", type=int, default=0)

    gc = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--scenes", type=int, default=50)
    gc.add_argument("--threads", type=int, default=None)
    gc.add_argument("--out")

    a = sub.add_parser("ablate", help="train and score the loss-removal presets")
    common(a)
    a.add_argument("--config")
    a.add_argument("--iters", type=int)
    a.add_argument("--seed", type=int)
    a.add_argument("--preset", action="append", help="restrict to these presets (repeatable)")
    a.add_argument("--voxel", type=float, default=0.02)
    return p


def _config(args):
    from .trainer import parse_config
    text = ""
    if getattr(args, "config", None):
        try:
            text = Path(args.config).read_text()
        except OSError as exc:
            raise FileNotFoundError(f"config file: {exc}") from exc
    cfg = parse_config(text)
    over = {}
    if getattr(args, "iters", None) is not None:
        n = args.iters
        f = n / cfg.iterations if cfg.iterations else 0.0
        over.update(iterations=n, color_only_end=int(round(cfg.color_only_end * f)),
                    single_view_end=int(round(cfg.single_view_end * f)),
                    photometric_end=int(round(cfg.photometric_end * f)), feature_end=n)
    if getattr(args, "seed", None) is not None:
        over["seed"] = args.seed
    if getattr(args, "preset", None) and isinstance(args.preset, str):
        from .trainer import PRESETS
        if args.preset not in PRESETS:
            raise ValueError(f"unknown preset {args.preset!r}; choose from {sorted(PRESETS)}")
        over["disable"] = PRESETS[args.preset]
    cfg = parse_config("", cfg, over) if over else cfg
    return cfg


def _describe(cfg) -> str:
    import dataclasses
    lines = [f"{k} = {v}" for k, v in dataclasses.asdict(cfg).items() if k not in ("weights", "render")]
    lines += [f"{k} = {v}" for k, v in dataclasses.asdict(cfg.weights).items()]
    lines += [f"{k} = {v}" for k, v in cfg.render.__dict__.items()]
    return "\n".join(lines)


def _cmd_generate(args):
    from .scenes import generate_scene
    ds = generate_scene(args.kind, args.texture, args.views, args.res, args.seed, args.out, args.features)
    print(f"wrote {len(ds)} views to {ds.root}")


def _cmd_train(args):
    from .fileio import ensure_dir, load_cloud
    from .scenes import load_dataset
    from .trainer import train
    cfg = _config(args)
    ds = load_dataset(args.scene)
    out = Path(args.out)
    ensure_dir(out)
    header = _describe(cfg)
    (out / "config.txt").write_text(header + "\n")
    log.info("effective configuration:\n%s", header)
    cloud = load_cloud(args.checkpoint) if args.checkpoint else None
    res = train(ds, cfg, out, cloud=cloud)
    print(f"trained {cfg.iterations} steps, {len(res.cloud)} Gaussians -> {out / 'final.cloud'}")


def _cmd_render(args):
    from .fileio import ensure_dir, load_cloud, write_float_map, write_png
    from .rasterizer import render
    from .scenes import load_dataset
    cfg = _config(args)
    ds = load_dataset(args.scene)
    cloud = load_cloud(args.checkpoint)
    out = Path(args.out)
    ensure_dir(out)
    settings = ds.render_settings(cfg.render)
    for cam in ds.cameras:
        b = render(cloud, cam, settings, records=False)
        stem = f"{cam.view_id:04d}"
        write_png(out / f"{stem}_color.png", b.color)
        write_float_map(out / f"{stem}_depth.f32bin", b.depth, "depth")
        write_float_map(out / f"{stem}_normal.f32bin", b.blended_normal, "normal")
        write_float_map(out / f"{stem}_distance.f32bin", b.blended_distance, "distance")
    print(f"rendered {len(ds)} views to {out}")


def _cmd_mesh(args):
    from .fileio import load_cloud
    from .fusion import write_mesh
    from .pipeline import mesh_from_cloud
    from .scenes import load_dataset
    cfg = _config(args)
    ds = load_dataset(args.scene)
    cloud = load_cloud(args.checkpoint)
    mesh = mesh_from_cloud(cloud, ds, args.voxel, args.truncation, cfg.render)
    out = Path(args.out)
    if out.suffix.lower() not in (".ply", ".obj"):
        out.mkdir(parents=True, exist_ok=True)
        out = out / "mesh.ply"
    write_mesh(mesh, out)
    print(f"{len(mesh.faces)} triangles -> {out}")


def _cmd_eval(args):
    import csv
    from .fileio import ensure_dir, load_cloud
    from .fusion import read_mesh
    from .pipeline import evaluate
    from .scenes import load_dataset
    ds = load_dataset(args.scene)
    mesh = read_mesh(args.mesh)
    cloud = load_cloud(args.checkpoint) if args.checkpoint else None
    rep = evaluate(mesh, ds, cloud, args.threshold, seed=args.seed)
    out = Path(args.out)
    ensure_dir(out)
    with open(out / "metrics.json", "w") as fh:
        json.dump(rep, fh, indent=1)
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rep))
        w.writeheader()
        w.writerow(rep)
    print(json.dumps(rep, indent=1))


def _cmd_gradcheck(args):
    from .gradcheck import run_suite
    worst = run_suite(args.scenes, args.seed)
    limits = {c: (1e-3 if c in ("L_I", "L_I+edge") else 1e-2) for c in worst}
    ok = True
    for c, e in worst.items():
        status = "ok" if e < limits[c] else "FAIL"
        ok &= e < limits[c]
        print(f"{c:10s} max rel err {e:.3e}  (limit {limits[c]:.0e})  {status}")
    print(f"overall max rel err {max(worst.values()):.3e}")
    if args.out:
        Path(args.out).write_text(json.dumps(worst, indent=1))
    if not ok:
        raise RuntimeError("gradient check failed")


def _cmd_ablate(args):
    from .pipeline import run_ablation
    from .scenes import load_dataset
    from .trainer import PRESETS
    cfg = _config(argparse.Namespace(**{**vars(args), "preset": None}))
    presets = args.preset or ["full", "only_LI", "no_nc", "no_ns", "no_p", "no_f"]
    for p in presets:
        if p not in PRESETS:
            raise ValueError(f"unknown preset {p!r}")
    ds = load_dataset(args.scene)
    Path(args.out).mkdir(parents=True, exist_ok=True)
    rows = run_ablation(ds, presets, cfg, args.out, args.voxel)
    for r in rows:
        print(f"{r['preset']:8s} chamfer {r['chamfer']:.4f}  f1 {r['f1']:.4f}  P {r['P']}")


COMMANDS = {"generate": _cmd_generate, "train": _cmd_train, "render": _cmd_render, "mesh": _cmd_mesh,
            "eval": _cmd_eval, "gradcheck": _cmd_gradcheck, "ablate": _cmd_ablate}


def run(argv=None) -> int:
    level = LOG_LEVELS.get(os.environ.get("VASPLAT_LOG", "error").lower(), logging.ERROR)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"vasplat: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if exc.code in (0, None) else 1
    if getattr(args, "threads", None) is not None:
        from . import set_threads
        set_threads(args.threads)
    try:
        COMMANDS[args.command](args)
    except (ValueError, LookupError, FileNotFoundError) as exc:
        print(f"vasplat: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - every other failure is a runtime error
        log.debug("failure", exc_info=True)
        print(f"vasplat: runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
