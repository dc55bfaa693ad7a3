"""Command-line interface: render, train, fit-tracks, ablate, bench, gen.

Every command writes its outputs under --out (default taken from the config or
"out") and prints a short JSON summary. Failures print {"error": {...}} to
stderr and exit with status 2 (bad input) or 1 (runtime failure).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import io
from .harness import ablations, bench, config as cfgmod, plotting, synth
from .harness.train import split_frames, train
from .render import render
from .unicycle import MODES, corrupt_track, fit_track, pose_errors

EXIT_USAGE = 2
EXIT_FAILURE = 1


class CliError(Exception):
    def __init__(self, message, code=EXIT_USAGE):
        super().__init__(message)
        self.code = code


# --- helpers ------------------------------------------------------------------

def _config(path, overrides=(), base=None):
    config = cfgmod.load_config(path) if path else (base or cfgmod.ExperimentConfig())
    changes = {}
    for item in overrides:
        if "=" not in item:
            raise CliError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            changes[key] = json.loads(raw)
        except json.JSONDecodeError:
            changes[key] = raw
    return config.replace(**changes) if changes else config


def _out_dir(args, config=None):
    out = Path(args.out or (config.output_dir if config else "out"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _emit(summary):
    print(json.dumps(plotting.jsonable(summary), indent=1))


PALETTE = np.array([[0.5, 0.5, 0.5], [0.8, 0.4, 0.2], [0.2, 0.7, 0.2], [0.9, 0.1, 0.1], [0.9, 0.9, 0.1],
                    [0.2, 0.4, 0.9], [0.7, 0.2, 0.8], [0.1, 0.8, 0.8]])


def _label_image(labels):
    lab = np.asarray(labels)
    img = PALETTE[np.mod(lab, len(PALETTE))]
    img[lab < 0] = 0.0
    return img


# --- commands -----------------------------------------------------------------

def cmd_render(args):
    scene = io.load_scene(args.scene)
    cams = io.load_cameras(args.cameras)
    mods = tuple(m.strip() for m in args.modalities.split(",") if m.strip())
    known = {"rgb", "sem", "depth", "flow"}
    if not set(mods) <= known:
        raise CliError(f"unknown modalities {sorted(set(mods) - known)}; choose from {sorted(known)}")
    if "rgb" not in mods:
        mods = ("rgb",) + mods
    out = _out_dir(args)
    written = []
    for i, cam in enumerate(cams):
        nxt = cams[i + 1] if i + 1 < len(cams) and "flow" in mods else None
        buf, _ = render(scene, cam, nxt, modalities=mods)
        stem = out / f"frame_{i:04d}"
        color = buf.color_exposed if args.exposure else buf.color
        io.write_ppm(f"{stem}_rgb.ppm", color)
        written.append(f"{stem}_rgb.ppm")
        if buf.semantic is not None:
            io.write_raster(f"{stem}_sem.gsr", buf.semantic)
            io.write_ppm(f"{stem}_sem.ppm", _label_image(np.argmax(buf.semantic, axis=-1)))
        if buf.depth is not None:
            io.write_raster(f"{stem}_depth.gsr", buf.depth)
        if buf.flow is not None:
            io.write_raster(f"{stem}_flow.gsr", buf.flow)
    _emit({"frames": len(cams), "modalities": list(mods), "out": str(out), "files": len(written)})


def _write_gen(out, gt, cams, pgt):
    io.save_scene(out / "scene.json", gt.scene)
    io.save_cameras(out / "cameras.json", cams)
    for k, (track, boxes) in enumerate(zip(gt.tracks, pgt.boxes)):
        io.save_track(out / f"track_{k}.json", track)
        io.save_boxes(out / f"boxes_{k}.json", boxes)
    for i in range(len(cams)):
        io.write_ppm(out / f"target_{i:04d}.ppm", pgt.images[i])
        io.write_ppm(out / f"labels_{i:04d}.ppm", _label_image(pgt.semantic[i]))
        io.write_raster(out / f"flow_{i:04d}.gsr", np.where(pgt.flow_valid[i][..., None], pgt.flow[i], np.nan))
        io.write_raster(out / f"depth_{i:04d}.gsr", pgt.depth[i])


def cmd_gen(args):
    config = _config(args.config, args.set)
    out = _out_dir(args, config)
    gt, cams, pgt = synth.generate(config)
    _write_gen(out, gt, cams, pgt)
    cfgmod.save_config(out / "config.json", config)
    _emit({"out": str(out), "gaussians": len(gt.scene.static), "objects": len(gt.scene.objects),
           "frames": len(cams)})


def _train_overrides(args):
    changes = {}
    for flag, key in (("iterations", "train.iterations"), ("seed", "seed"), ("lambda_ssim", "train.lambda_ssim"),
                      ("lambda_S", "train.lambda_S"), ("lambda_F", "train.lambda_F"), ("lambda_t", "train.lambda_t"),
                      ("lambda_uni", "train.lambda_uni"), ("lambda_reg", "train.lambda_reg"),
                      ("softmax", "train.softmax")):
        value = getattr(args, flag)
        if value is not None:
            changes[key] = value
    for flag, key in (("no_semantic", "train.use_semantic"), ("no_flow", "train.use_flow"),
                      ("no_affine", "train.use_affine"), ("no_tracks", "train.optimize_tracks")):
        if getattr(args, flag):
            changes[key] = False
    return changes


def cmd_train(args):
    config = _config(args.config, args.set)
    changes = _train_overrides(args)
    if args.lr:
        lrs = dict(config.train.lrs)
        for item in args.lr:
            cls, _, value = item.partition("=")
            if cls not in lrs:
                raise CliError(f"unknown parameter class {cls!r} in --lr; known: {sorted(lrs)}")
            lrs[cls] = float(value)
        changes["train.lrs"] = lrs
    if changes:
        config = config.replace(**changes)
    out = _out_dir(args, config)
    gt, cams, pgt = synth.generate(config)
    scene = train_cams = None
    if args.init_scene:
        scene = io.load_scene(args.init_scene)
        train_cams = [c.copy() for c in cams]
        for c in train_cams:
            c.A, c.b = np.eye(3), np.zeros(3)
    result = train(gt, cams, pgt, config, scene=scene, cams=train_cams)
    cfgmod.save_config(out / "config.json", config)
    io.save_scene(out / "scene.json", result.scene)
    io.save_cameras(out / "cameras.json", result.cameras)
    for k, obj in enumerate(result.scene.objects):
        io.save_track(out / f"track_{k}.json", obj.track)
    report = {"metrics": result.metrics, "seconds": result.seconds, "iterations": config.train.iterations}
    plotting.write_report(out / "metrics.json", report)
    plotting.write_csv(out / "history.csv", result.history)
    plotting.plot_history(result.history, out / "loss.png")
    _, test = split_frames(len(cams), config.holdout_every)
    pairs = []
    for i in list(test[:3]):
        buf, _ = render(result.scene, result.cameras[i], None, modalities=("rgb",))
        io.write_ppm(out / f"heldout_{i:04d}.ppm", buf.color_exposed)
        pairs.append((buf.color_exposed, pgt.images[i]))
    if pairs:
        plotting.plot_image_pairs(pairs, out / "heldout.png")
    _emit({"out": str(out), **report})


def cmd_fit_tracks(args):
    kind, data = io.load_track_or_boxes(args.track)
    gt = None
    if kind == "track":
        gt = data
        rng = np.random.default_rng(args.seed)
        times = gt.timestamps[::2] if args.holdout else gt.timestamps
        obs = corrupt_track(gt, args.noise_scale, rng, times)
    else:
        obs = data
    result = fit_track(obs, args.mode, lambda_t=args.lambda_t, lambda_uni=args.lambda_uni,
                       lambda_reg=args.lambda_reg, solver=args.solver, iterations=args.iterations, lr=args.lr,
                       transition=args.transition)
    out = _out_dir(args)
    io.save_track(out / "rectified_track.json", result.track)
    io.save_boxes(out / "observations.json", obs)
    report = {"mode": args.mode, "solver": args.solver, "iterations": result.iterations,
              "final_motion_loss": result.history[-1] if result.history else None}
    if gt is not None:
        report["noise_scale"] = args.noise_scale
        report["all_frames"] = pose_errors(result.track, gt)
        if args.holdout:
            report["heldout_frames"] = pose_errors(result.track, gt, gt.timestamps[1:-1:2])
        plotting.plot_tracks({args.mode: result.track}, gt, out / "tracks.png")
    plotting.write_report(out / "report.json", report)
    _emit({k: v for k, v in report.items() if k not in ("all_frames", "heldout_frames")}
          | ({"mean_e_t": report["all_frames"]["mean_e_t"], "mean_e_R": report["all_frames"]["mean_e_R"]}
             if gt is not None else {}))


def cmd_ablate(args):
    config = cfgmod.load_config(args.config) if args.config else ablations.ablation_config(args.name)
    config = _config(None, args.set, base=config)
    out = _out_dir(args, config)
    seeds = list(range(args.seeds))
    report = ablations.run_ablation(args.name, config, seeds=seeds)
    cfgmod.save_config(out / "config.json", config)
    plotting.write_report(out / f"{args.name}.json", report)
    plotting.write_csv(out / f"{args.name}.csv", report["table"])
    if args.name == "dynamic_noise":
        plotting.plot_dynamic_noise(report, out / "dynamic_noise.png")
        tracks = report.get("_tracks", {})
        for key, tr in tracks.items():
            io.save_track(out / f"track_{key.replace('@', '_')}.json", tr)
    else:
        metrics = {"static_losses": ["psnr", "ssim", "depth_rmse"], "softmax3d": ["miou_3d", "accuracy", "points"],
                   "exposure": ["psnr", "ssim"]}[args.name]
        plotting.plot_rows(report, out / f"{args.name}.png", metrics)
        for row, res in report.get("_results", {}).items():
            io.save_scene(out / f"scene_{row}.json", res.scene)
            for k, obj in enumerate(res.scene.objects):
                io.save_track(out / f"track_{row}_{k}.json", obj.track)
    _emit({"ablation": args.name, "out": str(out), "seconds": report["seconds"],
           **{k: v for k, v in report.items() if k.endswith("wins") or k == "psnr_gain"}})


def cmd_bench(args):
    config = _config(args.config, args.set) if args.config or args.set else None
    width = args.width or (config.width if config else 256)
    height = args.height or (config.height if config else 256)
    report = bench.run_bench(args.gaussians, width, height, seed=args.seed, repeats=args.repeats,
                             brute=not args.no_bruteforce)
    out = _out_dir(args, config)
    plotting.write_report(out / "bench.json", report)
    rows = [{"stage": k, "increment_s": v, "cumulative_s": report["stages"]["cumulative"][k]}
            for k, v in report["stages"]["increments"].items()]
    plotting.write_csv(out / "bench.csv", rows)
    plotting.plot_bench(report, out / "bench.png")
    _emit(report)


# --- parser -------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="decosplat", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("config", nargs="?", default=None, help="experiment config (JSON); defaults if omitted")
            sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                            help="override a config entry, e.g. --set train.iterations=50 (repeatable)")
        sp.add_argument("--out", default=None, help="output directory (default: config output_dir or ./out)")

    sp = sub.add_parser("render", help="render every camera of a scene file")
    sp.add_argument("scene")
    sp.add_argument("cameras")
    sp.add_argument("--modalities", default="rgb,sem,depth,flow", help="comma list of rgb,sem,depth,flow")
    sp.add_argument("--exposure", action="store_true", help="apply each camera's affine (A, b) to the colour")
    common(sp, config=False)
    sp.set_defaults(func=cmd_render)

    sp = sub.add_parser("gen", help="write a synthetic scene, cameras, tracks and pseudo ground truth")
    common(sp)
    sp.set_defaults(func=cmd_gen)

    sp = sub.add_parser("train", help="train on generated pseudo ground truth and evaluate held-out frames")
    common(sp)
    sp.add_argument("--iterations", type=int)
    sp.add_argument("--seed", type=int)
    for name in ("lambda_ssim", "lambda_S", "lambda_F", "lambda_t", "lambda_uni", "lambda_reg"):
        sp.add_argument(f"--{name.replace('_', '-')}", dest=name, type=float)
    sp.add_argument("--softmax", choices=("3d", "2d"))
    sp.add_argument("--lr", action="append", default=[], metavar="CLASS=VALUE",
                    help="per-class learning rate, e.g. --lr mu=0.001 (repeatable)")
    sp.add_argument("--no-semantic", action="store_true", help="disable the semantic loss")
    sp.add_argument("--no-flow", action="store_true", help="disable the flow loss")
    sp.add_argument("--no-affine", action="store_true", help="keep the exposure affine at identity")
    sp.add_argument("--no-tracks", action="store_true", help="freeze object tracks")
    sp.add_argument("--init-scene", help="start from this scene file instead of the perturbed ground truth")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("fit-tracks", help="rectify a noisy track")
    sp.add_argument("track", help="track file (corrupted with --noise-scale) or noisy box file")
    sp.add_argument("--mode", choices=MODES, default="unicycle")
    sp.add_argument("--noise-scale", type=float, default=0.1, help="box noise scale when given a clean track")
    sp.add_argument("--holdout", action="store_true", help="observe even frames only, report odd-frame errors")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--lambda-t", type=float, default=0.1)
    sp.add_argument("--lambda-uni", type=float, default=0.1)
    sp.add_argument("--lambda-reg", type=float, default=0.1)
    sp.add_argument("--solver", choices=("gd", "gauss_newton"), default="gd")
    sp.add_argument("--iterations", type=int, default=3000)
    sp.add_argument("--lr", type=float, default=0.02)
    sp.add_argument("--transition", choices=("propagated", "stored"), default="propagated")
    common(sp, config=False)
    sp.set_defaults(func=cmd_fit_tracks)

    sp = sub.add_parser("ablate", help="run an ablation study")
    sp.add_argument("name", choices=ablations.ABLATIONS)
    common(sp)
    sp.add_argument("--seeds", type=int, default=10, help="number of seeds (0..N-1)")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("bench", help="per-stage timing and tiled against brute-force compositing")
    common(sp)
    sp.add_argument("--gaussians", type=int, default=20000)
    sp.add_argument("--width", type=int)
    sp.add_argument("--height", type=int)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--repeats", type=int, default=5)
    sp.add_argument("--no-bruteforce", action="store_true")
    sp.set_defaults(func=cmd_bench)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        if exc.code not in (0, None):
            print(json.dumps({"error": {"type": "UsageError", "message": "invalid arguments"}}), file=sys.stderr)
        return int(exc.code or 0)
    try:
        args.func(args)
    except (CliError, cfgmod.ConfigError, io.FormatError, FileNotFoundError, ValueError) as exc:
        code = exc.code if isinstance(exc, CliError) else EXIT_USAGE
        print(json.dumps({"error": {"type": type(exc).__name__, "message": str(exc)}}), file=sys.stderr)
        return code
    except Exception as exc:  # noqa: BLE001 - surfaced as a machine-readable document
        print(json.dumps({"error": {"type": type(exc).__name__, "message": str(exc)}}), file=sys.stderr)
        return EXIT_FAILURE
    return 0


if __name__ == "__main__":
    sys.exit(main())
