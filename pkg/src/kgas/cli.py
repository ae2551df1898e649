"""Command-line entry point: ``kgas <subcommand> ...``.

Exit status is 0 on success, 2 for invalid input (bad files, arguments or
configuration) and 1 for internal errors.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import fisher, scenes, uid
from .config import describe_keys, load_camera, load_config
from .imageio import read_pgm, read_ppm, write_pfm, write_pgm, write_ppm
from .metrics import color_loss, format_metrics, mask_loss, psnr, s3im, ssim
from .pipeline import PipelineError, run_pipeline
from .plyio import read_cloud, read_points, write_points
from .render import render

EXIT_OK, EXIT_INTERNAL, EXIT_INVALID = 0, 1, 2


class UsageError(ValueError):
    pass


def _parse_matrix(text: str) -> np.ndarray:
    """Nine numbers (row-major) or three (a diagonal), inline or in a file."""
    p = Path(text)
    src = p.read_text() if p.is_file() else text
    src = src.replace("diag", " ").replace("(", " ").replace(")", " ").replace(",", " ").replace(";", " ")
    try:
        vals = [float(t) for t in src.split()]
    except ValueError:
        raise UsageError(f"cannot read a matrix from {text!r}") from None
    if len(vals) == 3:
        return np.diag(vals)
    if len(vals) == 9:
        return np.array(vals).reshape(3, 3)
    raise UsageError(f"matrix needs 9 entries (or 3 diagonal entries), got {len(vals)}")


def _fmt_matrix(m: np.ndarray, digits: int = 6) -> str:
    m = np.where(np.abs(m) < 0.5 * 10.0 ** -digits, 0.0, m)
    return "\n".join(" ".join(f"{v:.{digits}f}" for v in row) for row in m)


def cmd_scene_gen(args) -> int:
    scene = scenes.build(args.name, args.seed)
    out = Path(args.out)
    paths = scenes.write_scene(scene, out)
    cfg = out / f"{scene.name}.cfg"
    cfg.write_text(
        "[scene]\n"
        f"rig = {paths['rig'].name}\npose = {paths['pose'].name}\ncamera = {paths['camera'].name}\n"
        f"initial_cloud = {paths['initial_cloud'].name}\nreference_cloud = {paths['reference_cloud'].name}\n"
        f"[run]\nseed = {args.seed}\noutput = {scene.name}_run\n"
    )
    for key, p in [*paths.items(), ("config", cfg)]:
        print(f"{key} = {p}")
    return EXIT_OK


def cmd_run(args) -> int:
    overrides = {}
    for item in args.set or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects section.key=value, got {item!r}")
        overrides[key.strip()] = value.strip()
    cfg = load_config(args.config, overrides)
    manifest = run_pipeline(cfg)
    for step in manifest.iterations:
        print(f"iteration {step['iteration']}: gaussians {step['cloud_size']}, "
              f"uid flags {step['uid_flags']}, candidates {step['candidates']}, "
              f"color_loss {step['metrics']['color_loss']}, psnr {step['metrics']['psnr']}")
    for k, v in manifest.summary().items():
        print(f"{k} = {v}")
    print(f"manifest = {Path(cfg.output) / 'manifest.json'}")
    return EXIT_OK


def cmd_detect(args) -> int:
    pts, _ = read_points(args.ply)
    report = uid.detect(pts, args.k, np.deg2rad(args.threshold), folded=not args.unfolded)
    text = uid.format_report(report)
    if args.report:
        Path(args.report).write_text(text)
    if args.normals:
        flag = np.zeros(len(pts))
        flag[report.flagged] = 1.0
        write_points(args.normals, pts, report.normals, {"flagged": flag,
                                                         "max_angle_deg": np.rad2deg(report.max_angle)})
    print(f"points = {len(pts)}")
    print(f"flagged_count = {report.flagged.size}")
    print("flagged = " + " ".join(str(int(i)) for i in report.flagged))
    return EXIT_OK


def cmd_render(args) -> int:
    cloud = read_cloud(args.ply)
    cam = load_camera(args.camera)
    img = render(cloud, cam)
    stem = Path(args.out) if args.out else Path(args.ply).with_suffix("")
    write_ppm(stem.with_suffix(".ppm"), img.rgb)
    write_pfm(stem.parent / f"{stem.name}_depth.pfm", img.depth)
    write_pgm(stem.parent / f"{stem.name}_mask.pgm", img.alpha)
    print(f"image = {stem.with_suffix('.ppm')}")
    print(f"coverage = {float(img.alpha.mean()):.6f}")
    return EXIT_OK


def cmd_metrics(args) -> int:
    a, b = read_ppm(args.pred), read_ppm(args.gt)
    values = {"color_loss": color_loss(a, b)}
    if args.mask_pred and args.mask_gt:
        values["mask_loss"] = mask_loss(read_pgm(args.mask_pred), read_pgm(args.mask_gt))
    elif args.mask_pred or args.mask_gt:
        raise UsageError("--mask-pred and --mask-gt go together")
    values.update({"ssim": ssim(a, b), "s3im": s3im(a, b, rng_seed=args.seed), "psnr": psnr(a, b)})
    sys.stdout.write(format_metrics(values))
    return EXIT_OK


def cmd_fisher(args) -> int:
    p = fisher.FisherParams(_parse_matrix(args.matrix))
    if args.action == "mode":
        print(_fmt_matrix(fisher.mode(p)))
    elif args.action == "sample":
        draws = fisher.sample(p, args.seed, args.n)
        for r in draws:
            print(" ".join(f"{v:.9f}" for v in r.ravel()))
    else:
        if args.rotation is None:
            raise UsageError("fisher nll needs --rotation")
        r = _parse_matrix(args.rotation)
        print(f"{fisher.nll(p, r):.9g}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="kgas", description="Kinematic Gaussian densification toolkit.")
    sub = ap.add_subparsers(dest="command", required=True)

    sc = sub.add_parser("scene", help="synthetic scenes")
    scs = sc.add_subparsers(dest="scene_command", required=True)
    gen = scs.add_parser("gen", help="write rig, pose, camera, clouds and reference render")
    gen.add_argument("name", help=f"one of {', '.join(scenes.SCENES)}")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", default=".", help="output directory (default: current)")
    gen.set_defaults(func=cmd_scene_gen)

    run = sub.add_parser("run", help="run the densification pipeline",
                         formatter_class=argparse.RawDescriptionHelpFormatter,
                         epilog="config keys (relative paths resolve against the config file):\n"
                                + describe_keys())
    run.add_argument("config")
    run.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config key")
    run.set_defaults(func=cmd_run)

    det = sub.add_parser("detect", help="flag surface deformation in a PLY point set")
    det.add_argument("ply")
    det.add_argument("--k", type=int, default=uid.DEFAULT_K)
    det.add_argument("--threshold", type=float, default=np.rad2deg(uid.DEFAULT_THRESHOLD),
                     help="angle threshold in degrees (default 30)")
    det.add_argument("--unfolded", action="store_true", help="compare signed normals")
    det.add_argument("--report", help="write the full text report here")
    det.add_argument("--normals", help="write points with normals and flags as PLY here")
    det.set_defaults(func=cmd_detect)

    ren = sub.add_parser("render", help="render a Gaussian cloud PLY")
    ren.add_argument("ply")
    ren.add_argument("camera")
    ren.add_argument("--out", help="output stem (default: next to the PLY)")
    ren.set_defaults(func=cmd_render)

    met = sub.add_parser("metrics", help="compare two PPM images")
    met.add_argument("pred")
    met.add_argument("gt")
    met.add_argument("--mask-pred")
    met.add_argument("--mask-gt")
    met.add_argument("--seed", type=int, default=0, help="S3IM shuffle seed")
    met.set_defaults(func=cmd_metrics)

    fi = sub.add_parser("fisher", help="matrix-Fisher utilities")
    fi.add_argument("action", choices=("mode", "sample", "nll"))
    fi.add_argument("matrix", help="9 numbers row-major, 3 diagonal numbers, or a file")
    fi.add_argument("--n", type=int, default=1)
    fi.add_argument("--seed", type=int, default=0)
    fi.add_argument("--rotation", help="rotation for nll, same formats as the matrix")
    fi.set_defaults(func=cmd_fisher)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except PipelineError as exc:
        print(f"kgas: {exc}", file=sys.stderr)
        return EXIT_INVALID if isinstance(exc.cause, (ValueError, OSError)) else EXIT_INTERNAL
    except (ValueError, OSError) as exc:
        print(f"kgas: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001
        print(f"kgas: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
