"""End-to-end densification loop over a rigged scene.

Per iteration: propagate per-joint Fisher parameters along the tree, detect
surface deformation on the posed cloud, pick residual-driven candidates from
the previous render, densify with the motion factors, prune, articulate,
render and score against the reference render.
"""

from __future__ import annotations

import json
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import fisher, uid
from .config import ConfigError, ExperimentConfig, load_camera
from .gaussians import (TAG_GRADIENT, TAG_UID, DensifyCandidates, GaussianCloud, articulate, densify,
                        prune)
from .imageio import quantize, write_pfm, write_pgm, write_ppm
from .kinematics import KinematicTree, forward_kinematics, jntm_propagate, load_rig
from .metrics import evaluate, format_metrics, metric_table, format_value
from .plyio import read_cloud, write_cloud
from .render import Camera, ImageRGBA, render, splat_footprints
from .scenes import build, parse_pose, reference_mask


# acceptance band for the relative color-loss drop over a full run
REDUCTION_MIN = 0.2


class PipelineError(RuntimeError):
    def __init__(self, stage: str, iteration: int, cause: BaseException):
        super().__init__(f"stage '{stage}' failed at iteration {iteration}: {cause}")
        self.stage = stage
        self.iteration = iteration
        self.cause = cause


@dataclass(frozen=True, eq=False)
class Inputs:
    tree: KinematicTree
    pose: np.ndarray
    camera: Camera
    initial: GaussianCloud
    reference: GaussianCloud


@dataclass
class RunManifest:
    config: dict
    iterations: list[dict] = field(default_factory=list)
    timings: list[dict] = field(default_factory=list)

    def to_json(self) -> str:
        """Deterministic document; wall-clock timings are kept out of it."""
        doc = {"config": self.config, "iterations": self.iterations, "summary": self.summary()}
        return json.dumps(doc, indent=2, sort_keys=False) + "\n"

    def summary(self) -> dict:
        if not self.iterations:
            return {}
        first = float(self.iterations[0]["metrics"]["color_loss"])
        last = float(self.iterations[-1]["metrics"]["color_loss"])
        return {
            "color_loss_initial": format_value(first),
            "color_loss_final": format_value(last),
            "color_loss_reduction": format_value((first - last) / first if first > 0 else 0.0),
            "color_loss_reduction_min": format_value(REDUCTION_MIN),
            "cloud_size_initial": self.iterations[0]["cloud_size"],
            "cloud_size_final": self.iterations[-1]["cloud_size"],
        }


def load_inputs(cfg: ExperimentConfig) -> Inputs:
    if cfg.scene:
        scene = build(cfg.scene, cfg.seed)
        cam = load_camera(cfg.camera) if cfg.camera else scene.camera
        return Inputs(scene.tree, scene.pose, cam, scene.initial, scene.reference)
    cfg.check_paths()
    tree, _, _ = load_rig(cfg.rig)
    pose = parse_pose(Path(cfg.pose).read_text(), tree.joint_count)
    return Inputs(tree, pose, load_camera(cfg.camera),
                  read_cloud(cfg.initial_cloud, tree.joint_count),
                  read_cloud(cfg.reference_cloud, tree.joint_count))


def quantized(img: ImageRGBA) -> ImageRGBA:
    """The image as it reads back from its 8-bit files."""
    rgb = quantize(img.rgb) / 255.0
    alpha = quantize(img.alpha) / 255.0
    return ImageRGBA(rgb, alpha, img.depth)


def residual_candidates(posed: GaussianCloud, pred: ImageRGBA, ref: ImageRGBA, cam: Camera,
                        threshold: float) -> np.ndarray:
    """Gaussians whose 3-sigma screen footprint carries a mean residual above ``threshold``.

    Stands in for the view-space positional gradient of a differentiable
    renderer: large residuals under a footprint are where moving or adding
    Gaussians would reduce the image loss.
    """
    if not len(posed):
        return np.zeros(0, dtype=int)
    r = np.mean(np.abs(pred.rgb - ref.rgb), axis=-1) + np.abs(pred.alpha - ref.alpha)
    integral = np.zeros((r.shape[0] + 1, r.shape[1] + 1))
    integral[1:, 1:] = r.cumsum(axis=0).cumsum(axis=1)
    means, cov2d, visible = splat_footprints(posed, cam)
    h, w = r.shape
    ru = 3.0 * np.sqrt(cov2d[:, 0, 0])
    rv = 3.0 * np.sqrt(cov2d[:, 1, 1])
    x0 = np.clip(np.ceil(means[:, 0] - ru), 0, w).astype(int)
    x1 = np.clip(np.floor(means[:, 0] + ru) + 1, 0, w).astype(int)
    y0 = np.clip(np.ceil(means[:, 1] - rv), 0, h).astype(int)
    y1 = np.clip(np.floor(means[:, 1] + rv) + 1, 0, h).astype(int)
    area = (x1 - x0) * (y1 - y0)
    box = integral[y1, x1] - integral[y0, x1] - integral[y1, x0] + integral[y0, x0]
    score = np.where(area > 0, box / np.maximum(area, 1), 0.0)
    return np.flatnonzero(visible & (area > 0) & (score > threshold))


@contextmanager
def _stage(name: str, iteration: int, timings: dict):
    t0 = time.perf_counter()
    try:
        yield
    except ConfigError:
        raise
    except Exception as exc:
        raise PipelineError(name, iteration, exc) from exc
    finally:
        timings[name] = timings.get(name, 0.0) + time.perf_counter() - t0


def _write_iteration(out: Path, it: int, cloud: GaussianCloud, img: ImageRGBA, table: dict,
                     report: uid.DetectionReport | None) -> None:
    d = out / f"iter_{it:02d}"
    d.mkdir(parents=True, exist_ok=True)
    write_cloud(d / "cloud.ply", cloud, with_binding=True)
    write_ppm(d / "render.ppm", img.rgb)
    write_pgm(d / "render_mask.pgm", img.alpha)
    write_pfm(d / "render_depth.pfm", img.depth)
    (d / "metrics.txt").write_text(format_metrics(table))
    if report is not None:
        (d / "uid.txt").write_text(uid.format_report(report))


def run_pipeline(cfg: ExperimentConfig, write: bool = True) -> RunManifest:
    """Run the densification loop; artifacts go to ``cfg.output`` when ``write`` is set."""
    manifest = RunManifest(config=cfg.echo())
    timings: dict[str, float] = {}
    out = Path(cfg.output)
    with _stage("load", 0, timings):
        inputs = load_inputs(cfg)
        cam = inputs.camera
        transforms = forward_kinematics(inputs.tree, inputs.pose)
        ref_img = quantized(render(articulate(inputs.reference, transforms), cam))
        gt_mask = reference_mask(ref_img.alpha)
        params = [cfg.kappa0 * r for r in inputs.pose]
    with _stage("jntm", 0, timings):
        refined, factors = jntm_propagate(inputs.tree, params, cfg.gamma)
        joint_nll = [fisher.nll(p, r) for p, r in zip(refined, inputs.pose)]
    if write:
        out.mkdir(parents=True, exist_ok=True)
        write_ppm(out / "reference.ppm", ref_img.rgb)
        write_pgm(out / "reference_mask.pgm", gt_mask)

    cloud = inputs.initial
    pred = None
    for it in range(cfg.iterations + 1):
        step = {"iteration": it}
        stage_times: dict[str, float] = {}
        report = None
        if it > 0:
            with _stage("uid", it, stage_times):
                posed = articulate(cloud, transforms)
                flagged = np.zeros(0, dtype=int)
                if cfg.uid_enabled and len(posed) > cfg.uid_k:
                    report = uid.detect(posed.positions, cfg.uid_k, np.deg2rad(cfg.uid_threshold_deg))
                    flagged = report.flagged
            with _stage("candidates", it, stage_times):
                resid = residual_candidates(posed, pred, ref_img, cam, cfg.residual_threshold)
                cands = DensifyCandidates.from_indices(resid, TAG_GRADIENT).union(
                    DensifyCandidates.from_indices(flagged, TAG_UID))
            with _stage("densify", it, stage_times):
                big = cloud.scales.max(axis=1) > cfg.mode_threshold
                idx = cands.indices
                rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([cfg.seed, it])))
                grown = densify(cloud, cands, factors, cfg.mode_threshold, rng, cfg.split_factor)
                cloud = prune(grown, cfg.prune_opacity)
            step.update({
                "uid_flags": int(flagged.size),
                "residual_flags": int(resid.size),
                "candidates": len(cands),
                "cloned": int(np.count_nonzero(~big[idx])),
                "split": int(np.count_nonzero(big[idx])),
                "pruned": len(grown) - len(cloud),
            })
        else:
            step.update({"uid_flags": 0, "residual_flags": 0, "candidates": 0, "cloned": 0, "split": 0,
                         "pruned": 0})
        step["cloud_size"] = len(cloud)
        with _stage("render", it, stage_times):
            img = render(articulate(cloud, transforms), cam)
            pred = quantized(img)
        with _stage("metrics", it, stage_times):
            rep = evaluate(pred, ref_img, gt_mask, joint_nll=joint_nll, weights=cfg.weights,
                           s3im_seed=cfg.seed)
            table = metric_table(rep)
            step["metrics"] = {k: format_value(v) for k, v in table.items()}
        if write:
            with _stage("write", it, stage_times):
                _write_iteration(out, it, cloud, img, table, report)
        manifest.iterations.append(step)
        manifest.timings.append({"iteration": it, **{k: round(v, 6) for k, v in stage_times.items()}})
    manifest.timings.insert(0, {"iteration": "setup", **{k: round(v, 6) for k, v in timings.items()}})
    if write:
        (out / "manifest.json").write_text(manifest.to_json())
        (out / "timings.json").write_text(json.dumps(manifest.timings, indent=2) + "\n")
    return manifest
