"""Experiment configuration: flat ``key = value`` text with bracketed sections."""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import so3
from .metrics import LossWeights
from .render import Camera
from .scenes import SCENES


class ConfigError(ValueError):
    pass


# section -> key -> (default, help)
SCHEMA: dict[str, dict[str, tuple[object, str]]] = {
    "scene": {
        "name": ("", "synthetic scene (arm2, chain4, humanoid24, creased_sheet); empty to use files"),
        "rig": ("", "rig file (file-based runs)"),
        "pose": ("", "target pose file: 'joint rx ry rz' per line"),
        "initial_cloud": ("", "initial Gaussian cloud PLY, rest pose, with binding columns"),
        "reference_cloud": ("", "reference Gaussian cloud PLY, rest pose, with binding columns"),
        "camera": ("", "camera file; synthetic scenes default to their own camera"),
    },
    "jntm": {
        "gamma": (0.3, "parent-to-child orientation blend in [0, 1]"),
        "kappa0": (20.0, "Fisher parameter scale: theta_j = kappa0 * R_pose_j"),
    },
    "uid": {
        "enabled": (True, "run the surface deformation detector each iteration"),
        "k": (16, "neighbors per point"),
        "threshold_deg": (30.0, "normal-angle threshold in degrees"),
    },
    "densify": {
        "iterations": (2, "number of densification iterations"),
        "mode_threshold": (0.01, "split when the largest scale exceeds this, clone otherwise"),
        "split_factor": (1.6, "scale divisor for split children"),
        "residual_threshold": (0.1, "footprint-mean image residual that marks a Gaussian for densification"),
        "prune_opacity": (0.005, "drop Gaussians below this opacity after densification"),
    },
    "loss": {f.name: (f.default, f"loss weight {f.name}") for f in fields(LossWeights)},
    "run": {
        "seed": (0, "master seed for scene generation, densification and S3IM"),
        "output": ("out", "output directory"),
    },
}


@dataclass(frozen=True)
class ExperimentConfig:
    scene: str = ""
    rig: Path | None = None
    pose: Path | None = None
    initial_cloud: Path | None = None
    reference_cloud: Path | None = None
    camera: Path | None = None
    gamma: float = 0.3
    kappa0: float = 20.0
    uid_enabled: bool = True
    uid_k: int = 16
    uid_threshold_deg: float = 30.0
    iterations: int = 2
    mode_threshold: float = 0.01
    split_factor: float = 1.6
    residual_threshold: float = 0.1
    prune_opacity: float = 0.005
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    output: Path = Path("out")

    def __post_init__(self):
        if self.iterations < 0:
            raise ConfigError("densify.iterations must be >= 0")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError("jntm.gamma must be in [0, 1]")
        if self.uid_k < 1:
            raise ConfigError("uid.k must be >= 1")
        if not 0.0 < self.uid_threshold_deg <= 90.0:
            raise ConfigError("uid.threshold_deg must be in (0, 90]")
        if self.split_factor <= 0.0 or self.mode_threshold <= 0.0 or self.kappa0 <= 0.0:
            raise ConfigError("split_factor, mode_threshold and kappa0 must be positive")
        if self.scene:
            if self.scene not in SCENES:
                raise ConfigError(f"unknown scene {self.scene!r}; choose from {', '.join(SCENES)}")
        else:
            missing = [k for k in ("rig", "pose", "initial_cloud", "reference_cloud", "camera")
                       if getattr(self, k) is None]
            if missing:
                raise ConfigError(f"file-based runs need scene.{', scene.'.join(missing)}")

    def check_paths(self) -> None:
        for key in ("rig", "pose", "initial_cloud", "reference_cloud", "camera"):
            p = getattr(self, key)
            if p is not None and not p.is_file():
                raise ConfigError(f"scene.{key}: no such file {p}")

    def echo(self) -> dict[str, object]:
        """Plain values for the run manifest."""
        out: dict[str, object] = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, LossWeights):
                out.update({f"loss.{k.name}": getattr(v, k.name) for k in fields(v)})
            elif isinstance(v, Path):
                out[f.name] = str(v)
            elif v is None:
                out[f.name] = ""
            else:
                out[f.name] = v
        return out


def _convert(section: str, key: str, raw: str, default):
    where = f"[{section}] {key}"
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low not in ("true", "false", "yes", "no", "1", "0", "on", "off"):
                raise ValueError(raw)
            return low in ("true", "yes", "1", "on")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            v = float(raw)
            if not math.isfinite(v):
                raise ValueError(raw)
            return v
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw.strip()


def parse_config(text: str, base_dir=".", overrides: dict[str, str] | None = None) -> ExperimentConfig:
    """Parse config text. Relative paths resolve against ``base_dir``; unknown keys are errors."""
    cp = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    values: dict[tuple[str, str], object] = {}
    for section in cp.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        for key, raw in cp.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            values[(section, key)] = _convert(section, key, raw, SCHEMA[section][key][0])
    for dotted, raw in (overrides or {}).items():
        section, _, key = dotted.partition(".")
        if section not in SCHEMA or key not in SCHEMA[section]:
            raise ConfigError(f"unknown override {dotted!r}")
        values[(section, key)] = _convert(section, key, raw, SCHEMA[section][key][0])

    def get(section, key):
        return values.get((section, key), SCHEMA[section][key][0])

    base = Path(base_dir)

    def path(key):
        v = get("scene", key)
        return (base / v) if v else None

    try:
        weights = LossWeights(**{k: get("loss", k) for k in SCHEMA["loss"]})
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return ExperimentConfig(
        scene=get("scene", "name"),
        rig=path("rig"), pose=path("pose"), initial_cloud=path("initial_cloud"),
        reference_cloud=path("reference_cloud"), camera=path("camera"),
        gamma=get("jntm", "gamma"), kappa0=get("jntm", "kappa0"),
        uid_enabled=get("uid", "enabled"), uid_k=get("uid", "k"), uid_threshold_deg=get("uid", "threshold_deg"),
        iterations=get("densify", "iterations"), mode_threshold=get("densify", "mode_threshold"),
        split_factor=get("densify", "split_factor"), residual_threshold=get("densify", "residual_threshold"),
        prune_opacity=get("densify", "prune_opacity"),
        weights=weights, seed=get("run", "seed"), output=base / get("run", "output"),
    )


def load_config(path, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc.strerror}") from None
    return parse_config(text, p.parent, overrides)


def describe_keys() -> str:
    """Human-readable key reference for ``--help``."""
    lines = []
    for section, keys in SCHEMA.items():
        lines.append(f"[{section}]")
        for key, (default, doc) in keys.items():
            d = str(default).lower() if isinstance(default, bool) else default
            lines.append(f"  {key} = {d!s:<8}  {doc}")
    return "\n".join(lines)


def parse_camera(text: str):
    """Camera file: ``[camera]`` with fx fy cx cy width height and either
    ``rotation`` (9 numbers, row-major) + ``translation`` or ``eye`` + ``target`` + ``up``."""
    cp = configparser.ConfigParser(interpolation=None, delimiters=("=",))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed camera file: {exc}") from None
    if "camera" not in cp:
        raise ConfigError("camera file needs a [camera] section")
    sec = dict(cp["camera"])
    allowed = {"rotation", "translation", "eye", "target", "up", "fx", "fy", "cx", "cy", "width", "height"}
    unknown = set(sec) - allowed
    if unknown:
        raise ConfigError(f"unknown camera keys: {', '.join(sorted(unknown))}")

    def nums(key, n):
        try:
            v = [float(t) for t in sec[key].replace(",", " ").split()]
        except KeyError:
            raise ConfigError(f"camera key {key!r} is required") from None
        except ValueError:
            raise ConfigError(f"camera key {key!r}: expected numbers") from None
        if len(v) != n:
            raise ConfigError(f"camera key {key!r}: expected {n} numbers, got {len(v)}")
        return v if n > 1 else v[0]

    fx, fy = nums("fx", 1), nums("fy", 1)
    width, height = int(nums("width", 1)), int(nums("height", 1))
    cx = nums("cx", 1) if "cx" in sec else (width - 1) / 2
    cy = nums("cy", 1) if "cy" in sec else (height - 1) / 2
    try:
        if "rotation" in sec:
            rot = so3.as_rotation(np.array(nums("rotation", 9)).reshape(3, 3), tol=1e-6)
            return Camera(rot, nums("translation", 3), fx, fy, cx, cy, width, height)
        return Camera.look_at(nums("eye", 3), nums("target", 3), nums("up", 3) if "up" in sec else (0, 1, 0),
                              fx, fy, width, height, cx, cy)
    except ValueError as exc:
        raise ConfigError(f"invalid camera: {exc}") from None


def load_camera(path):
    p = Path(path)
    try:
        return parse_camera(p.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read camera {p}: {exc.strerror}") from None
