"""Run configuration: flat ``section.key = value`` text files.

Values are Python literals (numbers, strings, booleans, lists). Every key must
already exist in the defaults and keep its type, so typos fail loudly.
"""

from __future__ import annotations

import ast
import copy
from pathlib import Path

from .geometry import RectifiedRig
from .pose_transformer import PretrainConfig, PTConfig
from .sce import SCEConfig
from .synth import OCCLUSION_THRESHOLDS_PX, PoseConfig, SynthConfig


class ConfigError(ValueError):
    pass


RIG_PROFILES = {
    # ~200 mm baseline with a short disparity window
    "short": dict(focal_px=180.0, cx=128.0, cy=128.0, baseline_mm=200.0, width=256, height=256,
                  disparity_range=16),
    # wide-baseline toy: same intrinsics, 3 m baseline, 60-cell disparity window
    "wide": dict(focal_px=180.0, cx=128.0, cy=128.0, baseline_mm=3000.0, width=256, height=256,
                 disparity_range=60),
}

DEFAULTS = {
    "seed": 0,
    "out_dir": "runs/default",
    "rig.profile": "short",
    "rig.focal_px": None,
    "rig.cx": None,
    "rig.cy": None,
    "rig.baseline_mm": None,
    "rig.width": None,
    "rig.height": None,
    "rig.disparity_range": None,
    "synth.grid_h": 64,
    "synth.grid_w": 64,
    "synth.stride_px": 2,
    "synth.channels": 24,
    "synth.bump_sigma_cells": 1.25,
    "synth.noise_sigma": 0.05,
    "synth.occlusion_attenuation": 0.2,
    "synth.distractors": 6,
    "synth.distractor_sigma_cells": 1.5,
    "synth.crop_jitter_cells": 2,
    "synth.crop_margin_cells": 2,
    "synth.threshold_arm_px": OCCLUSION_THRESHOLDS_PX["arm"],
    "synth.threshold_leg_px": OCCLUSION_THRESHOLDS_PX["leg"],
    "synth.threshold_torso_px": OCCLUSION_THRESHOLDS_PX["torso"],
    "synth.threshold_head_px": OCCLUSION_THRESHOLDS_PX["head"],
    "data.train": 5000,
    "data.val": 500,
    "data.test": 1000,
    "data.pt_corpus": 20000,
    "data.pt_heldout": 2000,
    "sce.reduced_channels": 16,
    "sce.hidden_channels": 8,
    "sce.conv_blocks": 3,
    "sce.beta": 0.01,
    "sce.min_disparity_px": 0.5,
    "sce.use_mask": True,
    "pt.dim": 128,
    "pt.depth": 16,
    "pt.heads": 8,
    "pt.mlp_ratio": 2.0,
    "pt.scale_mm": 1000.0,
    "pt.pad_value": 0.0,
    "pt.mask_ratio": 0.4,
    "pt.iterations": 2,
    "pt.top_k": 2,
    "optim.lr_backbone": 1e-4,
    "optim.lr_other": 1e-3,
    "optim.weight_decay": 0.01,
    "optim.sce_epochs": 8,
    "optim.sce_batch": 8,
    "optim.pt_epochs": 30,
    "optim.pt_batch": 128,
    "optim.pt_warmup_epochs": 1.0,
    "optim.e2e_epochs": 2,
    "optim.e2e_batch": 8,
    "eval.strategy": "no_mask",
    "eval.relative": True,
    "eval.bbox_width_px": None,
    "baseline.baselines_mm": [30.0, 200.0, 1000.0, 3000.0],
    "baseline.sigma_px": 10.0,
    "baseline.trials": 10000,
    "baseline.target_depth_mm": 3000.0,
    "gradcheck.eps": 1e-5,
    "gradcheck.tolerance": 1e-4,
}

NULLABLE_TYPES = {
    "rig.focal_px": float, "rig.cx": float, "rig.cy": float, "rig.baseline_mm": float,
    "rig.width": int, "rig.height": int, "rig.disparity_range": int, "eval.bbox_width_px": float,
}

CHOICES = {"rig.profile": tuple(RIG_PROFILES), "eval.strategy": ("no_mask", "occ_mask")}


def _coerce(key, value):
    default = DEFAULTS[key]
    expected = NULLABLE_TYPES.get(key, type(default))
    if value is None and key in NULLABLE_TYPES:
        return None
    if expected is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if expected is list:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        return [float(v) for v in value]
    if type(value) is not expected:
        raise ConfigError(f"{key}: expected {expected.__name__}, got {type(value).__name__} ({value!r})")
    if key in CHOICES and value not in CHOICES[key]:
        raise ConfigError(f"{key}: must be one of {CHOICES[key]}, got {value!r}")
    return value


def parse_config_text(text: str, source: str = "<config>") -> dict:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        try:
            parsed = ast.literal_eval(val)
        except (ValueError, SyntaxError):
            parsed = val  # bare words read as strings
        values[key] = _coerce(key, parsed)
    return values


class RunConfig:
    def __init__(self, values: dict | None = None):
        self.values = copy.deepcopy(DEFAULTS)
        for k, v in (values or {}).items():
            if k not in DEFAULTS:
                raise ConfigError(f"unknown key {k!r}")
            self.values[k] = _coerce(k, v)
        self.validate()

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        return cls(parse_config_text(path.read_text(), str(path)))

    def __getitem__(self, key):
        return self.values[key]

    def set(self, key, value):
        if key not in DEFAULTS:
            raise ConfigError(f"unknown key {key!r}")
        self.values[key] = _coerce(key, value)
        self.validate()

    def validate(self):
        v = self.values
        for key in ("data.train", "data.val", "data.test", "data.pt_corpus", "data.pt_heldout"):
            if v[key] < 0:
                raise ConfigError(f"{key} must be non-negative")
        if v["synth.channels"] < 17:
            raise ConfigError("synth.channels must be at least 17")
        if not 0.0 <= v["synth.occlusion_attenuation"] <= 1.0:
            raise ConfigError("synth.occlusion_attenuation must lie in [0, 1]")
        if v["pt.dim"] % v["pt.heads"]:
            raise ConfigError("pt.dim must be divisible by pt.heads")
        D = self.rig().disparity_range
        if D > v["synth.grid_w"]:
            raise ConfigError(f"disparity range {D} must not exceed synth.grid_w {v['synth.grid_w']}")

    def rig(self) -> RectifiedRig:
        prof = dict(RIG_PROFILES[self.values["rig.profile"]])
        for k in prof:
            if self.values[f"rig.{k}"] is not None:
                prof[k] = self.values[f"rig.{k}"]
        try:
            return RectifiedRig(prof["focal_px"], (prof["cx"], prof["cy"]), prof["baseline_mm"],
                                (prof["width"], prof["height"]), prof["disparity_range"])
        except ValueError as exc:
            raise ConfigError(f"rig: {exc}") from exc

    def synth(self) -> SynthConfig:
        v = self.values
        return SynthConfig(
            grid=(v["synth.grid_h"], v["synth.grid_w"]), stride_px=v["synth.stride_px"],
            channels=v["synth.channels"], bump_sigma_cells=v["synth.bump_sigma_cells"],
            noise_sigma=v["synth.noise_sigma"], occlusion_attenuation=v["synth.occlusion_attenuation"],
            distractors=v["synth.distractors"], distractor_sigma_cells=v["synth.distractor_sigma_cells"],
            crop_jitter_cells=v["synth.crop_jitter_cells"], crop_margin_cells=v["synth.crop_margin_cells"],
            pose=PoseConfig(),
            occlusion_thresholds={c: v[f"synth.threshold_{c}_px"] for c in ("arm", "leg", "torso", "head")},
        )

    def sce(self) -> SCEConfig:
        v = self.values
        return SCEConfig(in_channels=v["synth.channels"], reduced_channels=v["sce.reduced_channels"],
                         hidden_channels=v["sce.hidden_channels"], conv_blocks=v["sce.conv_blocks"],
                         disparity_range=self.rig().disparity_range,
                         grid=(v["synth.grid_h"], v["synth.grid_w"]), beta=v["sce.beta"],
                         min_disparity_px=v["sce.min_disparity_px"], use_mask=v["sce.use_mask"])

    def pt(self) -> PTConfig:
        v = self.values
        return PTConfig(dim=v["pt.dim"], depth=v["pt.depth"], heads=v["pt.heads"], mlp_ratio=v["pt.mlp_ratio"],
                        scale_mm=v["pt.scale_mm"], pad_value=v["pt.pad_value"], mask_ratio=v["pt.mask_ratio"],
                        iterations=v["pt.iterations"], top_k=v["pt.top_k"])

    def pretrain(self) -> PretrainConfig:
        v = self.values
        return PretrainConfig(epochs=v["optim.pt_epochs"], batch_size=v["optim.pt_batch"], lr=v["optim.lr_other"],
                              weight_decay=v["optim.weight_decay"], warmup_epochs=v["optim.pt_warmup_epochs"])

    def bbox_width_px(self) -> float:
        w = self.values["eval.bbox_width_px"]
        return float(w) if w is not None else float(self.synth().frame_width_px)

    def to_text(self) -> str:
        return "".join(f"{k} = {self.values[k]!r}\n" for k in DEFAULTS)
