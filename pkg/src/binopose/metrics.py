"""Pose and correspondence metrics with occluded / unoccluded splits."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .synth import PELVIS

JDR_HEAD_FRACTION = 0.025  # head size as a fraction of the bbox width


def per_joint_errors(pred, gt, mode: str = "absolute") -> np.ndarray:
    """Euclidean error per joint, shape (..., J)."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"pred {pred.shape} and gt {gt.shape} disagree")
    if mode == "relative":
        pred = pred - pred[..., PELVIS:PELVIS + 1, :]
        gt = gt - gt[..., PELVIS:PELVIS + 1, :]
    elif mode != "absolute":
        raise ValueError(f"mode must be absolute|relative, got {mode!r}")
    return np.linalg.norm(pred - gt, axis=-1)


def mpjpe(pred, gt, mode: str = "absolute") -> float:
    return float(per_joint_errors(pred, gt, mode).mean())


def jdr_threshold(bbox_width_px: float) -> float:
    """Half the head size, with the head taken as 2.5% of the bbox width."""
    if not bbox_width_px > 0:
        raise ValueError("bbox_width_px must be positive")
    return 0.5 * JDR_HEAD_FRACTION * bbox_width_px


def detections(pred2d, gt2d, bbox_width_px: float) -> np.ndarray:
    dist = np.linalg.norm(np.asarray(pred2d, dtype=np.float64) - np.asarray(gt2d, dtype=np.float64), axis=-1)
    return dist < jdr_threshold(bbox_width_px)


def jdr(pred2d, gt2d, bbox_width_px: float) -> float:
    """Percentage of joints whose 2D error is strictly below the threshold."""
    return float(100.0 * detections(pred2d, gt2d, bbox_width_px).mean())


def bilinear_sample(features, uv) -> np.ndarray:
    """Sample (C, H, W) features at continuous (u, v) = (column, row) points; zero outside the map."""
    f = np.asarray(features, dtype=np.float64)
    uv = np.asarray(uv, dtype=np.float64)
    C, H, W = f.shape
    u, v = uv[..., 0], uv[..., 1]
    u0, v0 = np.floor(u).astype(np.int64), np.floor(v).astype(np.int64)
    out = np.zeros(uv.shape[:-1] + (C,))
    for du in (0, 1):
        for dv in (0, 1):
            uu, vv = u0 + du, v0 + dv
            wgt = (1 - np.abs(u - uu)) * (1 - np.abs(v - vv))
            ok = (uu >= 0) & (uu < W) & (vv >= 0) & (vv < H)
            vals = f[:, np.clip(vv, 0, H - 1), np.clip(uu, 0, W - 1)]  # (C, ...)
            out += np.moveaxis(vals, 0, -1) * (wgt * ok)[..., None]
    return out


@dataclass
class SimCosResult:
    mean: float
    per_joint: np.ndarray
    skipped: int


def sim_cos(features_left, features_right, kp_left, kp_right) -> SimCosResult:
    """Mean cosine similarity of the two views' features at corresponding keypoints.

    Keypoints are in feature-grid (u, v). Joints where either sampled vector
    has zero norm are skipped (NaN in ``per_joint``) and counted.
    """
    a = bilinear_sample(features_left, kp_left)
    b = bilinear_sample(features_right, kp_right)
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    ok = (na > 0) & (nb > 0)
    cos = np.full(na.shape, np.nan)
    cos[ok] = np.clip((a[ok] * b[ok]).sum(-1) / (na[ok] * nb[ok]), -1.0, 1.0)
    mean = float(cos[ok].mean()) if ok.any() else float("nan")
    return SimCosResult(mean, cos, int((~ok).sum()))


SPLITS = ("all", "n_occ", "occ")
METRIC_FIELDS = ("mpjpe_ab_mm", "mpjpe_re_mm", "jdr_percent", "sim_cos")


@dataclass
class EvalReport:
    """Each metric maps split name -> value; ``None`` marks an empty split."""
    mpjpe_ab_mm: dict = field(default_factory=dict)
    mpjpe_re_mm: dict = field(default_factory=dict)
    jdr_percent: dict = field(default_factory=dict)
    sim_cos: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)
    label: str = ""

    def columns(self) -> list[str]:
        cols = ["label"] + [f"{m}_{s}" for m in METRIC_FIELDS for s in SPLITS]
        return cols + [f"count_{s}" for s in SPLITS]

    def row(self) -> list[str]:
        def fmt(x):
            return "" if x is None else repr(float(x))
        vals = [self.label] + [fmt(getattr(self, m).get(s)) for m in METRIC_FIELDS for s in SPLITS]
        return vals + [str(self.counts.get(s, 0)) for s in SPLITS]

    def to_text(self) -> str:
        lines = [f"[report {self.label}]" if self.label else "[report]"]
        for m in METRIC_FIELDS:
            for s in SPLITS:
                v = getattr(self, m).get(s)
                lines.append(f"{m}.{s} = {'empty' if v is None else repr(float(v))}")
        for s in SPLITS:
            lines.append(f"count.{s} = {self.counts.get(s, 0)}")
        return "\n".join(lines) + "\n"


def _split_means(values, occluded):
    values = np.asarray(values, dtype=np.float64)
    occ = np.asarray(occluded, dtype=bool)
    if values.shape != occ.shape:
        raise ValueError(f"values {values.shape} and occlusion flags {occ.shape} disagree")
    out = {}
    for name, sel in (("all", np.ones_like(occ)), ("n_occ", ~occ), ("occ", occ)):
        v = values[sel]
        v = v[np.isfinite(v)]
        out[name] = float(v.mean()) if v.size else None
    return out


def split_report(per_joint: dict, occluded_flags, label: str = "") -> EvalReport:
    """Aggregate per-joint metric arrays over all / unoccluded / occluded joints.

    ``per_joint`` maps any of the metric field names to arrays shaped like
    ``occluded_flags``; JDR arrays hold per-joint detection booleans. Non-finite
    entries (degenerate joints, skipped cosines) are left out of every split.
    """
    occ = np.asarray(occluded_flags, dtype=bool)
    rep = EvalReport(label=label, counts=dict(all=int(occ.size), n_occ=int((~occ).sum()), occ=int(occ.sum())))
    for name, values in per_joint.items():
        if name not in METRIC_FIELDS:
            raise KeyError(f"unknown metric {name!r}")
        v = np.asarray(values, dtype=np.float64)
        if name == "jdr_percent":
            v = 100.0 * v
        setattr(rep, name, _split_means(v, occ))
    return rep


def write_reports(reports, csv_path=None, text_path=None):
    reports = list(reports)
    if csv_path is not None:
        with Path(csv_path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            if reports:
                w.writerow(reports[0].columns())
            for r in reports:
                w.writerow(r.row())
    if text_path is not None:
        Path(text_path).write_text("\n".join(r.to_text() for r in reports))
