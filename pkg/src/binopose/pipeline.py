"""Staged training glue and evaluation over scene sets."""

from __future__ import annotations

import time
from collections import OrderedDict

import numpy as np
import torch

from .geometry import RectifiedRig, project
from .metrics import EvalReport, detections, per_joint_errors, sim_cos, split_report
from .pose_transformer import PoseTransformer, refine_pose
from .sce import SCEModel, argmax_baseline, gt_cells, render_batch, sce_forward, sce_loss
from .substrate import OptimizerState, ParamStore, evaluate_with_gradients, load_weights, optimizer_step, save_weights
from .synth import SynthConfig


def bundle(sce: SCEModel | None = None, pt: PoseTransformer | None = None) -> "OrderedDict[str, torch.Tensor]":
    out = OrderedDict()
    if sce is not None:
        out.update(ParamStore.from_module(sce, "sce."))
    if pt is not None:
        out.update(ParamStore.from_module(pt, "pt."))
    return out


def save_models(path, sce: SCEModel | None = None, pt: PoseTransformer | None = None):
    return save_weights(bundle(sce, pt), path)


def load_into(path, prefix: str, model: torch.nn.Module, required: bool = True) -> bool:
    """Load every ``prefix``-named tensor of a weight file into ``model``.

    Returns False (or raises when ``required``) if the file has none.
    """
    arrays = load_weights(path)
    sub = OrderedDict((k[len(prefix):], v) for k, v in arrays.items() if k.startswith(prefix))
    if not sub:
        if required:
            raise KeyError(f"{path}: no tensors with prefix {prefix!r}")
        return False
    ParamStore.from_module(model).assign(sub)
    return True


def train_e2e(sce: SCEModel, pt: PoseTransformer, scenes, rig: RectifiedRig, synth_config: SynthConfig,
              epochs: int, batch_size: int, lr: float, seed: int, weight_decay: float = 0.0,
              strategy: str = "no_mask", relative: bool = True, log=None) -> list[dict]:
    """Joint fine-tuning: SCE loss on the triangulated pose plus MPJPE of the refined pose."""
    params = OrderedDict(bundle(sce, pt))
    state = OptimizerState(kind="adamw", lr=lr, weight_decay=weight_decay)
    rng = np.random.default_rng(seed)
    cells = gt_cells(scenes, sce.config.disparity_range, sce.config.grid)
    gt = torch.from_numpy(np.stack([s.pose for s in scenes]))
    dtype = next(sce.parameters()).dtype

    class Joint(torch.nn.Module):
        def __init__(self):
            super().__init__()
            self.sce, self.pt = sce, pt

    joint = Joint()

    def loss_fn(m, batch):
        idx, feats = batch
        sub = [scenes[i] for i in idx]
        out = sce_forward(m.sce, sub, rig, synth_config, feats)
        refined = refine_pose(m.pt, out["pose"], strategy, occlusion_flags(sub), relative)
        l_sce = sce_loss(out["pose"], gt[idx], out["coheatmaps"], cells[idx], beta=m.sce.config.beta,
                         log_coheatmaps=out["log_coheatmaps"])
        return l_sce + (refined - gt[idx]).norm(dim=-1).mean()

    rows = []
    for epoch in range(epochs):
        t0 = time.perf_counter()
        order = rng.permutation(len(scenes))
        total = 0.0
        for s in range(0, len(order), batch_size):
            idx = order[s:s + batch_size]
            feats = render_batch([scenes[i] for i in idx], synth_config, dtype)
            loss, grads = evaluate_with_gradients(joint, (idx, feats), loss_fn)
            optimizer_step(state, params, grads)
            total += loss * len(idx)
        row = dict(epoch=epoch + 1, train_loss=total / len(scenes), seconds=time.perf_counter() - t0)
        rows.append(row)
        if log:
            log(row)
    return rows


def predict_scenes(sce: SCEModel, scenes, rig: RectifiedRig, synth_config: SynthConfig, batch_size: int = 32):
    """Run the stereo model over ``scenes``; returns numpy poses, keypoints and reduced feature maps."""
    poses, kl, kr, red_l, red_r = [], [], [], [], []
    dtype = next(sce.parameters()).dtype
    with torch.no_grad():
        for s in range(0, len(scenes), batch_size):
            sub = scenes[s:s + batch_size]
            out = sce_forward(sce, sub, rig, synth_config, render_batch(sub, synth_config, dtype))
            poses.append(out["pose"].numpy())
            kl.append(out["keypoints_left"].numpy())
            kr.append(out["keypoints_right"].numpy())
            red_l.append(out["reduced"][0].to(torch.float64).numpy())
            red_r.append(out["reduced"][1].to(torch.float64).numpy())
    cat = np.concatenate
    return dict(pose=cat(poses), keypoints_left=cat(kl), keypoints_right=cat(kr),
                reduced_left=cat(red_l), reduced_right=cat(red_r))


def _project_or_nan(rig, pose):
    pose = np.asarray(pose, dtype=np.float64)
    ok = pose[..., 2] > 0
    safe = np.where(ok[..., None], pose, np.array([0.0, 0.0, 1.0]))
    left, right = project(rig, safe)
    left[~ok] = np.nan
    right[~ok] = np.nan
    return left, right


def per_joint_metrics(scenes, pose, kp_left, kp_right, features_left, features_right,
                      bbox_width_px: float) -> dict:
    """Per-joint metric arrays (N, J). Features are sampled at each view's ground-truth grid keypoints."""
    gt = np.stack([s.pose for s in scenes])
    gt_l = np.stack([s.gt_keypoints[0] for s in scenes])
    gt_r = np.stack([s.gt_keypoints[1] for s in scenes])
    det = 0.5 * (detections(kp_left, gt_l, bbox_width_px).astype(float)
                 + detections(kp_right, gt_r, bbox_width_px).astype(float))
    bad = ~(np.isfinite(kp_left).all(-1) & np.isfinite(kp_right).all(-1))
    det[bad] = 0.0
    cos = np.stack([sim_cos(features_left[i], features_right[i], s.gt_grid(0), s.gt_grid(1)).per_joint
                    for i, s in enumerate(scenes)])
    return dict(mpjpe_ab_mm=per_joint_errors(pose, gt, "absolute"),
                mpjpe_re_mm=per_joint_errors(pose, gt, "relative"),
                jdr_percent=det, sim_cos=cos)


def occlusion_flags(scenes) -> np.ndarray:
    """(N, J): a joint counts as occluded when it is occluded in either view."""
    return np.stack([s.occluded.any(0) for s in scenes])


def evaluate(scenes, rig: RectifiedRig, synth_config: SynthConfig, bbox_width_px: float,
             sce: SCEModel | None = None, pt: PoseTransformer | None = None,
             strategy: str = "no_mask", relative: bool = True, inject_gt: bool = False,
             chunk: int = 64) -> list[EvalReport]:
    """Reports for the argmax baseline, the stereo model and (if given) the refined poses.

    ``inject_gt`` replaces every prediction with the ground truth. Scenes are
    rendered ``chunk`` at a time to bound memory.
    """
    rows: "OrderedDict[str, list]" = OrderedDict()

    def add(label, metrics):
        rows.setdefault(label, []).append(metrics)

    for c in range(0, len(scenes), chunk):
        sub = scenes[c:c + chunk]
        raw_l, raw_r = (t.numpy() for t in render_batch(sub, synth_config, torch.float64))
        if inject_gt:
            gt = np.stack([s.pose for s in sub])
            kl = np.stack([s.gt_keypoints[0] for s in sub])
            kr = np.stack([s.gt_keypoints[1] for s in sub])
            add("ground_truth", per_joint_metrics(sub, gt, kl, kr, raw_l, raw_r, bbox_width_px))
            continue
        bp, bl, br, _ = argmax_baseline(sub, rig, synth_config, (torch.from_numpy(raw_l), torch.from_numpy(raw_r)))
        add("argmax_baseline", per_joint_metrics(sub, bp, bl, br, raw_l, raw_r, bbox_width_px))
        if sce is None:
            continue
        pred = predict_scenes(sce, sub, rig, synth_config)
        add("sce", per_joint_metrics(sub, pred["pose"], pred["keypoints_left"], pred["keypoints_right"],
                                     pred["reduced_left"], pred["reduced_right"], bbox_width_px))
        if pt is not None:
            with torch.no_grad():
                refined = refine_pose(pt, pred["pose"], strategy, occlusion_flags(sub), relative)
            rl, rr = _project_or_nan(rig, refined)
            add(f"sce_ppt_{strategy}_{'rel' if relative else 'abs'}",
                per_joint_metrics(sub, refined, rl, rr, pred["reduced_left"], pred["reduced_right"],
                                  bbox_width_px))
    occ = occlusion_flags(scenes)
    reports = []
    for label, parts in rows.items():
        merged = {k: np.concatenate([p[k] for p in parts]) for k in parts[0]}
        reports.append(split_report(merged, occ, label=label))
    return reports
