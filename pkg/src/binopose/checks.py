"""Central-difference gradient checks on reduced configurations of every trainable component.

All checks run in float64; inputs and parameters are drawn from ``seed``.
"""

from __future__ import annotations

from dataclasses import dataclass
from types import SimpleNamespace

import numpy as np
import torch

from .geometry import RectifiedRig, triangulate_torch
from .pose_transformer import PoseTransformer, PTConfig, iterative_mask_recover
from .sce import (AttentionMaskNet, CoHeatmapRegressor, dismantle, lift_to_frame, nearest_grid_cells,
                  sce_loss, soft_argmax)
from .substrate import TensorProbe, finite_difference_check
from .synth import J, CropWindow


@dataclass
class GradCheckRow:
    component: str
    max_rel_error: float
    worst_param: str
    n_checked: int
    passed: bool


def _module_rng(seed):
    torch.manual_seed(seed)
    return np.random.default_rng(seed)


def check_attention_mask(seed=0, eps=1e-5, channels=3, size=8):
    rng = _module_rng(seed)
    net = AttentionMaskNet(channels).double()
    x = torch.from_numpy(rng.standard_normal((2, channels, size, size)))
    w = torch.from_numpy(rng.standard_normal((2, size, size)))
    return finite_difference_check(net, x, lambda m, x: (m(x) * w).sum(), eps=eps)


def check_regressor(seed=0, eps=1e-5, channels=2, D=4, size=8):
    rng = _module_rng(seed)
    net = CoHeatmapRegressor(channels, hidden=2, blocks=2).double()
    svf = torch.from_numpy(rng.standard_normal((1, channels, D + 1, size, size)))
    w = torch.from_numpy(rng.standard_normal((1, J, D + 1, size, size)))
    return finite_difference_check(net, svf, lambda m, s: (m(s).exp() * w).sum() * 1e3, eps=eps)


def check_soft_argmax(seed=0, eps=1e-5, D=4, size=8):
    rng = _module_rng(seed)
    probe = TensorProbe(logits=torch.from_numpy(rng.standard_normal((3, D + 1, size, size))))
    w = torch.from_numpy(rng.standard_normal((3, 3)))

    def loss(m, _):
        ch = torch.softmax(m.logits.flatten(1), -1).view_as(m.logits)
        return (soft_argmax(ch) * w).sum()

    return finite_difference_check(probe, None, loss, eps=eps)


def tiny_loss_setup(seed=0, D=4, size=8, weight_std=0.3):
    """A regressor on a random volume, lifted through fake crops and triangulated against a nearby pose."""
    rng = _module_rng(seed)
    # small pixel magnitudes keep coordinate rounding far below the disparity,
    # which bounds the round-off in triangulated depth seen by central differences
    rig = RectifiedRig(180.0, (16.0, 16.0), 200.0, (40, 40), D)
    net = CoHeatmapRegressor(2, hidden=2, blocks=2).double()
    with torch.no_grad():
        # a peaked volume keeps every weight gradient well above the central-difference round-off
        for p in net.parameters():
            p.copy_(torch.from_numpy(rng.normal(0.0, weight_std, tuple(p.shape))))
    svf = torch.from_numpy(rng.standard_normal((1, 2, D + 1, size, size)))
    scenes = [SimpleNamespace(crop=CropWindow((10, 0), (0, 0), 4, (size, size)))]
    with torch.no_grad():
        ck = soft_argmax(net(svf).exp())
        xl, xr = lift_to_frame(*dismantle(ck, D), scenes)
        pose0 = triangulate_torch(rig, xl, xr)
    gt = pose0 + torch.from_numpy(rng.uniform(2.0, 8.0, pose0.shape) * rng.choice([-1, 1], pose0.shape))
    cells = np.clip(nearest_grid_cells(ck.numpy()), 0, [D, size - 1, size - 1])
    return rig, net, svf, scenes, gt, cells


def check_sce_loss(seed=0, eps=1e-5, D=4, size=8):
    rig, net, svf, scenes, gt, cells = tiny_loss_setup(seed, D, size)

    def loss(m, s):
        log_ch = m(s)
        ch = log_ch.exp()
        xl, xr = lift_to_frame(*dismantle(soft_argmax(ch), D), scenes)
        return sce_loss(triangulate_torch(rig, xl, xr), gt, ch, cells, log_coheatmaps=log_ch)

    return finite_difference_check(net, svf, loss, eps=eps)


def check_pose_transformer(seed=0, eps=1e-5, dim=8, depth=2, heads=2, weight_std=0.2):
    rng = _module_rng(seed)
    model = PoseTransformer(PTConfig(dim=dim, depth=depth, heads=heads)).double()
    with torch.no_grad():
        # the training init gives near-uniform attention whose weight gradients sit at the round-off floor
        for p in model.parameters():
            p.copy_(torch.from_numpy(rng.normal(0.0, weight_std, tuple(p.shape))))
    pose = torch.from_numpy(rng.standard_normal((4, J, 3)) * 0.3)
    mask = torch.zeros(4, J, dtype=torch.bool)
    mask[:, [1, 5, 9]] = True
    w_out = torch.from_numpy(rng.standard_normal((4, J, 3)))
    w_att = torch.from_numpy(rng.standard_normal((4, heads, J, J)))

    def loss(m, p):
        # one masked pass (T=1) plus the attention-returning path, so both attention kernels are checked
        _, l1 = iterative_mask_recover(m, p, rng, T=1, mask=mask)
        out, maps = m(p, attention="all")
        return l1 + (out * w_out).sum() + sum((a * w_att).sum() for a in maps)

    return finite_difference_check(model, pose, loss, eps=eps)


CHECKS = {
    "attention_mask": check_attention_mask,
    "coheatmap_regressor": check_regressor,
    "soft_argmax": check_soft_argmax,
    "sce_loss": check_sce_loss,
    "pose_transformer": check_pose_transformer,
}


def run_gradcheck_suite(seed: int = 0, eps: float = 1e-5, tolerance: float = 1e-4) -> list[GradCheckRow]:
    rows = []
    for name, fn in CHECKS.items():
        res = fn(seed=seed, eps=eps)
        rows.append(GradCheckRow(name, res.max_rel_error, res.worst_param, res.n_checked,
                                 res.max_rel_error < tolerance))
    return rows
