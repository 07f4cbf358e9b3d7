"""Stereo co-keypoint estimation.

Per-view features are gated by a learned attention mask, reduced to C'
channels, and stacked into a stereo volume over D + 1 disparity slices. A
small 3D conv net turns the volume into one normalised co-heatmap per joint;
its soft-argmax is a co-keypoint (d, h, w) that dismantles into a left/right
pixel pair sharing the same row.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .geometry import RectifiedRig, triangulate_pose, triangulate_torch
from .substrate import OptimizerState, ParamStore, evaluate_with_gradients, optimizer_step
from .synth import J, SceneSample, SynthConfig, render_features

LOG_EPS = 1e-12


@dataclass
class SCEConfig:
    in_channels: int = 24
    reduced_channels: int = 16
    hidden_channels: int = 8
    conv_blocks: int = 3
    disparity_range: int = 16
    grid: tuple = (64, 64)  # (H, W)
    beta: float = 0.01
    min_disparity_px: float = 0.5
    use_mask: bool = True


class AttentionMaskNet(nn.Module):
    """Three heatmap branches (1x1, 3x3 dil 2, 3x3 dil 3) fused by a 1x1 conv, logistic output."""

    def __init__(self, in_channels: int):
        super().__init__()
        self.in_channels = in_channels
        self.pixel = nn.Conv2d(in_channels, 1, 1)
        self.thin = nn.Conv2d(in_channels, 1, 3, padding=2, dilation=2)
        self.wide = nn.Conv2d(in_channels, 1, 3, padding=3, dilation=3)
        self.fuse = nn.Conv2d(3, 1, 1)

    def logits(self, features: torch.Tensor) -> torch.Tensor:
        if features.ndim != 4 or features.shape[1] != self.in_channels:
            raise ValueError(f"expected (B, {self.in_channels}, H, W) features, got {tuple(features.shape)}")
        heat = torch.cat([self.pixel(features), self.thin(features), self.wide(features)], 1)
        return self.fuse(heat)[:, 0]

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        """Mask of shape (B, H, W) in [0, 1]."""
        return torch.sigmoid(self.logits(features))


def apply_mask(mask: torch.Tensor, features: torch.Tensor) -> torch.Tensor:
    if mask.shape[-2:] != features.shape[-2:]:
        raise ValueError(f"mask {tuple(mask.shape)} and features {tuple(features.shape)} disagree")
    return mask.unsqueeze(-3) * features


def build_svf(f_left: torch.Tensor, f_right: torch.Tensor, D: int) -> torch.Tensor:
    """Stereo volume (..., 2C', D+1, H, W).

    Slice d holds ``concat(F_left(h, w), F_right(h, w - d + D/2))``; right
    features that fall outside [0, W) are zero.
    """
    f_left = torch.as_tensor(f_left)
    f_right = torch.as_tensor(f_right)
    if f_left.shape != f_right.shape:
        raise ValueError("left/right features must share a shape")
    W = f_left.shape[-1]
    if D % 2 or D <= 0:
        raise ValueError(f"D must be an even positive integer, got {D}")
    if D > W:
        raise ValueError(f"disparity range D={D} must not exceed the width W={W}")
    half = D // 2
    padded = F.pad(f_right, (half, half))
    # F_right(w - d + D/2) == padded[w + D - d]
    right = torch.stack([padded[..., D - d:D - d + W] for d in range(D + 1)], -3)
    left = f_left.unsqueeze(-3).expand_as(right)
    return torch.cat([left, right], -4)


class CoHeatmapRegressor(nn.Module):
    """3D conv stack; the 1x1x1 head also sees the raw volume through a skip connection."""

    def __init__(self, in_channels: int, hidden: int = 8, blocks: int = 3, joints: int = J):
        super().__init__()
        layers, c = [], in_channels
        for _ in range(blocks):
            layers += [nn.Conv3d(c, hidden, 3, padding=1), nn.SiLU()]
            c = hidden
        self.body = nn.Sequential(*layers)
        # no bias: a per-joint constant cancels in the volume softmax
        self.head = nn.Conv3d(hidden + in_channels, joints, 1, bias=False)
        self.in_channels = in_channels

    def forward(self, svf: torch.Tensor) -> torch.Tensor:
        """Per-joint log-probabilities (B, J, D+1, H, W), normalised over the whole volume."""
        if svf.ndim != 5 or svf.shape[1] != self.in_channels:
            raise ValueError(f"expected (B, {self.in_channels}, D+1, H, W) volume, got {tuple(svf.shape)}")
        logits = self.head(torch.cat([self.body(svf), svf], 1))
        shape = logits.shape
        return torch.log_softmax(logits.flatten(2), -1).view(shape)


def regress_coheatmaps(regressor: CoHeatmapRegressor, svf: torch.Tensor) -> torch.Tensor:
    return regressor(svf).exp()


def soft_argmax(ch: torch.Tensor) -> torch.Tensor:
    """Expected (d, h, w) under each normalised volume; ``ch`` is (..., D+1, H, W)."""
    Dp, H, W = ch.shape[-3:]
    kw = dict(dtype=ch.dtype, device=ch.device)
    pd = ch.sum((-1, -2))
    ph = ch.sum((-1, -3))
    pw = ch.sum((-2, -3))
    d = (pd * torch.arange(Dp, **kw)).sum(-1)
    h = (ph * torch.arange(H, **kw)).sum(-1)
    w = (pw * torch.arange(W, **kw)).sum(-1)
    return torch.stack([d, h, w], -1)


def dismantle(ck, D: int):
    """Split co-keypoints (..., 3) = (d, h, w) into left/right (u, v) grid coordinates."""
    d, h, w = ck[..., 0], ck[..., 1], ck[..., 2]
    stack = torch.stack if isinstance(ck, torch.Tensor) else np.stack
    left = stack([w, h], -1)
    right = stack([w - d + D / 2, h], -1)
    return left, right


def nearest_grid_cells(ck) -> np.ndarray:
    """Round half away from zero on each axis (integer cell indices)."""
    ck = np.asarray(ck, dtype=np.float64)
    return (np.sign(ck) * np.floor(np.abs(ck) + 0.5)).astype(np.int64)


def gt_cells(scenes, D: int, grid) -> np.ndarray:
    H, W = grid
    cells = nearest_grid_cells(np.stack([s.gt_cokeypoints() for s in scenes]))
    cells[..., 0] = np.clip(cells[..., 0], 0, D)
    cells[..., 1] = np.clip(cells[..., 1], 0, H - 1)
    cells[..., 2] = np.clip(cells[..., 2], 0, W - 1)
    return cells


def sce_loss(pred_pose: torch.Tensor, gt_pose: torch.Tensor, coheatmaps: torch.Tensor,
             gt_grid_cells, beta: float = 0.01, log_coheatmaps: torch.Tensor | None = None,
             eps: float = LOG_EPS) -> torch.Tensor:
    """Mean per-joint L1 3D error plus ``beta`` times the mean -log co-heatmap mass at the gt cell.

    The probability is clamped at ``eps``; pass ``log_coheatmaps`` to read the
    same quantity from log-space without underflow.
    """
    l3d = (pred_pose - gt_pose).abs().sum(-1).mean()
    cells = torch.as_tensor(np.asarray(gt_grid_cells), dtype=torch.long)
    B = coheatmaps.shape[0] if coheatmaps.ndim == 5 else None
    src = log_coheatmaps if log_coheatmaps is not None else coheatmaps
    if B is None:
        picked = src[torch.arange(J), cells[:, 0], cells[:, 1], cells[:, 2]]
    else:
        bi = torch.arange(B)[:, None]
        ji = torch.arange(J)[None, :]
        picked = src[bi, ji, cells[..., 0], cells[..., 1], cells[..., 2]]
    if log_coheatmaps is not None:
        nll = -torch.clamp(picked, min=math.log(eps))
    else:
        nll = -torch.log(torch.clamp(picked, min=eps))
    return l3d + beta * nll.mean()


class SCEModel(nn.Module):
    """Attention mask, channel reduction, stereo volume and co-heatmap regression."""

    def __init__(self, config: SCEConfig):
        super().__init__()
        self.config = config
        self.mask = AttentionMaskNet(config.in_channels)
        self.reduce = nn.Conv2d(config.in_channels, config.reduced_channels, 1)
        self.regressor = CoHeatmapRegressor(2 * config.reduced_channels, config.hidden_channels,
                                            config.conv_blocks)

    def features(self, feats: torch.Tensor):
        if tuple(feats.shape[-2:]) != tuple(self.config.grid):
            raise ValueError(f"feature grid {tuple(feats.shape[-2:])} != configured {self.config.grid}")
        mask = self.mask(feats) if self.config.use_mask else torch.ones_like(feats[:, 0])
        return mask, self.reduce(apply_mask(mask, feats))

    def forward(self, feat_left: torch.Tensor, feat_right: torch.Tensor) -> dict:
        mask_l, red_l = self.features(feat_left)
        mask_r, red_r = self.features(feat_right)
        svf = build_svf(red_l, red_r, self.config.disparity_range)
        log_ch = self.regressor(svf)
        ch = log_ch.exp()
        ck = soft_argmax(ch)
        left, right = dismantle(ck, self.config.disparity_range)
        return dict(masks=(mask_l, mask_r), reduced=(red_l, red_r), log_coheatmaps=log_ch,
                    coheatmaps=ch, cokeypoints=ck, left_grid=left, right_grid=right)


def crop_tensors(scenes) -> tuple[torch.Tensor, torch.Tensor, float]:
    origins = torch.tensor([[s.crop.origin_left, s.crop.origin_right] for s in scenes], dtype=torch.float64)
    strides = {s.crop.stride_px for s in scenes}
    if len(strides) != 1:
        raise ValueError("scenes in a batch must share a crop stride")
    return origins, origins, float(strides.pop())


def lift_to_frame(left_grid, right_grid, scenes, min_disparity_px: float = 0.0):
    """Grid coordinates -> full-frame pixels using each scene's crop origins."""
    origins, _, s = crop_tensors(scenes)
    ol = origins[:, 0][:, None, :]
    orr = origins[:, 1][:, None, :]
    xl = ol + s * left_grid.to(torch.float64)
    xr = orr + s * right_grid.to(torch.float64)
    if min_disparity_px > 0:
        # keeps depth finite while the co-heatmaps are still diffuse
        u_r = torch.minimum(xr[..., 0], xl[..., 0] - min_disparity_px)
        xr = torch.stack([u_r, xr[..., 1]], -1)
    return xl, xr


def render_batch(scenes, synth_config: SynthConfig, dtype=torch.float32):
    fl = np.stack([render_features(s, 0, synth_config) for s in scenes])
    fr = np.stack([render_features(s, 1, synth_config) for s in scenes])
    return torch.from_numpy(fl).to(dtype), torch.from_numpy(fr).to(dtype)


def sce_forward(model: SCEModel, scenes, rig: RectifiedRig, synth_config: SynthConfig,
                features=None) -> dict:
    """Render -> mask -> reduce -> volume -> regress -> soft-argmax -> dismantle -> lift -> triangulate.

    Keypoints are returned in full-frame pixels; ``pose`` is (B, 17, 3) mm.
    """
    dtype = next(model.parameters()).dtype
    if features is None:
        features = render_batch(scenes, synth_config, dtype)
    out = model(*features)
    xl, xr = lift_to_frame(out["left_grid"], out["right_grid"], scenes, model.config.min_disparity_px)
    out.update(keypoints_left=xl, keypoints_right=xr, pose=triangulate_torch(rig, xl, xr))
    return out


def argmax_baseline(scenes, rig: RectifiedRig, synth_config: SynthConfig, features=None):
    """Independent per-view argmax of each joint channel, lifted and triangulated.

    Returns (pose (B, 17, 3), left px, right px, degenerate flags).
    """
    if features is None:
        features = render_batch(scenes, synth_config, torch.float64)
    kps = []
    for view, f in enumerate(features):
        f = f.numpy()[:, :J]
        B, _, H, W = f.shape
        flat = f.reshape(B, J, -1).argmax(-1)
        grid = np.stack([flat % W, flat // W], -1).astype(np.float64)
        kps.append(np.stack([s.crop.to_frame(grid[i], view) for i, s in enumerate(scenes)]))
    pose, degenerate = triangulate_pose(rig, kps[0], kps[1])
    return pose, kps[0], kps[1], degenerate


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 8
    lr: float = 1e-3
    weight_decay: float = 0.0
    optimizer: str = "adam"
    log_every: int = 0


def train_sce(model: SCEModel, scenes, rig: RectifiedRig, synth_config: SynthConfig,
              train: TrainConfig, seed: int = 0, log=None) -> list[dict]:
    """Minimise the SCE loss with Adam; returns one log row per epoch.

    Batch order is drawn from ``seed`` so runs are bit-reproducible in
    single-threaded mode.
    """
    params = ParamStore.from_module(model)
    state = OptimizerState(kind=train.optimizer, lr=train.lr, weight_decay=train.weight_decay)
    rng = np.random.default_rng(seed)
    D = model.config.disparity_range
    cells_all = gt_cells(scenes, D, model.config.grid)
    gt_all = torch.from_numpy(np.stack([s.pose for s in scenes]))
    rows = []

    def loss_fn(m, batch):
        idx, feats = batch
        out = sce_forward(m, [scenes[i] for i in idx], rig, synth_config, feats)
        return sce_loss(out["pose"], gt_all[idx], out["coheatmaps"], cells_all[idx],
                        beta=m.config.beta, log_coheatmaps=out["log_coheatmaps"])

    for epoch in range(train.epochs):
        t0 = time.perf_counter()
        order = rng.permutation(len(scenes))
        total, n = 0.0, 0
        for start in range(0, len(order), train.batch_size):
            idx = order[start:start + train.batch_size]
            feats = render_batch([scenes[i] for i in idx], synth_config, next(model.parameters()).dtype)
            loss, grads = evaluate_with_gradients(model, (idx, feats), loss_fn)
            optimizer_step(state, params, grads)
            total += loss * len(idx)
            n += len(idx)
        row = dict(epoch=epoch + 1, train_loss=total / max(n, 1), seconds=time.perf_counter() - t0)
        rows.append(row)
        if log:
            log(row)
    return rows
