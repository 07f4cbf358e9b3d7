"""Pose Transformer refiner with iterative masked-joint pre-training.

Poses enter in a normalised space: pelvis-relative (optionally) and divided
by a fixed length scale. Masked joints are replaced by a constant pad token.
Attention maps of every layer can be returned; the final layer's maps give a
per-joint confidence used to pick which recovered joints to keep.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .substrate import OptimizerState, ParamStore, evaluate_with_gradients, optimizer_step
from .synth import J, PELVIS


@dataclass
class PTConfig:
    joints: int = J
    dim: int = 128
    depth: int = 16
    heads: int = 8
    mlp_ratio: float = 2.0
    scale_mm: float = 1000.0
    pad_value: float = 0.0
    mask_ratio: float = 0.4
    iterations: int = 2  # T
    top_k: int = 2  # K


class EncoderBlock(nn.Module):
    """Norm, multi-head self-attention, norm, two-layer GELU perceptron; residual around each half."""

    def __init__(self, dim: int, heads: int, hidden: int):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} is not divisible by {heads} heads")
        self.heads = heads
        self.norm1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim, bias=False)
        self.proj = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x: torch.Tensor, need_weights: bool = False):
        B, N, C = x.shape
        h = self.heads
        q, k, v = self.qkv(self.norm1(x)).view(B, N, 3, h, C // h).permute(2, 0, 3, 1, 4)
        if need_weights:
            attn = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(C // h), -1)
            y = attn @ v
        else:
            attn = None
            y = F.scaled_dot_product_attention(q, k, v)
        x = x + self.proj(y.transpose(1, 2).reshape(B, N, C))
        x = x + self.mlp(self.norm2(x))
        return x, attn


class PoseTransformer(nn.Module):
    """Joint embedding + positional embedding, encoder stack, linear regression head.

    The head predicts a correction added to the input pose, so a zeroed head
    is the identity map.
    """

    def __init__(self, config: PTConfig | None = None):
        super().__init__()
        self.config = config = config or PTConfig()
        self.joint_embed = nn.Linear(3, config.dim)
        self.pos_embed = nn.Parameter(torch.zeros(config.joints, config.dim))
        hidden = int(round(config.mlp_ratio * config.dim))
        self.blocks = nn.ModuleList(EncoderBlock(config.dim, config.heads, hidden)
                                    for _ in range(config.depth))
        self.norm = nn.LayerNorm(config.dim)
        self.head = nn.Linear(config.dim, 3)
        self.reset_parameters()

    def reset_parameters(self):
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.trunc_normal_(m.weight, std=0.02)
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)

    def forward(self, pose: torch.Tensor, attention: str = "none"):
        """``pose`` (B, J, 3) or (J, 3) normalised. ``attention``: none | last | all.

        Returns ``(recovered, attn)`` where ``attn`` is a list of (B, heads, J, J)
        maps (one per returned layer) or None.
        """
        if attention not in ("none", "last", "all"):
            raise ValueError(f"attention must be none|last|all, got {attention!r}")
        if not torch.isfinite(pose).all():
            raise ValueError("pose transformer input contains non-finite values")
        single = pose.ndim == 2
        x_in = pose.unsqueeze(0) if single else pose
        if x_in.shape[-2:] != (self.config.joints, 3):
            raise ValueError(f"expected (..., {self.config.joints}, 3) pose, got {tuple(pose.shape)}")
        x = self.joint_embed(x_in) + self.pos_embed
        maps = []
        last = len(self.blocks) - 1
        for i, blk in enumerate(self.blocks):
            want = attention == "all" or (attention == "last" and i == last)
            x, a = blk(x, need_weights=want)
            if want:
                maps.append(a)
        out = x_in + self.head(self.norm(x))
        if single:
            out = out[0]
            maps = [a[0] for a in maps]
        return out, (maps if attention != "none" else None)


def joint_confidence(attn_final: torch.Tensor) -> torch.Tensor:
    """Total attention each joint receives: sum over heads and query rows of (..., heads, J, J)."""
    return attn_final.sum(-3).sum(-2)


def normalize_pose(pose_mm, scale_mm: float = 1000.0, relative: bool = True):
    """Returns ``(normalised, root)``; ``root`` is the pelvis (or zeros when absolute)."""
    pose = torch.as_tensor(pose_mm)
    root = pose[..., PELVIS:PELVIS + 1, :] if relative else torch.zeros_like(pose[..., :1, :])
    return (pose - root) / scale_mm, root


def denormalize_pose(pose_n, root, scale_mm: float = 1000.0):
    return pose_n * scale_mm + root


def mask_count(ratio: float, joints: int = J) -> int:
    x = ratio * joints
    n = int(math.floor(x + 0.5))  # round half away from zero (x >= 0)
    if n < 1:
        raise ValueError(f"mask ratio {ratio} masks no joints out of {joints}")
    return n


def pad_masked(pose: torch.Tensor, mask: torch.Tensor, pad_value: float = 0.0) -> torch.Tensor:
    return torch.where(mask.unsqueeze(-1), torch.full_like(pose, pad_value), pose)


def top_k_confident(conf: torch.Tensor, mask: torch.Tensor, k: int) -> torch.Tensor:
    """Boolean (B, J) selecting the ``k`` most confident masked joints; ties go to the lower index."""
    conf = conf.detach().to(torch.float64).numpy()
    m = mask.numpy()
    keep = np.zeros_like(m)
    for b in range(m.shape[0]):
        cand = np.flatnonzero(m[b])
        order = np.lexsort((cand, -conf[b, cand]))
        keep[b, cand[order[:k]]] = True
    return torch.from_numpy(keep)


def random_masks(rng: np.random.Generator, batch: int, n_mask: int, joints: int = J) -> torch.Tensor:
    mask = np.zeros((batch, joints), dtype=bool)
    for b in range(batch):
        mask[b, rng.choice(joints, n_mask, replace=False)] = True
    return torch.from_numpy(mask)


def iterative_mask_recover(model: PoseTransformer, gt_pose: torch.Tensor, rng: np.random.Generator,
                           ratio: float | None = None, T: int | None = None, K: int | None = None,
                           mask: torch.Tensor | None = None, trace: list | None = None,
                           detach_inner: bool = False):
    """Masked recovery with progressive unmasking of the most confident joints.

    ``gt_pose`` is (B, J, 3) in normalised space. Each of the T-1 inner rounds
    recovers the pose, keeps the top-K confident joints of the masked set,
    re-pads the rest and shrinks the masked set; a final pass produces the
    output. Inner rounds carry gradient unless ``detach_inner``. Returns ``(recovered, loss)``
    with the loss the mean per-joint Euclidean error over all joints.
    ``trace``, if given, receives one dict per pass.
    """
    cfg = model.config
    ratio = cfg.mask_ratio if ratio is None else ratio
    T = cfg.iterations if T is None else T
    K = cfg.top_k if K is None else K
    B, Jn = gt_pose.shape[:2]
    if mask is None:
        mask = random_masks(rng, B, mask_count(ratio, Jn), Jn)
    n0 = int(mask[0].sum())
    if T < 1:
        raise ValueError("T must be at least 1")
    if T > 1 and not (1 <= K and n0 - (T - 1) * K >= 1):
        raise ValueError(f"K={K} with T={T} would unmask all {n0} masked joints before the final pass")

    current = pad_masked(gt_pose, mask, cfg.pad_value)
    for t in range(T - 1):
        with torch.set_grad_enabled(torch.is_grad_enabled() and not detach_inner):
            recovered, attn = model(current, attention="last")
        conf = joint_confidence(attn[-1])
        keep = top_k_confident(conf, mask, K)
        new_mask = mask & ~keep
        if trace is not None:
            trace.append(dict(step=t, input=current.detach().clone(), mask=mask.clone(),
                              keep=keep.clone(), confidence=conf.detach().clone()))
        current = pad_masked(recovered, new_mask, cfg.pad_value)
        mask = new_mask
    recovered, _ = model(current)
    if trace is not None:
        trace.append(dict(step=T - 1, input=current.detach().clone(), mask=mask.clone(), keep=None,
                          confidence=None))
    loss = (recovered - gt_pose).norm(dim=-1).mean()
    return recovered, loss


def masked_recovery_error(model: PoseTransformer, poses_n: torch.Tensor, masks: torch.Tensor,
                          batch_size: int = 512, T: int | None = None) -> float:
    """Mean error (normalised units) over the initially masked joints after iterative recovery.

    ``T=1`` gives a single masked pass; the default uses the model's own iteration count.
    """
    total, count = 0.0, 0
    with torch.no_grad():
        for s in range(0, len(poses_n), batch_size):
            p, m = poses_n[s:s + batch_size], masks[s:s + batch_size]
            out, _ = iterative_mask_recover(model, p, None, T=T, mask=m)
            err = (out - p).norm(dim=-1)
            total += float(err[m].sum())
            count += int(m.sum())
    return total / max(count, 1)


def heldout_masks(n: int, config: PTConfig, seed: int) -> torch.Tensor:
    """The fixed evaluation masks used by ``pretrain_pt`` for a given seed."""
    return random_masks(np.random.default_rng([seed, 1]), n, mask_count(config.mask_ratio, config.joints),
                        config.joints)


def constant_pad_error(poses_n: torch.Tensor, masks: torch.Tensor, pad_value: float = 0.0) -> float:
    """Error of predicting the pad token for every masked joint."""
    err = (poses_n - pad_value).norm(dim=-1)
    return float(err[masks].sum()) / max(int(masks.sum()), 1)


@dataclass
class PretrainConfig:
    epochs: int = 30
    batch_size: int = 128
    lr: float = 1e-3
    weight_decay: float = 0.01
    cosine: bool = True
    warmup_epochs: float = 1.0
    min_corpus: int = 1000
    dtype: str = "float32"


def scheduled_lr(train: PretrainConfig, step: int, steps_per_epoch: int, total_steps: int) -> float:
    """Linear warm-up followed by cosine decay (or a constant rate)."""
    warm = int(round(train.warmup_epochs * steps_per_epoch))
    if step < warm:
        return train.lr * (step + 1) / warm
    if not train.cosine:
        return train.lr
    frac = (step - warm) / max(total_steps - warm, 1)
    return 0.5 * train.lr * (1 + math.cos(math.pi * frac))


PRETRAIN_LOG_COLUMNS = ("epoch", "train_loss_mm", "heldout_masked_mpjpe_mm")


@dataclass
class PretrainResult:
    model: PoseTransformer
    log: list = field(default_factory=list)
    baseline_mm: float = float("nan")


def pretrain_pt(corpus_mm, config: PTConfig, train: PretrainConfig, seed: int,
                heldout_mm=None, log_path=None, model: PoseTransformer | None = None,
                progress=None) -> PretrainResult:
    """Pre-train on pelvis-relative poses with AdamW and iterative masking.

    Held-out error is measured after every epoch by running the same iterative
    recovery on a fixed set of masks drawn from ``seed``; only the initially
    masked joints are scored.
    """
    corpus = np.asarray(corpus_mm, dtype=np.float64)
    if corpus.ndim != 3 or corpus.shape[1:] != (config.joints, 3):
        raise ValueError(f"corpus must be (N, {config.joints}, 3), got {corpus.shape}")
    if len(corpus) < train.min_corpus:
        raise ValueError(f"corpus has {len(corpus)} poses; at least {train.min_corpus} are required")
    dtype = getattr(torch, train.dtype)
    torch.manual_seed(seed)
    model = model or PoseTransformer(config)
    model.to(dtype)
    rng = np.random.default_rng(seed)
    train_n, _ = normalize_pose(torch.from_numpy(corpus), config.scale_mm)
    train_n = train_n.to(dtype)
    held_n = held_masks = None
    result = PretrainResult(model)
    if heldout_mm is not None:
        held_n, _ = normalize_pose(torch.from_numpy(np.asarray(heldout_mm, dtype=np.float64)), config.scale_mm)
        held_n = held_n.to(dtype)
        held_masks = heldout_masks(len(held_n), config, seed)
        result.baseline_mm = constant_pad_error(held_n, held_masks, config.pad_value) * config.scale_mm

    params = ParamStore.from_module(model)
    state = OptimizerState(kind="adamw", lr=train.lr, weight_decay=train.weight_decay)
    steps_per_epoch = math.ceil(len(train_n) / train.batch_size)
    total_steps = steps_per_epoch * train.epochs

    def loss_fn(m, batch):
        return iterative_mask_recover(m, batch, rng)[1]

    for epoch in range(train.epochs):
        t0 = time.perf_counter()
        model.train()
        order = rng.permutation(len(train_n))
        total = 0.0
        for s in range(0, len(order), train.batch_size):
            batch = train_n[order[s:s + train.batch_size]]
            lr = scheduled_lr(train, state.step, steps_per_epoch, total_steps)
            loss, grads = evaluate_with_gradients(model, batch, loss_fn)
            optimizer_step(state, params, grads, lr=lr)
            total += loss * len(batch)
        row = dict(epoch=epoch + 1, train_loss_mm=total / len(train_n) * config.scale_mm,
                   heldout_masked_mpjpe_mm=float("nan"))
        if held_n is not None:
            model.eval()
            row["heldout_masked_mpjpe_mm"] = masked_recovery_error(model, held_n, held_masks) * config.scale_mm
        result.log.append(row)
        if progress:
            progress(dict(row, seconds=time.perf_counter() - t0))
    if log_path is not None:
        write_pretrain_log(result.log, log_path)
    return result


def write_pretrain_log(rows, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PRETRAIN_LOG_COLUMNS)
        for r in rows:
            w.writerow([r["epoch"], repr(float(r["train_loss_mm"])), repr(float(r["heldout_masked_mpjpe_mm"]))])
    return path


def refine_pose(model: PoseTransformer, initial_pose_mm, strategy: str = "no_mask",
                occluded=None, relative: bool = True):
    """Refine (..., J, 3) mm poses with one transformer pass.

    ``occ_mask`` pads the joints flagged in ``occluded`` before the pass.
    """
    if strategy not in ("no_mask", "occ_mask"):
        raise ValueError(f"unknown refinement strategy {strategy!r}")
    cfg = model.config
    dtype = next(model.parameters()).dtype
    pose = torch.as_tensor(initial_pose_mm)
    was_numpy = not isinstance(initial_pose_mm, torch.Tensor)
    pose_n, root = normalize_pose(pose, cfg.scale_mm, relative)
    x = pose_n.to(dtype)
    if strategy == "occ_mask":
        if occluded is None:
            raise ValueError("occ_mask refinement needs occlusion flags")
        x = pad_masked(x, torch.as_tensor(np.asarray(occluded, dtype=bool)), cfg.pad_value)
    out, _ = model(x)
    refined = denormalize_pose(out.to(pose.dtype), root, cfg.scale_mm)
    return refined.detach().numpy() if was_numpy else refined
