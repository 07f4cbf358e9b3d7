"""Training plumbing shared by the stereo and pose-transformer models.

Autodiff is delegated to torch; this module owns the named parameter store,
the on-disk weight format, Adam/AdamW, and the finite-difference checker.
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np
import torch
from torch import nn

WEIGHTS_MAGIC = b"BPWT"
WEIGHTS_VERSION = 1
DTYPE_F32_LE = 1


class NonFiniteLossError(FloatingPointError):
    def __init__(self, loss, bad_params=(), bad_inputs=()):
        self.bad_params = list(bad_params)
        self.bad_inputs = list(bad_inputs)
        super().__init__(
            f"non-finite loss {loss}; non-finite parameters: {self.bad_params or 'none'}; "
            f"non-finite inputs: {self.bad_inputs or 'none'}"
        )


def single_thread(seed: int | None = None) -> None:
    """Reference mode: one intra-op thread and deterministic kernels."""
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)
    if seed is not None:
        torch.manual_seed(seed)


class ParamStore(OrderedDict):
    """Ordered ``name -> tensor`` mapping. Tensors may alias module parameters."""

    @classmethod
    def from_module(cls, module: nn.Module, prefix: str = "") -> "ParamStore":
        return cls((prefix + n, p) for n, p in module.named_parameters())

    def numel(self) -> int:
        return sum(t.numel() for t in self.values())

    def assign(self, arrays: Mapping[str, np.ndarray], strict: bool = True) -> None:
        """Copy ``arrays`` into the stored tensors in place (dtype cast as needed)."""
        missing = [n for n in self if n not in arrays]
        extra = [n for n in arrays if n not in self]
        if strict and (missing or extra):
            raise KeyError(f"weight names disagree; missing={missing} unexpected={extra}")
        with torch.no_grad():
            for name, t in self.items():
                if name not in arrays:
                    continue
                a = np.asarray(arrays[name])
                if tuple(a.shape) != tuple(t.shape):
                    raise ValueError(f"{name}: shape {tuple(a.shape)} does not match {tuple(t.shape)}")
                t.copy_(torch.from_numpy(a.astype(np.float64)).to(t.dtype))


def save_weights(params: Mapping[str, torch.Tensor], path) -> Path:
    """Write tensors as little-endian float32 with a leading name/shape table."""
    path = Path(path)
    table = [struct.pack("<4sII", WEIGHTS_MAGIC, WEIGHTS_VERSION, len(params))]
    payload = []
    for name, t in params.items():
        raw = name.encode("utf-8")
        a = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
        table.append(struct.pack("<H", len(raw)) + raw)
        table.append(struct.pack(f"<B{a.ndim}I", a.ndim, *a.shape))
        table.append(struct.pack("<B", DTYPE_F32_LE))
        payload.append(np.ascontiguousarray(a, dtype="<f4").tobytes())
    try:
        path.write_bytes(b"".join(table + payload))
    except OSError as exc:
        raise OSError(f"cannot write weights to {path}: {exc}") from exc
    return path


def load_weights(path) -> "OrderedDict[str, np.ndarray]":
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"weight file not found: {path}")
    data = path.read_bytes()
    magic, version, count = struct.unpack_from("<4sII", data, 0)
    if magic != WEIGHTS_MAGIC:
        raise ValueError(f"{path}: not a weight file")
    if version != WEIGHTS_VERSION:
        raise ValueError(f"{path}: unsupported weight file version {version}")
    off = 12
    entries = []
    for _ in range(count):
        (n,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + n].decode("utf-8")
        off += n
        (rank,) = struct.unpack_from("<B", data, off)
        off += 1
        dims = struct.unpack_from(f"<{rank}I", data, off)
        off += 4 * rank
        (dtype,) = struct.unpack_from("<B", data, off)
        off += 1
        if dtype != DTYPE_F32_LE:
            raise ValueError(f"{path}: tensor {name!r} has unknown dtype code {dtype}")
        entries.append((name, dims))
    out = OrderedDict()
    for name, dims in entries:
        size = int(np.prod(dims, dtype=np.int64))
        out[name] = np.frombuffer(data, dtype="<f4", count=size, offset=off).reshape(dims).copy()
        off += 4 * size
    if off != len(data):
        raise ValueError(f"{path}: trailing bytes after tensor payloads")
    return out


def evaluate_with_gradients(model: nn.Module, inputs, loss_fn: Callable):
    """Run ``loss_fn(model, inputs)`` and backpropagate.

    Returns ``(loss, grads)`` where ``grads`` follows ``ParamStore.from_module``
    order; parameters the loss does not touch get zero gradients.
    """
    params = ParamStore.from_module(model)
    for p in params.values():
        p.grad = None
    loss = loss_fn(model, inputs)
    if not torch.isfinite(loss).all():
        bad_params = [n for n, p in params.items() if not torch.isfinite(p).all()]
        bad_inputs = []
        if isinstance(inputs, Mapping):
            bad_inputs = [k for k, v in inputs.items()
                          if isinstance(v, torch.Tensor) and not torch.isfinite(v).all()]
        raise NonFiniteLossError(float(loss.detach()), bad_params, bad_inputs)
    if loss.requires_grad:
        loss.backward()
    grads = OrderedDict()
    for n, p in params.items():
        grads[n] = p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
    return float(loss.detach()), grads


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst_param: str
    n_checked: int
    per_param: dict = field(default_factory=dict)


def finite_difference_check(model: nn.Module, inputs, loss_fn: Callable, eps: float = 1e-5,
                            names: Iterable[str] | None = None,
                            max_per_param: int | None = None,
                            rng: np.random.Generator | None = None) -> GradCheckResult:
    """Compare autograd gradients with central differences, scalar by scalar.

    Relative error is ``|a - n| / max(|a|, |n|, 1e-8)``. ``max_per_param``
    subsamples large tensors (indices drawn from ``rng``).
    """
    _, grads = evaluate_with_gradients(model, inputs, loss_fn)
    params = ParamStore.from_module(model)
    selected = list(names) if names is not None else list(params)
    rng = rng or np.random.default_rng(0)
    worst, worst_name, count, per = 0.0, "", 0, {}
    with torch.no_grad():
        for name in selected:
            p = params[name]
            flat = p.view(-1)
            idx = np.arange(flat.numel())
            if max_per_param is not None and flat.numel() > max_per_param:
                idx = np.sort(rng.choice(flat.numel(), max_per_param, replace=False))
            g = grads[name].reshape(-1)
            pmax = 0.0
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + eps
                lp = float(loss_fn(model, inputs))
                flat[i] = orig - eps
                lm = float(loss_fn(model, inputs))
                flat[i] = orig
                num = (lp - lm) / (2 * eps)
                ana = float(g[i])
                rel = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
                pmax = max(pmax, rel)
                count += 1
            per[name] = pmax
            if pmax > worst:
                worst, worst_name = pmax, name
    return GradCheckResult(worst, worst_name, count, per)


class TensorProbe(nn.Module):
    """Holds plain tensors as parameters so input gradients can be checked like weights."""

    def __init__(self, **tensors: torch.Tensor):
        super().__init__()
        for k, v in tensors.items():
            self.register_parameter(k, nn.Parameter(v.detach().clone()))


@dataclass
class OptimizerState:
    kind: str = "adamw"
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    exp_avg: dict = field(default_factory=dict)
    exp_avg_sq: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("adam", "adamw"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")


def optimizer_step(state: OptimizerState, params: Mapping[str, torch.Tensor],
                   grads: Mapping[str, torch.Tensor], lr: float | None = None) -> OptimizerState:
    """One Adam / AdamW update applied in place to ``params``.

    ``adam`` folds weight decay into the gradient (L2); ``adamw`` decays the
    weights directly by ``lr * weight_decay * p`` before the moment update.
    """
    lr = state.lr if lr is None else lr
    b1, b2 = state.betas
    state.step += 1
    t = state.step
    bc1 = 1 - b1**t
    bc2 = 1 - b2**t
    with torch.no_grad():
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ValueError(f"{name}: gradient shape {tuple(g.shape)} != parameter {tuple(p.shape)}")
            if state.kind == "adam" and state.weight_decay:
                g = g + state.weight_decay * p
            if state.kind == "adamw" and state.weight_decay:
                p.mul_(1 - lr * state.weight_decay)
            m = state.exp_avg.get(name)
            if m is None:
                m = state.exp_avg[name] = torch.zeros_like(p)
                state.exp_avg_sq[name] = torch.zeros_like(p)
            v = state.exp_avg_sq[name]
            if m.shape != p.shape:
                raise ValueError(f"{name}: optimizer moments do not match parameter shape")
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            denom = (v / bc2).sqrt_().add_(state.eps)
            p.addcdiv_(m, denom, value=-lr / bc1)
    return state

