"""LARS with momentum, split weight/bias groups, and the epoch-level
warmup + cosine learning-rate schedule."""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass
from typing import Mapping

import torch

from .errors import InvalidInputError


@dataclass(frozen=True)
class LarsConfig:
    trust_coefficient: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 1e-6
    lr_weights: float = 0.02
    lr_bias: float = 4.8e-4
    eps: float = 1e-9

    def __post_init__(self):
        if self.trust_coefficient <= 0:
            raise InvalidInputError("trust coefficient must be positive")
        if not 0 <= self.momentum < 1:
            raise InvalidInputError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise InvalidInputError("weight decay must be non-negative")


@dataclass(frozen=True)
class ScheduleConfig:
    warmup_epochs: int
    total_epochs: int
    decay: str = "cosine"

    def __post_init__(self):
        if not 0 <= self.warmup_epochs < self.total_epochs:
            raise InvalidInputError("need 0 <= warmup_epochs < total_epochs")
        if self.decay not in ("cosine", "constant"):
            raise InvalidInputError(f"unknown decay {self.decay!r}")


@dataclass
class ParamGroup:
    name: str
    tensors: "OrderedDict[str, torch.Tensor]"
    is_bias: bool = False


def lr_at(epoch: int, base_lr: float, sch: ScheduleConfig) -> float:
    if not 0 <= epoch < sch.total_epochs:
        raise InvalidInputError(f"epoch {epoch} outside [0, {sch.total_epochs})")
    if epoch < sch.warmup_epochs:
        return base_lr * (epoch + 1) / sch.warmup_epochs
    if sch.decay == "constant":
        return base_lr
    progress = (epoch - sch.warmup_epochs) / (sch.total_epochs - sch.warmup_epochs)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def lars_update(w: torch.Tensor, g: torch.Tensor, buf: torch.Tensor, cfg: LarsConfig,
                lr: float, is_bias: bool) -> tuple[torch.Tensor, torch.Tensor]:
    """One LARS step for a single tensor; returns new (weight, momentum buffer)."""
    if not (w.shape == g.shape == buf.shape):
        raise InvalidInputError(f"shape mismatch: w{tuple(w.shape)} g{tuple(g.shape)} v{tuple(buf.shape)}")
    if is_bias:
        g_eff, local = g, 1.0
    else:
        g_eff = g + cfg.weight_decay * w
        w_norm, g_norm = float(w.norm()), float(g_eff.norm())
        local = cfg.trust_coefficient * w_norm / (g_norm + cfg.eps) if w_norm > 0 and g_norm > 0 else 1.0
    v = cfg.momentum * buf + (local * lr) * g_eff
    return w - v, v


def lars_step(group: ParamGroup, grads: Mapping[str, torch.Tensor], cfg: LarsConfig,
              lr_t: float, buffers: Mapping[str, torch.Tensor]):
    """Functional LARS over a group; returns (new tensors, new buffers)."""
    new_w, new_v = OrderedDict(), OrderedDict()
    for name, w in group.tensors.items():
        new_w[name], new_v[name] = lars_update(w, grads[name], buffers[name], cfg, lr_t, group.is_bias)
    return new_w, new_v


def split_groups(tensors: Mapping[str, torch.Tensor]) -> list[ParamGroup]:
    """Rank <= 1 tensors (biases, norm gains, scalars) form the bias group."""
    weights = OrderedDict((k, v) for k, v in tensors.items() if v.dim() > 1)
    bias = OrderedDict((k, v) for k, v in tensors.items() if v.dim() <= 1)
    return [ParamGroup("weights", weights, False), ParamGroup("bias", bias, True)]


class Lars:
    """Stateful wrapper that updates a dict of leaf tensors in place."""

    def __init__(self, tensors: Mapping[str, torch.Tensor], cfg: LarsConfig):
        self.cfg = cfg
        self.groups = split_groups(tensors)
        self.buffers = {
            g.name: OrderedDict((k, torch.zeros_like(v)) for k, v in g.tensors.items())
            for g in self.groups
        }

    @torch.no_grad()
    def step(self, grads: Mapping[str, torch.Tensor], lr_weights: float, lr_bias: float) -> None:
        for group in self.groups:
            lr = lr_bias if group.is_bias else lr_weights
            bufs = self.buffers[group.name]
            for name, w in group.tensors.items():
                g = grads.get(name)
                if g is None:
                    continue
                new_w, bufs[name] = lars_update(w, g, bufs[name], self.cfg, lr, group.is_bias)
                w.copy_(new_w)

    def state_arrays(self) -> "OrderedDict[str, torch.Tensor]":
        return OrderedDict(
            (f"opt/{gname}/{k}", v) for gname, bufs in self.buffers.items() for k, v in bufs.items())

    def load_state_arrays(self, arrays: Mapping[str, torch.Tensor]) -> None:
        for gname, bufs in self.buffers.items():
            for k in bufs:
                key = f"opt/{gname}/{k}"
                if key in arrays:
                    bufs[k] = torch.as_tensor(arrays[key], dtype=bufs[k].dtype).clone()

