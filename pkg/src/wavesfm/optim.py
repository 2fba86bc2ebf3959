"""Adam with decoupled weight decay, cosine schedule, layer decay."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .params import ParameterStore

# parameter name leaves that never receive weight decay
DECAY_EXEMPT_LEAVES = ("bias", "b1", "b2", "u_qkv_bias", "u_msa_bias",
                       "scale", "shift", "mask_token", "cls_token")


class DivergenceError(RuntimeError):
    """Raised when a gradient goes NaN/inf; the step is aborted untouched."""


@dataclass
class OptimConfig:
    batch_size: int = 256
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.05
    epochs: int = 800
    warmup_epochs: int = 40
    layer_decay: float = 1.0          # < 1 only makes sense when fine-tuning
    mask_ratio: float = 0.75          # pretraining only
    decay_exempt: tuple = DECAY_EXEMPT_LEAVES

    def __post_init__(self):
        if not self.warmup_epochs < self.epochs:
            raise ValueError("warm-up must be shorter than the run")
        if not 0.0 < self.layer_decay <= 1.0:
            raise ValueError("layer decay must be in (0, 1]")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ValueError("mask ratio must be in [0, 1)")


def pretrain_defaults() -> OptimConfig:
    return OptimConfig()


def finetune_defaults() -> OptimConfig:
    return OptimConfig(epochs=200, warmup_epochs=10, layer_decay=0.75, mask_ratio=0.0)


def lr_at(step: int, cfg: OptimConfig, steps_per_epoch: int = 1,
          block: int | None = None, n_blocks: int | None = None) -> float:
    """Learning rate at a global step: linear ramp to cfg.lr over the
    warm-up, then cosine decay to zero; an optional per-depth multiplier
    decay^(K - block) with anything past the top block (the head) at 1."""
    warm = cfg.warmup_epochs * steps_per_epoch
    total = cfg.epochs * steps_per_epoch
    if step < warm:
        base = cfg.lr * step / warm
    else:
        progress = (step - warm) / max(1, total - warm)
        base = cfg.lr * 0.5 * (1.0 + math.cos(math.pi * min(progress, 1.0)))
    if block is not None:
        if n_blocks is None:
            raise ValueError("need n_blocks to resolve a block multiplier")
        if block <= n_blocks:
            base *= cfg.layer_decay ** (n_blocks - block)
    return base


def layer_of(name: str, n_blocks: int) -> int:
    """Depth index for layer decay: embeddings and CLS at 0, encoder block i
    at i, everything else (decoder, heads) past the top."""
    if name.startswith("encoder.patch_embed") or name.endswith("cls_token"):
        return 0
    if name.startswith("encoder.block"):
        return int(name.split(".")[1][len("block"):])
    return n_blocks + 1


def layer_multipliers(params: ParameterStore, cfg: OptimConfig, n_blocks: int) -> dict:
    """Per-parameter lr multiplier decay^(K - depth), 1 above the top block."""
    out = {}
    for name in params:
        depth = layer_of(name, n_blocks)
        out[name] = 1.0 if depth > n_blocks else cfg.layer_decay ** (n_blocks - depth)
    return out


class AdamState:
    """First/second moment buffers plus the shared step counter."""

    def __init__(self):
        self.m: dict = {}
        self.v: dict = {}
        self.t: int = 0

    def state_dict(self) -> dict:
        return {"t": self.t,
                "m": {k: a.copy() for k, a in self.m.items()},
                "v": {k: a.copy() for k, a in self.v.items()}}

    def load_state_dict(self, state: dict):
        self.t = int(state["t"])
        self.m = {k: np.asarray(a).copy() for k, a in state["m"].items()}
        self.v = {k: np.asarray(a).copy() for k, a in state["v"].items()}


def _decays(name: str, exempt: tuple) -> bool:
    return name.split(".")[-1] not in exempt


def adam_step(params: ParameterStore, moments: AdamState, lr: float,
              cfg: OptimConfig, lr_scale: dict | None = None):
    """One bias-corrected Adam update over the trainable parameters.

    Weight decay is decoupled and skipped for normalization/bias/token
    leaves (configurable).  Any NaN or inf gradient aborts the whole step
    before any parameter is touched.
    """
    live = [(name, p) for name, p in params.items() if p.requires_grad]
    for name, p in live:
        g = p.grad
        if g is not None and not np.isfinite(g).all():
            raise DivergenceError(f"non-finite gradient in {name}")

    moments.t += 1
    t = moments.t
    c1 = 1.0 - cfg.beta1 ** t
    c2 = 1.0 - cfg.beta2 ** t
    for name, p in live:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = moments.m.get(name)
        if m is None:
            m = moments.m[name] = np.zeros_like(p.data)
            moments.v[name] = np.zeros_like(p.data)
        v = moments.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        step_lr = lr * (lr_scale.get(name, 1.0) if lr_scale else 1.0)
        if cfg.weight_decay > 0.0 and _decays(name, cfg.decay_exempt):
            p.data = p.data - step_lr * cfg.weight_decay * p.data
        update = (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        p.data = p.data - step_lr * update
