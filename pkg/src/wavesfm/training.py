"""Pretraining and fine-tuning loops, freezing policies, prediction helpers.

Both loops reshuffle the dataset each epoch, accumulate per-sample losses
into one batch-average scalar, run a single backward pass and one optimizer
step per batch.  All randomness (shuffles, mask draws) comes from substreams
keyed by epoch and dataset position, so a run's bit pattern does not depend
on how the work is scheduled.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import model as M
from . import tensor as T
from .losses import loss_mse_position, loss_sce, loss_snr_mse, loss_wce, mwm_loss
from .masking import sample_mask
from .model import LoraConfig, Model
from .optim import (AdamState, DivergenceError, OptimConfig, adam_step,
                    layer_multipliers, lr_at)
from .params import ParameterStore
from .rng import RngState
from .tensor import Tensor


def thread_cap() -> int:
    """Parallelism limit from WAVESFM_THREADS; 1 means fully serial."""
    try:
        return max(1, int(os.environ.get("WAVESFM_THREADS", "1")))
    except ValueError:
        return 1


def _parallel_map(fn, items):
    """Order-preserving map, fanned out only when the env cap allows.

    Used for gradient-free work (generation, evaluation); results are
    identical for any worker count because collection order is by index.
    """
    workers = thread_cap()
    if workers == 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


@dataclass
class FreezePolicy:
    """Which parameters fine-tuning may update.

    head_only trains just the task head; last_n additionally unfreezes the
    final n encoder blocks; lora freezes the whole backbone and trains the
    A/B adapters plus the head.
    """

    mode: str                       # head_only | last_n | lora
    n: int = 0
    lora: Optional[LoraConfig] = None

    def __post_init__(self):
        if self.mode not in ("head_only", "last_n", "lora"):
            raise ValueError(f"unknown freeze mode: {self.mode}")
        if self.mode == "last_n" and self.n < 1:
            raise ValueError("last_n needs n >= 1")
        if self.mode == "lora" and self.lora is None:
            raise ValueError("lora mode needs a LoraConfig")

    def trainable_pred(self, n_blocks: int) -> Callable[[str], bool]:
        if self.mode == "head_only":
            return lambda name: name.startswith("head.")
        if self.mode == "lora":
            return lambda name: name.startswith("head.") or ".lora_" in name

        def last_n(name: str) -> bool:
            if name.startswith("head."):
                return True
            if name.startswith("encoder.block"):
                idx = int(name.split(".")[1][len("block"):])
                return idx > n_blocks - self.n
            return False

        return last_n


def shared_fraction(params: ParameterStore, policy: FreezePolicy, n_blocks: int) -> float:
    """Fraction of backbone (encoder) weights left frozen by the policy."""
    pred = policy.trainable_pred(n_blocks)
    total = 0
    frozen = 0
    for name, t in params.items():
        if not name.startswith("encoder.") or ".lora_" in name:
            continue
        total += t.data.size
        if not pred(name):
            frozen += t.data.size
    return frozen / total if total else 1.0


# -- pretraining ---------------------------------------------------------------


def _reraise_if_divergence(exc: ValueError, epoch: int, step: int):
    """Overflowing activations surface as NaN softmax inputs mid-forward;
    in a training loop that is divergence, not an input error."""
    if "NaN" in str(exc):
        raise DivergenceError(
            f"non-finite activations at epoch {epoch} step {step}: {exc}") from exc


def pretrain_epoch(data, model: Model, optim: OptimConfig, rng: RngState,
                   moments: Optional[AdamState] = None, epoch: int = 0) -> dict:
    """One pass of masked-reconstruction training over ``data``.

    ``data`` is a list of patch matrices (N x P*P*C).  Returns epoch metrics
    including the per-step loss trace.
    """
    if moments is None:
        moments = AdamState()
    n_patches = model.cfg.n_patches
    order = rng.split("shuffle", epoch).permutation(len(data))
    shuffled = [data[i] for i in order]
    steps_per_epoch = max(1, (len(data) + optim.batch_size - 1) // optim.batch_size)
    step_losses = []
    lr = 0.0
    for b, start in enumerate(range(0, len(data), optim.batch_size)):
        batch = shuffled[start:start + optim.batch_size]
        m_size = len(batch)
        model.params.zero_grad()
        total = None
        try:
            for off, patches in enumerate(batch):
                srng = rng.split("mask", epoch, start + off)
                plan = sample_mask(n_patches, optim.mask_ratio, srng)
                rec = model.forward_mwm(patches, plan)
                targets = np.asarray(patches)[plan.masked]
                term = mwm_loss(targets, rec, batch_m=m_size)
                total = term if total is None else total + term
        except ValueError as exc:
            _reraise_if_divergence(exc, epoch, b)
            raise
        step = epoch * steps_per_epoch + b
        lr = lr_at(step, optim, steps_per_epoch)
        if not np.isfinite(total.item()):
            raise DivergenceError(
                f"non-finite reconstruction loss at epoch {epoch} step {b}")
        total.backward()
        adam_step(model.params, moments, lr, optim)
        step_losses.append(total.item())
    return {"epoch": epoch, "split": "train",
            "loss": float(np.mean(step_losses)), "lr": lr,
            "step_losses": step_losses}


# -- fine-tuning ----------------------------------------------------------------


def _forward_batch(model: Model, params: ParameterStore, batch, task: str):
    outs = []
    for patches, _tgt in batch:
        if task == "chanest":
            tokens = model.forward_tokens(patches, with_cls=False)
            outs.append(M.chanest_head_forward(tokens, params, model.cfg))
        else:
            feats = M.pool_features(model.forward_tokens(patches, with_cls=True),
                                    model.cfg.pooling)
            outs.append(M.head_logits(feats, params))
    return outs


def make_task_loss(task: str, theta: float = 0.1, beta=None,
                   weight_floor: float = 0.01) -> Callable:
    """Build the batch loss closure matching a task's head output.

    Classification targets are int labels; positioning targets are
    3-vectors; channel estimation targets are (patch_target, snr_db) pairs.
    """
    if task == "sensing":
        def fn(outputs, targets):
            probs = T.softmax_rows(T.concat_rows(outputs))
            return loss_sce(probs, np.asarray(targets, dtype=np.int64), theta)
    elif task == "rfclass":
        if beta is None:
            raise ValueError("rfclass loss needs class weights")
        def fn(outputs, targets):
            probs = T.softmax_rows(T.concat_rows(outputs))
            return loss_wce(probs, np.asarray(targets, dtype=np.int64), beta)
    elif task == "positioning":
        def fn(outputs, targets):
            pred = T.concat_rows(outputs)
            return loss_mse_position(pred, np.asarray(targets, dtype=np.float64))
    elif task == "chanest":
        def fn(outputs, targets):
            grids = [t[0] for t in targets]
            snrs = [t[1] for t in targets]
            return loss_snr_mse(outputs, grids, snrs, weight_floor)
    else:
        raise ValueError(f"unknown task: {task}")
    return fn


def finetune_epoch(data, model: Model, head: Optional[ParameterStore],
                   policy: FreezePolicy, loss_fn: Callable, optim: OptimConfig,
                   rng: RngState, moments: Optional[AdamState] = None,
                   epoch: int = 0, task: str = "sensing") -> dict:
    """One supervised epoch under a freezing policy.

    Only parameters the policy allows are updated; everything else keeps its
    exact bits.  Layer-decay learning rates follow parameter depth.
    """
    if head is not None:
        for name, t in head.items():
            if name not in model.params:
                model.params.add(name, t)
    if moments is None:
        moments = AdamState()
    params = model.params
    params.set_trainable(policy.trainable_pred(model.cfg.enc_blocks))
    if policy.mode == "lora" and model.lora is None:
        raise ValueError("lora policy needs a model with attached adapters")
    mults = layer_multipliers(params, optim, model.cfg.enc_blocks)
    order = rng.split("shuffle", epoch).permutation(len(data))
    shuffled = [data[i] for i in order]
    steps_per_epoch = max(1, (len(data) + optim.batch_size - 1) // optim.batch_size)
    step_losses = []
    lr = 0.0
    for b, start in enumerate(range(0, len(data), optim.batch_size)):
        batch = shuffled[start:start + optim.batch_size]
        params.zero_grad()
        try:
            outputs = _forward_batch(model, params, batch, task)
            # the task losses normalize by sample count: the loss/|B| average
            loss = loss_fn(outputs, [t for _, t in batch])
        except ValueError as exc:
            _reraise_if_divergence(exc, epoch, b)
            raise
        step = epoch * steps_per_epoch + b
        lr = lr_at(step, optim, steps_per_epoch)
        if not np.isfinite(loss.item()):
            raise DivergenceError(
                f"non-finite task loss at epoch {epoch} step {b}")
        loss.backward()
        adam_step(params, moments, lr, optim, lr_scale=mults)
        step_losses.append(loss.item())
    return {"epoch": epoch, "split": "train",
            "loss": float(np.mean(step_losses)), "lr": lr,
            "step_losses": step_losses}


# -- inference -------------------------------------------------------------------


def predict_logits(data, model: Model) -> np.ndarray:
    """Stacked head outputs (n x C) for classification/positioning data."""
    def one(item):
        patches = item[0] if isinstance(item, tuple) else item
        with T.no_grad():
            feats = M.pool_features(model.forward_tokens(patches, with_cls=True),
                                    model.cfg.pooling)
            return M.head_logits(feats, model.params).data[0]
    return np.stack(_parallel_map(one, list(data)))


def predict_classes(data, model: Model) -> np.ndarray:
    return np.argmax(predict_logits(data, model), axis=1)


def predict_chanest(data, model: Model) -> list:
    """Per-sample patch-space channel predictions (N x P*P*C_out)."""
    def one(item):
        patches = item[0] if isinstance(item, tuple) else item
        with T.no_grad():
            tokens = model.forward_tokens(patches, with_cls=False)
            return M.chanest_head_forward(tokens, model.params, model.cfg).data
    return _parallel_map(one, list(data))
