"""Task losses for pretraining and fine-tuning.

All of them return scalar graph tensors; targets and labels stay plain
numpy since gradients never flow into them.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor

PROB_FLOOR = 1e-12


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def mwm_loss(targets, recon: Tensor, batch_m: int = 1) -> Tensor:
    """Masked-reconstruction loss for one sample's masked patches.

    Mean squared patch distance normalized by batch size times masked count;
    summing this over a batch of ``batch_m`` samples yields the full
    objective.  Only masked rows are ever passed in, so visible patches
    cannot influence the value.
    """
    t = _as_tensor(targets)
    if t.shape != recon.shape:
        raise ValueError(f"target shape {t.shape} != reconstruction shape {recon.shape}")
    n_masked = t.shape[0]
    if n_masked == 0:
        return T.Tensor(np.zeros(()))
    diff = recon - t
    return (diff * diff).sum() * (1.0 / (batch_m * n_masked))


def _one_hot(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError("label out of range")
    out = np.zeros((labels.size, n_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def loss_sce(probs: Tensor, labels, theta: float = 0.1) -> Tensor:
    """Label-smoothing cross-entropy over softmax probabilities.

    The target for the true class is (1 - theta) + theta / C and theta / C
    elsewhere; theta = 0 reduces to plain cross-entropy.  Probabilities are
    clamped at 1e-12 before the log.
    """
    if not 0.0 <= theta < 1.0:
        raise ValueError("theta must be in [0, 1)")
    n, c = probs.shape
    smooth = _one_hot(labels, c) * (1.0 - theta) + theta / c
    return -(Tensor(smooth) * T.log(probs, floor=PROB_FLOOR)).sum() * (1.0 / n)


def loss_wce(probs: Tensor, labels, beta) -> Tensor:
    """Class-weighted cross-entropy; beta of all ones is plain CE."""
    beta = np.asarray(beta, dtype=np.float64)
    if (beta < 0).any():
        raise ValueError("class weights must be nonnegative")
    n, c = probs.shape
    if beta.shape != (c,):
        raise ValueError(f"need {c} class weights, got shape {beta.shape}")
    onehot = _one_hot(labels, c)
    weighted = onehot * beta[np.asarray(labels, dtype=np.int64)][:, None]
    return -(Tensor(weighted) * T.log(probs, floor=PROB_FLOOR)).sum() * (1.0 / n)


def class_weights(labels, n_classes: int) -> np.ndarray:
    """Inverse-frequency weights N_total / (C * N_i)."""
    labels = np.asarray(labels, dtype=np.int64)
    counts = np.bincount(labels, minlength=n_classes).astype(np.float64)
    if (counts == 0).any():
        empty = np.where(counts == 0)[0].tolist()
        raise ValueError(f"classes with no samples: {empty}")
    return labels.size / (n_classes * counts)


def loss_mse_position(pred: Tensor, target) -> Tensor:
    """Mean squared Euclidean distance between predicted and true positions."""
    t = _as_tensor(target)
    if t.shape != pred.shape:
        raise ValueError(f"target shape {t.shape} != prediction shape {pred.shape}")
    n = pred.shape[0]
    diff = pred - t
    return (diff * diff).sum() * (1.0 / n)


def snr_weight(snr_db, floor: float = 0.01):
    """Exponential SNR weighting 10.6 exp(0.226 snr) - 0.764.

    The printed curve crosses zero near -11.64 dB; below that it is clamped
    at ``floor`` so the weighted loss stays positive.
    """
    w = 10.6 * np.exp(0.226 * np.asarray(snr_db, dtype=np.float64)) - 0.764
    w = np.maximum(w, floor)
    return float(w) if w.ndim == 0 else w


def loss_snr_mse(preds, targets, snrs, weight_floor: float = 0.01) -> Tensor:
    """SNR-weighted squared error averaged over samples.

    Each sample contributes w(snr) times the squared norm of its flattened
    channel-grid error; with all weights 1 this is the summed MSE.
    """
    preds = list(preds)
    targets = list(targets)
    snrs = list(snrs)
    if not (len(preds) == len(targets) == len(snrs)):
        raise ValueError("preds, targets and snrs must align")
    if any(s is None for s in snrs):
        raise ValueError("every sample needs an SNR for the weighted loss")
    total = None
    for pred, tgt, s in zip(preds, targets, snrs):
        diff = pred - _as_tensor(tgt)
        term = (diff * diff).sum() * snr_weight(s, weight_floor)
        total = term if total is None else total + term
    return total * (1.0 / len(preds))
