#!/usr/bin/env python3
"""Sweep adapter rank and scale on the tiny transfer task.

Loads a pretrained backbone checkpoint, fine-tunes rank/alpha variants on
4-class spectrogram classification, and prints accuracy next to trainable
parameter counts. Run configs/pretrain_tiny.yaml first to produce the
backbone.
"""

import argparse

import numpy as np

from wavesfm.checkpoint import load_checkpoint
from wavesfm.generators import make_spectrogram_set
from wavesfm.losses import class_weights
from wavesfm.metrics import classification_metrics
from wavesfm.model import (LoraConfig, Model, attach_lora, make_task_head,
                           param_count)
from wavesfm.optim import AdamState, OptimConfig
from wavesfm.params import ParameterStore
from wavesfm.pipeline import fit_stats, make_pipeline, patchify
from wavesfm.rng import RngState
from wavesfm.tensor import Tensor
from wavesfm.training import (FreezePolicy, finetune_epoch, make_task_loss,
                              predict_logits)

CLASSES = (1, 7, 13, 19)


def load_backbone(path):
    params, cfg, _, _ = load_checkpoint(path)
    store = ParameterStore()
    for name, t in params.items():
        if not name.startswith("decoder."):
            store.add(name, Tensor(t.data.copy(), requires_grad=True))
    return store, cfg


def run_variant(backbone, cfg, train, val, lora, lr, epochs):
    params = ParameterStore()
    for name, t in backbone.items():
        params.add(name, Tensor(t.data.copy(), requires_grad=True))
    rng = RngState(5)
    attach_lora(params, cfg, lora, rng.split("lora"))
    for name, t in make_task_head("rfclass", cfg, rng.split("head"),
                                  n_classes=len(CLASSES)).items():
        params.add(name, t)
    model = Model(cfg, params=params, lora=lora, with_decoder=False)
    labels = [lab for _, lab in train]
    loss_fn = make_task_loss("rfclass",
                             beta=class_weights(labels, len(CLASSES)))
    optim = OptimConfig(batch_size=16, lr=lr, weight_decay=0.0, epochs=epochs,
                        warmup_epochs=1, mask_ratio=0.0)
    policy = FreezePolicy(mode="lora", lora=lora)
    moments = AdamState()
    trng = RngState(9)
    for epoch in range(epochs):
        finetune_epoch(train, model, None, policy, loss_fn, optim,
                       trng.split("train"), moments, epoch=epoch,
                       task="rfclass")
    preds = np.argmax(predict_logits(val, model), axis=1)
    rep = classification_metrics(preds, [lab for _, lab in val], len(CLASSES))
    n_adapter = param_count(params, "lora")
    return rep["mean_per_class_accuracy"], n_adapter


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--backbone", default="runs/pretrain_tiny/ckpt_final")
    ap.add_argument("--ranks", type=int, nargs="+", default=[2, 4, 8, 16])
    ap.add_argument("--alphas", type=float, nargs="+", default=[4.0, 8.0])
    ap.add_argument("--epochs", type=int, default=10)
    ap.add_argument("--lr", type=float, default=5e-3)
    ap.add_argument("--seed", type=int, default=77)
    args = ap.parse_args()

    backbone, cfg = load_backbone(args.backbone)
    rng = RngState(args.seed)
    train_s = make_spectrogram_set(192, CLASSES, rng.split("train"),
                                   snr_db=40.0, n_frames=32)
    val_s = make_spectrogram_set(96, CLASSES, rng.split("val"),
                                 snr_db=40.0, n_frames=32)
    stats = fit_stats(train_s, "finetune_image", cfg.image_size)
    pipe = make_pipeline("finetune_image", stats, cfg.image_size)
    lut = {c: i for i, c in enumerate(CLASSES)}
    train = [(patchify(pipe(s).data, cfg.patch_size).patches, lut[s.label])
             for s in train_s]
    val = [(patchify(pipe(s).data, cfg.patch_size).patches, lut[s.label])
           for s in val_s]

    print(f"{'rank':>5} {'alpha':>6} {'adapter_params':>15} {'accuracy':>9}")
    for rank in args.ranks:
        for alpha in args.alphas:
            acc, n = run_variant(backbone, cfg, train, val,
                                 LoraConfig(rank=rank, alpha=alpha),
                                 args.lr, args.epochs)
            print(f"{rank:>5} {alpha:>6.1f} {n:>15,} {acc:>9.1%}")


if __name__ == "__main__":
    main()
