"""Checkpoint persistence: manifest plus one binary blob per tensor.

A checkpoint directory holds ``manifest.json`` (model config, step, tensor
names, whether optimizer moments are present) and WFM1 files for every
parameter, and for the Adam m/v buffers under ``optim_m__``/``optim_v__``
prefixes.  Round-trips are bit-exact because WFM1 stores raw IEEE floats.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np

from .archive import read_tensor, write_tensor
from .model import ModelConfig
from .optim import AdamState
from .params import ParameterStore
from .tensor import Tensor


def _fname(name: str) -> str:
    return name.replace("/", "_") + ".wfm1"


def save_checkpoint(dirpath, params: ParameterStore, cfg: ModelConfig,
                    step: int = 0, moments: AdamState | None = None) -> Path:
    d = Path(dirpath)
    d.mkdir(parents=True, exist_ok=True)
    names = params.names()
    for name, t in params.items():
        write_tensor(d / _fname(name), t.data)
    if moments is not None:
        for name, arr in moments.m.items():
            write_tensor(d / _fname(f"optim_m__{name}"), arr)
        for name, arr in moments.v.items():
            write_tensor(d / _fname(f"optim_v__{name}"), arr)
    manifest = {
        "format": "wavesfm-checkpoint",
        "version": 1,
        "config": dataclasses.asdict(cfg),
        "step": int(step),
        "tensors": names,
        "has_moments": moments is not None,
        "moment_step": moments.t if moments is not None else 0,
        "moment_tensors": list(moments.m) if moments is not None else [],
    }
    with open(d / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=1)
    return d


def load_checkpoint(dirpath, expect_cfg: ModelConfig | None = None):
    """Load (params, cfg, step, moments); moments is None when absent.

    A config mismatch surfaces as a shape error naming the offending tensor.
    """
    d = Path(dirpath)
    with open(d / "manifest.json") as f:
        manifest = json.load(f)
    if manifest.get("format") != "wavesfm-checkpoint":
        raise ValueError(f"{d}: not a checkpoint directory")
    cfg = ModelConfig(**manifest["config"])
    params = ParameterStore()
    for name in manifest["tensors"]:
        arr = read_tensor(d / _fname(name))
        params.add(name, Tensor(arr, requires_grad=True))
    if expect_cfg is not None:
        _check_shapes(params, expect_cfg)
    moments = None
    if manifest.get("has_moments"):
        moments = AdamState()
        moments.t = int(manifest["moment_step"])
        for name in manifest["moment_tensors"]:
            moments.m[name] = read_tensor(d / _fname(f"optim_m__{name}"))
            moments.v[name] = read_tensor(d / _fname(f"optim_v__{name}"))
    return params, cfg, int(manifest["step"]), moments


def _check_shapes(params: ParameterStore, cfg: ModelConfig):
    """Verify the tensors a config relies on actually have its geometry."""
    expects = {
        "encoder.patch_embed.weight": (cfg.patch_dim, cfg.enc_dim),
    }
    for i in range(1, cfg.enc_blocks + 1):
        expects[f"encoder.block{i}.msa.u_qkv"] = (cfg.enc_dim, 3 * cfg.enc_dim)
        expects[f"encoder.block{i}.mlp.w1"] = (cfg.enc_dim, cfg.enc_hidden)
    for name, shape in expects.items():
        if name not in params:
            raise ValueError(f"checkpoint is missing tensor {name}")
        have = params[name].data.shape
        if tuple(have) != shape:
            raise ValueError(
                f"checkpoint tensor {name} has shape {tuple(have)}, config needs {shape}")
