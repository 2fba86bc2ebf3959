"""ViT masked autoencoder: embedding, encoder/decoder blocks, task heads, LoRA.

Parameters live in a flat ParameterStore under dot paths
(``encoder.block3.msa.u_qkv``, ``decoder.mask_token``, ``head.linear.weight``)
so freezing policies, weight decay exemptions and layer-decay multipliers
can all be expressed as name predicates.  Forward functions build the
autodiff graph from those tensors; nothing here mutates parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .masking import MaskPlan
from .params import ParameterStore
from .pipeline import PatchSeq, posembed_2d
from .rng import RngState
from .tensor import Tensor

TASK_HEAD_DIMS = {"sensing": 6, "rfclass": 20, "positioning": 3}


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 224
    patch_size: int = 16
    channels: int = 3
    enc_blocks: int = 12
    enc_dim: int = 512
    enc_hidden: int = 2048
    enc_heads: int = 8
    dec_blocks: int = 8
    dec_dim: int = 256
    dec_hidden: int = 1024
    dec_heads: int = 16
    pooling: str = "token"                  # token | avg
    attention_scale: str = "per_head"       # per_head | model_dim

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError("patch size must divide image size")
        if self.enc_dim % self.enc_heads or self.dec_dim % self.dec_heads:
            raise ValueError("embedding dim must be divisible by head count")
        if self.enc_dim % 4 or self.dec_dim % 4:
            raise ValueError("embedding dims must be divisible by 4 for 2-D position codes")
        if self.pooling not in ("token", "avg"):
            raise ValueError(f"unknown pooling mode: {self.pooling}")
        if self.attention_scale not in ("per_head", "model_dim"):
            raise ValueError(f"unknown attention scale: {self.attention_scale}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid * self.grid

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels


@dataclass(frozen=True)
class LoraConfig:
    """Low-rank adapters on the query and value projections of every
    encoder block; the key projection stays untouched."""

    rank: int = 8
    alpha: float = 8.0

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError("LoRA rank must be >= 1")


@dataclass
class EncoderState:
    tokens: Tensor                       # n x D_enc
    plan: Optional[MaskPlan] = None
    has_cls: bool = False


# -- initialization ------------------------------------------------------------


def _trunc(rng: RngState, shape, dtype) -> Tensor:
    return Tensor(rng.truncated_normal(shape, std=0.02).astype(dtype), requires_grad=True)


def _zeros(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def _ones(shape, dtype) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)


def _init_block(store: ParameterStore, prefix: str, dim: int, hidden: int,
                rng: RngState, dtype):
    def tr(name, shape):
        store.add(name, _trunc(rng.split("init", name), shape, dtype))

    store.add(f"{prefix}.ln1.scale", _ones((dim,), dtype))
    store.add(f"{prefix}.ln1.shift", _zeros((dim,), dtype))
    tr(f"{prefix}.msa.u_qkv", (dim, 3 * dim))
    store.add(f"{prefix}.msa.u_qkv_bias", _zeros((3 * dim,), dtype))
    tr(f"{prefix}.msa.u_msa", (dim, dim))
    store.add(f"{prefix}.msa.u_msa_bias", _zeros((dim,), dtype))
    store.add(f"{prefix}.ln2.scale", _ones((dim,), dtype))
    store.add(f"{prefix}.ln2.shift", _zeros((dim,), dtype))
    tr(f"{prefix}.mlp.w1", (dim, hidden))
    store.add(f"{prefix}.mlp.b1", _zeros((hidden,), dtype))
    tr(f"{prefix}.mlp.w2", (hidden, dim))
    store.add(f"{prefix}.mlp.b2", _zeros((dim,), dtype))


def init_params(cfg: ModelConfig, rng: RngState, dtype=np.float32,
                with_decoder: bool = True) -> ParameterStore:
    """Fresh backbone parameters; every tensor gets its own named substream
    so the draw is independent of insertion order."""
    store = ParameterStore()
    store.add("encoder.patch_embed.weight",
              _trunc(rng.split("init", "encoder.patch_embed.weight"),
                     (cfg.patch_dim, cfg.enc_dim), dtype))
    store.add("encoder.patch_embed.bias", _zeros((cfg.enc_dim,), dtype))
    for i in range(1, cfg.enc_blocks + 1):
        _init_block(store, f"encoder.block{i}", cfg.enc_dim, cfg.enc_hidden, rng, dtype)
    if with_decoder:
        store.add("decoder.embed.weight",
                  _trunc(rng.split("init", "decoder.embed.weight"),
                         (cfg.enc_dim, cfg.dec_dim), dtype))
        store.add("decoder.embed.bias", _zeros((cfg.dec_dim,), dtype))
        store.add("decoder.mask_token",
                  _trunc(rng.split("init", "decoder.mask_token"), (1, cfg.dec_dim), dtype))
        for i in range(1, cfg.dec_blocks + 1):
            _init_block(store, f"decoder.block{i}", cfg.dec_dim, cfg.dec_hidden, rng, dtype)
        store.add("decoder.recon.weight",
                  _trunc(rng.split("init", "decoder.recon.weight"),
                         (cfg.dec_dim, cfg.patch_dim), dtype))
        store.add("decoder.recon.bias", _zeros((cfg.patch_dim,), dtype))
    return store


def attach_lora(store: ParameterStore, cfg: ModelConfig, lora: LoraConfig,
                rng: RngState, dtype=np.float32):
    """Add A/B adapter pairs for Q and V to every encoder block.

    A is a small Gaussian, B starts at zero, so the adapted model is
    bit-identical to the frozen one until the first update.
    """
    for i in range(1, cfg.enc_blocks + 1):
        prefix = f"encoder.block{i}.msa"
        for tgt in ("q", "v"):
            a_name = f"{prefix}.lora_a_{tgt}"
            store.add(a_name, _trunc(rng.split("init", a_name),
                                     (cfg.enc_dim, lora.rank), dtype))
            store.add(f"{prefix}.lora_b_{tgt}",
                      _zeros((lora.rank, cfg.enc_dim), dtype))
    return store


def make_task_head(task: str, cfg: ModelConfig, rng: RngState,
                   out_channels: int = 2, n_classes: Optional[int] = None,
                   dtype=np.float32) -> ParameterStore:
    """Task-specific parameters under the ``head.`` prefix.

    Classification and positioning get a CLS token plus one linear layer;
    channel estimation gets a full ViT block over the patch tokens followed
    by a linear patch projection (its grid output equals the target grid).
    ``n_classes`` overrides the task's default output width for reduced
    class subsets.
    """
    store = ParameterStore()
    if task in TASK_HEAD_DIMS:
        out_dim = n_classes if n_classes is not None else TASK_HEAD_DIMS[task]
        store.add("head.cls_token",
                  _trunc(rng.split("init", "head.cls_token"), (1, cfg.enc_dim), dtype))
        store.add("head.linear.weight",
                  _trunc(rng.split("init", "head.linear.weight"),
                         (cfg.enc_dim, out_dim), dtype))
        store.add("head.linear.bias", _zeros((out_dim,), dtype))
    elif task == "chanest":
        _init_block(store, "head.block", cfg.enc_dim, cfg.enc_hidden, rng, dtype)
        store.add("head.recon.weight",
                  _trunc(rng.split("init", "head.recon.weight"),
                         (cfg.enc_dim, cfg.patch_size ** 2 * out_channels), dtype))
        store.add("head.recon.bias", _zeros((cfg.patch_size ** 2 * out_channels,), dtype))
    else:
        raise ValueError(f"unknown task: {task}")
    return store


# -- forward passes -------------------------------------------------------------


def _patch_rows(patches) -> Tensor:
    if isinstance(patches, PatchSeq):
        return T.Tensor(patches.patches)
    if isinstance(patches, Tensor):
        return patches
    return T.Tensor(np.asarray(patches))


def patch_embed(patches, params: ParameterStore, posembed: np.ndarray,
                plan: Optional[MaskPlan] = None) -> EncoderState:
    """Project (visible) patches into the encoder width and add position codes."""
    x = _patch_rows(patches)
    w = params["encoder.patch_embed.weight"]
    b = params["encoder.patch_embed.bias"]
    if x.shape[1] != w.shape[0]:
        raise ValueError(f"patch length {x.shape[1]} does not match embed input {w.shape[0]}")
    pos = np.asarray(posembed, dtype=w.data.dtype)
    if plan is not None:
        x = T.gather_rows(x, plan.visible)
        pos = pos[plan.visible]
    tokens = x @ w + b + Tensor(pos)
    return EncoderState(tokens, plan=plan, has_cls=False)


def attach_cls(patches, params: ParameterStore, posembed_cls: np.ndarray) -> EncoderState:
    """Embed all patches and prepend the CLS token; row 0 of the position
    table is zero since CLS has no grid position."""
    x = _patch_rows(patches)
    w = params["encoder.patch_embed.weight"]
    b = params["encoder.patch_embed.bias"]
    embedded = x @ w + b
    tokens = T.concat_rows([params["head.cls_token"], embedded])
    tokens = tokens + Tensor(np.asarray(posembed_cls, dtype=w.data.dtype))
    return EncoderState(tokens, plan=None, has_cls=True)


def msa_forward(z: Tensor, params: ParameterStore, prefix: str, heads: int,
                scale_mode: str = "per_head", lora: Optional[LoraConfig] = None) -> Tensor:
    """Multi-head self-attention over a token sequence.

    With a LoRA config, Q and V receive the scaled low-rank additions
    alpha * Z A B before the head split; K is never adapted.
    """
    n, dim = z.shape
    qkv = z @ params[f"{prefix}.u_qkv"] + params[f"{prefix}.u_qkv_bias"]
    q = T.slice_cols(qkv, 0, dim)
    k = T.slice_cols(qkv, dim, 2 * dim)
    v = T.slice_cols(qkv, 2 * dim, 3 * dim)
    if lora is not None and f"{prefix}.lora_a_q" in params:
        q = q + lora.alpha * ((z @ params[f"{prefix}.lora_a_q"]) @ params[f"{prefix}.lora_b_q"])
        v = v + lora.alpha * ((z @ params[f"{prefix}.lora_a_v"]) @ params[f"{prefix}.lora_b_v"])
    d_head = dim // heads
    scale = (d_head if scale_mode == "per_head" else dim) ** -0.5
    outs = []
    for h in range(heads):
        lo, hi = h * d_head, (h + 1) * d_head
        qh, kh, vh = T.slice_cols(q, lo, hi), T.slice_cols(k, lo, hi), T.slice_cols(v, lo, hi)
        attn = T.softmax_rows((qh @ kh.T) * scale)
        outs.append(attn @ vh)
    merged = T.concat_cols(outs) if heads > 1 else outs[0]
    return merged @ params[f"{prefix}.u_msa"] + params[f"{prefix}.u_msa_bias"]


def vit_block_forward(z: Tensor, params: ParameterStore, prefix: str, heads: int,
                      scale_mode: str = "per_head",
                      lora: Optional[LoraConfig] = None) -> Tensor:
    """Pre-norm residual block: MSA then MLP, each over a layer-normed input."""
    zbar = msa_forward(T.layer_norm(z, params[f"{prefix}.ln1.scale"],
                                    params[f"{prefix}.ln1.shift"]),
                       params, f"{prefix}.msa", heads, scale_mode, lora) + z
    h = T.layer_norm(zbar, params[f"{prefix}.ln2.scale"], params[f"{prefix}.ln2.shift"])
    h = T.gelu(h @ params[f"{prefix}.mlp.w1"] + params[f"{prefix}.mlp.b1"])
    return h @ params[f"{prefix}.mlp.w2"] + params[f"{prefix}.mlp.b2"] + zbar


def encoder_forward(state: EncoderState, params: ParameterStore, cfg: ModelConfig,
                    lora: Optional[LoraConfig] = None) -> Tensor:
    z = state.tokens
    for i in range(1, cfg.enc_blocks + 1):
        z = vit_block_forward(z, params, f"encoder.block{i}", cfg.enc_heads,
                              cfg.attention_scale, lora)
    return z


def decoder_embed(enc_out: Tensor, plan: MaskPlan, params: ParameterStore,
                  dec_posembed: np.ndarray) -> Tensor:
    """Project encoder tokens into decoder width and insert mask tokens at
    the masked grid positions, restoring original patch order."""
    if enc_out.shape[0] != plan.n_visible:
        raise ValueError(f"encoder rows {enc_out.shape[0]} != visible count {plan.n_visible}")
    vis = enc_out @ params["decoder.embed.weight"] + params["decoder.embed.bias"]
    n_masked = plan.n_masked
    mask_rows = Tensor(np.ones((n_masked, 1), dtype=vis.data.dtype)) @ params["decoder.mask_token"]
    combined = T.concat_rows([vis, mask_rows])
    order = np.empty(plan.n_total, dtype=np.int64)
    order[plan.visible] = np.arange(plan.n_visible)
    order[plan.masked] = plan.n_visible + np.arange(n_masked)
    tokens = T.gather_rows(combined, order)
    return tokens + Tensor(np.asarray(dec_posembed, dtype=vis.data.dtype))


def decoder_forward(tokens: Tensor, params: ParameterStore, cfg: ModelConfig) -> Tensor:
    z = tokens
    for i in range(1, cfg.dec_blocks + 1):
        z = vit_block_forward(z, params, f"decoder.block{i}", cfg.dec_heads,
                              cfg.attention_scale)
    return z


def reconstruct(dec_out: Tensor, params: ParameterStore, plan: MaskPlan) -> Tensor:
    """Project decoder tokens back to pixel patches and keep only the rows
    that were masked, in the plan's masked-index order."""
    proj = dec_out @ params["decoder.recon.weight"] + params["decoder.recon.bias"]
    return T.gather_rows(proj, plan.masked)


def pool_features(enc_out: Tensor, mode: str) -> Tensor:
    """Sequence to vector: the CLS row, or the mean over the non-CLS rows."""
    n = enc_out.shape[0]
    if mode == "token":
        return T.slice_rows(enc_out, 0, 1).reshape((enc_out.shape[1],))
    if mode == "avg":
        return T.slice_rows(enc_out, 1, n).mean(axis=0)
    raise ValueError(f"unknown pooling mode: {mode}")


def head_logits(feats: Tensor, params: ParameterStore) -> Tensor:
    """Linear task head on pooled features; returns a 1 x C row."""
    row = feats.reshape((1, feats.shape[0]))
    return row @ params["head.linear.weight"] + params["head.linear.bias"]


def chanest_head_forward(tokens: Tensor, params: ParameterStore, cfg: ModelConfig) -> Tensor:
    """Channel-estimation head: one ViT block over all patch tokens, then a
    linear projection to P*P*C_out per token (grid layout via unpatchify)."""
    z = vit_block_forward(tokens, params, "head.block", cfg.enc_heads, cfg.attention_scale)
    return z @ params["head.recon.weight"] + params["head.recon.bias"]


def param_count(params: ParameterStore, select=None) -> int:
    """Total element count, optionally restricted to a named subset.

    ``select`` may be a name predicate or one of "encoder", "decoder",
    "head", "lora", "trainable".
    """
    if select is None:
        pred = lambda n, t: True
    elif callable(select):
        pred = lambda n, t: select(n)
    elif select == "trainable":
        pred = lambda n, t: t.requires_grad
    elif select == "lora":
        pred = lambda n, t: ".lora_" in n
    elif select in ("encoder", "decoder", "head"):
        pred = lambda n, t: n.startswith(select + ".")
    else:
        raise ValueError(f"unknown selector: {select}")
    return sum(t.data.size for n, t in params.items() if pred(n, t))


# -- bundled model -------------------------------------------------------------


class Model:
    """Config, parameters and cached position tables in one place."""

    def __init__(self, cfg: ModelConfig, params: Optional[ParameterStore] = None,
                 rng: Optional[RngState] = None, lora: Optional[LoraConfig] = None,
                 dtype=np.float32, with_decoder: bool = True):
        self.cfg = cfg
        self.lora = lora
        if params is None:
            if rng is None:
                raise ValueError("need either params or an rng to draw them")
            params = init_params(cfg, rng, dtype=dtype, with_decoder=with_decoder)
        self.params = params
        g = cfg.grid
        self.enc_pos = posembed_2d(g, g, cfg.enc_dim)
        self.enc_pos_cls = np.vstack([np.zeros((1, cfg.enc_dim)), self.enc_pos])
        self.dec_pos = posembed_2d(g, g, cfg.dec_dim) if with_decoder else None

    def forward_mwm(self, patches, plan: MaskPlan) -> Tensor:
        """Full masked-reconstruction pass; returns reconstructed masked patches."""
        state = patch_embed(patches, self.params, self.enc_pos, plan=plan)
        enc = encoder_forward(state, self.params, self.cfg, self.lora)
        dec_in = decoder_embed(enc, plan, self.params, self.dec_pos)
        dec = decoder_forward(dec_in, self.params, self.cfg)
        return reconstruct(dec, self.params, plan)

    def forward_tokens(self, patches, with_cls: bool) -> Tensor:
        """Encoder output over all patches, optionally with a CLS token."""
        if with_cls:
            state = attach_cls(patches, self.params, self.enc_pos_cls)
        else:
            state = patch_embed(patches, self.params, self.enc_pos)
        return encoder_forward(state, self.params, self.cfg, self.lora)

    def forward_pooled(self, patches) -> Tensor:
        return pool_features(self.forward_tokens(patches, with_cls=True), self.cfg.pooling)
