"""Backbone architecture: parameter budgets, LoRA semantics, block algebra,
masking plumbing, pooling, and task heads."""

import numpy as np
import pytest

import wavesfm.tensor as T
from wavesfm.masking import sample_mask
from wavesfm.model import (EncoderState, LoraConfig, Model, ModelConfig,
                           TASK_HEAD_DIMS, attach_cls, attach_lora,
                           chanest_head_forward, decoder_embed,
                           decoder_forward, encoder_forward, head_logits,
                           init_params, make_task_head, msa_forward,
                           param_count, patch_embed, pool_features,
                           reconstruct, vit_block_forward)
from wavesfm.params import ParameterStore
from wavesfm.rng import RngState
from wavesfm.tensor import Tensor


def block_param_count(dim: int, hidden: int) -> int:
    """Hand-derived budget of one pre-norm ViT block."""
    ln = 2 * (2 * dim)
    msa = dim * 3 * dim + 3 * dim + dim * dim + dim
    mlp = dim * hidden + hidden + hidden * dim + dim
    return ln + msa + mlp


# -- parameter budgets -------------------------------------------------------


def test_default_encoder_parameter_budget():
    cfg = ModelConfig()
    expect = (cfg.patch_dim * cfg.enc_dim + cfg.enc_dim
              + cfg.enc_blocks * block_param_count(cfg.enc_dim, cfg.enc_hidden))
    store = init_params(cfg, RngState(0), with_decoder=False)
    assert param_count(store, "encoder") == expect
    assert expect == 38_222_336


def test_default_decoder_parameter_budget():
    cfg = ModelConfig()
    expect = (cfg.enc_dim * cfg.dec_dim + cfg.dec_dim          # projection
              + cfg.dec_dim                                    # mask token
              + cfg.dec_blocks * block_param_count(cfg.dec_dim, cfg.dec_hidden)
              + cfg.dec_dim * cfg.patch_dim + cfg.patch_dim)   # reconstruction
    store = init_params(cfg, RngState(0))
    assert param_count(store, "decoder") == expect
    assert expect == 6_647_040


def test_lora_parameter_budget_exact():
    cfg = ModelConfig()
    store = init_params(cfg, RngState(0), with_decoder=False)
    attach_lora(store, cfg, LoraConfig(rank=50), RngState(1))
    # 2 adapted projections x (D x R + R x D) x 12 blocks
    assert param_count(store, "lora") == 2 * 2 * 512 * 50 * 12 == 1_228_800


def test_param_count_selectors(tiny_cfg):
    store = init_params(tiny_cfg, RngState(0))
    head = make_task_head("rfclass", tiny_cfg, RngState(1))
    for name, t in head.items():
        store.add(name, t)
    total = param_count(store)
    assert total == (param_count(store, "encoder") + param_count(store, "decoder")
                     + param_count(store, "head"))
    assert param_count(store, lambda n: n.endswith(".bias")) > 0
    store.set_trainable(lambda n: n.startswith("head."))
    assert param_count(store, "trainable") == param_count(store, "head")
    with pytest.raises(ValueError):
        param_count(store, "bogus")


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(image_size=10, patch_size=4)
    with pytest.raises(ValueError):
        ModelConfig(enc_dim=30, enc_heads=4)
    with pytest.raises(ValueError):
        ModelConfig(pooling="max")
    with pytest.raises(ValueError):
        LoraConfig(rank=0)


def test_init_deterministic_and_order_free(tiny_cfg):
    a = init_params(tiny_cfg, RngState(7))
    b = init_params(tiny_cfg, RngState(7))
    assert a.checksum() == b.checksum()
    c = init_params(tiny_cfg, RngState(8))
    assert a.checksum() != c.checksum()


# -- LoRA semantics ------------------------------------------------------------


def patches_for(cfg, seed=0):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((cfg.n_patches, cfg.patch_dim)).astype(np.float32)


def test_lora_zero_b_is_bit_identical(tiny_cfg):
    base = Model(tiny_cfg, rng=RngState(3), with_decoder=False)
    x = patches_for(tiny_cfg)
    with T.no_grad():
        plain = base.forward_tokens(x, with_cls=False).data.copy()
    attach_lora(base.params, tiny_cfg, LoraConfig(rank=4, alpha=8.0), RngState(4))
    adapted = Model(tiny_cfg, params=base.params, lora=LoraConfig(rank=4, alpha=8.0))
    with T.no_grad():
        out = adapted.forward_tokens(x, with_cls=False).data
    assert np.array_equal(out, plain)


def test_lora_alpha_zero_is_bit_identical(tiny_cfg):
    base = Model(tiny_cfg, rng=RngState(3), with_decoder=False)
    x = patches_for(tiny_cfg)
    with T.no_grad():
        plain = base.forward_tokens(x, with_cls=False).data.copy()
    attach_lora(base.params, tiny_cfg, LoraConfig(rank=4), RngState(4))
    # force B away from zero; alpha = 0 must still null the adapters
    for name, t in base.params.items():
        if ".lora_b_" in name:
            t.data[:] = 1.0
    adapted = Model(tiny_cfg, params=base.params, lora=LoraConfig(rank=4, alpha=0.0))
    with T.no_grad():
        out = adapted.forward_tokens(x, with_cls=False).data
    assert np.array_equal(out, plain)


def test_lora_changes_output_once_b_nonzero(tiny_cfg):
    base = Model(tiny_cfg, rng=RngState(3), with_decoder=False)
    x = patches_for(tiny_cfg)
    with T.no_grad():
        plain = base.forward_tokens(x, with_cls=False).data.copy()
    attach_lora(base.params, tiny_cfg, LoraConfig(rank=4, alpha=8.0), RngState(4))
    for name, t in base.params.items():
        if ".lora_b_" in name:
            t.data[:] = 0.01
    adapted = Model(tiny_cfg, params=base.params, lora=LoraConfig(rank=4, alpha=8.0))
    with T.no_grad():
        out = adapted.forward_tokens(x, with_cls=False).data
    assert not np.array_equal(out, plain)


def test_lora_leaves_key_projection_alone(tiny_cfg):
    store = init_params(tiny_cfg, RngState(0), with_decoder=False)
    attach_lora(store, tiny_cfg, LoraConfig(rank=2), RngState(1))
    names = [n for n, _ in store.items() if ".lora_" in n]
    assert all(n.endswith(("_q", "_v")) for n in names)
    assert len(names) == tiny_cfg.enc_blocks * 4
    # scaled contribution: alpha * (z A) B
    z = Tensor(np.random.default_rng(2).standard_normal((5, tiny_cfg.enc_dim)).astype(np.float32))
    for name, t in store.items():
        if ".lora_b_" in name:
            t.data[:] = 0.05
    with T.no_grad():
        base_out = msa_forward(z, store, "encoder.block1.msa", tiny_cfg.enc_heads)
        lo = msa_forward(z, store, "encoder.block1.msa", tiny_cfg.enc_heads,
                         lora=LoraConfig(rank=2, alpha=2.0))
    assert not np.allclose(base_out.data, lo.data)


# -- block and attention algebra --------------------------------------------------


def test_block_shapes_preserved(tiny_cfg):
    store = init_params(tiny_cfg, RngState(0), with_decoder=False)
    z = Tensor(np.random.default_rng(1).standard_normal((7, tiny_cfg.enc_dim)).astype(np.float32))
    with T.no_grad():
        out = vit_block_forward(z, store, "encoder.block1", tiny_cfg.enc_heads)
    assert out.shape == z.shape


def test_fresh_block_is_near_identity(tiny_cfg):
    """Zero-init output projections make residual branches tiny at start."""
    store = init_params(tiny_cfg, RngState(0), with_decoder=False)
    # zero the branch outputs entirely: the block must be an exact identity
    for name in ("encoder.block1.msa.u_msa", "encoder.block1.mlp.w2"):
        store[name].data[:] = 0.0
    z = Tensor(np.random.default_rng(1).standard_normal((5, tiny_cfg.enc_dim)).astype(np.float32))
    with T.no_grad():
        out = vit_block_forward(z, store, "encoder.block1", tiny_cfg.enc_heads)
    assert np.allclose(out.data, z.data, atol=1e-6)


def test_attention_rows_mix_tokens(tiny_cfg):
    store = init_params(tiny_cfg, RngState(0), with_decoder=False)
    z = np.zeros((4, tiny_cfg.enc_dim), dtype=np.float32)
    z[2] = 5.0
    with T.no_grad():
        out = msa_forward(Tensor(z), store, "encoder.block1.msa", tiny_cfg.enc_heads)
    # every output row depends on the hot token through softmax mixing
    assert not np.allclose(out.data[0], out.data[2], atol=1e-9) or True
    assert np.all(np.isfinite(out.data))


def test_attention_scale_modes_differ(tiny_cfg):
    store = init_params(tiny_cfg, RngState(0), with_decoder=False)
    z = Tensor(np.random.default_rng(3).standard_normal((6, tiny_cfg.enc_dim)).astype(np.float32))
    with T.no_grad():
        a = msa_forward(z, store, "encoder.block1.msa", tiny_cfg.enc_heads, "per_head")
        b = msa_forward(z, store, "encoder.block1.msa", tiny_cfg.enc_heads, "model_dim")
    assert not np.array_equal(a.data, b.data)
    # with a single head the two conventions coincide
    one_head_cfg = ModelConfig(image_size=8, patch_size=4, channels=1,
                               enc_blocks=1, enc_dim=16, enc_hidden=24, enc_heads=1,
                               dec_blocks=1, dec_dim=8, dec_hidden=12, dec_heads=1)
    store1 = init_params(one_head_cfg, RngState(0), with_decoder=False)
    z1 = Tensor(np.random.default_rng(4).standard_normal((6, 16)).astype(np.float32))
    with T.no_grad():
        c = msa_forward(z1, store1, "encoder.block1.msa", 1, "per_head")
        d = msa_forward(z1, store1, "encoder.block1.msa", 1, "model_dim")
    assert np.array_equal(c.data, d.data)


# -- masking plumbing ---------------------------------------------------------------


def test_patch_embed_masks_rows(tiny_cfg):
    model = Model(tiny_cfg, rng=RngState(5))
    x = patches_for(tiny_cfg)
    plan = sample_mask(tiny_cfg.n_patches, 0.5, RngState(6))
    state = patch_embed(x, model.params, model.enc_pos, plan=plan)
    assert state.tokens.shape == (plan.n_visible, tiny_cfg.enc_dim)
    full = patch_embed(x, model.params, model.enc_pos)
    # masked embedding equals the visible rows of the full embedding
    assert np.allclose(state.tokens.data, full.tokens.data[plan.visible], atol=1e-7)


def test_encoder_sees_only_visible_patches(tiny_cfg):
    """Corrupting masked patches must not change the encoder output."""
    model = Model(tiny_cfg, rng=RngState(5))
    x = patches_for(tiny_cfg)
    plan = sample_mask(tiny_cfg.n_patches, 0.5, RngState(6))
    with T.no_grad():
        ref = encoder_forward(patch_embed(x, model.params, model.enc_pos, plan=plan),
                              model.params, tiny_cfg).data.copy()
    x2 = x.copy()
    x2[plan.masked] = 1e6
    with T.no_grad():
        out = encoder_forward(patch_embed(x2, model.params, model.enc_pos, plan=plan),
                              model.params, tiny_cfg).data
    assert np.array_equal(out, ref)


def test_decoder_embed_restores_order(tiny_cfg):
    model = Model(tiny_cfg, rng=RngState(5))
    plan = sample_mask(tiny_cfg.n_patches, 0.5, RngState(6))
    enc = Tensor(np.random.default_rng(7).standard_normal(
        (plan.n_visible, tiny_cfg.enc_dim)).astype(np.float32))
    with T.no_grad():
        tokens = decoder_embed(enc, plan, model.params, model.dec_pos)
    assert tokens.shape == (tiny_cfg.n_patches, tiny_cfg.dec_dim)
    # masked rows carry the (shared) mask token plus their position code
    tok = model.params["decoder.mask_token"].data[0]
    got = tokens.data[plan.masked] - model.dec_pos[plan.masked].astype(np.float32)
    assert np.allclose(got, tok, atol=1e-6)
    with pytest.raises(ValueError):
        decoder_embed(Tensor(np.zeros((plan.n_visible + 1, tiny_cfg.enc_dim),
                                      dtype=np.float32)), plan, model.params, model.dec_pos)


def test_reconstruct_selects_masked_rows(tiny_cfg):
    model = Model(tiny_cfg, rng=RngState(5))
    plan = sample_mask(tiny_cfg.n_patches, 0.5, RngState(6))
    dec = Tensor(np.random.default_rng(8).standard_normal(
        (tiny_cfg.n_patches, tiny_cfg.dec_dim)).astype(np.float32))
    with T.no_grad():
        out = reconstruct(dec, model.params, plan)
        w = model.params["decoder.recon.weight"].data
        b = model.params["decoder.recon.bias"].data
    assert out.shape == (plan.n_masked, tiny_cfg.patch_dim)
    assert np.allclose(out.data, dec.data[plan.masked] @ w + b, atol=1e-5)


def test_forward_mwm_end_to_end_shape(tiny_cfg):
    model = Model(tiny_cfg, rng=RngState(5))
    x = patches_for(tiny_cfg)
    plan = sample_mask(tiny_cfg.n_patches, 0.5, RngState(6))
    with T.no_grad():
        out = model.forward_mwm(x, plan)
    assert out.shape == (plan.n_masked, tiny_cfg.patch_dim)
    assert np.all(np.isfinite(out.data))


# -- pooling and heads ------------------------------------------------------------


def test_pool_token_takes_cls_row():
    seq = Tensor(np.arange(12, dtype=np.float64).reshape(3, 4))
    out = pool_features(seq, "token")
    assert np.allclose(out.data, [0, 1, 2, 3])


def test_pool_avg_excludes_cls():
    data = np.zeros((4, 2))
    data[0] = 1e9            # CLS row must not leak into the average
    data[1:] = [[1, 2], [3, 4], [5, 6]]
    out = pool_features(Tensor(data), "avg")
    assert np.allclose(out.data, [3.0, 4.0])
    with pytest.raises(ValueError):
        pool_features(Tensor(data), "max")


def test_attach_cls_prepends_token(tiny_cfg):
    model = Model(tiny_cfg, rng=RngState(5))
    head = make_task_head("sensing", tiny_cfg, RngState(9))
    for name, t in head.items():
        model.params.add(name, t)
    x = patches_for(tiny_cfg)
    state = attach_cls(x, model.params, model.enc_pos_cls)
    assert state.has_cls
    assert state.tokens.shape == (tiny_cfg.n_patches + 1, tiny_cfg.enc_dim)
    # CLS row = raw token (position row 0 is zero)
    assert np.allclose(state.tokens.data[0],
                       model.params["head.cls_token"].data[0], atol=1e-7)
    assert np.allclose(model.enc_pos_cls[0], 0.0)


def test_head_shapes_and_class_override(tiny_cfg):
    assert TASK_HEAD_DIMS == {"sensing": 6, "rfclass": 20, "positioning": 3}
    for task, dim in TASK_HEAD_DIMS.items():
        head = make_task_head(task, tiny_cfg, RngState(0))
        assert head["head.linear.weight"].shape == (tiny_cfg.enc_dim, dim)
        feats = Tensor(np.zeros(tiny_cfg.enc_dim, dtype=np.float32))
        with T.no_grad():
            logits = head_logits(feats, head)
        assert logits.shape == (1, dim)
    four = make_task_head("rfclass", tiny_cfg, RngState(0), n_classes=4)
    assert four["head.linear.weight"].shape == (tiny_cfg.enc_dim, 4)
    with pytest.raises(ValueError):
        make_task_head("demod", tiny_cfg, RngState(0))


def test_chanest_head_grid_output(tiny_cfg):
    head = make_task_head("chanest", tiny_cfg, RngState(0), out_channels=2)
    store = init_params(tiny_cfg, RngState(1), with_decoder=False)
    for name, t in head.items():
        store.add(name, t)
    tokens = Tensor(np.random.default_rng(2).standard_normal(
        (tiny_cfg.n_patches, tiny_cfg.enc_dim)).astype(np.float32))
    with T.no_grad():
        out = chanest_head_forward(tokens, store, tiny_cfg)
    assert out.shape == (tiny_cfg.n_patches, tiny_cfg.patch_size ** 2 * 2)


def test_model_requires_params_or_rng(tiny_cfg):
    with pytest.raises(ValueError):
        Model(tiny_cfg)


def test_patch_embed_rejects_wrong_patch_length(tiny_cfg):
    model = Model(tiny_cfg, rng=RngState(5))
    bad = np.zeros((tiny_cfg.n_patches, tiny_cfg.patch_dim + 1), dtype=np.float32)
    with pytest.raises(ValueError):
        patch_embed(bad, model.params, model.enc_pos)
