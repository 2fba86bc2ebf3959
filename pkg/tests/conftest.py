import os

import numpy as np
import pytest

os.environ.setdefault("WAVESFM_THREADS", "1")

from wavesfm.model import ModelConfig


def fd_gradcheck(build, leaves, rtol=1e-6, atol=1e-9, step=1e-5):
    """Central-difference check of every element of every leaf tensor.

    ``build`` re-evaluates the scalar loss from the (mutated) leaf data.
    Comparison is per-element: |fd - analytic| <= atol + rtol * max(|.|),
    which stays meaningful for near-zero gradients where a pure relative
    error explodes on finite-difference noise.
    """
    for leaf in leaves:
        leaf.grad = None
    loss = build()
    loss.backward()
    worst = 0.0
    for leaf in leaves:
        assert leaf.grad is not None, "leaf missing a gradient"
        assert leaf.grad.shape == leaf.data.shape
        flat = leaf.data.reshape(-1)
        an = leaf.grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = build().item()
            flat[i] = orig - step
            dn = build().item()
            flat[i] = orig
            fd = (up - dn) / (2.0 * step)
            err = abs(fd - an[i])
            budget = atol + rtol * max(abs(fd), abs(an[i]))
            worst = max(worst, err / budget if budget else 0.0)
            assert err <= budget, (
                f"gradient mismatch at element {i}: fd={fd!r} analytic={an[i]!r}")
    return worst


@pytest.fixture
def tiny_cfg():
    """Smallest config exercising every architectural path."""
    return ModelConfig(image_size=8, patch_size=4, channels=1,
                       enc_blocks=2, enc_dim=16, enc_hidden=24, enc_heads=2,
                       dec_blocks=1, dec_dim=8, dec_hidden=12, dec_heads=2)


@pytest.fixture
def rng64():
    rng = np.random.default_rng(0)
    return rng
