"""Random patch masking for masked wireless modeling."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .rng import RngState


@dataclass
class MaskPlan:
    """Partition of patch indices into visible and masked sets.

    ``perm`` is the raw shuffle; the first ``n_visible`` entries, re-sorted
    ascending, are the visible patches (the original order of the kept
    patches is restored), the rest form the masked set, also ascending.
    """

    perm: np.ndarray
    n_visible: int
    visible: np.ndarray
    masked: np.ndarray
    ratio: float

    @property
    def n_masked(self) -> int:
        return len(self.masked)

    @property
    def n_total(self) -> int:
        return len(self.perm)


def sample_mask(n: int, ratio: float, rng: RngState) -> MaskPlan:
    """Draw a mask plan over ``n`` patches with exactly floor(ratio * n) masked."""
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"mask ratio must be in [0, 1), got {ratio}")
    # nudge before flooring so decimal ratios keep their mathematical floor
    # (0.29 * 100 is 28.999... in doubles and must still count as 29)
    n_masked = int(math.floor(ratio * n + 1e-9))
    n_visible = n - n_masked
    perm = rng.permutation(n)
    visible = np.sort(perm[:n_visible])
    masked = np.sort(perm[n_visible:])
    return MaskPlan(perm, n_visible, visible, masked, ratio)
