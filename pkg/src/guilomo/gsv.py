"""GuidedSelection Vectors and their straight-through gradient surrogate.

A GuidedSelection Vector (GSV) is a trainable logit vector over candidate
discrete choices: how many experts a module keeps, or which rank one
expert uses. The forward pass commits to the argmax choice by building a
deterministic *virtual vector* mask; the backward pass routes the mask's
gradient to the selected position of the GSV's probability vector, so the
discrete choice stays trainable end to end.

Two mask forms exist:

* additive (0 / -NEG_LARGE): added to routing logits before softmax, so
  experts beyond the selected count receive exactly zero weight;
* multiplicative (1 / 0): gates rank channels inside an expert's
  low-rank delta.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import CustomGradientNode, Tensor, softmax
from .seeding import rng_for

__all__ = [
    "NEG_LARGE",
    "GuidedSelectionVector",
    "VirtualVector",
    "init_gsv",
    "build_expert_mask",
    "build_rank_mask",
    "stge_backward",
    "ste_mask",
]

# Stands in for -infinity inside additive masks: softmax of a logit this
# low underflows to exactly 0.0 in float64, while avoiding NaN from
# 0 * inf products.
NEG_LARGE = -1e9


@dataclass
class VirtualVector:
    """Deterministic mask derived from a 1-based selection index.

    ``additive`` masks are 0 on the first ``selection`` slots and
    ``NEG_LARGE`` after; ``multiplicative`` masks are 1 then 0.
    """

    form: str  # "additive" | "multiplicative"
    entries: np.ndarray
    selection: int

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    def as_tensor(self) -> Tensor:
        return Tensor(self.entries.copy())


class GuidedSelectionVector:
    """Trainable logits over 1..size candidate counts or ranks."""

    def __init__(self, logits: np.ndarray, kind: str, name: str | None = None):
        if kind not in ("expert", "rank"):
            raise ValueError(f"unknown GSV kind {kind!r}")
        self.logits = Tensor(np.asarray(logits, dtype=np.float64),
                             requires_grad=True, name=name)
        self.kind = kind

    @property
    def size(self) -> int:
        return self.logits.size

    def probabilities(self) -> np.ndarray:
        """Softmax of the logits (plain array, no graph)."""
        z = self.logits.values - self.logits.values.max()
        e = np.exp(z)
        return e / e.sum()

    def probability_tensor(self) -> Tensor:
        """Softmax of the logits as a graph node (used in forward passes)."""
        return softmax(self.logits)

    def selected_index(self) -> int:
        """1-based argmax of the probabilities; ties go to the lowest index."""
        return int(np.argmax(self.logits.values)) + 1


def init_gsv(size: int, seed: int, kind: str, name: str | None = None) -> GuidedSelectionVector:
    """GSV with logits drawn i.i.d. from the standard normal for ``seed``."""
    if size < 1:
        raise ValueError("init_gsv: size must be >= 1")
    logits = rng_for(seed, "gsv").standard_normal(size)
    return GuidedSelectionVector(logits, kind, name=name)


def build_expert_mask(n_star: int, e_max: int) -> VirtualVector:
    """Additive mask keeping the first ``n_star`` of ``e_max`` experts."""
    if not 1 <= n_star <= e_max:
        raise ValueError(f"build_expert_mask: n_star={n_star} outside [1, {e_max}]")
    entries = np.full(e_max, NEG_LARGE)
    entries[:n_star] = 0.0
    return VirtualVector("additive", entries, n_star)


def build_rank_mask(m_star: int, r_max: int) -> VirtualVector:
    """Multiplicative mask keeping the first ``m_star`` of ``r_max`` rank slots."""
    if not 1 <= m_star <= r_max:
        raise ValueError(f"build_rank_mask: m_star={m_star} outside [1, {r_max}]")
    entries = np.zeros(r_max)
    entries[:m_star] = 1.0
    return VirtualVector("multiplicative", entries, m_star)


def stge_backward(mask_grad: np.ndarray, mask: VirtualVector) -> np.ndarray:
    """Surrogate gradient w.r.t. the GSV probability vector.

    The sensitivity of active slot ``i`` is ``entries[i] * mask_grad[i]``
    for multiplicative masks and plainly ``mask_grad[i]`` for additive
    masks (whose active entries are zero, making the product form
    degenerate). The summed sensitivity of slots 1..selection lands at
    the selected position; every other position is zero. The caller
    chains the result through the softmax Jacobian onto the logits.
    """
    mask_grad = np.asarray(mask_grad, dtype=np.float64)
    if mask_grad.shape != mask.entries.shape:
        raise ValueError(
            f"stge_backward: gradient shape {mask_grad.shape} does not match "
            f"mask size {mask.entries.shape}"
        )
    active = mask_grad[: mask.selection]
    if mask.form == "multiplicative":
        active = mask.entries[: mask.selection] * active
    out = np.zeros_like(mask_grad)
    out[mask.selection - 1] = active.sum()
    return out


def ste_mask(probabilities: Tensor, mask: VirtualVector) -> Tensor:
    """Graph node emitting the mask entries with the surrogate backward rule.

    Forward output ignores the probability values (the mask is already
    committed to the argmax choice); the backward rule is
    ``stge_backward``, so the probability vector -- and through its
    softmax, the GSV logits -- receives the selection gradient.
    """
    node = CustomGradientNode(
        forward_fn=lambda _p: mask.entries,
        backward_fn=lambda g: (stge_backward(g, mask),),
    )
    return node(probabilities)
