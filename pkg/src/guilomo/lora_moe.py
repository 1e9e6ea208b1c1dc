"""LoRA mixture-of-experts layers in search form and final form.

Each adapted weight matrix owns a frozen base matrix, a router, and a
bank of low-rank experts parameterized SVD-style as ``P diag(lam) Q`` at
maximal rank. During the allocation search, two kinds of selection masks
gate the layer: an additive mask inside the routing softmax limits how
many experts are reachable, and a multiplicative mask inside each expert
limits how many rank channels contribute. After allocation the masks
disappear: experts and rank channels are physically pruned and the layer
runs in its final form.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .gsv import GuidedSelectionVector, VirtualVector, build_expert_mask, build_rank_mask, ste_mask
from .numerics import (
    NonFiniteError,
    ShapeError,
    Tensor,
    linear,
    matmul,
    reshape,
    softmax,
    tmean,
    top_k_mask,
    tsum,
)
from .seeding import rng_for

__all__ = [
    "LoRAExpert",
    "Router",
    "LoRAMoELayerState",
    "MaterializedExpert",
    "MaterializedModule",
    "RoutingStats",
    "make_expert",
    "expert_delta",
    "masked_routing",
    "layer_forward_search",
    "layer_forward_final",
    "balance_loss",
]

SCALE_MODES = ("off", "alpha_over_r")


@dataclass
class LoRAExpert:
    """One low-rank expert at maximal rank: delta(x) = P (lam * Q x)."""

    P: Tensor      # (d1, r_max), zero-initialized so the delta starts at 0
    lam: Tensor    # (r_max,), ones-initialized
    Q: Tensor      # (r_max, d2), small Gaussian
    alpha: float   # scale numerator when scale_mode == "alpha_over_r"

    @property
    def r_max(self) -> int:
        return self.lam.size


@dataclass
class Router:
    """Linear routing network: logits(x) = x @ weight, weight is (d2, n_experts)."""

    weight: Tensor


def make_expert(d1: int, d2: int, r_max: int, alpha: float, seed: int,
                name: str = "expert") -> LoRAExpert:
    rng = rng_for(seed, name)
    return LoRAExpert(
        P=Tensor(np.zeros((d1, r_max)), requires_grad=True, name=f"{name}.P"),
        lam=Tensor(np.ones(r_max), requires_grad=True, name=f"{name}.lam"),
        Q=Tensor(rng.normal(0.0, 0.02, size=(r_max, d2)), requires_grad=True,
                 name=f"{name}.Q"),
        alpha=alpha,
    )


@dataclass
class LoRAMoELayerState:
    """Search-time state of one adapted weight matrix."""

    W0: Tensor                    # frozen (d1, d2)
    router: Router                # (d2, e_max)
    experts: list[LoRAExpert]
    expert_gsv: GuidedSelectionVector
    rank_gsvs: list[GuidedSelectionVector]
    routing_k: int = 2
    scale_mode: str = "alpha_over_r"
    name: str = "module"

    def __post_init__(self):
        if self.scale_mode not in SCALE_MODES:
            raise ValueError(f"{self.name}: unknown scale_mode {self.scale_mode!r}")
        e_max = self.expert_gsv.size
        if not (len(self.experts) == len(self.rank_gsvs) == e_max):
            raise ValueError(
                f"{self.name}: expert bank ({len(self.experts)}), rank GSVs "
                f"({len(self.rank_gsvs)}) and expert GSV size ({e_max}) disagree"
            )

    @property
    def e_max(self) -> int:
        return self.expert_gsv.size

    @property
    def r_max(self) -> int:
        return self.experts[0].r_max

    def selections(self) -> tuple[int, tuple[int, ...]]:
        """Current (n_star, rank choices of the active experts)."""
        n_star = self.expert_gsv.selected_index()
        return n_star, tuple(g.selected_index() for g in self.rank_gsvs[:n_star])


@dataclass
class MaterializedExpert:
    """Expert pruned to its allocated rank."""

    P: Tensor      # (d1, r)
    lam: Tensor    # (r,)
    Q: Tensor      # (r, d2)
    alpha: float

    @property
    def rank(self) -> int:
        return self.lam.size


@dataclass
class MaterializedModule:
    """Final form of one adapted weight matrix after allocation."""

    W0: Tensor
    router: Router                # (d2, e_star)
    experts: list[MaterializedExpert]
    routing_k: int = 2
    scale_mode: str = "alpha_over_r"
    name: str = "module"

    @property
    def expert_count(self) -> int:
        return len(self.experts)


@dataclass
class RoutingStats:
    """Per-forward routing summary feeding the balance penalty.

    ``assigned_fraction`` is the share of tokens whose top-1 route is
    each expert (a constant); ``mean_probability`` is the mean routing
    probability per expert as a graph node, so the penalty's gradient
    reaches the router.
    """

    assigned_fraction: np.ndarray
    mean_probability: Tensor
    tokens: int
    selection_pattern: bytes = b""

    @property
    def num_experts(self) -> int:
        return self.assigned_fraction.shape[0]

    @classmethod
    def from_fractions(cls, f, p) -> "RoutingStats":
        f = np.asarray(f, dtype=np.float64)
        p = p if isinstance(p, Tensor) else Tensor(p)
        return cls(assigned_fraction=f, mean_probability=p, tokens=1)


def _as_rows(x: Tensor) -> tuple[Tensor, bool]:
    """View ``x`` as a batch of row vectors; report whether to squeeze back."""
    if x.ndim == 1:
        return reshape(x, (1, x.size)), True
    return x, False


def _delta_core(expert: LoRAExpert, x: Tensor, mask: Tensor, r_effective: int,
                scale_mode: str) -> Tensor:
    down = linear(x, expert.Q)           # (..., r_max)
    gated = down * (mask * expert.lam)
    up = linear(gated, expert.P)         # (..., d1)
    if scale_mode == "alpha_over_r":
        up = up * (expert.alpha / float(r_effective))
    return up


def expert_delta(expert: LoRAExpert, x: Tensor, rank_mask: VirtualVector,
                 scale_mode: str = "alpha_over_r") -> Tensor:
    """Low-rank update of one expert under a multiplicative rank mask."""
    if rank_mask.form != "multiplicative":
        raise ValueError("expert_delta: rank mask must be multiplicative")
    if rank_mask.size != expert.r_max:
        raise ShapeError(
            f"expert_delta: mask size {rank_mask.size} != r_max {expert.r_max}"
        )
    if scale_mode not in SCALE_MODES:
        raise ValueError(f"expert_delta: unknown scale_mode {scale_mode!r}")
    rows, squeeze = _as_rows(x)
    out = _delta_core(expert, rows, rank_mask.as_tensor(), rank_mask.selection,
                      scale_mode)
    return reshape(out, (out.shape[-1],)) if squeeze else out


def _routing_core(x: Tensor, router: Router, mask: Tensor, active: int,
                  k: int) -> tuple[Tensor, Tensor, np.ndarray]:
    """Masked softmax routing with top-k renormalization.

    Returns (weights, masked softmax probabilities, constant top-k
    pattern). The effective k is ``min(k, active)`` so a single-expert
    selection stays legal.
    """
    logits = matmul(x, router.weight)
    probs = softmax(logits + mask)
    k_eff = min(k, active)
    pattern = top_k_mask(probs.values, k_eff)
    kept = probs * Tensor(pattern)
    weights = kept / tsum(kept, axis=-1, keepdims=True)
    return weights, probs, pattern


def masked_routing(x: Tensor, router: Router, expert_mask: VirtualVector,
                   k: int) -> Tensor:
    """Routing weights under an additive expert mask (probability vector)."""
    if expert_mask.form != "additive":
        raise ValueError("masked_routing: expert mask must be additive")
    if k < 1:
        raise ValueError("masked_routing: k must be >= 1")
    rows, squeeze = _as_rows(x)
    weights, _, _ = _routing_core(rows, router, expert_mask.as_tensor(),
                                  expert_mask.selection, k)
    return reshape(weights, (weights.shape[-1],)) if squeeze else weights


def _collect_stats(probs: Tensor, pattern: np.ndarray) -> RoutingStats:
    n = probs.shape[-1]
    flat = reshape(probs, (-1, n))
    tokens = flat.shape[0]
    top1 = np.argmax(flat.values, axis=-1)
    counts = np.bincount(top1, minlength=n).astype(np.float64)
    return RoutingStats(
        assigned_fraction=counts / tokens,
        mean_probability=tmean(flat, axis=0),
        tokens=tokens,
        selection_pattern=pattern.astype(np.uint8).tobytes(),
    )


def layer_forward_search(x: Tensor, state: LoRAMoELayerState) -> tuple[Tensor, RoutingStats]:
    """Search-form forward pass: masks rebuilt from the current GSV argmaxes.

    Experts beyond the selected count receive exactly zero routing weight
    and are skipped outright; their parameters and rank GSVs see zero
    gradient either way.
    """
    n_star = state.expert_gsv.selected_index()
    expert_mask = build_expert_mask(n_star, state.e_max)
    mask_t = ste_mask(state.expert_gsv.probability_tensor(), expert_mask)
    weights, probs, pattern = _routing_core(x, state.router, mask_t, n_star,
                                            state.routing_k)
    h = linear(x, state.W0)
    for i in range(n_star):
        rank_gsv = state.rank_gsvs[i]
        m_star = rank_gsv.selected_index()
        rank_mask = build_rank_mask(m_star, state.r_max)
        rank_mask_t = ste_mask(rank_gsv.probability_tensor(), rank_mask)
        delta = _delta_core(state.experts[i], x, rank_mask_t, m_star,
                            state.scale_mode)
        h = h + weights[..., i:i + 1] * delta
    if not np.isfinite(h.values).all():
        raise NonFiniteError(f"{state.name}: non-finite activations in search forward")
    return h, _collect_stats(probs, pattern)


def layer_forward_final(x: Tensor, module: MaterializedModule) -> tuple[Tensor, RoutingStats]:
    """Final-form forward pass over the pruned expert bank."""
    e_star = module.expert_count
    zero_mask = Tensor(np.zeros(e_star))
    weights, probs, pattern = _routing_core(x, module.router, zero_mask, e_star,
                                            module.routing_k)
    h = linear(x, module.W0)
    for i, expert in enumerate(module.experts):
        down = linear(x, expert.Q)
        up = linear(down * expert.lam, expert.P)
        if module.scale_mode == "alpha_over_r":
            up = up * (expert.alpha / float(expert.rank))
        h = h + weights[..., i:i + 1] * up
    if not np.isfinite(h.values).all():
        raise NonFiniteError(f"{module.name}: non-finite activations in final forward")
    return h, _collect_stats(probs, pattern)


def balance_loss(stats: RoutingStats, c_b: float) -> Tensor:
    """Load-balance penalty c_b * N * sum_i f_i * P_i.

    Uniform usage (f_i = P_i = 1/N) gives exactly ``c_b``; any imbalance
    with f = P gives more. Gradients flow through the mean probabilities
    only; the assignment fractions are constants.
    """
    if stats.tokens < 1:
        raise ValueError("balance_loss: empty batch")
    n = stats.num_experts
    weighted = Tensor(stats.assigned_fraction) * stats.mean_probability
    return tsum(weighted) * (c_b * n)
