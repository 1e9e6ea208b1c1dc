"""Alternating bilevel search over adapter weights and selection vectors.

One search step runs three phases:

1. a *lookahead* model update evaluated on a batch from the second data
   split, producing temporary weights without touching the committed
   ones or the optimizer history;
2. a selection-vector update evaluated at the lookahead weights on a
   batch from the first split, with gradients reaching the selection
   logits through the straight-through mask surrogate;
3. a *committed* model update from the original weights on the same
   second-split batch, now under the updated selections. The model
   optimizer's history advances only here.

The model side is duck-typed: anything exposing
``named_model_parameters`` / ``named_gsv_parameters`` works, and the
loss is a caller-supplied closure, so the loop is testable on hand-built
objectives.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .numerics import Tensor
from .seeding import rng_for

__all__ = [
    "BilevelConfig",
    "DataSplit",
    "SearchState",
    "SearchResult",
    "SGDOptimizer",
    "AdamWOptimizer",
    "cosine_scale",
    "split_dataset",
    "inner_lookahead_step",
    "gsv_step",
    "committed_model_step",
    "run_search",
]


def cosine_scale(step: int, total: int) -> float:
    """Cosine decay factor in (0, 1], starting at 1 for step 0."""
    if total <= 1:
        return 1.0
    return 0.5 * (1.0 + math.cos(math.pi * step / total))


@dataclass
class BilevelConfig:
    T: int = 1
    xi_theta: float = 3e-4
    xi_g: float = 3e-3
    optimizer_mode: str = "adaptive"      # "plain_sgd" | "adaptive"
    schedule: str = "cosine"              # "constant" | "cosine"
    e_max: int = 8
    r_max: int = 8
    batch_size: int = 32
    seed: int = 0
    model_betas: tuple[float, float] = (0.9, 0.999)
    model_eps: float = 1e-8
    model_weight_decay: float = 0.0
    gsv_betas: tuple[float, float] = (0.5, 0.999)
    gsv_eps: float = 1e-8
    gsv_weight_decay: float = 1e-3

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("BilevelConfig: T must be >= 1")
        if self.xi_theta < 0 or self.xi_g < 0:
            raise ValueError("BilevelConfig: learning rates must be non-negative")
        if self.optimizer_mode not in ("plain_sgd", "adaptive"):
            raise ValueError(f"BilevelConfig: unknown optimizer_mode {self.optimizer_mode!r}")
        if self.schedule not in ("constant", "cosine"):
            raise ValueError(f"BilevelConfig: unknown schedule {self.schedule!r}")

    def lr_scale(self, step: int) -> float:
        return cosine_scale(step, self.T) if self.schedule == "cosine" else 1.0


@dataclass
class DataSplit:
    d1: object
    d2: object


def split_dataset(data, seed: int) -> DataSplit:
    """Uniform random disjoint halves (first half larger on odd sizes)."""
    n = len(data)
    if n < 2:
        raise ValueError(f"split_dataset: need at least 2 examples, got {n}")
    perm = rng_for(seed, "split").permutation(n)
    half = (n + 1) // 2
    if hasattr(data, "subset"):
        return DataSplit(data.subset(perm[:half]), data.subset(perm[half:]))
    items = list(data)
    return DataSplit([items[i] for i in perm[:half]],
                     [items[i] for i in perm[half:]])


# -- optimizers ----------------------------------------------------------


class SGDOptimizer:
    """Plain gradient descent; stateless, so lookahead equals a real step."""

    kind = "plain_sgd"

    def __init__(self, params: dict[str, Tensor], lr: float):
        self.params = params
        self.lr = lr

    def lookahead_values(self, lr_scale: float = 1.0) -> dict[str, np.ndarray]:
        out = {}
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else 0.0
            out[name] = p.values - self.lr * lr_scale * g
        return out

    def step(self, lr_scale: float = 1.0) -> None:
        for name, values in self.lookahead_values(lr_scale).items():
            self.params[name].values = values

    def state_dict(self) -> dict:
        return {}

    def load_state_dict(self, state: dict) -> None:
        pass


class AdamWOptimizer:
    """AdamW with decoupled weight decay and clonable moment state."""

    kind = "adaptive"

    def __init__(self, params: dict[str, Tensor], lr: float,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {name: np.zeros_like(p.values) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.values) for name, p in params.items()}

    def _update(self, name: str, grad: np.ndarray, m: np.ndarray, v: np.ndarray,
                t: int, lr: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        m = self.beta1 * m + (1.0 - self.beta1) * grad
        v = self.beta2 * v + (1.0 - self.beta2) * grad * grad
        m_hat = m / (1.0 - self.beta1 ** t)
        v_hat = v / (1.0 - self.beta2 ** t)
        p = self.params[name].values
        new = p - lr * (m_hat / (np.sqrt(v_hat) + self.eps) + self.weight_decay * p)
        return new, m, v

    def lookahead_values(self, lr_scale: float = 1.0) -> dict[str, np.ndarray]:
        """One-step-ahead parameter values on cloned moments.

        The real moment buffers and step count are untouched, so the
        committed step that follows owns the optimizer history.
        """
        lr = self.lr * lr_scale
        t = self.t + 1
        out = {}
        for name, p in self.params.items():
            grad = p.grad if p.grad is not None else np.zeros_like(p.values)
            new, _, _ = self._update(name, grad, self.m[name], self.v[name], t, lr)
            out[name] = new
        return out

    def step(self, lr_scale: float = 1.0) -> None:
        lr = self.lr * lr_scale
        self.t += 1
        for name, p in self.params.items():
            grad = p.grad if p.grad is not None else np.zeros_like(p.values)
            new, m, v = self._update(name, grad, self.m[name], self.v[name], self.t, lr)
            self.m[name], self.v[name] = m, v
            p.values = new

    def state_dict(self) -> dict:
        return {
            "t": self.t,
            "m": {k: v.copy() for k, v in self.m.items()},
            "v": {k: v.copy() for k, v in self.v.items()},
        }

    def load_state_dict(self, state: dict) -> None:
        self.t = int(state["t"])
        for k in self.m:
            self.m[k] = np.asarray(state["m"][k], dtype=np.float64).reshape(self.m[k].shape)
            self.v[k] = np.asarray(state["v"][k], dtype=np.float64).reshape(self.v[k].shape)


def make_optimizers(model, cfg: BilevelConfig):
    model_params = model.named_model_parameters()
    gsv_params = model.named_gsv_parameters()
    if cfg.optimizer_mode == "plain_sgd":
        return SGDOptimizer(model_params, cfg.xi_theta), SGDOptimizer(gsv_params, cfg.xi_g)
    return (
        AdamWOptimizer(model_params, cfg.xi_theta, betas=cfg.model_betas,
                       eps=cfg.model_eps, weight_decay=cfg.model_weight_decay),
        AdamWOptimizer(gsv_params, cfg.xi_g, betas=cfg.gsv_betas,
                       eps=cfg.gsv_eps, weight_decay=cfg.gsv_weight_decay),
    )


# -- search state and steps ------------------------------------------------


@dataclass
class SearchState:
    model: object
    cfg: BilevelConfig
    loss_fn: Callable  # loss_fn(model, batch) -> object with .total/.sft/.bal
    model_opt: object
    gsv_opt: object
    split: DataSplit | None = None
    t: int = 0
    history: list[dict] = field(default_factory=list)

    @classmethod
    def create(cls, model, cfg: BilevelConfig, loss_fn, split: DataSplit | None = None):
        model_opt, gsv_opt = make_optimizers(model, cfg)
        return cls(model=model, cfg=cfg, loss_fn=loss_fn,
                   model_opt=model_opt, gsv_opt=gsv_opt, split=split)

    def zero_grads(self) -> None:
        for p in self.model.named_model_parameters().values():
            p.zero_grad()
        for p in self.model.named_gsv_parameters().values():
            p.zero_grad()


def _backward_loss(state: SearchState, batch, phase: str):
    state.zero_grads()
    parts = state.loss_fn(state.model, batch)
    if not np.isfinite(parts.total.values).all():
        raise ArithmeticError(
            f"{phase}: non-finite loss at search step {state.t}"
        )
    parts.total.backward()
    return parts


def inner_lookahead_step(state: SearchState, batch) -> dict[str, np.ndarray]:
    """Lookahead weights from one model update; committed weights untouched."""
    _backward_loss(state, batch, "lookahead")
    return state.model_opt.lookahead_values(state.cfg.lr_scale(state.t))


def gsv_step(state: SearchState, pi_star: dict[str, np.ndarray], batch) -> None:
    """Update the selection logits at the lookahead weights.

    The lookahead weights are loaded as constants (first-order
    approximation), the first-split loss is backpropagated through the
    mask surrogates, and one selection-optimizer step is applied.
    """
    params = state.model.named_model_parameters()
    saved = {name: p.values for name, p in params.items()}
    for name, p in params.items():
        p.values = pi_star[name]
    try:
        _backward_loss(state, batch, "gsv_step")
        for p in state.model.named_gsv_parameters().values():
            if p.grad is not None and not np.isfinite(p.grad).all():
                raise ArithmeticError(f"gsv_step: non-finite GSV gradient at step {state.t}")
        state.gsv_opt.step(state.cfg.lr_scale(state.t))
    finally:
        for name, p in params.items():
            p.values = saved[name]


def committed_model_step(state: SearchState, batch):
    """Model update from the committed weights under the updated selections."""
    parts = _backward_loss(state, batch, "committed_step")
    state.model_opt.step(state.cfg.lr_scale(state.t))
    return parts


def _ordered_batch(data, batch_size: int, index: int, seed: int, label: str):
    """Deterministic batch for a global step index: reshuffle each epoch."""
    n = len(data)
    steps_per_epoch = max(1, -(-n // batch_size))
    epoch, slot = divmod(index, steps_per_epoch)
    order = rng_for(seed, label, epoch).permutation(n)
    rows = order[slot * batch_size:(slot + 1) * batch_size]
    if hasattr(data, "batch"):
        return data.batch(rows)
    return [data[i] for i in rows]


@dataclass
class SearchResult:
    state: SearchState
    pi_star: dict[str, np.ndarray]
    history: list[dict]

    @property
    def model(self):
        return self.state.model


def run_search(model, data, cfg: BilevelConfig, loss_fn,
               state: SearchState | None = None,
               on_step: Callable[[dict], None] | None = None) -> SearchResult:
    """Run (or resume) the three-phase search loop for ``cfg.T`` steps.

    Returns the optimized selection vectors inside the model plus the
    final lookahead weights, which seed the materialized model. Each step
    draws one fresh batch per split; the second-split batch serves both
    the lookahead and the committed update.
    """
    if state is None:
        split = split_dataset(data, cfg.seed)
        state = SearchState.create(model, cfg, loss_fn, split=split)
    while state.t < cfg.T:
        batch2 = _ordered_batch(state.split.d2, cfg.batch_size, state.t, cfg.seed, "d2")
        batch1 = _ordered_batch(state.split.d1, cfg.batch_size, state.t, cfg.seed, "d1")
        pi_star = inner_lookahead_step(state, batch2)
        gsv_step(state, pi_star, batch1)
        parts = committed_model_step(state, batch2)
        row = {"t": state.t, "loss_sft": parts.sft, "loss_bal": parts.bal}
        if hasattr(state.model, "selections"):
            row["selections"] = state.model.selections()
        state.history.append(row)
        if on_step is not None:
            on_step(row)
        state.t += 1
    # Final lookahead: the weights that seed the materialized model.
    batch2 = _ordered_batch(state.split.d2, cfg.batch_size, state.t, cfg.seed, "d2")
    pi_star = inner_lookahead_step(state, batch2)
    state.zero_grads()
    return SearchResult(state=state, pi_star=pi_star, history=state.history)
