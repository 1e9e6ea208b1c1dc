"""Allocation plans: extraction from selection vectors, materialization,
and budgeted baseline allocators.

A plan records, per layer and per adapted matrix, how many experts to
keep and the rank of each kept expert. Plans are immutable value objects
with a canonical JSON form; every load re-validates the invariants and
rejects a bad file naming the violated constraint.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .lora_moe import MaterializedExpert, MaterializedModule, Router
from .model import ALL_TARGETS, ToyTransformer
from .numerics import Tensor

__all__ = [
    "PlanError",
    "ModuleAllocation",
    "AllocationPlan",
    "PLAN_SOURCES",
    "extract_plan",
    "plan_from_gsvs",
    "materialize",
    "trainable_parameter_count",
    "uniform_allocation",
    "uniform_budget_allocation",
    "plan_total_rank",
    "mola_group_allocation",
    "normal_e_allocation",
    "normal_r_allocation",
    "normal_plan",
    "proportional_allocation",
]

SCHEMA_VERSION = 1
PLAN_SOURCES = ("guilomo", "uniform", "mola_group", "normal_e_r", "perturbed")


class PlanError(ValueError):
    """An allocation plan violates one of its invariants."""


@dataclass
class ModuleAllocation:
    expert_count: int
    ranks: list[int]

    def total_rank(self) -> int:
        return int(sum(self.ranks))


@dataclass
class AllocationPlan:
    layers: list[dict[str, ModuleAllocation]]
    e_max: int
    r_max: int
    source: str
    seed: int | None = None
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        self.validate()

    @property
    def layer_count(self) -> int:
        return len(self.layers)

    def module_names(self) -> tuple[str, ...]:
        return tuple(self.layers[0].keys()) if self.layers else ()

    def validate(self) -> None:
        if self.source not in PLAN_SOURCES:
            raise PlanError(f"unknown plan source {self.source!r}")
        if not self.layers:
            raise PlanError("plan has no layers")
        if self.e_max < 1 or self.r_max < 1:
            raise PlanError("e_max and r_max must be >= 1")
        for i, layer in enumerate(self.layers):
            if not layer:
                raise PlanError(f"layer {i} has no modules")
            for name, alloc in layer.items():
                where = f"layer {i} module {name}"
                if name not in ALL_TARGETS:
                    raise PlanError(f"{where}: unknown module name")
                if not 1 <= alloc.expert_count <= self.e_max:
                    raise PlanError(
                        f"{where}: expert_count {alloc.expert_count} outside "
                        f"[1, {self.e_max}]"
                    )
                if len(alloc.ranks) != alloc.expert_count:
                    raise PlanError(
                        f"{where}: ranks list length {len(alloc.ranks)} != "
                        f"expert_count {alloc.expert_count}"
                    )
                for r in alloc.ranks:
                    if not 1 <= r <= self.r_max:
                        raise PlanError(f"{where}: rank {r} outside [1, {self.r_max}]")

    # -- serialization ---------------------------------------------------

    def to_json_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "metadata": {
                "e_max": self.e_max,
                "r_max": self.r_max,
                "source": self.source,
                "seed": self.seed,
            },
            "layers": [
                {
                    name: {"expert_count": a.expert_count,
                           "ranks": [int(r) for r in a.ranks]}
                    for name, a in layer.items()
                }
                for layer in self.layers
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def from_json_dict(cls, doc: dict) -> "AllocationPlan":
        try:
            meta = doc["metadata"]
            layers = [
                {
                    name: ModuleAllocation(
                        expert_count=int(entry["expert_count"]),
                        ranks=[int(r) for r in entry["ranks"]],
                    )
                    for name, entry in layer.items()
                }
                for layer in doc["layers"]
            ]
            return cls(
                layers=layers,
                e_max=int(meta["e_max"]),
                r_max=int(meta["r_max"]),
                source=str(meta["source"]),
                seed=None if meta.get("seed") is None else int(meta["seed"]),
                schema_version=int(doc.get("schema_version", SCHEMA_VERSION)),
            )
        except (KeyError, TypeError) as exc:
            raise PlanError(f"malformed plan document: {exc}") from exc

    @classmethod
    def load(cls, path) -> "AllocationPlan":
        return cls.from_json_dict(json.loads(Path(path).read_text()))

    def copy(self) -> "AllocationPlan":
        return AllocationPlan.from_json_dict(self.to_json_dict())


# -- extraction ------------------------------------------------------------


def plan_from_gsvs(per_layer: list[dict[str, tuple]], e_max: int, r_max: int,
                   source: str = "guilomo", seed: int | None = None) -> AllocationPlan:
    """Plan from (expert GSV, rank GSV list) pairs per layer and module.

    Only the rank vectors of the kept experts are consulted.
    """
    layers = []
    for i, modules in enumerate(per_layer):
        layer: dict[str, ModuleAllocation] = {}
        for name, pair in modules.items():
            where = f"layer {i} module {name}"
            if pair is None or pair[0] is None:
                raise PlanError(f"{where}: missing expert GSV")
            expert_gsv, rank_gsvs = pair
            e_star = expert_gsv.selected_index()
            if rank_gsvs is None or len(rank_gsvs) < e_star:
                raise PlanError(
                    f"{where}: missing rank GSVs (need {e_star}, "
                    f"have {0 if rank_gsvs is None else len(rank_gsvs)})"
                )
            ranks = [rank_gsvs[j].selected_index() for j in range(e_star)]
            layer[name] = ModuleAllocation(expert_count=e_star, ranks=ranks)
        layers.append(layer)
    return AllocationPlan(layers=layers, e_max=e_max, r_max=r_max,
                          source=source, seed=seed)


def extract_plan(model: ToyTransformer, source: str = "guilomo",
                 seed: int | None = None) -> AllocationPlan:
    """Read the committed selections of a search-mode model into a plan."""
    modules = model.search_modules()
    per_layer = []
    for layer in range(model.config.layers):
        per_layer.append({
            name: (modules[(layer, name)].expert_gsv,
                   modules[(layer, name)].rank_gsvs)
            for name in model.config.lora_targets
        })
    return plan_from_gsvs(per_layer, model.e_max, model.r_max, source=source,
                          seed=seed)


# -- materialization --------------------------------------------------------


def materialize(plan: AllocationPlan, model: ToyTransformer,
                weights: dict[str, np.ndarray] | None = None) -> ToyTransformer:
    """Prune the search model down to a plan and copy the given weights.

    Keeps experts 1..e_star of each module; expert j keeps the first
    ranks[j] columns of P, rows of Q, and entries of lam; the router
    keeps its first e_star columns. ``weights`` defaults to the model's
    current parameter values (pass the final lookahead weights to
    warm-start as searched).
    """
    cfg = model.config
    if plan.layer_count != cfg.layers:
        raise PlanError(
            f"plan has {plan.layer_count} layers, model has {cfg.layers}"
        )
    if set(plan.module_names()) != set(cfg.lora_targets):
        raise PlanError(
            f"plan modules {sorted(plan.module_names())} do not match model "
            f"targets {sorted(cfg.lora_targets)}"
        )
    if plan.e_max > model.e_max or plan.r_max > model.r_max:
        raise PlanError(
            f"plan bounds (e_max={plan.e_max}, r_max={plan.r_max}) exceed model "
            f"bounds (e_max={model.e_max}, r_max={model.r_max})"
        )
    if weights is None:
        weights = {name: p.values for name, p in model.named_model_parameters().items()}

    final = ToyTransformer(cfg, e_max=model.e_max, r_max=model.r_max,
                           lora_alpha=model.lora_alpha, scale_mode=model.scale_mode,
                           routing_k=model.routing_k, seed=model.seed)
    for name, tensor in final.base.items():
        tensor.values = model.base[name].values.copy()
    final.mode = "final"
    final.adapters = {}
    for layer in range(cfg.layers):
        for name in cfg.lora_targets:
            alloc = plan.layers[layer][name]
            prefix = f"layer{layer}.{name}"
            experts = []
            for j in range(alloc.expert_count):
                r = alloc.ranks[j]
                experts.append(MaterializedExpert(
                    P=Tensor(weights[f"{prefix}.expert{j}.P"][:, :r].copy(),
                             requires_grad=True, name=f"{prefix}.expert{j}.P"),
                    lam=Tensor(weights[f"{prefix}.expert{j}.lam"][:r].copy(),
                               requires_grad=True, name=f"{prefix}.expert{j}.lam"),
                    Q=Tensor(weights[f"{prefix}.expert{j}.Q"][:r, :].copy(),
                             requires_grad=True, name=f"{prefix}.expert{j}.Q"),
                    alpha=model.lora_alpha,
                ))
            router = Router(Tensor(
                weights[f"{prefix}.router"][:, :alloc.expert_count].copy(),
                requires_grad=True, name=f"{prefix}.router",
            ))
            final.adapters[(layer, name)] = MaterializedModule(
                W0=final.base[prefix], router=router, experts=experts,
                routing_k=model.routing_k, scale_mode=model.scale_mode,
                name=prefix,
            )
    return final


def trainable_parameter_count(model) -> int:
    return int(sum(p.size for p in model.named_model_parameters().values()))


# -- baseline allocators -----------------------------------------------------


def proportional_allocation(weights, total: int, floor=1, cap=None) -> list[int]:
    """Integer allocation proportional to ``weights`` conserving ``total``.

    Largest-remainder rounding with per-item floors and an optional cap.
    Remainder ties prefer the heavier weight, then the lower index, which
    keeps symmetric weight profiles symmetric whenever the leftover count
    allows it.
    """
    w = np.asarray(weights, dtype=np.float64)
    n = w.size
    if n == 0:
        raise ValueError("proportional_allocation: empty weights")
    if np.any(w <= 0):
        raise ValueError("proportional_allocation: weights must be positive")
    floors = np.full(n, floor, dtype=np.int64) if np.isscalar(floor) else \
        np.asarray(floor, dtype=np.int64)
    caps = None if cap is None else (
        np.full(n, cap, dtype=np.int64) if np.isscalar(cap) else
        np.asarray(cap, dtype=np.int64)
    )
    if floors.sum() > total:
        raise ValueError(
            f"proportional_allocation: budget {total} below floor total {floors.sum()}"
        )
    if caps is not None and caps.sum() < total:
        raise ValueError(
            f"proportional_allocation: budget {total} above cap total {caps.sum()}"
        )
    quotas = total * w / w.sum()
    out = np.floor(quotas).astype(np.int64)
    out = np.maximum(out, floors)
    if caps is not None:
        out = np.minimum(out, caps)
    remainders = quotas - np.floor(quotas)
    add_order = sorted(range(n), key=lambda i: (-remainders[i], -w[i], i))
    drop_order = sorted(range(n), key=lambda i: (remainders[i], w[i], i))
    diff = int(total - out.sum())
    while diff != 0:
        moved = False
        if diff > 0:
            for i in add_order:
                if caps is None or out[i] < caps[i]:
                    out[i] += 1
                    diff -= 1
                    moved = True
                    if diff == 0:
                        break
        else:
            for i in drop_order:
                if out[i] > floors[i]:
                    out[i] -= 1
                    diff += 1
                    moved = True
                    if diff == 0:
                        break
        if not moved:
            raise ValueError("proportional_allocation: infeasible floor/cap combination")
    return [int(v) for v in out]


def _plan_with_counts(layer_counts: list[int], rank_lists: list[list[int]],
                      modules, e_max: int, r_max: int, source: str,
                      seed: int | None = None) -> AllocationPlan:
    layers = []
    for count, ranks in zip(layer_counts, rank_lists):
        layers.append({
            name: ModuleAllocation(expert_count=count, ranks=list(ranks))
            for name in modules
        })
    return AllocationPlan(layers=layers, e_max=e_max, r_max=r_max,
                          source=source, seed=seed)


def uniform_allocation(layer_count: int, modules=ALL_TARGETS, n_experts: int = 2,
                       rank: int = 8, e_max: int = 8, r_max: int = 8) -> AllocationPlan:
    """Same expert count and rank for every module of every layer."""
    if not 1 <= n_experts <= e_max:
        raise PlanError(f"uniform_allocation: n_experts {n_experts} outside [1, {e_max}]")
    if not 1 <= rank <= r_max:
        raise PlanError(f"uniform_allocation: rank {rank} outside [1, {r_max}]")
    return _plan_with_counts([n_experts] * layer_count,
                             [[rank] * n_experts] * layer_count,
                             modules, e_max, r_max, "uniform")


def uniform_budget_allocation(layer_count: int, modules=ALL_TARGETS,
                              n_experts: int = 2, total_rank: int = 64,
                              e_max: int = 8, r_max: int = 8) -> AllocationPlan:
    """Uniform expert counts whose ranks exactly spend a global rank budget.

    Used to build an equal-budget uniform baseline against a searched
    plan: every module keeps ``n_experts`` experts and the per-module
    rank totals split ``total_rank`` as evenly as integers allow.
    """
    if not 1 <= n_experts <= e_max:
        raise PlanError(f"uniform_budget_allocation: n_experts {n_experts} outside [1, {e_max}]")
    num_modules = layer_count * len(tuple(modules))
    if num_modules == 0:
        raise PlanError("uniform_budget_allocation: no modules")
    module_totals = proportional_allocation(
        np.ones(num_modules), total_rank,
        floor=n_experts, cap=n_experts * r_max,
    )
    layers = []
    idx = 0
    for _ in range(layer_count):
        layer = {}
        for name in modules:
            ranks = proportional_allocation(np.ones(n_experts), module_totals[idx],
                                            floor=1, cap=r_max)
            layer[name] = ModuleAllocation(expert_count=n_experts, ranks=ranks)
            idx += 1
        layers.append(layer)
    return AllocationPlan(layers=layers, e_max=e_max, r_max=r_max, source="uniform")


def plan_total_rank(plan: AllocationPlan) -> int:
    """Total allocated rank across every module of the plan."""
    return sum(alloc.total_rank() for layer in plan.layers for alloc in layer.values())


def mola_group_allocation(layer_count: int, group_counts, rank: int = 8,
                          modules=ALL_TARGETS, e_max: int | None = None,
                          r_max: int = 8) -> AllocationPlan:
    """Four contiguous equal layer groups, each with its own expert count."""
    group_counts = tuple(int(c) for c in group_counts)
    if len(group_counts) != 4:
        raise PlanError("mola_group_allocation: need exactly 4 group counts")
    if layer_count % 4 != 0:
        raise PlanError(
            f"mola_group_allocation: layer_count {layer_count} not divisible by 4"
        )
    e_max = max(group_counts) if e_max is None else e_max
    group_size = layer_count // 4
    counts = [group_counts[layer // group_size] for layer in range(layer_count)]
    return _plan_with_counts(counts, [[rank] * c for c in counts],
                             modules, e_max, r_max, "mola_group")


def _normal_density(layer_count: int) -> np.ndarray:
    xs = np.linspace(-2.0, 2.0, layer_count)
    return np.exp(-0.5 * xs * xs)


def normal_e_allocation(layer_count: int, total_expert_budget: int,
                        e_max: int | None = None) -> list[int]:
    """Per-layer expert counts proportional to a standard normal profile.

    The layer axis is mapped to evenly spaced points on [-2, 2] standard
    deviations; density values are normalized and allocated with
    largest-remainder rounding and a floor of one expert per layer.
    """
    if total_expert_budget < layer_count:
        raise ValueError(
            f"normal_e_allocation: budget {total_expert_budget} below one "
            f"expert per layer ({layer_count})"
        )
    return proportional_allocation(_normal_density(layer_count),
                                   total_expert_budget, floor=1, cap=e_max)


def normal_r_allocation(expert_counts, rank_budget: int = 40,
                        r_max: int | None = None) -> list[list[int]]:
    """Rank lists under a per-module rank budget spread across layers.

    The budget is first split across layers along the normal profile
    (with each layer's floor covering rank 1 per expert), then each
    layer's share is split evenly over its experts.
    """
    counts = [int(c) for c in expert_counts]
    if any(c < 1 for c in counts):
        raise ValueError("normal_r_allocation: expert counts must be >= 1")
    floor_total = sum(counts)
    if rank_budget < floor_total:
        raise ValueError(
            f"normal_r_allocation: budget {rank_budget} below rank-1 floor "
            f"for {floor_total} experts"
        )
    caps = None if r_max is None else [c * r_max for c in counts]
    layer_totals = proportional_allocation(_normal_density(len(counts)),
                                           rank_budget, floor=counts, cap=caps)
    return [
        proportional_allocation(np.ones(c), layer_total, floor=1, cap=r_max)
        for c, layer_total in zip(counts, layer_totals)
    ]


def normal_plan(layer_count: int, expert_budget: int, rank_budget: int = 40,
                modules=ALL_TARGETS, e_max: int = 8, r_max: int = 8) -> AllocationPlan:
    """Combined normal-profile expert and rank allocation as one plan."""
    counts = normal_e_allocation(layer_count, expert_budget, e_max=e_max)
    ranks = normal_r_allocation(counts, rank_budget, r_max=r_max)
    return _plan_with_counts(counts, ranks, modules, e_max, r_max, "normal_e_r")
