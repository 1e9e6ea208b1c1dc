"""Experiment orchestration: wiring configs to searches, plans, and models.

These functions are the substance behind the command-line entry points
and are equally usable from scripts and tests.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .allocation import (
    AllocationPlan,
    extract_plan,
    materialize,
    mola_group_allocation,
    normal_plan,
    plan_total_rank,
    trainable_parameter_count,
    uniform_allocation,
    uniform_budget_allocation,
)
from .bilevel import SearchResult, SearchState, run_search, split_dataset
from .checkpoint import CheckpointError, load_arrays, save_arrays
from .config import RunConfig, run_config_from_dict
from .model import ToyTransformer
from .tasks import TaskData, generate_task
from .training import combined_loss, evaluate_model, finetune

__all__ = [
    "build_model",
    "build_data",
    "make_loss_fn",
    "run_search_experiment",
    "save_search_checkpoint",
    "load_search_checkpoint",
    "save_final_model",
    "load_final_model",
    "build_baseline_plan",
    "write_search_metrics",
    "compare_strategies",
]


def build_model(cfg: RunConfig) -> ToyTransformer:
    return ToyTransformer(
        cfg.model, e_max=cfg.e_max, r_max=cfg.r_max, lora_alpha=cfg.lora_alpha,
        scale_mode=cfg.scale_mode, routing_k=cfg.routing_k, seed=cfg.seed,
    )


def build_data(cfg: RunConfig) -> tuple[TaskData, TaskData]:
    return generate_task(cfg.task, cfg.model.vocab)


def make_loss_fn(c_balance: float):
    def loss_fn(model, batch):
        return combined_loss(model, batch, c_balance)
    return loss_fn


def run_search_experiment(cfg: RunConfig) -> tuple[SearchResult, AllocationPlan]:
    """Build the model and data for a config and run the full search."""
    model = build_model(cfg)
    train, _ = build_data(cfg)
    bcfg = cfg.resolved_bilevel(len(train))
    result = run_search(model, train, bcfg, make_loss_fn(cfg.c_balance))
    plan = extract_plan(model, source="guilomo", seed=cfg.seed)
    return result, plan


# -- checkpoint round-trips ---------------------------------------------------


def _search_arrays(state: SearchState, pi_star: dict[str, np.ndarray] | None) -> dict:
    model = state.model
    arrays: dict[str, np.ndarray] = {}
    for name, p in model.named_model_parameters().items():
        arrays[f"param/{name}"] = p.values
    for name, p in model.named_gsv_parameters().items():
        arrays[f"gsv/{name}"] = p.values
    for name, p in model.named_base().items():
        arrays[f"base/{name}"] = p.values
    for prefix, opt in (("opt_model", state.model_opt), ("opt_gsv", state.gsv_opt)):
        snap = opt.state_dict()
        for name, arr in snap.get("m", {}).items():
            arrays[f"{prefix}/m/{name}"] = arr
        for name, arr in snap.get("v", {}).items():
            arrays[f"{prefix}/v/{name}"] = arr
    if pi_star is not None:
        for name, arr in pi_star.items():
            arrays[f"pi_star/{name}"] = arr
    return arrays


def save_search_checkpoint(path, cfg: RunConfig, state: SearchState,
                           pi_star: dict[str, np.ndarray] | None = None) -> Path:
    manifest = {
        "kind": "search",
        "config": cfg.to_dict(),
        "step": state.t,
        "bilevel_T": state.cfg.T,
        "opt_model_t": getattr(state.model_opt, "t", 0),
        "opt_gsv_t": getattr(state.gsv_opt, "t", 0),
        "has_pi_star": pi_star is not None,
    }
    return save_arrays(path, _search_arrays(state, pi_star), manifest)


def _assign(values: dict[str, np.ndarray], prefix: str, tensors) -> None:
    for name, tensor in tensors.items():
        key = f"{prefix}/{name}"
        if key not in values:
            raise CheckpointError(f"checkpoint missing array {key}")
        tensor.values = values[key].reshape(tensor.shape)


def load_search_checkpoint(path) -> tuple[RunConfig, SearchState, dict[str, np.ndarray] | None]:
    """Rebuild a runnable search state from a checkpoint directory alone."""
    manifest, arrays = load_arrays(path)
    if manifest.get("kind") != "search":
        raise CheckpointError(f"{path}: not a search checkpoint")
    cfg = run_config_from_dict(manifest["config"])
    model = build_model(cfg)
    _assign(arrays, "param", model.named_model_parameters())
    _assign(arrays, "gsv", model.named_gsv_parameters())
    _assign(arrays, "base", model.named_base())
    train, _ = build_data(cfg)
    bcfg = cfg.resolved_bilevel(len(train))
    state = SearchState.create(model, bcfg, make_loss_fn(cfg.c_balance),
                               split=split_dataset(train, bcfg.seed))
    state.t = int(manifest["step"])
    for prefix, opt, t_key in (("opt_model", state.model_opt, "opt_model_t"),
                               ("opt_gsv", state.gsv_opt, "opt_gsv_t")):
        if hasattr(opt, "m"):
            snap = {
                "t": manifest.get(t_key, 0),
                "m": {name: arrays[f"{prefix}/m/{name}"] for name in opt.m},
                "v": {name: arrays[f"{prefix}/v/{name}"] for name in opt.v},
            }
            opt.load_state_dict(snap)
    pi_star = None
    if manifest.get("has_pi_star"):
        pi_star = {
            name[len("pi_star/"):]: arr
            for name, arr in arrays.items() if name.startswith("pi_star/")
        }
    return cfg, state, pi_star


def save_final_model(path, cfg: RunConfig, model: ToyTransformer,
                     plan: AllocationPlan) -> Path:
    arrays = {f"param/{name}": p.values for name, p in model.named_model_parameters().items()}
    arrays.update({f"base/{name}": p.values for name, p in model.named_base().items()})
    manifest = {
        "kind": "final",
        "config": cfg.to_dict(),
        "plan": plan.to_json_dict(),
    }
    return save_arrays(path, arrays, manifest)


def load_final_model(path) -> tuple[RunConfig, AllocationPlan, ToyTransformer]:
    manifest, arrays = load_arrays(path)
    if manifest.get("kind") != "final":
        raise CheckpointError(f"{path}: not a final-model checkpoint")
    cfg = run_config_from_dict(manifest["config"])
    plan = AllocationPlan.from_json_dict(manifest["plan"])
    model = materialize(plan, build_model(cfg))
    _assign(arrays, "param", model.named_model_parameters())
    _assign(arrays, "base", model.named_base())
    return cfg, plan, model


# -- baselines and comparison ----------------------------------------------


def build_baseline_plan(cfg: RunConfig, source: str,
                        match_total_rank: int | None = None) -> AllocationPlan:
    """A static allocation plan of the requested baseline family."""
    layers = cfg.model.layers
    modules = cfg.model.lora_targets
    alloc = cfg.allocation
    if source == "uniform":
        if match_total_rank is not None:
            return uniform_budget_allocation(
                layers, modules, n_experts=alloc.n_experts,
                total_rank=match_total_rank, e_max=cfg.e_max, r_max=cfg.r_max,
            )
        return uniform_allocation(layers, modules, n_experts=alloc.n_experts,
                                  rank=alloc.rank, e_max=cfg.e_max, r_max=cfg.r_max)
    if source == "mola_group":
        return mola_group_allocation(layers, alloc.group_counts, rank=alloc.rank,
                                     modules=modules, e_max=cfg.e_max, r_max=cfg.r_max)
    if source == "normal_e_r":
        budget = alloc.expert_budget if alloc.expert_budget is not None else 2 * layers
        return normal_plan(layers, budget, alloc.rank_budget, modules=modules,
                           e_max=cfg.e_max, r_max=cfg.r_max)
    raise ValueError(f"build_baseline_plan: unknown source {source!r}")


def write_search_metrics(path, history: list[dict]) -> Path:
    """Per-step CSV: losses plus the current selection of every module."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "loss_sft", "loss_bal", "module", "n_star", "m_stars"])
        for row in history:
            selections = row.get("selections", {})
            if not selections:
                writer.writerow([row["t"], f"{row['loss_sft']:.10g}",
                                 f"{row['loss_bal']:.10g}", "", "", ""])
            for module, (n_star, m_stars) in selections.items():
                writer.writerow([
                    row["t"], f"{row['loss_sft']:.10g}", f"{row['loss_bal']:.10g}",
                    module, n_star, "|".join(str(m) for m in m_stars),
                ])
    return path


def compare_strategies(cfg: RunConfig, strategies: list[str]) -> list[dict]:
    """Full protocol per strategy: plan, materialize, fine-tune, evaluate.

    The searched plan warm-starts from the search's lookahead weights;
    baselines train from fresh initialization, with the uniform baseline
    budget-matched to the searched plan when both are requested.
    """
    train, eval_data = build_data(cfg)
    searched_plan = None
    pi_star = None
    rows = []
    if "guilomo" in strategies:
        result, searched_plan = run_search_experiment(cfg)
        pi_star = result.pi_star
    for strategy in strategies:
        if strategy == "guilomo":
            if searched_plan is None:
                continue
            plan = searched_plan
            model = materialize(plan, build_model(cfg), weights=pi_star)
        else:
            match = plan_total_rank(searched_plan) if (
                strategy == "uniform" and searched_plan is not None
            ) else None
            plan = build_baseline_plan(cfg, strategy, match_total_rank=match)
            model = materialize(plan, build_model(cfg))
        finetune(model, train, epochs=cfg.finetune.epochs, lr=cfg.finetune.lr,
                 batch_size=cfg.finetune.batch_size, c_balance=cfg.c_balance,
                 seed=cfg.seed, schedule=cfg.finetune.schedule)
        metrics = evaluate_model(model, eval_data)
        rows.append({
            "strategy": strategy,
            "accuracy": metrics["accuracy"],
            "eval_loss": metrics["sft_loss"],
            "trainable_params": trainable_parameter_count(model),
            "total_rank": plan_total_rank(plan),
        })
    return rows
