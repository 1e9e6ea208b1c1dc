"""Post-hoc analysis of allocation plans.

Pure functions over immutable plans: expert-diversity scoring, totals
across layer ranges, rank-conserving perturbations, difficulty-ladder
statistics, and CSV/plot report emission.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .allocation import AllocationPlan, ModuleAllocation, PlanError, proportional_allocation
from .model import FFN_TARGETS, MHA_TARGETS
from .seeding import rng_for

__all__ = [
    "PerturbationSpec",
    "ed_score",
    "ed_bin",
    "ED_BINS",
    "layer_range_totals",
    "perturb",
    "difficulty_ladder_stats",
    "emit_report",
]

PERTURBATION_KINDS = ("IEN", "DEN", "MRA_half", "MRA_random")
MODULE_GROUPS = {"MHA": MHA_TARGETS, "FFN": FFN_TARGETS}

# Bin edges for the expert-diversity histogram; the last bin is closed.
ED_BINS = ((0.0, 0.25), (0.25, 0.5), (0.5, 0.75), (0.75, 1.0))


@dataclass
class PerturbationSpec:
    kind: str
    layer: int
    amount: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.kind not in PERTURBATION_KINDS:
            raise ValueError(f"PerturbationSpec: unknown kind {self.kind!r}")
        if self.layer < 0:
            raise ValueError("PerturbationSpec: layer must be >= 0")
        if self.kind != "MRA_random" and self.amount < 1:
            raise ValueError(f"PerturbationSpec: amount must be >= 1 for {self.kind}")


def ed_score(ranks) -> float:
    """Share of experts whose ranks are mutually distinct.

    Equals the size of the largest subset of pairwise-distinct ranks
    divided by the number of experts, which reduces to the number of
    distinct values over the list length.
    """
    ranks = list(ranks)
    if not ranks:
        raise ValueError("ed_score: empty rank list")
    return len(set(ranks)) / len(ranks)


def ed_bin(score: float) -> int:
    """Index of the histogram bin containing an ED score."""
    if not 0.0 <= score <= 1.0:
        raise ValueError(f"ed_bin: score {score} outside [0, 1]")
    return min(int(score / 0.25), 3)


def layer_range_totals(plan: AllocationPlan, ranges, module_group: str,
                       quantity: str = "rank") -> list[int]:
    """Totals of allocated rank or expert count per layer range.

    ``ranges`` is a list of half-open (start, stop) layer intervals;
    overlapping or out-of-bounds intervals are rejected. The module
    group selects the attention matrices (MHA) or feed-forward matrices
    (FFN); only modules present in the plan contribute.
    """
    if module_group not in MODULE_GROUPS:
        raise ValueError(f"layer_range_totals: unknown module group {module_group!r}")
    if quantity not in ("rank", "experts"):
        raise ValueError(f"layer_range_totals: unknown quantity {quantity!r}")
    depth = plan.layer_count
    checked = sorted((int(s), int(e)) for s, e in ranges)
    prev_end = None
    for start, stop in checked:
        if not 0 <= start < stop <= depth:
            raise ValueError(
                f"layer_range_totals: range ({start}, {stop}) outside [0, {depth}]"
            )
        if prev_end is not None and start < prev_end:
            raise ValueError("layer_range_totals: overlapping ranges")
        prev_end = stop
    names = MODULE_GROUPS[module_group]
    totals = []
    for start, stop in ranges:
        total = 0
        for layer in range(int(start), int(stop)):
            for name in names:
                alloc = plan.layers[layer].get(name)
                if alloc is None:
                    continue
                total += alloc.total_rank() if quantity == "rank" else alloc.expert_count
        totals.append(total)
    return totals


# -- perturbations -----------------------------------------------------------


def _ien(alloc: ModuleAllocation, amount: int, e_max: int, r_max: int,
         where: str) -> ModuleAllocation:
    new_e = alloc.expert_count + amount
    if new_e > e_max:
        raise PlanError(f"{where}: IEN would need {new_e} experts, e_max is {e_max}")
    total = alloc.total_rank()
    if total < new_e:
        raise PlanError(
            f"{where}: IEN cannot keep total rank {total} with {new_e} experts "
            f"at rank >= 1"
        )
    mean_rank = total / alloc.expert_count
    weights = [float(r) for r in alloc.ranks] + [mean_rank] * amount
    return ModuleAllocation(new_e, proportional_allocation(weights, total,
                                                           floor=1, cap=r_max))


def _den(alloc: ModuleAllocation, amount: int, r_max: int,
         where: str) -> ModuleAllocation:
    new_e = alloc.expert_count - amount
    if new_e < 1:
        raise PlanError(f"{where}: DEN would leave {new_e} experts")
    total = alloc.total_rank()
    if total > new_e * r_max:
        raise PlanError(
            f"{where}: DEN cannot fit total rank {total} into {new_e} experts "
            f"at r_max {r_max}"
        )
    weights = [float(r) for r in alloc.ranks[:new_e]]
    return ModuleAllocation(new_e, proportional_allocation(weights, total,
                                                           floor=1, cap=r_max))


def _mra_half(alloc: ModuleAllocation, amount: int, r_max: int,
              where: str) -> ModuleAllocation:
    n = alloc.expert_count
    raised = math.ceil(n / 2)
    lowered = n - raised
    new_ranks = list(alloc.ranks)
    for i in range(raised):
        new_ranks[i] += amount
    for i in range(raised, n):
        new_ranks[i] -= amount
    # An odd expert count leaves a surplus of one raise; the last raised
    # expert absorbs it so the total stays exact.
    new_ranks[raised - 1] -= amount * (raised - lowered)
    for r in new_ranks:
        if not 1 <= r <= r_max:
            raise PlanError(f"{where}: MRA_half pushes rank to {r}, outside [1, {r_max}]")
    return ModuleAllocation(n, new_ranks)


def _mra_random(alloc: ModuleAllocation, rng: np.random.Generator) -> ModuleAllocation:
    perm = rng.permutation(alloc.expert_count)
    return ModuleAllocation(alloc.expert_count, [alloc.ranks[i] for i in perm])


def perturb(plan: AllocationPlan, spec: PerturbationSpec) -> AllocationPlan:
    """A new plan with one layer's allocations perturbed, total rank intact.

    IEN adds experts and rescales ranks down proportionally; DEN removes
    experts and rescales up; MRA_half shifts rank between the two halves
    of the expert list; MRA_random shuffles ranks among experts. All
    other layers are copied unchanged.
    """
    if spec.layer >= plan.layer_count:
        raise PlanError(
            f"perturb: layer {spec.layer} outside plan depth {plan.layer_count}"
        )
    new_layers = []
    for layer_idx, layer in enumerate(plan.layers):
        if layer_idx != spec.layer:
            new_layers.append({
                name: ModuleAllocation(a.expert_count, list(a.ranks))
                for name, a in layer.items()
            })
            continue
        perturbed: dict[str, ModuleAllocation] = {}
        for name, alloc in layer.items():
            where = f"layer {layer_idx} module {name}"
            if spec.kind == "IEN":
                new_alloc = _ien(alloc, spec.amount, plan.e_max, plan.r_max, where)
            elif spec.kind == "DEN":
                new_alloc = _den(alloc, spec.amount, plan.r_max, where)
            elif spec.kind == "MRA_half":
                new_alloc = _mra_half(alloc, spec.amount, plan.r_max, where)
            else:
                new_alloc = _mra_random(
                    alloc, rng_for(spec.seed, "mra_random", layer_idx, name)
                )
            if new_alloc.total_rank() != alloc.total_rank():
                raise PlanError(f"{where}: perturbation changed total rank")
            perturbed[name] = new_alloc
        new_layers.append(perturbed)
    return AllocationPlan(layers=new_layers, e_max=plan.e_max, r_max=plan.r_max,
                          source="perturbed", seed=spec.seed)


# -- aggregate statistics ------------------------------------------------------


def _plan_module_stats(plan: AllocationPlan) -> tuple[list[int], list[int]]:
    experts = []
    ranks = []
    for layer in plan.layers:
        for alloc in layer.values():
            experts.append(alloc.expert_count)
            ranks.extend(alloc.ranks)
    return experts, ranks


def difficulty_ladder_stats(plans_by_difficulty: dict[int, AllocationPlan]) -> list[dict]:
    """Mean experts per module and mean rank per expert per difficulty level."""
    if not plans_by_difficulty:
        raise ValueError("difficulty_ladder_stats: empty plan set")
    if len(plans_by_difficulty) < 2:
        raise ValueError("difficulty_ladder_stats: need at least 2 difficulty levels")
    rows = []
    for difficulty in sorted(plans_by_difficulty):
        experts, ranks = _plan_module_stats(plans_by_difficulty[difficulty])
        rows.append({
            "difficulty": difficulty,
            "avg_experts": sum(experts) / len(experts),
            "avg_rank": sum(ranks) / len(ranks),
        })
    return rows


# -- report emission -----------------------------------------------------------


def _default_ranges(depth: int) -> list[tuple[int, int]]:
    if depth >= 4 and depth % 4 == 0:
        size = depth // 4
        return [(i * size, (i + 1) * size) for i in range(4)]
    return [(0, depth)]


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _fmt(value) -> str:
    return f"{value:.6g}" if isinstance(value, float) else str(value)


def emit_report(plans: dict[str, AllocationPlan], metrics: dict[str, list[dict]] | None,
                out_dir) -> list[Path]:
    """Write CSV tables and plot images summarizing a set of labeled plans.

    Always writes ``ed_distribution.csv``, ``layer_range_totals.csv``, and
    ``ladder_stats.csv`` (headers only when there is nothing to report),
    plus one CSV per extra metrics table. Plot images are advisory and
    only produced when there is data.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    bin_counts = [0, 0, 0, 0]
    for label in sorted(plans):
        for layer in plans[label].layers:
            for alloc in layer.values():
                bin_counts[ed_bin(ed_score(alloc.ranks))] += 1
    path = out / "ed_distribution.csv"
    _write_csv(path, ["bin_low", "bin_high", "count"],
               [[_fmt(lo), _fmt(hi), count]
                for (lo, hi), count in zip(ED_BINS, bin_counts)] if plans else [])
    written.append(path)

    range_rows = []
    for label in sorted(plans):
        plan = plans[label]
        ranges = _default_ranges(plan.layer_count)
        present = set(plan.module_names())
        for group, names in MODULE_GROUPS.items():
            if not present.intersection(names):
                continue
            ranks = layer_range_totals(plan, ranges, group, "rank")
            experts = layer_range_totals(plan, ranges, group, "experts")
            for (start, stop), rank_total, expert_total in zip(ranges, ranks, experts):
                range_rows.append([label, start, stop, group, expert_total, rank_total])
    path = out / "layer_range_totals.csv"
    _write_csv(path, ["plan", "range_start", "range_stop", "group",
                      "total_experts", "total_rank"], range_rows)
    written.append(path)

    ladder: dict[int, AllocationPlan] = {}
    for label, plan in plans.items():
        digits = label.lstrip("Kk")
        if digits.isdigit():
            ladder[int(digits)] = plan
    ladder_rows = []
    if len(ladder) >= 2:
        ladder_rows = [
            [row["difficulty"], _fmt(row["avg_experts"]), _fmt(row["avg_rank"])]
            for row in difficulty_ladder_stats(ladder)
        ]
    path = out / "ladder_stats.csv"
    _write_csv(path, ["difficulty", "avg_experts", "avg_rank"], ladder_rows)
    written.append(path)

    for key in sorted(metrics or {}):
        rows = metrics[key]
        if not rows:
            continue
        header = list(rows[0].keys())
        path = out / f"{key}.csv"
        _write_csv(path, header, [[_fmt(row.get(h, "")) for h in header] for row in rows])
        written.append(path)

    if plans:
        written.extend(_plot_reports(out, bin_counts, range_rows))
    return written


def _plot_reports(out: Path, bin_counts: list[int], range_rows: list[list]) -> list[Path]:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    written = []
    labels = [f"[{lo:.2f}, {hi:.2f}{']' if hi == 1.0 else ')'}" for lo, hi in ED_BINS]
    fig, ax = plt.subplots(figsize=(5, 4))
    if sum(bin_counts):
        ax.pie(bin_counts, labels=labels, autopct="%1.1f%%")
    ax.set_title("Expert diversity score distribution")
    path = out / "ed_distribution.png"
    fig.savefig(path, dpi=100)
    plt.close(fig)
    written.append(path)

    if range_rows:
        fig, ax = plt.subplots(figsize=(7, 4))
        keys = [f"{r[0]} {r[3]} {r[1]}-{r[2]}" for r in range_rows]
        ax.bar(range(len(range_rows)), [r[5] for r in range_rows])
        ax.set_xticks(range(len(range_rows)))
        ax.set_xticklabels(keys, rotation=75, fontsize=6)
        ax.set_ylabel("total rank")
        ax.set_title("Total allocated rank by layer range")
        fig.tight_layout()
        path = out / "layer_range_totals.png"
        fig.savefig(path, dpi=100)
        plt.close(fig)
        written.append(path)
    return written
