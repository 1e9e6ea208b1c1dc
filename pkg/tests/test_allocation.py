import json

import numpy as np
import pytest

from guilomo.allocation import (
    AllocationPlan,
    ModuleAllocation,
    PlanError,
    extract_plan,
    materialize,
    mola_group_allocation,
    normal_e_allocation,
    normal_plan,
    normal_r_allocation,
    plan_from_gsvs,
    plan_total_rank,
    proportional_allocation,
    trainable_parameter_count,
    uniform_allocation,
    uniform_budget_allocation,
)
from guilomo.gsv import GuidedSelectionVector
from guilomo.model import ALL_TARGETS, ToyTransformer, ToyTransformerConfig

SMALL = ToyTransformerConfig(layers=2, d_model=8, d_ff=16, heads=2, vocab=10,
                             max_seq=10)


def gsv_with_peak(size, peak, kind):
    logits = np.zeros(size)
    logits[peak - 1] = 9.0
    return GuidedSelectionVector(logits, kind)


# -- extraction ---------------------------------------------------------------


def test_plan_from_gsvs_argmax_composition():
    expert = gsv_with_peak(8, 3, "expert")
    ranks = [gsv_with_peak(8, m, "rank") for m in (5, 2, 8, 1, 1, 1, 1, 1)]
    plan = plan_from_gsvs([{"q": (expert, ranks)}], e_max=8, r_max=8)
    alloc = plan.layers[0]["q"]
    assert alloc.expert_count == 3
    assert alloc.ranks == [5, 2, 8]


def test_plan_from_gsvs_tie_rule_gives_minimal_plan():
    expert = GuidedSelectionVector(np.zeros(8), "expert")
    ranks = [GuidedSelectionVector(np.zeros(8), "rank") for _ in range(8)]
    plan = plan_from_gsvs([{"q": (expert, ranks)}], e_max=8, r_max=8)
    assert plan.layers[0]["q"].expert_count == 1
    assert plan.layers[0]["q"].ranks == [1]


def test_plan_from_gsvs_missing_gsv_names_module():
    with pytest.raises(PlanError, match="layer 0 module q"):
        plan_from_gsvs([{"q": None}], e_max=8, r_max=8)
    expert = gsv_with_peak(8, 4, "expert")
    with pytest.raises(PlanError, match="missing rank GSVs"):
        plan_from_gsvs([{"q": (expert, [gsv_with_peak(8, 1, "rank")])}],
                       e_max=8, r_max=8)


def test_extract_plan_deterministic():
    model = ToyTransformer(SMALL, e_max=3, r_max=4, seed=5)
    a = extract_plan(model).to_json()
    b = extract_plan(model).to_json()
    assert a == b


# -- plan serialization and validation ----------------------------------------


def test_plan_round_trip_bit_exact(tmp_path):
    plan = uniform_allocation(3, ALL_TARGETS, n_experts=2, rank=4)
    path = tmp_path / "plan.json"
    plan.save(path)
    loaded = AllocationPlan.load(path)
    loaded.save(tmp_path / "plan2.json")
    assert path.read_bytes() == (tmp_path / "plan2.json").read_bytes()


def test_plan_validation_errors_name_constraint():
    with pytest.raises(PlanError, match="expert_count"):
        AllocationPlan(layers=[{"q": ModuleAllocation(9, [1] * 9)}],
                       e_max=8, r_max=8, source="uniform")
    with pytest.raises(PlanError, match="ranks list length"):
        AllocationPlan(layers=[{"q": ModuleAllocation(2, [1])}],
                       e_max=8, r_max=8, source="uniform")
    with pytest.raises(PlanError, match="rank 9"):
        AllocationPlan(layers=[{"q": ModuleAllocation(1, [9])}],
                       e_max=8, r_max=8, source="uniform")
    with pytest.raises(PlanError, match="source"):
        AllocationPlan(layers=[{"q": ModuleAllocation(1, [1])}],
                       e_max=8, r_max=8, source="bogus")
    with pytest.raises(PlanError, match="unknown module"):
        AllocationPlan(layers=[{"zz": ModuleAllocation(1, [1])}],
                       e_max=8, r_max=8, source="uniform")


def test_invalid_plan_file_rejected(tmp_path):
    plan = uniform_allocation(2, ("q",), n_experts=2, rank=4)
    doc = plan.to_json_dict()
    doc["layers"][0]["q"]["ranks"] = [4, 9]
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(doc))
    with pytest.raises(PlanError, match="rank 9"):
        AllocationPlan.load(path)


# -- materialization -----------------------------------------------------------


def test_materialize_full_plan_forward_equivalence():
    model = ToyTransformer(SMALL, e_max=3, r_max=4, seed=6)
    rng = np.random.default_rng(6)
    for p in model.named_model_parameters().values():
        p.values = rng.normal(0, 0.05, p.shape)
    for mod in model.search_modules().values():
        mod.expert_gsv.logits.values = np.array([0.0, 0.0, 9.0])
        for gsv in mod.rank_gsvs:
            gsv.logits.values = np.array([0.0, 0.0, 0.0, 9.0])
    plan = extract_plan(model)
    final = materialize(plan, model)
    tokens = np.random.default_rng(7).integers(0, SMALL.vocab, (4, 6))
    search_logits, _ = model.forward(tokens)
    final_logits, _ = final.forward(tokens)
    assert np.abs(search_logits.values - final_logits.values).max() <= 1e-10


def test_materialize_truncates_and_copies_weights():
    model = ToyTransformer(SMALL, e_max=3, r_max=4, seed=8)
    rng = np.random.default_rng(8)
    weights = {name: rng.normal(size=p.shape)
               for name, p in model.named_model_parameters().items()}
    plan = uniform_allocation(SMALL.layers, SMALL.lora_targets, n_experts=2,
                              rank=3, e_max=3, r_max=4)
    final = materialize(plan, model, weights=weights)
    mod = final.adapters[(0, "q")]
    assert mod.router.weight.shape == (SMALL.d_model, 2)
    assert np.array_equal(mod.router.weight.values,
                          weights["layer0.q.router"][:, :2])
    ex = mod.experts[1]
    assert ex.P.shape == (SMALL.d_model, 3)
    assert np.array_equal(ex.P.values, weights["layer0.q.expert1.P"][:, :3])
    assert np.array_equal(ex.lam.values, weights["layer0.q.expert1.lam"][:3])
    assert np.array_equal(ex.Q.values, weights["layer0.q.expert1.Q"][:3, :])


def test_materialize_parameter_count_closed_form():
    # Enumerated tensor sizes must equal the closed-form count
    # sum over modules of [sum_j (d1+d2+1)*r_j + d2*e_star].
    rng = np.random.default_rng(9)
    model = ToyTransformer(SMALL, e_max=4, r_max=4, seed=9)
    for trial in range(20):
        layers = []
        for _ in range(SMALL.layers):
            layer = {}
            for name in SMALL.lora_targets:
                e = int(rng.integers(1, 5))
                layer[name] = ModuleAllocation(
                    e, [int(rng.integers(1, 5)) for _ in range(e)])
            layers.append(layer)
        plan = AllocationPlan(layers=layers, e_max=4, r_max=4, source="uniform")
        final = materialize(plan, model)
        expected = 0
        for layer_idx in range(SMALL.layers):
            for name in SMALL.lora_targets:
                d1, d2 = SMALL.target_dims(name)
                alloc = plan.layers[layer_idx][name]
                expected += sum((d1 + d2 + 1) * r for r in alloc.ranks)
                expected += d2 * alloc.expert_count
        assert trainable_parameter_count(final) == expected


def test_materialize_minimal_module_count():
    model = ToyTransformer(
        ToyTransformerConfig(layers=1, d_model=8, d_ff=16, heads=2, vocab=10,
                             max_seq=8, lora_targets=("q",)),
        e_max=2, r_max=2, seed=10)
    plan = uniform_allocation(1, ("q",), n_experts=1, rank=1, e_max=2, r_max=2)
    final = materialize(plan, model)
    d = 8
    assert trainable_parameter_count(final) == d + d + 1 + d


def test_materialize_rejects_overbudget_plan():
    model = ToyTransformer(SMALL, e_max=3, r_max=4, seed=11)
    plan = uniform_allocation(SMALL.layers, SMALL.lora_targets, n_experts=5,
                              rank=4, e_max=5, r_max=4)
    with pytest.raises(PlanError, match="exceed"):
        materialize(plan, model)


def test_materialize_rejects_layer_mismatch():
    model = ToyTransformer(SMALL, e_max=3, r_max=4, seed=12)
    plan = uniform_allocation(5, SMALL.lora_targets, n_experts=2, rank=2,
                              e_max=3, r_max=4)
    with pytest.raises(PlanError, match="layers"):
        materialize(plan, model)


# -- baseline allocators --------------------------------------------------------


def test_uniform_allocation_mola5_uniform8():
    plan = uniform_allocation(4, ALL_TARGETS, n_experts=5, rank=8)
    for layer in plan.layers:
        for alloc in layer.values():
            assert alloc.expert_count == 5
            assert alloc.ranks == [8] * 5
            assert alloc.total_rank() == 40


def test_uniform_allocation_minimal_and_range_checks():
    plan = uniform_allocation(2, ("q",), n_experts=1, rank=1)
    assert plan.layers[0]["q"].ranks == [1]
    with pytest.raises(PlanError):
        uniform_allocation(2, ("q",), n_experts=9, rank=1)
    with pytest.raises(PlanError):
        uniform_allocation(2, ("q",), n_experts=1, rank=9)


def test_mola_group_allocation_spec_examples():
    plan = mola_group_allocation(32, (2, 4, 6, 8))
    assert plan.layers[9]["q"].expert_count == 4   # layer 10, 1-based
    mirror = mola_group_allocation(32, (8, 6, 4, 2))
    assert mirror.layers[29]["q"].expert_count == 2  # layer 30, 1-based
    total = sum(layer["q"].expert_count for layer in plan.layers)
    assert total == 160


def test_mola_group_rejects_indivisible_layers():
    with pytest.raises(PlanError, match="divisible"):
        mola_group_allocation(30, (2, 4, 6, 8))


def test_normal_e_budget_conservation_symmetry_unimodality():
    counts = normal_e_allocation(32, 160)
    assert sum(counts) == 160
    assert counts == counts[::-1]
    mid = max(counts)
    assert counts[len(counts) // 2] == mid or counts[len(counts) // 2 - 1] == mid
    assert min(counts[0], counts[-1]) == min(counts)
    diffs = np.diff(counts[:16])
    assert (diffs >= 0).all()


def test_normal_e_infeasible_budget():
    with pytest.raises(ValueError):
        normal_e_allocation(32, 31)


def test_normal_r_budget_and_symmetry():
    counts = [1, 3, 3, 1]
    ranks = normal_r_allocation(counts, rank_budget=40)
    totals = [sum(r) for r in ranks]
    assert sum(totals) == 40
    assert totals == totals[::-1]
    assert all(len(r) == c for r, c in zip(ranks, counts))
    assert all(min(r) >= 1 for r in ranks)


def test_normal_r_single_layer_takes_whole_budget():
    ranks = normal_r_allocation([2], rank_budget=40)
    assert sum(ranks[0]) == 40


def test_normal_r_infeasible():
    with pytest.raises(ValueError):
        normal_r_allocation([8] * 8, rank_budget=40)


def test_normal_plan_is_valid_and_sourced():
    plan = normal_plan(4, expert_budget=10, rank_budget=40, e_max=8, r_max=8)
    assert plan.source == "normal_e_r"
    assert sum(layer["q"].expert_count for layer in plan.layers) == 10


def test_proportional_allocation_conserves_and_respects_floor():
    out = proportional_allocation([1.0, 2.0, 3.0], 10, floor=1)
    assert sum(out) == 10 and min(out) >= 1
    out = proportional_allocation([10.0, 1.0, 1.0], 6, floor=1, cap=3)
    assert sum(out) == 6 and max(out) <= 3


def test_uniform_budget_allocation_exact_budget():
    plan = uniform_budget_allocation(4, ALL_TARGETS, n_experts=2, total_rank=173)
    assert plan_total_rank(plan) == 173
    for layer in plan.layers:
        for alloc in layer.values():
            assert alloc.expert_count == 2
