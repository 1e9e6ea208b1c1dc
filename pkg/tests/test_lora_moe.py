import numpy as np
import pytest

from guilomo.gsv import build_expert_mask, build_rank_mask, init_gsv
from guilomo.lora_moe import (
    LoRAMoELayerState,
    Router,
    RoutingStats,
    balance_loss,
    expert_delta,
    layer_forward_final,
    layer_forward_search,
    make_expert,
    masked_routing,
)
from guilomo.numerics import (
    NonFiniteError,
    Tensor,
    finite_difference_check,
    tsum,
)

D1, D2, EMAX, RMAX = 6, 5, 4, 4


def build_module(seed=0, scale_mode="alpha_over_r", routing_k=2,
                 randomize=True) -> LoRAMoELayerState:
    rng = np.random.default_rng(seed)
    experts = [make_expert(D1, D2, RMAX, alpha=16.0, seed=seed * 100 + j)
               for j in range(EMAX)]
    if randomize:
        for ex in experts:
            ex.P.values = rng.normal(0, 0.2, ex.P.shape)
            ex.lam.values = rng.normal(1.0, 0.1, ex.lam.shape)
    router = Router(Tensor(rng.normal(0, 0.5, (D2, EMAX)), requires_grad=True))
    return LoRAMoELayerState(
        W0=Tensor(rng.normal(0, 0.3, (D1, D2))),
        router=router,
        experts=experts,
        expert_gsv=init_gsv(EMAX, seed=seed, kind="expert"),
        rank_gsvs=[init_gsv(RMAX, seed=seed * 7 + j, kind="rank") for j in range(EMAX)],
        routing_k=routing_k,
        scale_mode=scale_mode,
        name=f"test{seed}",
    )


def force_selection(mod, n_star, m_stars):
    logits = np.zeros(EMAX)
    logits[n_star - 1] = 9.0
    mod.expert_gsv.logits.values = logits
    for gsv, m in zip(mod.rank_gsvs, m_stars):
        rl = np.zeros(RMAX)
        rl[m - 1] = 9.0
        gsv.logits.values = rl


# -- expert_delta -------------------------------------------------------------


def test_expert_delta_reduces_to_plain_low_rank():
    expert = make_expert(D1, D2, RMAX, alpha=16.0, seed=1)
    rng = np.random.default_rng(1)
    expert.P.values = rng.normal(size=expert.P.shape)
    x = Tensor(rng.normal(size=D2))
    out = expert_delta(expert, x, build_rank_mask(RMAX, RMAX), scale_mode="off")
    expected = expert.P.values @ (expert.Q.values @ x.values)
    assert np.allclose(out.values, expected, atol=1e-12)


def test_expert_delta_rank_one_path():
    expert = make_expert(D1, D2, RMAX, alpha=16.0, seed=2)
    expert.Q.values = np.zeros((RMAX, D2))
    expert.Q.values[0, 0] = 1.0
    expert.P.values = np.zeros((D1, RMAX))
    expert.P.values[0, 0] = 1.0
    expert.lam.values = np.full(RMAX, 3.5)
    x = Tensor(np.eye(D2)[0])
    out = expert_delta(expert, x, build_rank_mask(1, RMAX), scale_mode="off")
    expected = np.zeros(D1)
    expected[0] = 3.5
    assert np.allclose(out.values, expected)


def test_expert_delta_full_mask_equals_zeroed_trailing_lambda():
    # Dense-evaluation equivalence oracle: masking ranks > m is the same
    # computation as zeroing the trailing lambda entries.
    rng = np.random.default_rng(3)
    expert = make_expert(D1, D2, RMAX, alpha=16.0, seed=3)
    expert.P.values = rng.normal(size=expert.P.shape)
    expert.lam.values = rng.normal(size=expert.lam.shape)
    x = Tensor(rng.normal(size=(7, D2)))
    m = 2
    masked = expert_delta(expert, x, build_rank_mask(m, RMAX), scale_mode="off")
    lam = expert.lam.values.copy()
    zeroed = lam.copy()
    zeroed[m:] = 0.0
    dense = ((x.values @ expert.Q.values.T) * zeroed) @ expert.P.values.T
    assert np.allclose(masked.values, dense, atol=1e-12)


def test_expert_delta_scale_mode():
    expert = make_expert(D1, D2, RMAX, alpha=16.0, seed=4)
    rng = np.random.default_rng(4)
    expert.P.values = rng.normal(size=expert.P.shape)
    x = Tensor(rng.normal(size=D2))
    mask = build_rank_mask(2, RMAX)
    off = expert_delta(expert, x, mask, scale_mode="off")
    scaled = expert_delta(expert, x, mask, scale_mode="alpha_over_r")
    assert np.allclose(scaled.values, off.values * (16.0 / 2))


def test_expert_delta_linear_in_x():
    rng = np.random.default_rng(5)
    expert = make_expert(D1, D2, RMAX, alpha=16.0, seed=5)
    expert.P.values = rng.normal(size=expert.P.shape)
    mask = build_rank_mask(3, RMAX)
    x, y = rng.normal(size=D2), rng.normal(size=D2)
    a, b = 1.7, -0.4
    combined = expert_delta(expert, Tensor(a * x + b * y), mask)
    separate = a * expert_delta(expert, Tensor(x), mask).values + \
        b * expert_delta(expert, Tensor(y), mask).values
    assert np.allclose(combined.values, separate, atol=1e-9)


def test_expert_delta_rejects_wrong_mask():
    expert = make_expert(D1, D2, RMAX, alpha=16.0, seed=6)
    with pytest.raises(ValueError):
        expert_delta(expert, Tensor(np.zeros(D2)), build_expert_mask(2, RMAX))


# -- masked_routing -----------------------------------------------------------


def test_routing_single_active_expert_gets_weight_one():
    mod = build_module(seed=7)
    rng = np.random.default_rng(7)
    for _ in range(5):
        x = Tensor(rng.normal(size=D2))
        w = masked_routing(x, mod.router, build_expert_mask(1, EMAX), k=2)
        assert np.allclose(w.values, np.eye(EMAX)[0])


def test_routing_uniform_logits_tie_break():
    router = Router(Tensor(np.zeros((D2, EMAX))))
    x = Tensor(np.ones(D2))
    w = masked_routing(x, router, build_expert_mask(EMAX, EMAX), k=2)
    assert np.allclose(w.values, [0.5, 0.5, 0.0, 0.0])


def test_routing_zero_beyond_n_star_and_sums_to_one():
    mod = build_module(seed=8)
    rng = np.random.default_rng(8)
    for n_star in range(1, EMAX + 1):
        for _ in range(25):
            x = Tensor(rng.normal(size=(3, D2)))
            w = masked_routing(x, mod.router, build_expert_mask(n_star, EMAX), k=2)
            assert np.all(w.values[..., n_star:] == 0.0)
            assert np.allclose(w.values.sum(-1), 1.0, atol=1e-9)


def test_routing_rejects_multiplicative_mask():
    mod = build_module(seed=9)
    with pytest.raises(ValueError):
        masked_routing(Tensor(np.zeros(D2)), mod.router, build_rank_mask(2, EMAX), k=2)


# -- layer forwards -----------------------------------------------------------


def test_search_forward_zero_experts_is_base_only():
    mod = build_module(seed=10, randomize=False)  # P stays zero-initialized
    x = Tensor(np.random.default_rng(10).normal(size=(2, 3, D2)))
    h, _ = layer_forward_search(x, mod)
    assert np.allclose(h.values, x.values @ mod.W0.values.T, atol=1e-12)


def test_search_forward_single_expert_reduction():
    mod = build_module(seed=11, scale_mode="off")
    force_selection(mod, n_star=1, m_stars=[RMAX] * EMAX)
    mod.experts[0].lam.values = np.ones(RMAX)
    rng = np.random.default_rng(11)
    x = Tensor(rng.normal(size=(4, D2)))
    h, _ = layer_forward_search(x, mod)
    e = mod.experts[0]
    expected = x.values @ mod.W0.values.T + (x.values @ e.Q.values.T) @ e.P.values.T
    assert np.abs(h.values - expected).max() < 1e-10


def test_search_forward_nonfinite_raises_with_name():
    mod = build_module(seed=12)
    mod.W0.values = np.full((D1, D2), np.nan)
    with pytest.raises(NonFiniteError, match="test12"):
        layer_forward_search(Tensor(np.ones((1, D2))), mod)


def test_search_forward_gradcheck_all_parameter_kinds():
    mod = build_module(seed=13)
    force_selection(mod, n_star=3, m_stars=[2, 4, 1, 3])
    rng = np.random.default_rng(13)
    x = Tensor(rng.normal(size=(3, D2)))

    def f():
        h, stats = layer_forward_search(x, mod)
        return tsum(h * h) + balance_loss(stats, 1e-3)

    def signature():
        _, stats = layer_forward_search(x, mod)
        return stats.selection_pattern

    params = {
        "P": mod.experts[0].P,
        "lam": mod.experts[1].lam,
        "Q": mod.experts[2].Q,
        "router": mod.router.weight,
    }
    report = finite_difference_check(f, params, step=1e-5, tol=1e-4,
                                     samples_per_param=8,
                                     rng=np.random.default_rng(99),
                                     signature_fn=signature)
    assert report.passed, [(p.name, p.max_rel_error) for p in report.params]


def test_materialized_full_plan_matches_search_path():
    from guilomo.lora_moe import MaterializedExpert, MaterializedModule

    mod = build_module(seed=14)
    force_selection(mod, n_star=EMAX, m_stars=[RMAX] * EMAX)
    final = MaterializedModule(
        W0=mod.W0,
        router=Router(Tensor(mod.router.weight.values.copy())),
        experts=[
            MaterializedExpert(P=Tensor(e.P.values.copy()),
                               lam=Tensor(e.lam.values.copy()),
                               Q=Tensor(e.Q.values.copy()), alpha=e.alpha)
            for e in mod.experts
        ],
        routing_k=mod.routing_k,
        scale_mode=mod.scale_mode,
    )
    x = Tensor(np.random.default_rng(14).normal(size=(5, D2)))
    hs, _ = layer_forward_search(x, mod)
    hf, _ = layer_forward_final(x, final)
    assert np.abs(hs.values - hf.values).max() <= 1e-10


def test_final_forward_single_expert_weight_one():
    from guilomo.lora_moe import MaterializedExpert, MaterializedModule

    rng = np.random.default_rng(15)
    final = MaterializedModule(
        W0=Tensor(rng.normal(size=(D1, D2))),
        router=Router(Tensor(rng.normal(size=(D2, 1)))),
        experts=[MaterializedExpert(P=Tensor(rng.normal(size=(D1, 2))),
                                    lam=Tensor(np.ones(2)),
                                    Q=Tensor(rng.normal(size=(2, D2))),
                                    alpha=16.0)],
    )
    x = Tensor(rng.normal(size=(3, D2)))
    _, stats = layer_forward_final(x, final)
    assert np.allclose(stats.mean_probability.values, [1.0])


def test_search_forward_frozen_base_gets_no_grad():
    mod = build_module(seed=16)
    x = Tensor(np.random.default_rng(16).normal(size=(2, D2)))
    h, stats = layer_forward_search(x, mod)
    (tsum(h) + balance_loss(stats, 1e-3)).backward()
    assert mod.W0.grad is None
    assert mod.router.weight.grad is not None


def test_routing_weights_distribution_property():
    mod = build_module(seed=17)
    rng = np.random.default_rng(17)
    for n_star in range(1, EMAX + 1):
        force_selection(mod, n_star, [2] * EMAX)
        x = Tensor(rng.normal(size=(6, D2)))
        h, stats = layer_forward_search(x, mod)
        assert abs(stats.assigned_fraction.sum() - 1.0) < 1e-9
        assert np.allclose(stats.mean_probability.values[n_star:], 0.0)
        assert abs(stats.mean_probability.values.sum() - 1.0) < 1e-9


# -- balance loss -------------------------------------------------------------


def test_balance_loss_uniform_equals_coefficient():
    for n in range(1, 9):
        stats = RoutingStats.from_fractions(np.full(n, 1.0 / n), np.full(n, 1.0 / n))
        assert abs(balance_loss(stats, 1e-3).item() - 1e-3) < 1e-12


def test_balance_loss_single_expert():
    stats = RoutingStats.from_fractions([1.0], [1.0])
    assert abs(balance_loss(stats, 1e-3).item() - 1e-3) < 1e-15


def test_balance_loss_direct_evaluation():
    stats = RoutingStats.from_fractions([0.5, 0.25, 0.25], [0.5, 0.25, 0.25])
    assert abs(balance_loss(stats, 1e-3).item() - 1.125e-3) < 1e-12


def test_balance_loss_lower_bound_uniform_is_minimum():
    rng = np.random.default_rng(18)
    for _ in range(100):
        n = int(rng.integers(2, 9))
        f = rng.dirichlet(np.ones(n))
        loss = balance_loss(RoutingStats.from_fractions(f, f), 1e-3).item()
        assert loss >= 1e-3 - 1e-12
        if np.abs(f - 1.0 / n).max() > 1e-6:
            assert loss > 1e-3


def test_balance_loss_empty_batch_rejected():
    stats = RoutingStats(assigned_fraction=np.array([1.0]),
                         mean_probability=Tensor([1.0]), tokens=0)
    with pytest.raises(ValueError):
        balance_loss(stats, 1e-3)
