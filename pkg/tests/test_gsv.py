import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from guilomo.gsv import (
    NEG_LARGE,
    GuidedSelectionVector,
    build_expert_mask,
    build_rank_mask,
    init_gsv,
    ste_mask,
    stge_backward,
)
from guilomo.numerics import Tensor, tsum


def test_init_deterministic_per_seed():
    a = init_gsv(8, seed=42, kind="expert")
    b = init_gsv(8, seed=42, kind="expert")
    assert np.array_equal(a.logits.values, b.logits.values)
    c = init_gsv(8, seed=43, kind="expert")
    assert not np.array_equal(a.logits.values, c.logits.values)


def test_probabilities_sum_to_one():
    for seed in range(10):
        gsv = init_gsv(8, seed=seed, kind="rank")
        assert abs(gsv.probabilities().sum() - 1.0) < 1e-9
        assert (gsv.probabilities() > 0).all()


def test_init_rejects_zero_size():
    with pytest.raises(ValueError):
        init_gsv(0, seed=0, kind="expert")


def test_init_rejects_unknown_kind():
    with pytest.raises(ValueError):
        init_gsv(4, seed=0, kind="bogus")


def test_logits_standard_normal_monte_carlo():
    # Aggregate over many independently seeded draws; mean of 1e5 samples
    # of a standard normal lies within 0.02 of zero with huge margin.
    draws = np.concatenate([
        init_gsv(8, seed=s, kind="expert").logits.values for s in range(12500)
    ])
    assert draws.size == 100_000
    assert abs(draws.mean()) < 0.02
    assert abs(draws.std() - 1.0) < 0.02


def test_selected_index_basic():
    gsv = GuidedSelectionVector(np.array([0.1, 2.0, -1.0]), "expert")
    assert gsv.selected_index() == 2


def test_selected_index_tie_goes_low():
    gsv = GuidedSelectionVector(np.zeros(5), "expert")
    assert gsv.selected_index() == 1


def test_selected_index_strict_maximum():
    gsv = GuidedSelectionVector(np.array([1.0, 1.0 + 1e-12, 1.0]), "rank")
    assert gsv.selected_index() == 2


def test_selected_index_shift_invariant():
    rng = np.random.default_rng(3)
    for _ in range(20):
        logits = rng.normal(size=6)
        base = GuidedSelectionVector(logits, "expert").selected_index()
        shifted = GuidedSelectionVector(logits + 123.456, "expert").selected_index()
        assert base == shifted


def test_expert_mask_worked_example():
    mask = build_expert_mask(3, 8)
    expected = np.array([0.0, 0.0, 0.0] + [NEG_LARGE] * 5)
    assert np.array_equal(mask.entries, expected)
    assert mask.form == "additive" and mask.selection == 3


def test_expert_mask_extremes():
    assert np.array_equal(build_expert_mask(8, 8).entries, np.zeros(8))
    one = build_expert_mask(1, 8).entries
    assert one[0] == 0.0 and (one[1:] == NEG_LARGE).all()


def test_rank_mask_worked_example():
    mask = build_rank_mask(4, 8)
    assert np.array_equal(mask.entries, [1, 1, 1, 1, 0, 0, 0, 0])
    assert mask.form == "multiplicative" and mask.selection == 4


def test_rank_mask_extremes():
    assert np.array_equal(build_rank_mask(8, 8).entries, np.ones(8))
    assert np.array_equal(build_rank_mask(1, 4).entries, [1, 0, 0, 0])


def test_mask_range_checks():
    with pytest.raises(ValueError):
        build_expert_mask(0, 8)
    with pytest.raises(ValueError):
        build_expert_mask(9, 8)
    with pytest.raises(ValueError):
        build_rank_mask(0, 8)
    with pytest.raises(ValueError):
        build_rank_mask(5, 4)


@given(st.integers(min_value=1, max_value=16), st.data())
@settings(max_examples=60, deadline=None)
def test_mask_rebuild_bijection(size, data):
    selection = data.draw(st.integers(min_value=1, max_value=size))
    for build in (build_expert_mask, build_rank_mask):
        mask = build(selection, size)
        rebuilt = build(mask.selection, size)
        assert np.array_equal(mask.entries, rebuilt.entries)
        assert rebuilt.selection == selection


def test_stge_backward_multiplicative_example():
    mask = build_rank_mask(3, 8)
    grad = np.array([0.2, -0.1, 0.3, 0.5, 0.1, 0.1, 0.1, 0.1])
    out = stge_backward(grad, mask)
    expected = np.zeros(8)
    expected[2] = 0.4
    assert np.allclose(out, expected)


def test_stge_backward_additive_example():
    mask = build_expert_mask(2, 5)
    a, b, c = 0.7, -0.2, 9.9
    out = stge_backward(np.array([a, b, c, 1.0, 1.0]), mask)
    expected = np.zeros(5)
    expected[1] = a + b
    assert np.allclose(out, expected)


def test_stge_backward_zero_gradient():
    for mask in (build_rank_mask(4, 8), build_expert_mask(4, 8)):
        out = stge_backward(np.zeros(8), mask)
        assert np.array_equal(out, np.zeros(8))


def test_stge_backward_single_nonzero_at_selection():
    rng = np.random.default_rng(0)
    for _ in range(50):
        size = int(rng.integers(1, 9))
        sel = int(rng.integers(1, size + 1))
        grad = rng.normal(size=size)
        for build in (build_expert_mask, build_rank_mask):
            out = stge_backward(grad, build(sel, size))
            nz = np.nonzero(out)[0]
            assert len(nz) <= 1
            if len(nz) == 1:
                assert nz[0] == sel - 1


def test_stge_backward_length_mismatch():
    with pytest.raises(ValueError):
        stge_backward(np.zeros(3), build_rank_mask(2, 4))


def test_ste_mask_node_forwards_entries_and_chains_softmax():
    # Gradient path: logits -> softmax -> mask node -> loss. The loss
    # gradient w.r.t. the logits must equal the softmax Jacobian applied
    # to the surrogate single-position gradient.
    logits = Tensor(np.array([0.3, 1.2, -0.5, 0.1]), requires_grad=True)
    gsv = GuidedSelectionVector(logits.values.copy(), "rank")
    mask = build_rank_mask(gsv.selected_index(), 4)
    coeff = np.array([0.5, -1.0, 2.0, 3.0])

    probs = gsv.probability_tensor()
    node = ste_mask(probs, mask)
    tsum(node * Tensor(coeff)).backward()

    surrogate = stge_backward(coeff, mask)
    p = gsv.probabilities()
    jacobian = np.diag(p) - np.outer(p, p)
    expected = jacobian @ surrogate
    assert np.allclose(gsv.logits.grad, expected)
    assert np.array_equal(node.values, mask.entries)
