from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from streamst import cif, numerics as nx
from streamst.cif import AcousticStates, DegenerateAlignmentError
from streamst.numerics import Tensor, finite_difference_check


def oracle_fire(weights):
    """Exact rational accumulator walk: frame -> open unit, and fire count."""
    acc, u, owner = Fraction(0), 0, []
    for w in weights:
        owner.append(u)
        acc += Fraction(w)
        while acc >= 1:
            acc -= 1
            u += 1
    return owner, u, acc


weights_st = st.lists(st.integers(1, 9).map(lambda k: Fraction(k, 8)), min_size=1, max_size=30)


@settings(max_examples=200, deadline=None)
@given(weights_st)
def test_walk_matches_exact_oracle(ws):
    # multiples of 1/8 are exact in binary, so float and rational walks agree
    seg, fires, count, residue = cif.fire(np.array([float(w) for w in ws]))
    owner, n, acc = oracle_fire(ws)
    assert count == n
    assert list(seg) == owner
    assert residue == pytest.approx(float(acc), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-4, 4), min_size=2, max_size=40), st.integers(1, 15))
def test_training_fires_exactly_n_star(logits, n_star):
    values = Tensor(np.stack([np.zeros(len(logits)), np.array(logits)], axis=1))
    states = AcousticStates(values)
    alpha = cif.compute_weights(states)
    scaled, n_hat = cif.scale_weights(alpha, n_star)
    assert scaled.data.sum() == pytest.approx(n_star, rel=1e-12)
    integrated, sched = cif.integrate_and_fire(states, scaled)
    assert sched.fired_count == n_star
    assert integrated.U == n_star
    assert np.all(np.diff(sched.fire_frames) >= 0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-4, 4), min_size=1, max_size=40))
def test_inference_count_is_rounded_sum(logits):
    values = Tensor(np.stack([np.zeros(len(logits)), np.array(logits)], axis=1))
    states = AcousticStates(values)
    alpha = cif.compute_weights(states)
    target = int(np.floor(alpha.data.sum() + 0.5))
    _, sched = cif.integrate_and_fire(states, cif.inference_rescale(alpha), tail=True)
    assert sched.fired_count == target


def test_weights_inside_unit_interval():
    alpha = cif.compute_weights(AcousticStates(Tensor(np.array([[0.0, -30.0], [0.0, 30.0]]))))
    assert np.all(alpha.data > 0) and np.all(alpha.data <= 1)


def test_large_weight_fires_twice_in_one_frame():
    seg, fires, count, _ = cif.fire(np.array([0.5, 2.0, 0.5]))
    assert list(fires) == [1, 1, 2]
    assert count == 3
    assert list(seg) == [0, 0, 2]
    segs = cif._segments_from_ids(seg, count)
    assert len(segs[1]) == 0


def test_tail_rule():
    _, fires, count, residue = cif.fire(np.array([0.4, 0.4, 0.4, 0.3]), tail=True)
    assert count == 2 and residue == 0.0 and list(fires) == [2, 3]
    _, _, count, residue = cif.fire(np.array([0.4, 0.4, 0.4, 0.2]), tail=True)
    assert count == 1 and residue == pytest.approx(0.4)


def test_threshold_tolerance():
    # 0.1 * 10 sums to 0.9999999999999999 in floating point; it must still fire
    _, _, count, _ = cif.fire(np.full(10, 0.1))
    assert count == 1


def test_embeddings_are_weighted_sums():
    rng = np.random.default_rng(0)
    v = rng.normal(size=(6, 4))
    states = AcousticStates(Tensor(v))
    alpha = Tensor(np.array([0.5, 0.5, 0.25, 0.25, 0.25, 0.25]))
    integrated, sched = cif.integrate_and_fire(states, alpha)
    assert [list(s) for s in sched.segments] == [[0, 1], [2, 3, 4, 5]]
    np.testing.assert_allclose(integrated.embeddings.data[0], 0.5 * v[0, :3] + 0.5 * v[1, :3])
    np.testing.assert_allclose(integrated.embeddings.data[1], 0.25 * v[2:, :3].sum(0))


def test_gradient_through_cif():
    rng = np.random.default_rng(1)
    values = Tensor(rng.normal(size=(9, 5)), requires_grad=True)
    target = Tensor(rng.normal(size=(3, 4)))

    def loss(v):
        states = AcousticStates(v)
        scaled, n_hat = cif.scale_weights(cif.compute_weights(states), 3)
        integrated, _ = cif.integrate_and_fire(states, scaled)
        return (integrated.embeddings * target).sum() + cif.quantity_loss(n_hat, 3) * 0.05

    assert finite_difference_check(loss, values, 1e-6) < 1e-4


def test_degenerate_and_invalid_inputs():
    with pytest.raises(DegenerateAlignmentError):
        cif.scale_weights(Tensor(np.zeros(4)), 2)
    with pytest.raises(ValueError):
        cif.scale_weights(Tensor(np.ones(4)), 0)
    with pytest.raises(ValueError):
        AcousticStates(Tensor(np.zeros((0, 3))))
    with pytest.raises(ValueError):
        AcousticStates(Tensor(np.zeros((4, 1))))
    assert cif.inference_rescale(Tensor(np.full(4, 0.1))).data.sum() == 0.0


def test_quantity_loss_subgradient_zero_at_equality():
    n_hat = Tensor(3.0, requires_grad=True)
    loss = cif.quantity_loss(n_hat, 3)
    loss.backward()
    assert loss.item() == 0.0 and n_hat.grad == 0.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_batch_path_matches_single(seed):
    rng = np.random.default_rng(seed)
    b = 3
    lengths = rng.integers(2, 12, size=b)
    t = int(lengths.max())
    values = rng.normal(size=(b, t, 5))
    n_star = rng.integers(1, 6, size=b)
    for ns in (n_star, None):
        out = cif.integrate_batch(Tensor(values), lengths, ns)
        for i in range(b):
            states = AcousticStates(Tensor(values[i, : lengths[i]]))
            alpha = cif.compute_weights(states)
            eff = cif.scale_weights(alpha, int(ns[i]))[0] if ns is not None else cif.inference_rescale(alpha)
            single, sched = cif.integrate_and_fire(states, eff, tail=ns is None)
            assert out.counts[i] == sched.fired_count
            np.testing.assert_allclose(out.embeddings.data[i, : single.U], single.embeddings.data,
                                       atol=1e-12)
            assert np.all(out.embeddings.data[i, single.U:] == 0)


def test_boundary_hits():
    # fires at states 1, 3, 4 -> frames 2, 6, 8; gold ends 3, 6, 11
    assert cif.boundary_hits([1, 3, 4], [3, 6, 11], 2) == (2, 3)
    assert cif.boundary_hits([1, 3, 4], [3, 6, 11], 2, tolerance=0) == (1, 3)
    assert cif.boundary_hits([], [3], 2) == (0, 0)
