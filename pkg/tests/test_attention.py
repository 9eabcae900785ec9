"""Attention head and supervision losses: frozen hand values and properties."""

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from privpool import tensor as T
from privpool.attention import (AttentionHead, AttentionStack, KeypointTargets,
                                bce_loss, multiscale_attention_loss, total_loss,
                                variance_regularizer)
from privpool.tensor import Tensor

rng = np.random.default_rng(0)


# ---------------------------------------------------------------- stack types

def test_attention_stack_validates_counts():
    maps = Tensor(np.full((2, 4, 4, 3), 0.5))
    st_ = AttentionStack(maps, 2, 1)
    assert st_.supervised().shape == (2, 4, 4, 2)
    assert st_.complementary().shape == (2, 4, 4, 1)
    with pytest.raises(ValueError):
        AttentionStack(maps, 2, 2)  # K+Q != M
    with pytest.raises(ValueError):
        AttentionStack(maps, 0, 0)


def test_attention_stack_allows_single_group():
    maps = Tensor(np.full((1, 2, 2, 1), 0.5))
    sup_only = AttentionStack(maps, 1, 0)
    assert sup_only.supervised().shape == (1, 2, 2, 1)
    with pytest.raises(ValueError):
        sup_only.complementary()


def test_keypoint_targets_validate_invisible_planes():
    maps = np.zeros((1, 4, 4, 2))
    maps[0, 1, 1, 0] = 1.0
    visible = np.array([[True, False]])
    annotated = np.array([True])
    KeypointTargets(maps, visible, annotated)  # fine: invisible plane is zero
    bad = maps.copy()
    bad[0, 2, 2, 1] = 1.0  # nonzero plane for invisible keypoint
    with pytest.raises(ValueError):
        KeypointTargets(bad, visible, annotated)


# ---------------------------------------------------------------- head

def test_head_output_shape_and_range():
    head = AttentionHead(16, num_supervised=3, num_complementary=2,
                         rng=np.random.default_rng(0))
    x = Tensor(rng.normal(size=(2, 5, 5, 16)))
    stack = head(x)
    assert stack.maps.shape == (2, 5, 5, 5)
    assert stack.num_supervised == 3 and stack.num_complementary == 2
    assert np.all(stack.maps.data > 0) and np.all(stack.maps.data < 1)


def test_head_zero_weights_give_half_maps():
    head = AttentionHead(8, num_supervised=1, num_complementary=1,
                         rng=np.random.default_rng(0))
    for p in head.parameters().values():
        p.data[...] = 0.0
    stack = head(Tensor(rng.normal(size=(1, 4, 4, 8))))
    assert np.allclose(stack.maps.data, 0.5)


def test_head_hidden_width_is_quarter_of_input():
    head = AttentionHead(16, num_supervised=1, num_complementary=1,
                         rng=np.random.default_rng(0))
    assert head.conv1.kernel.shape == (3, 3, 16, 4)
    tiny = AttentionHead(2, num_supervised=1, num_complementary=1,
                         rng=np.random.default_rng(0))
    assert tiny.conv1.kernel.shape == (3, 3, 2, 1)  # floor at one channel


def test_head_receptive_field_is_5x5():
    head = AttentionHead(1, num_supervised=1, num_complementary=1,
                         rng=np.random.default_rng(3))
    base = np.zeros((1, 9, 9, 1))
    ref = head(Tensor(base)).maps.data
    poked = base.copy()
    poked[0, 4, 4, 0] = 10.0
    diff = np.abs(head(Tensor(poked)).maps.data - ref).sum(axis=(0, 3))
    moved = np.argwhere(diff > 1e-12)
    assert moved.size > 0
    assert moved[:, 0].min() >= 2 and moved[:, 0].max() <= 6
    assert moved[:, 1].min() >= 2 and moved[:, 1].max() <= 6


def test_head_requires_both_map_kinds():
    with pytest.raises(ValueError):
        AttentionHead(8, num_supervised=0, num_complementary=1)
    with pytest.raises(ValueError):
        AttentionHead(8, num_supervised=1, num_complementary=0)


# ---------------------------------------------------------------- bce

def test_bce_half_map_is_log2():
    a = Tensor(np.full((4, 4), 0.5))
    target = np.zeros((4, 4))
    target[0, 0] = 1.0
    assert abs(float(bce_loss(a, Tensor(target)).data) - math.log(2.0)) < 1e-9


def test_bce_frozen_hand_value():
    # 2x2 map, target [[1,0],[0,0]], prediction 0.25 everywhere:
    # -(log .25 + 3 log .75)/4
    a = Tensor(np.full((2, 2), 0.25))
    target = Tensor(np.array([[1.0, 0.0], [0.0, 0.0]]))
    assert abs(float(bce_loss(a, target).data) - 0.5623351446188083) < 1e-12


def test_bce_perfect_prediction_is_near_zero():
    target = np.zeros((3, 3))
    target[1, 1] = 1.0
    loss = float(bce_loss(Tensor(target.copy()), Tensor(target)).data)
    assert 0.0 <= loss < 1e-6


def test_bce_shape_mismatch_raises():
    with pytest.raises(ValueError):
        bce_loss(Tensor(np.full((2, 2), 0.5)), Tensor(np.zeros((3, 3))))


@given(st.integers(0, 1000))
def test_bce_nonnegative(seed):
    r = np.random.default_rng(seed)
    a = Tensor(r.uniform(0.001, 0.999, size=(3, 3)))
    t = Tensor((r.random((3, 3)) > 0.5).astype(float))
    assert float(bce_loss(a, t).data) >= 0.0


# ---------------------------------------------------------------- multiscale

def test_multiscale_perfect_attention_below_3e6():
    target = np.zeros((8, 8))
    target[3, 4] = 1.0
    loss = float(multiscale_attention_loss(Tensor(target.copy()),
                                           Tensor(target)).data)
    assert loss < 3e-6


def test_multiscale_rejects_even_kernel():
    a = Tensor(np.full((4, 4), 0.5))
    with pytest.raises(ValueError):
        multiscale_attention_loss(a, Tensor(np.zeros((4, 4))), scales=(1, 2))


def test_multiscale_is_sum_of_pooled_bce():
    r = np.random.default_rng(5)
    a = r.uniform(0.05, 0.95, size=(6, 6))
    t = np.zeros((6, 6))
    t[2, 3] = 1.0
    total = float(multiscale_attention_loss(Tensor(a), Tensor(t)).data)
    parts = 0.0
    for k in (1, 3, 7):
        pa = T.maxpool2d(Tensor(a[None, :, :, None]), k, stride=1,
                         same_pad=True).data[0, :, :, 0]
        pt = T.maxpool2d(Tensor(t[None, :, :, None]), k, stride=1,
                         same_pad=True).data[0, :, :, 0]
        parts += float(bce_loss(Tensor(pa), Tensor(pt)).data)
    assert abs(total - parts) < 1e-12


def test_multiscale_jitter_tolerance():
    # a one-pixel shift is forgiven by the kernel-3 and kernel-7 scales:
    # their pooled targets still cover the true cell
    t = np.zeros((8, 8))
    t[4, 4] = 1.0
    shifted = np.zeros((8, 8))
    shifted[4, 5] = 1.0
    pooled_t = T.maxpool2d(Tensor(t[None, :, :, None]), 3, stride=1,
                           same_pad=True).data[0, :, :, 0]
    pooled_s = T.maxpool2d(Tensor(shifted[None, :, :, None]), 3, stride=1,
                           same_pad=True).data[0, :, :, 0]
    assert pooled_t[4, 4] == 1.0 and pooled_s[4, 4] == 1.0


# ---------------------------------------------------------------- regularizer

@given(st.integers(0, 500))
def test_variance_regularizer_range(seed):
    a = Tensor(np.random.default_rng(seed).uniform(0.01, 0.99, size=(5, 5)))
    v = float(variance_regularizer(a).data)
    assert 0.0 <= v <= 0.25


def test_variance_regularizer_max_at_half():
    half = Tensor(np.full((4, 4), 0.5))
    assert abs(float(variance_regularizer(half).data) - 0.25) < 1e-9
    binary = np.zeros((4, 4))
    binary[:2] = 1.0  # half on, half off: mean 0.5 again
    assert abs(float(variance_regularizer(Tensor(binary)).data) - 0.25) < 1e-9


def test_variance_regularizer_depends_on_mean_only():
    r = np.random.default_rng(8)
    a = r.uniform(0.2, 0.8, size=(4, 4))
    b = np.sort(a.ravel()).reshape(4, 4)  # same multiset, same mean
    va = float(variance_regularizer(Tensor(a)).data)
    vb = float(variance_regularizer(Tensor(b)).data)
    assert abs(va - vb) < 1e-12


# ---------------------------------------------------------------- total loss

def make_batch(n=3, hw=4, k=2, q=1, seed=0):
    r = np.random.default_rng(seed)
    maps = Tensor(r.uniform(0.05, 0.95, size=(n, hw, hw, k + q)))
    stack = AttentionStack(maps, k, q)
    tmaps = np.zeros((n, hw, hw, k))
    visible = np.ones((n, k), dtype=bool)
    for i in range(n):
        for j in range(k):
            tmaps[i, r.integers(hw), r.integers(hw), j] = 1.0
    annotated = np.array([True] * (n - 1) + [False])
    tmaps[-1] = 0.0
    visible[-1] = False
    targets = KeypointTargets(tmaps, visible, annotated)
    logits = Tensor(r.normal(size=(n, 4)), requires_grad=True)
    labels = np.array([0, 1, 2])[:n]
    return logits, labels, stack, targets


def test_total_loss_without_stack_is_plain_ce():
    logits, labels, _, _ = make_batch()
    terms = total_loss(logits, labels, None, None)
    want = float(T.cross_entropy(logits, labels).data)
    assert abs(terms.ce - want) < 1e-12
    assert terms.attn == 0.0 and terms.reg == 0.0
    assert abs(float(terms.total.data) - want) < 1e-12


def test_total_loss_composition():
    logits, labels, stack, targets = make_batch()
    terms = total_loss(logits, labels, stack, targets)
    assert abs(float(terms.total.data)
               - (terms.ce + terms.attn - terms.reg)) < 1e-12
    assert terms.attn > 0.0 and 0.0 <= terms.reg <= 0.25


def test_total_loss_reg_term_additivity():
    # the reg term is the mean over samples and complementary maps of
    # abar*(1-abar) with abar the per-(sample, map) spatial mean
    logits, labels, stack, targets = make_batch(q=2)
    terms = total_loss(logits, labels, stack, targets)
    ab = stack.maps.data[..., 2:].mean(axis=(1, 2))
    assert abs(terms.reg - float((ab * (1.0 - ab)).mean())) < 1e-12


def test_total_loss_skips_unannotated_samples():
    logits, labels, stack, targets = make_batch(n=3)
    terms_all = total_loss(logits, labels, stack, targets)
    # dropping the unannotated third sample leaves the attention term equal
    logits2 = Tensor(logits.data[:2], requires_grad=True)
    stack2 = AttentionStack(Tensor(stack.maps.data[:2]), 2, 1)
    targets2 = KeypointTargets(targets.maps[:2], targets.visible[:2],
                               targets.annotated[:2])
    terms_first2 = total_loss(logits2, labels[:2], stack2, targets2)
    assert abs(terms_all.attn - terms_first2.attn) < 1e-12


def test_total_loss_no_annotations_has_zero_attn():
    logits, labels, stack, targets = make_batch()
    targets = KeypointTargets(np.zeros_like(targets.maps),
                              np.zeros_like(targets.visible),
                              np.zeros_like(targets.annotated))
    terms = total_loss(logits, labels, stack, targets)
    assert terms.attn == 0.0


def test_total_loss_reg_only_covers_all_maps_without_targets():
    logits, labels, stack, _ = make_batch()
    terms = total_loss(logits, labels, stack, None, reg_all_maps=True)
    assert terms.attn == 0.0
    ab = stack.maps.data.mean(axis=(1, 2))
    assert abs(terms.reg - float((ab * (1.0 - ab)).mean())) < 1e-12


def test_invisible_keypoint_minimized_by_empty_map():
    # gradient at a uniform 0.5 map points up everywhere, so descending
    # drives the map toward zero: absence is the minimizer
    a = Tensor(np.full((6, 6), 0.5), requires_grad=True)
    target = Tensor(np.zeros((6, 6)))
    with T.Tape():
        loss = multiscale_attention_loss(a, target)
        T.backward(loss)
    assert np.all(a.grad > 0.0)


def test_total_loss_gradcheck_end_to_end():
    logits, labels, stack, targets = make_batch()
    maps_leaf = Tensor(stack.maps.data.copy(), requires_grad=True)

    def fn(logits_in, maps_in):
        s = AttentionStack(T.clip(maps_in, 1e-4, 1.0 - 1e-4), 2, 1)
        return total_loss(logits_in, labels, s, targets).total

    report = T.grad_check(fn, {"logits_in": logits, "maps_in": maps_leaf},
                          tolerance=1e-3)
    assert report.passed, report
