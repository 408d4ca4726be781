import numpy as np
import pytest

from drim.autograd import Tensor, grad_check, sum_
from drim.fusion import (
    FUSION_KINDS,
    BaselineFusion,
    MAFusionBlock,
    NoModalityError,
    TensorBudgetError,
    audit_tensor_params,
    baseline_fuse,
    fuse_shared,
    fuse_unique,
    mafusion_param_count,
)
from drim.model import DRIMModel, ModelConfig


def identity_block(d, n_slots, rng, slots=True):
    blk = MAFusionBlock(d, n_slots, rng, heads=1, head_dim=d, slot_embeddings=slots)
    for w in (blk.w_q, blk.w_k, blk.w_v):
        w.data = np.eye(d)
    return blk


def test_single_token_gets_full_weight(rng):
    blk = identity_block(3, 2, rng)
    t = rng.normal(size=(1, 2, 3))
    mask = np.array([[False, True]])
    pooled, weights = blk.attend(Tensor(t), mask)
    np.testing.assert_allclose(weights[0, 0], [0.0, 1.0])
    np.testing.assert_allclose(pooled.data[0], t[0, 1] + blk.slots.data[1], atol=1e-15)


def test_duplicate_tokens_equal_one_copy(rng):
    blk = MAFusionBlock(4, 3, rng, slot_embeddings=False)
    t = rng.normal(size=(2, 1, 4))
    one = blk(Tensor(np.concatenate([t, np.zeros_like(t)], axis=1)), np.array([[1, 0]] * 2, bool)).data
    two = blk(Tensor(np.concatenate([t, t], axis=1)), np.ones((2, 2), bool)).data
    np.testing.assert_allclose(one, two, atol=1e-14)


def test_masked_tokens_never_read(rng):
    blk = MAFusionBlock(4, 3, rng)
    t = rng.normal(size=(5, 3, 4))
    mask = rng.random((5, 3)) < 0.5
    mask[:, 0] = True
    noisy = np.where(mask[:, :, None], t, rng.normal(size=t.shape) * 1e6)
    np.testing.assert_array_equal(blk(Tensor(t), mask).data, blk(Tensor(noisy), mask).data)


def test_attention_weights_sum_to_one_over_visible_tokens(rng):
    blk = MAFusionBlock(4, 4, rng, heads=2, head_dim=3)
    mask = rng.random((6, 4)) < 0.6
    mask[:, 2] = True
    _, w = blk.attend(Tensor(rng.normal(size=(6, 4, 4))), mask)
    np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-12)
    assert np.all(w[np.broadcast_to(~mask[:, None, :], w.shape)] == 0.0)


def test_all_masked_raises(rng):
    blk = MAFusionBlock(2, 2, rng)
    with pytest.raises(NoModalityError, match="no modality available"):
        blk(Tensor(np.ones((2, 2, 2))), np.array([[1, 0], [0, 0]], bool))


def test_permutation_invariance_without_slots_and_with_moved_slots(rng):
    t = rng.normal(size=(3, 3, 4))
    mask = np.ones((3, 3), bool)
    perm = [2, 0, 1]
    plain = MAFusionBlock(4, 3, rng, slot_embeddings=False)
    np.testing.assert_allclose(plain(Tensor(t), mask).data, plain(Tensor(t[:, perm]), mask).data, atol=1e-14)
    slotted = MAFusionBlock(4, 3, rng)
    before = slotted(Tensor(t), mask).data
    slotted.slots.data = slotted.slots.data[perm]
    np.testing.assert_allclose(before, slotted(Tensor(t[:, perm]), mask).data, atol=1e-14)


def test_fuse_unique_with_unique_tokens_masked_depends_only_on_s(rng):
    blk = MAFusionBlock(4, 3, rng)
    s = Tensor(rng.normal(size=(2, 4)))
    none = np.zeros((2, 2), bool)
    a = fuse_unique(blk, [Tensor(rng.normal(size=(2, 4))) for _ in range(2)], s, none).data
    b = fuse_unique(blk, [Tensor(rng.normal(size=(2, 4))) for _ in range(2)], s, none).data
    np.testing.assert_array_equal(a, b)


def test_fuse_shared_one_present(rng):
    blk = MAFusionBlock(3, 2, rng)
    x = [Tensor(rng.normal(size=(1, 3))), Tensor(rng.normal(size=(1, 3)))]
    a = fuse_shared(blk, x, np.array([[True], [False]])).data
    x[1] = Tensor(rng.normal(size=(1, 3)))
    np.testing.assert_array_equal(a, fuse_shared(blk, x, np.array([[True], [False]])).data)


def test_gradient_through_both_fusion_scales(rng):
    cfg = ModelConfig(feature_dims=[3, 4, 2], d=4, n_intervals=5, heads=2, head_dim=3, dropout=0.0)
    model = DRIMModel(cfg, rng).eval()
    x = [rng.normal(size=(4, k)) for k in cfg.feature_dims]
    present = np.array([[1, 1, 0, 1], [1, 0, 1, 1], [0, 1, 1, 1]], bool)
    target = rng.normal(size=(4, 5))
    f = lambda: sum_(model.hazards(x, present) * target)
    params = model.encoder_parameters() + model.task_parameters()
    report = grad_check(f, params, eps=1e-5, max_checks=6)
    assert report.max_error <= 1e-4, max(report.errors.items(), key=lambda kv: kv[1])


# -- baselines -----------------------------------------------------------------------------


def test_mean_of_single_present_is_identity(rng):
    v, w = rng.normal(size=(1, 3)), rng.normal(size=(1, 3))
    out = baseline_fuse("mean", [Tensor(v), Tensor(w)], np.array([[True], [False]])).data
    np.testing.assert_array_equal(out, v)


def test_max_ignores_dominated_and_absent(rng):
    v = np.array([[1.0, -2.0]])
    low = np.array([[-1e300, -1e300]])
    np.testing.assert_array_equal(baseline_fuse("max", [Tensor(v), Tensor(low)], np.ones((2, 1), bool)).data, v)
    big = np.array([[1e9, 1e9]])
    np.testing.assert_array_equal(baseline_fuse("max", [Tensor(v), Tensor(big)], np.array([[1], [0]], bool)).data, v)


def test_tensor_fusion_hand_expansion():
    a, b = 3.0, -2.0
    out = baseline_fuse("tensor", [Tensor([[a]]), Tensor([[b]])], np.ones((2, 1), bool)).data
    np.testing.assert_array_equal(out[0], [a * b, a, b, 1.0])


@pytest.mark.parametrize("kind", FUSION_KINDS)
def test_baselines_ignore_absent_values(kind, rng):
    reps = [rng.normal(size=(4, 2)) for _ in range(3)]
    present = np.array([[1, 1, 0, 1], [0, 1, 1, 1], [1, 0, 1, 1]], bool)
    zeroed = [np.where(present[m][:, None], r, 0.0) for m, r in enumerate(reps)]
    noisy = [np.where(present[m][:, None], r, 1e5 * rng.normal(size=r.shape)) for m, r in enumerate(reps)]
    a = baseline_fuse(kind, [Tensor(r) for r in zeroed], present).data
    b = baseline_fuse(kind, [Tensor(r) for r in noisy], present).data
    np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("kind", FUSION_KINDS)
def test_baseline_gradients(kind, rng):
    reps = [Tensor(rng.normal(size=(3, 2)), requires_grad=True) for _ in range(2)]
    present = np.array([[1, 1, 0], [1, 0, 1]], bool)
    w = rng.normal(size=baseline_fuse(kind, reps, present).shape)
    assert grad_check(lambda: sum_(baseline_fuse(kind, reps, present) * w), reps).max_error <= 1e-6


def test_audit_counts():
    assert audit_tensor_params(4, 32, 32) == 37_949_472 == 33**4 * 32
    big = audit_tensor_params(4, 128, 128)
    assert big == 35_446_128_768 == 129**4 * 128
    assert 33_000e6 <= big <= 36_500e6
    assert abs(big - 34_500e6) / 34_500e6 <= 0.06
    assert audit_tensor_params(1, 1, 1) == 2
    assert audit_tensor_params(12, 128, 128) == 129**12 * 128  # exact big integers


def test_tensor_budget_error_carries_count(rng):
    with pytest.raises(TensorBudgetError) as err:
        BaselineFusion("tensor", 4, 32, rng, tensor_budget=10**6)
    assert err.value.count == 37_949_472


def test_mafusion_count_grows_only_by_one_slot(rng):
    d, H, Dh = 16, 4, 16
    a, b = mafusion_param_count(d, 4, H, Dh), mafusion_param_count(d, 5, H, Dh)
    assert b - a == d
    assert mafusion_param_count(d, 4, H, Dh, slot_embeddings=False) == mafusion_param_count(d, 9, H, Dh, False)
    assert MAFusionBlock(d, 4, rng, H, Dh).num_parameters() == a
