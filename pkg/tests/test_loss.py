import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from facemark import loss as L


def make_batch(rng, m=3, n=4, all_visible=True, single_label=False):
    pred = rng.uniform(-1, 1, (m, n, 2))
    gt = rng.uniform(-1, 1, (m, n, 2))
    pred_ang = rng.uniform(-2, 2, (m, 3))
    gt_ang = rng.uniform(-2, 2, (m, 3))
    attrs = rng.random((m, L.NUM_CLASSES)) < 0.5
    if single_label:
        attrs = np.zeros((m, L.NUM_CLASSES), dtype=bool)
        attrs[np.arange(m), rng.integers(0, L.NUM_CLASSES, m)] = True
    else:
        attrs[:, 0] |= ~attrs.any(axis=1)  # ensure at least one active
    vis = (
        np.ones((m, n), dtype=bool)
        if all_visible
        else rng.random((m, n)) < 0.8
    )
    vis[:, 0] = True
    return L.LossBatch(pred, gt, pred_ang, gt_ang, attrs, visibility=vis)


def fd_gradients(batch, config, step=1e-5):
    """Central finite differences of loss_value, the independent oracle."""
    d_pred = np.zeros_like(batch.pred_landmarks)
    it = np.nditer(batch.pred_landmarks, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = batch.pred_landmarks[idx]
        batch.pred_landmarks[idx] = orig + step
        up = L.loss_value(batch, config)
        batch.pred_landmarks[idx] = orig - step
        dn = L.loss_value(batch, config)
        batch.pred_landmarks[idx] = orig
        d_pred[idx] = (up - dn) / (2 * step)
    d_ang = np.zeros_like(batch.pred_angles)
    it = np.nditer(batch.pred_angles, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = batch.pred_angles[idx]
        batch.pred_angles[idx] = orig + step
        up = L.loss_value(batch, config)
        batch.pred_angles[idx] = orig - step
        dn = L.loss_value(batch, config)
        batch.pred_angles[idx] = orig
        d_ang[idx] = (up - dn) / (2 * step)
    return d_pred, d_ang


def assert_close_rel(analytic, numeric, tol=1e-4):
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-4)
    rel = np.abs(analytic - numeric) / denom
    assert rel.max() < tol, f"max relative error {rel.max()}"


# ---------------------------------------------------------------------------
# class weights
# ---------------------------------------------------------------------------

def test_class_weights_all_ones():
    w = L.class_weights_from_fractions([1, 1, 1, 1, 1, 1])
    assert np.all(w.omega == 1.0)


def test_class_weights_reciprocal():
    w = L.class_weights_from_fractions([0.5, 0.25, 0.25, 1, 1, 1])
    assert np.allclose(w.omega, [2, 4, 4, 1, 1, 1])


def test_class_weights_zero_fraction_rejected():
    with pytest.raises(ValueError):
        L.class_weights_from_fractions([0, 1, 1, 1, 1, 1])
    with pytest.raises(ValueError):
        L.class_weights_from_fractions([-0.1, 1, 1, 1, 1, 1])


# ---------------------------------------------------------------------------
# sample_multiplier
# ---------------------------------------------------------------------------

def test_multiplier_single_class_60deg():
    attrs = L.AttributeVector.from_names("profile_face")
    cfg = L.LossConfig(variant="pfld", angle_floor=0.0)
    gamma = L.sample_multiplier(attrs, L.ClassWeights.ones(), (math.radians(60), 0, 0), cfg)
    assert abs(gamma - 0.5) < 1e-12


def test_multiplier_zero_deviation_is_zero():
    attrs = L.AttributeVector.from_names("frontal_face")
    cfg = L.LossConfig(variant="pfld", angle_floor=0.0)
    assert L.sample_multiplier(attrs, L.ClassWeights.ones(), (0, 0, 0), cfg) == 0.0


def test_multiplier_no_theta_two_classes():
    attrs = L.AttributeVector.from_names("profile_face", "frontal_face")
    w = L.ClassWeights(np.array([2.0, 4.0, 1, 1, 1, 1]))
    cfg = L.LossConfig(variant="pfld_no_theta")
    gamma = L.sample_multiplier(attrs, w, (1.0, 1.0, 1.0), cfg)
    assert gamma == 6.0


def test_multiplier_no_active_class_defaults_to_one():
    cfg = L.LossConfig(variant="pfld_no_theta")
    gamma = L.sample_multiplier(L.AttributeVector.none(), L.ClassWeights.ones(), (0, 0, 0), cfg)
    assert gamma == 1.0


def test_multiplier_floor_is_additive():
    attrs = L.AttributeVector.from_names("profile_face")
    cfg = L.LossConfig(variant="pfld", angle_floor=1.0)
    gamma = L.sample_multiplier(attrs, L.ClassWeights.ones(), (math.radians(60), 0, 0), cfg)
    assert abs(gamma - 1.5) < 1e-12


# ---------------------------------------------------------------------------
# loss_value
# ---------------------------------------------------------------------------

def one_sample_batch(d=(3.0, 4.0), theta=(math.radians(60), 0, 0)):
    pred = np.zeros((1, 1, 2))
    gt = np.array(d, dtype=float).reshape(1, 1, 2)
    pred_ang = np.zeros((1, 3))
    gt_ang = np.array(theta, dtype=float).reshape(1, 3)
    attrs = np.zeros((1, L.NUM_CLASSES), dtype=bool)
    attrs[0, 0] = True
    return L.LossBatch(pred, gt, pred_ang, gt_ang, attrs)


@pytest.mark.parametrize("variant", L.VARIANTS)
def test_zero_deviation_gives_zero_loss(variant):
    rng = np.random.default_rng(0)
    batch = make_batch(rng)
    batch.pred_landmarks = batch.gt_landmarks.copy()
    assert L.loss_value(batch, L.LossConfig(variant=variant)) == 0.0


def test_loss_hand_case_12_5():
    batch = one_sample_batch()
    cfg = L.LossConfig(variant="pfld", angle_floor=0.0)
    # gamma = 0.5, ||d||^2 = 25
    assert abs(L.loss_value(batch, cfg) - 12.5) < 1e-12


def test_pfld_degenerates_to_l2():
    # single-label samples, unit weights, zero angle deviation, floor 1:
    # gamma is exactly 1, so the pfld path equals the l2 path bitwise
    rng = np.random.default_rng(42)
    for _ in range(10):
        batch = make_batch(rng, m=4, n=6, single_label=True)
        batch.gt_angles = batch.pred_angles.copy()
        pfld = L.loss_value(batch, L.LossConfig(variant="pfld", angle_floor=1.0))
        l2 = L.loss_value(batch, L.LossConfig(variant="l2"))
        assert pfld == l2


def test_ablation_switch_compositions_match_l2():
    rng = np.random.default_rng(43)
    batch = make_batch(rng, m=5, n=3, single_label=True)
    l2 = L.loss_value(batch, L.LossConfig(variant="l2"))
    # no_theta with unit single-label weights: gamma = 1
    no_theta = L.loss_value(batch, L.LossConfig(variant="pfld_no_theta"))
    assert abs(no_theta - l2) < 1e-12
    # no_omega with zero deviations and floor 1: gamma = 1
    batch.gt_angles = batch.pred_angles.copy()
    no_omega = L.loss_value(batch, L.LossConfig(variant="pfld_no_omega", angle_floor=1.0))
    assert abs(no_omega - l2) < 1e-12


def test_invisible_landmarks_are_skipped():
    batch = one_sample_batch()
    cfg = L.LossConfig(variant="l2")
    assert L.loss_value(batch, cfg) == 25.0
    batch.visibility = np.zeros((1, 1), dtype=bool)
    assert L.loss_value(batch, cfg) == 0.0
    d_pred, _ = L.loss_gradients(batch, cfg)
    assert np.all(d_pred == 0)


def test_batch_validation_errors():
    with pytest.raises(ValueError, match="batch size 0"):
        L.LossBatch(
            np.zeros((0, 1, 2)), np.zeros((0, 1, 2)), np.zeros((0, 3)),
            np.zeros((0, 3)), np.zeros((0, L.NUM_CLASSES), dtype=bool),
        )
    with pytest.raises(ValueError, match="mismatch"):
        L.LossBatch(
            np.zeros((1, 2, 2)), np.zeros((1, 3, 2)), np.zeros((1, 3)),
            np.zeros((1, 3)), np.zeros((1, L.NUM_CLASSES), dtype=bool),
        )


@settings(max_examples=50, deadline=None)
@given(
    seed=st.integers(0, 2**32 - 1),
    variant=st.sampled_from(L.VARIANTS),
    floor=st.floats(0, 2),
)
def test_loss_nonnegative(seed, variant, floor):
    rng = np.random.default_rng(seed)
    batch = make_batch(rng, m=int(rng.integers(1, 5)), n=int(rng.integers(1, 6)))
    cfg = L.LossConfig(variant=variant, angle_floor=floor)
    value = L.loss_value(batch, cfg)
    assert value >= 0.0 and np.isfinite(value)


def test_monotone_in_angle_deviation():
    cfg = L.LossConfig(variant="pfld", angle_floor=0.0)
    prev = -1.0
    for theta in np.linspace(0, math.pi, 50):
        batch = one_sample_batch(theta=(theta, 0, 0))
        value = L.loss_value(batch, cfg)
        assert value >= prev
        prev = value


def test_weight_scaling_is_exact():
    rng = np.random.default_rng(7)
    batch = make_batch(rng, m=6, n=5)
    base_w = L.ClassWeights(rng.uniform(0.5, 3.0, L.NUM_CLASSES))
    base = L.loss_value(batch, L.LossConfig(variant="pfld", class_weights=base_w))
    for lam in (2.0, 3.7):
        scaled_w = L.ClassWeights(base_w.omega * lam)
        scaled = L.loss_value(
            batch, L.LossConfig(variant="pfld", class_weights=scaled_w)
        )
        assert scaled == pytest.approx(lam * base, rel=1e-12)


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------

def test_gradient_hand_case():
    batch = one_sample_batch()
    cfg = L.LossConfig(variant="pfld", angle_floor=0.0)
    d_pred, _ = L.loss_gradients(batch, cfg)
    # gamma = 0.5, d = (3, 4): dL/dpred = -2 * gamma * d = (-3, -4)
    assert np.allclose(d_pred[0, 0], [-3.0, -4.0], atol=1e-12)


def test_gradient_zero_at_optimum():
    rng = np.random.default_rng(3)
    batch = make_batch(rng)
    batch.pred_landmarks = batch.gt_landmarks.copy()
    for variant in L.VARIANTS:
        d_pred, _ = L.loss_gradients(batch, L.LossConfig(variant=variant))
        assert np.all(d_pred == 0)


def test_l1_subgradient_zero_at_kink():
    batch = one_sample_batch(d=(0.0, 0.0))
    d_pred, _ = L.loss_gradients(batch, L.LossConfig(variant="l1"))
    assert np.all(d_pred == 0)


@pytest.mark.parametrize("variant", L.VARIANTS)
def test_gradients_match_finite_differences(variant):
    rng = np.random.default_rng(hash(variant) % 2**32)
    for floor in (0.0, 1.0):
        cfg = L.LossConfig(
            variant=variant,
            angle_floor=floor,
            class_weights=L.ClassWeights(rng.uniform(0.5, 4.0, L.NUM_CLASSES)),
        )
        batch = make_batch(rng, m=3, n=4, all_visible=False)
        d_pred, d_ang = L.loss_gradients(batch, cfg)
        fd_pred, fd_ang = fd_gradients(batch, cfg)
        assert_close_rel(d_pred, fd_pred)
        assert_close_rel(d_ang, fd_ang)


def test_angle_gradient_only_through_cos_factors():
    # pfld_no_theta and the plain variants carry no angle gradient
    rng = np.random.default_rng(11)
    batch = make_batch(rng)
    for variant in ("l2", "l1", "pfld_no_theta"):
        _, d_ang = L.loss_gradients(batch, L.LossConfig(variant=variant))
        assert np.all(d_ang == 0)
    # samples without valid gt angles contribute no angle gradient either
    batch.angle_valid = np.zeros(batch.size, dtype=bool)
    _, d_ang = L.loss_gradients(batch, L.LossConfig(variant="pfld"))
    assert np.all(d_ang == 0)


def test_loss_and_gradients_consistent():
    rng = np.random.default_rng(5)
    batch = make_batch(rng)
    cfg = L.LossConfig(variant="pfld", angle_floor=1.0)
    value, d_pred, d_ang = L.loss_and_gradients(batch, cfg)
    assert value == L.loss_value(batch, cfg)
    ref_pred, ref_ang = L.loss_gradients(batch, cfg)
    assert np.array_equal(d_pred, ref_pred)
    assert np.array_equal(d_ang, ref_ang)
