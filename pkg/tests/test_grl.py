import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gfscreen import ValidationError
from gfscreen.grl import (
    GRLBatch,
    GRLConfig,
    action_conditioned_reward,
    ce_term,
    detection_reward,
    dsc_reward,
    focal_term,
    group_advantages,
    grl_objective,
    kl_penalty,
    supervised_objective,
    surrogate_term,
)


def _mask(*idx, shape=(4, 4, 1)):
    m = np.zeros(shape, dtype=bool)
    for i in idx:
        m.flat[i] = True
    return m


def test_detection_reward_examples():
    gt = _mask(1, 2, 5)
    assert detection_reward(gt, gt) == 1
    assert detection_reward(_mask(0, 3), np.zeros((4, 4, 1), bool)) == 0
    assert detection_reward(_mask(0), _mask(9)) == 0


def test_dsc_reward_examples():
    assert dsc_reward(_mask(1, 2), _mask(1, 2)) == 1.0
    assert dsc_reward(_mask(1), _mask(2)) == 0.0
    assert dsc_reward(_mask(0, 1, 2, 3), _mask(2, 3, 4, 5)) == 0.5


def test_action_conditioned_reward():
    r = action_conditioned_reward([1, 1, 0, 0], [1, 0, 0, 1], [False, False, True, False])
    assert r.tolist() == [1.0, 0.0, 1.0, 0.0]


def test_advantages_uniform_group():
    assert group_advantages([0.3] * 8).tolist() == [0.0] * 8


def test_advantages_one_hit():
    a = group_advantages([1, 0, 0, 0])
    assert a == pytest.approx([1.732051, -0.577350, -0.577350, -0.577350], abs=1e-6)


def test_advantages_need_a_group():
    with pytest.raises(ValidationError):
        group_advantages([1.0])


@given(st.lists(st.floats(-10, 10), min_size=2, max_size=32).filter(lambda r: np.std(r) > 1e-3))
def test_advantages_normalized(r):
    a = group_advantages(r)
    assert abs(a.mean()) < 1e-9
    assert abs(a.std() - 1.0) < 1e-9


def test_advantages_std_floor():
    a = group_advantages([1.0, 1.0 + 1e-9], std_floor=1e-3)
    assert np.allclose(a, [-5e-7, 5e-7], atol=1e-12)


def test_kl_examples():
    assert kl_penalty(0.3, 0.3) == 0.0
    assert kl_penalty(0.25, 0.5) == pytest.approx(2 - math.log(2) - 1, abs=1e-15)
    assert kl_penalty(0.5, 0.25) == pytest.approx(0.5 - math.log(0.5) - 1, abs=1e-15)
    assert kl_penalty(0.25, 0.5) == pytest.approx(0.306853, abs=1e-6)
    assert kl_penalty(0.5, 0.25) == pytest.approx(0.193147, abs=1e-6)


@given(st.floats(1e-4, 1 - 1e-4), st.floats(1e-4, 1 - 1e-4))
def test_kl_nonnegative(p, q):
    assert kl_penalty(p, q) >= 0.0


def test_ce_examples():
    assert ce_term(1 - 1e-6, 1) == pytest.approx(0.0, abs=1e-5)
    assert ce_term(0.5, 1) == pytest.approx(math.log(2), abs=1e-15)
    assert ce_term(0.5, 0) == pytest.approx(math.log(2), abs=1e-15)


def test_focal_examples():
    assert focal_term(0.5, 1, 2.0) == pytest.approx(0.25 * math.log(2), abs=1e-15)
    assert focal_term(1 - 1e-12, 1, 2.0) == pytest.approx(0.0, abs=1e-20)
    with pytest.raises(ValidationError):
        focal_term(0.5, 1, -1.0)


@given(st.floats(1e-6, 1 - 1e-6), st.integers(0, 1))
def test_focal_gamma_zero_is_ce(p, y):
    assert focal_term(p, y, 0.0) == ce_term(p, y)


def test_surrogate_clip_examples():
    assert surrogate_term(1.25, 1.0, 0.1) == 1.1
    assert surrogate_term(0.8, -1.0, 0.1) == -0.9


@given(st.floats(-10, 10), st.floats(0.01, 5.0))
def test_surrogate_bounds(a, ratio):
    # min(rA, clip(r)A) = A * min(r, 1+eps) for A > 0 and A * max(r, 1-eps) for A < 0
    s = surrogate_term(ratio, a, 0.1)
    if a > 0:
        assert s <= 1.1 * a
        assert s == a * min(ratio, 1.1)
    elif a < 0:
        assert s <= 0.9 * a
        assert s == a * max(ratio, 0.9)
    assert surrogate_term(1.0, a, 0.1) == a


@given(st.floats(-10, 10, exclude_min=True).filter(lambda a: a < 0), st.floats(0.9, 1.1))
def test_surrogate_negative_advantage_inside_trust_region(a, ratio):
    assert surrogate_term(ratio, a, 0.1) >= 1.1 * a


def _batch(n=4, seed=0, advantages=None, ref_same=True):
    rng = np.random.default_rng(seed)
    p1 = rng.uniform(0.1, 0.9, size=n)
    probs = np.stack([1 - p1, p1], axis=1)
    ref = probs.copy() if ref_same else np.stack([1 - (q := rng.uniform(0.1, 0.9, n)), q], axis=1)
    rewards = rng.integers(0, 2, size=n).astype(float)
    return GRLBatch(np.zeros((n, 3)), rng.integers(0, 2, n), rng.integers(0, 2, n), probs, ref, rewards,
                    advantages)


def test_zero_advantage_zero_objective():
    cfg = GRLConfig(group_size=4, ce_alpha=0.0, kl_beta=0.0)
    for mode in ("select_prob", "sampled_action"):
        terms = grl_objective(_batch(advantages=np.zeros(4)), GRLConfig(**{**cfg.__dict__, "ratio_mode": mode}))
        assert terms.J == 0.0
        assert not terms.grad_logits.any()


def test_single_member_clip_values():
    cfg = GRLConfig(group_size=2, clip_eps=0.1, ce_alpha=0.0, kl_beta=0.0)
    probs = np.array([[0.5, 0.5]])
    up = GRLBatch(np.zeros((1, 1)), [1], [1], probs, np.array([[0.6, 0.4]]), [1.0], [1.0])
    assert grl_objective(up, cfg).surrogate == pytest.approx(1.1, abs=1e-15)
    down = GRLBatch(np.zeros((1, 1)), [1], [1], np.array([[0.6, 0.4]]), probs, [0.0], [-1.0])
    assert grl_objective(down, cfg).surrogate == pytest.approx(-0.9, abs=1e-15)


def test_objective_at_reference_is_mean_advantage_minus_ce():
    b = _batch(n=6, seed=3)
    cfg = GRLConfig(group_size=6, ce_alpha=0.1, kl_beta=0.01)
    terms = grl_objective(b, cfg)
    # ratio 1 and KL 0 at the reference, so J = mean(A) - alpha * mean(BCE)
    expected = b.advantages.mean() - 0.1 * ce_term(b.probs[:, 1], b.labels).mean()
    assert terms.J == pytest.approx(expected, abs=1e-12)
    assert terms.kl == 0.0


def test_gradient_rows_antisymmetric():
    terms = grl_objective(_batch(n=8, seed=4, ref_same=False), GRLConfig(group_size=8))
    assert np.array_equal(terms.grad_logits[:, 0], -terms.grad_logits[:, 1])


def test_needs_reference():
    b = _batch()
    b.ref_probs = None
    with pytest.raises(ValidationError):
        grl_objective(b, GRLConfig(group_size=4))


def test_batch_shape_validation():
    with pytest.raises(ValidationError):
        GRLBatch(np.zeros((2, 1)), [0, 1], [0, 1, 1], np.full((2, 2), 0.5), None, [0.0, 1.0])


@pytest.mark.parametrize("kwargs", [
    dict(group_size=1), dict(clip_eps=0.0), dict(ce_alpha=-1.0), dict(reward_kind="iou"),
    dict(ratio_mode="both"), dict(ref_update="per_step"), dict(std_floor=0.0),
])
def test_config_validation(kwargs):
    with pytest.raises(ValidationError):
        GRLConfig(**kwargs)


def test_balanced_ce_weights_classes_equally():
    p = np.array([0.2, 0.2, 0.2, 0.2])
    y = np.array([1, 0, 0, 0])
    loss, _ = supervised_objective(p, y, "balanced_ce")
    # w_pos = 4/2, w_neg = 4/6
    expected = (2.0 * -math.log(0.2) + 3 * (4 / 6) * -math.log(0.8)) / 4
    assert loss == pytest.approx(expected, rel=1e-14)


def test_supervised_focal_gamma_zero_is_ce():
    rng = np.random.default_rng(0)
    p, y = rng.uniform(0.01, 0.99, 20), rng.integers(0, 2, 20)
    a = supervised_objective(p, y, "ce")
    b = supervised_objective(p, y, "focal", gamma=0.0)
    assert a[0] == b[0]
    assert np.array_equal(a[1], b[1])


def test_unknown_supervised_kind():
    with pytest.raises(ValidationError):
        supervised_objective([0.5], [1], "hinge")
