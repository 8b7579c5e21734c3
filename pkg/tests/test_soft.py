import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from drm import conformal as cf
from drm import soft
from drm import tensor as tg
from drm.soft import SoftConfig
from drm.tensor import Node

from helpers import reference_martingale


def planar(*degrees):
    r = np.radians(degrees)
    return np.column_stack([np.cos(r), np.sin(r)])


def leaf(x):
    return Node(np.asarray(x, dtype=float), requires_grad=True)


# ---------------------------------------------------------------- soft-min

def test_soft_min_equal_inputs_exact():
    assert soft.soft_min([0.37] * 4, 0.01).item() == 0.37


def test_soft_min_two_values_closed_form():
    assert soft.soft_min([0.0, 1.0], 1.0).item() == pytest.approx(np.exp(-1) / (1 + np.exp(-1)), rel=1e-14)
    assert abs(soft.soft_min([0.0, 1.0], 1e-4).item()) < 1e-6


def test_soft_min_rejects_empty_and_bad_sigma():
    with pytest.raises(ValueError):
        soft.soft_min([], 1.0)
    with pytest.raises(ValueError):
        soft.soft_min([1.0], 0.0)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), sigma=st.sampled_from([0.2, 0.5, 1.0]))
def test_soft_min_bounded_and_grad_checked(seed, sigma):
    rng = np.random.default_rng(seed)
    d = [leaf(v) for v in rng.uniform(0, 2, 5)]
    v = soft.soft_min(d, sigma).item()
    vals = [x.item() for x in d]
    assert min(vals) - 1e-12 <= v <= max(vals) + 1e-12
    assert tg.grad_check(lambda: soft.soft_min(d, sigma), d) < 1e-4


# ---------------------------------------------------------------- soft scores and p-values

def test_soft_scores_duplicates_are_zero():
    f = [Node([0.3, 0.4]), Node([0.3, 0.4])]
    s = soft.soft_conformity_scores(f, None, SoftConfig(), 2)
    assert [x.item() for x in s] == [0.0, 0.0]


def test_soft_scores_approach_hard_scores():
    cfg = SoftConfig(1e-4, 1e-4)
    s = soft.soft_conformity_scores(list(planar(0, 60, 180)), None, cfg, 3)
    np.testing.assert_allclose([x.item() for x in s], [0.5, 0.5, 1.5], atol=1e-4)


def test_soft_scores_concept_missing_neighbour():
    cfg = SoftConfig(mode=cf.CONCEPT)
    s = soft.soft_conformity_scores(list(planar(0, 60, 90)), [0, 1, 0], cfg, 3)
    assert s[1] is None
    assert s[0].item() == pytest.approx(1.0)


def test_soft_score_gradients():
    rng = np.random.default_rng(0)
    feats = [leaf(rng.normal(size=3)) for _ in range(5)]
    cfg = SoftConfig(0.2, 0.2)

    def total():
        return tg.sum_(tg.stack(soft.soft_conformity_scores(feats, None, cfg, 5)))

    assert tg.grad_check(total, feats) < 1e-4


def test_soft_pvalue_examples():
    cfg = SoftConfig(1e-4, 1e-4)
    assert soft.soft_pvalue([Node(0.9)], None, cfg).item() == 0.5
    p = soft.soft_pvalue([Node(0.5), Node(0.5), Node(1.5)], None, cfg).item()
    assert p == pytest.approx(2.5 / 3, abs=1e-9)
    assert soft.soft_pvalue([Node(0.2)] * 6, None, cfg).item() == 0.5
    # concept mode: only the same-label score counts, plus the self term
    cfg = SoftConfig(1e-4, 1e-4, mode=cf.CONCEPT)
    p = soft.soft_pvalue([Node(0.1), Node(0.9), Node(1.5)], [0, 1, 0], cfg).item()
    assert p == pytest.approx(1.5 / 2, abs=1e-9)


# ---------------------------------------------------------------- whole-sequence route

@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), mode=st.sampled_from(cf.MODES), gamma=st.sampled_from([1.0, 2.0]))
def test_fused_route_matches_reference(seed, mode, gamma):
    rng = np.random.default_rng(seed)
    n = 9
    x = rng.normal(size=(n, 3))
    labels = np.array([0, 0, 1, 1] + list(rng.integers(0, 2, n - 4)))
    lab = labels if mode == cf.CONCEPT else None
    cfg = SoftConfig(0.3, 0.2, gamma, mode)
    fused = soft.soft_martingale(Node(x), lab, cfg).soft_values.value
    ref = reference_martingale([Node(r) for r in x], lab, cfg).value
    np.testing.assert_allclose(fused, ref, rtol=1e-10)


def test_all_equal_features_give_unit_martingale():
    x = np.tile([0.6, -0.8, 0.1], (12, 1))
    for mode in cf.MODES:
        r = soft.soft_martingale(Node(x), np.array([0, 1] * 6), SoftConfig(mode=mode))
        np.testing.assert_array_equal(r.soft_values.value, 1.0)
        assert r.mean_penalty.item() == 1.0


def test_soft_martingale_gradient_twenty_points():
    rng = np.random.default_rng(3)
    x = leaf(rng.normal(size=(20, 4)))
    y = rng.integers(0, 2, 20)
    for mode in cf.MODES:
        cfg = SoftConfig(0.1, 0.1, 1.0, mode)
        lab = y if mode == cf.CONCEPT else None
        assert tg.grad_check(lambda: soft.soft_martingale(x, lab, cfg).mean_penalty, [x]) < 1e-3


def test_soft_martingale_gradient_sharpened():
    rng = np.random.default_rng(4)
    x = leaf(rng.normal(size=(12, 3)))
    cfg = SoftConfig(0.2, 0.2, 2.0)
    assert tg.grad_check(lambda: soft.soft_martingale(x, None, cfg).mean_penalty, [x], eps=1e-6) < 1e-3


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), sigma=st.sampled_from([1e-3, 1e-2, 0.1, 1.0]))
def test_soft_pvalues_in_open_interval(seed, sigma):
    rng = np.random.default_rng(seed)
    r = soft.soft_martingale(Node(rng.normal(size=(30, 5))), None, SoftConfig.from_sigma(sigma))
    assert np.all((r.pvalues.value > 0) & (r.pvalues.value < 1))
    assert np.all(r.soft_values.value > 0)


def test_soft_tracks_hard_martingale_at_small_sigma():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(50, 3))
    hard = cf.detect(cf.DetectionSequence(x), 0.01, xi=0.5).values
    soft_vals = soft.soft_martingale(Node(x), None, SoftConfig(1e-6, 1e-6)).soft_values.value
    assert np.max(np.abs(soft_vals - hard) / hard) < 1e-2


def test_outlier_raises_final_value():
    rng = np.random.default_rng(6)
    base = rng.normal(size=(40, 3)) + np.array([4.0, 0.0, 0.0])
    with_outlier = np.vstack([base, [[-4.0, 0.5, 0.0]]])
    cfg = SoftConfig()
    plain = soft.soft_martingale(Node(np.vstack([base, base[:1] * 1.001])), None, cfg).soft_values.value[-1]
    out = soft.soft_martingale(Node(with_outlier), None, cfg).soft_values.value[-1]
    assert out > plain


def test_soft_martingale_clip_has_zero_gradient():
    p = leaf(np.ones(200))
    s = soft.martingale_node(p, clip=(1e-12, 1e3))
    assert s.value.max() == 1e3
    tg.sum_(s).backward()
    assert np.all(np.isfinite(p.grad))
    assert np.all(p.grad[-50:] == 0)


def test_config_validation():
    with pytest.raises(ValueError):
        SoftConfig(sigma_min=0.0)
    with pytest.raises(ValueError):
        SoftConfig(mode="other")
    cfg = SoftConfig.from_sigma(0.1, 2.0, cf.CONCEPT)
    assert (cfg.sigma_min, cfg.sigma_rank, cfg.gamma) == (0.1, 0.1, 2.0)
