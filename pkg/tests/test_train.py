import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from drm import conformal as cf
from drm import data as dg
from drm import models
from drm import tensor as tg
from drm import train as tr
from drm.tensor import Node

from helpers import reference_martingale


def toy(T=200, seed=0, schedule=dg.TOY2D_TRAIN):
    return dg.gen_toy2d(T, schedule, seed)


def small_cfg(**kw):
    base = dict(T=200, batch_size=32, detect_seq_len=40, lam=10.0, sigma=0.1, sigma_min=0.5,
                total_epochs=1)
    base.update(kw)
    return tr.TrainConfig(**base)


# ---------------------------------------------------------------- models

def test_mlp_parameter_count():
    assert models.build_mlp(2, [64, 64], 2).num_parameters() == 2 * 64 + 64 + 64 * 64 + 64 + 64 * 2 + 2


def test_mlp_features_unit_norm_and_logit_shape():
    m = models.build_mlp(2, [64, 64], 2, seed=1)
    x = np.random.default_rng(0).normal(size=(7, 2))
    logits, phi = m.forward(x)
    assert logits.shape == (7, 2)
    np.testing.assert_allclose(np.linalg.norm(phi.value, axis=1), 1.0, atol=1e-6)


def test_mlp_feature_tap():
    m = models.build_mlp(2, [8, 5], 2, feature_tap=0)
    assert m.features(np.ones((3, 2))).shape == (3, 8)
    with pytest.raises(ValueError):
        models.build_mlp(2, [8, 5], 2, feature_tap=2)
    with pytest.raises(ValueError):
        models.build_mlp(2, [], 2)


def test_cnn_shapes_and_norm():
    m = models.build_cnn(seed=0)
    x = np.random.default_rng(0).random((4, 3, 14, 14))
    logits, phi = m.forward(x)
    assert logits.shape == (4, 2)
    assert phi.shape == (4, 32 * 10 * 10)
    np.testing.assert_allclose(np.linalg.norm(phi.value, axis=1), 1.0, atol=1e-6)
    assert models.build_cnn(feature_tap=1).features(x).shape == (4, 16 * 12 * 12)


def test_cnn_rejects_small_input_and_bad_tap():
    with pytest.raises(ValueError, match="too small"):
        models.build_cnn((3, 7, 14))
    with pytest.raises(ValueError):
        models.build_cnn(feature_tap=3)


def test_cnn_first_kernel_gradient():
    m = models.build_cnn((3, 8, 8), channels=(4, 6), hidden=8, seed=2)
    rng = np.random.default_rng(3)
    x, y = rng.random((3, 3, 8, 8)), np.array([0, 1, 1])
    kernel = m.conv1[0]
    assert tg.grad_check(lambda: tg.softmax_cross_entropy(m(x), y), [kernel]) < 1e-3


def test_checkpoint_round_trip_and_reproducible(tmp_path):
    m = models.build_mlp(2, [6, 4], 2, seed=5)
    models.save_checkpoint(tmp_path / "a.npz", m, {"lam": 1.0})
    models.save_checkpoint(tmp_path / "b.npz", m, {"lam": 1.0})
    assert (tmp_path / "a.npz").read_bytes() == (tmp_path / "b.npz").read_bytes()
    back, cfg = models.load_checkpoint(tmp_path / "a.npz")
    assert cfg == {"lam": 1.0} and back.arch == m.arch
    for k, v in m.state_dict().items():
        assert back.state_dict()[k].tobytes() == v.tobytes()


def test_load_state_dict_checks_shapes():
    m = models.build_mlp(2, [4], 2)
    state = m.state_dict()
    state["fc0.weight"] = np.zeros((3, 4))
    with pytest.raises(ValueError, match="fc0.weight"):
        m.load_state_dict(state)


# ---------------------------------------------------------------- subsequences

def test_subsample_full_length_is_identity():
    (idx,) = tr.subsample_detection_sequences(50, 50, 1, np.random.default_rng(0))
    np.testing.assert_array_equal(idx, np.arange(50))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), T=st.integers(5, 300), data=st.data())
def test_subsample_sorted_distinct_and_deterministic(seed, T, data):
    length = data.draw(st.integers(1, T))
    a = tr.subsample_detection_sequences(T, length, 3, np.random.default_rng(seed))
    b = tr.subsample_detection_sequences(T, length, 3, np.random.default_rng(seed))
    for x, y in zip(a, b):
        assert len(x) == length and np.all(np.diff(x) > 0)
        assert x.min() >= 0 and x.max() < T
        np.testing.assert_array_equal(x, y)


def test_subsample_errors_and_class_redraw():
    with pytest.raises(ValueError):
        tr.subsample_detection_sequences(10, 11, 1, np.random.default_rng(0))
    labels = np.array([0] * 18 + [1, 1])
    for idx in tr.subsample_detection_sequences(20, 8, 20, np.random.default_rng(1), labels):
        assert np.sum(labels[idx] == 1) == 2


# ---------------------------------------------------------------- loss

def test_zero_lambda_is_cross_entropy():
    d = toy(60)
    m = models.build_mlp(2, [8, 8], 2)
    subs = tr.subsample_detection_sequences(60, 20, 1, np.random.default_rng(0), d.labels)
    total, ce, pen = tr.drm_loss(m, d.inputs[:10], d.labels[:10], d, subs, small_cfg(lam=0.0))
    assert pen is None
    assert total.item() == tg.softmax_cross_entropy(m(d.inputs[:10]), d.labels[:10]).item()


def test_constant_encoder_penalty_is_lambda():
    d = toy(60)
    m = models.build_mlp(2, [8, 8], 2)
    for name, node in ((p.name, p.node) for p in m.parameters()):
        if name in ("fc0.weight", "fc1.weight"):
            node.value = np.zeros_like(node.value)
        elif name in ("fc0.bias", "fc1.bias"):
            node.value = np.linspace(0.1, 0.8, node.value.size)
    subs = tr.subsample_detection_sequences(60, 30, 2, np.random.default_rng(0), d.labels)
    for mode in cf.MODES:
        cfg = small_cfg(lam=7.0, mode=mode)
        total, ce, pen = tr.drm_loss(m, d.inputs[:10], d.labels[:10], d, subs, cfg)
        assert pen.item() == 1.0
        assert total.item() == pytest.approx(ce.item() + 7.0)


@pytest.mark.parametrize("mode", cf.MODES)
def test_full_subsequence_matches_direct_evaluation(mode):
    d = toy(12, seed=3)
    m = models.build_mlp(2, [5, 4], 2, seed=1)
    cfg = small_cfg(T=12, detect_seq_len=12, mode=mode)
    pen = tr.penalty(m, d, [np.arange(12)], cfg).item()
    phi = m.features(d.inputs).value
    labels = d.labels if mode == cf.CONCEPT else None
    ref = reference_martingale([Node(r) for r in phi], labels, cfg.soft())
    assert pen == pytest.approx(np.mean(ref.value), rel=1e-10)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_penalty_nonnegative(seed):
    d = toy(40, seed=seed % 1000)
    m = models.build_mlp(2, [6], 2, seed=seed % 97)
    subs = tr.subsample_detection_sequences(40, 20, 2, np.random.default_rng(seed), d.labels)
    assert tr.penalty(m, d, subs, small_cfg(T=40, detect_seq_len=20)).item() >= 0


def test_full_objective_gradient_twenty_points():
    d = toy(20, seed=4)
    m = models.build_mlp(2, [6, 5], 2, seed=3)
    cfg = small_cfg(T=20, detect_seq_len=20, lam=2.0, sigma=0.1, sigma_min=0.1)
    subs = [np.arange(20)]

    def loss():
        return tr.drm_loss(m, d.inputs, d.labels, d, subs, cfg)[0]

    assert tg.grad_check(loss, m.nodes()) < 1e-3


# ---------------------------------------------------------------- evaluate

def test_evaluate_ties_go_to_lower_class():
    m = models.build_mlp(2, [4], 2)
    m.layers[-1][0].value[:] = 0.0
    d = dg.LabeledSequence(np.ones((4, 2)), np.array([0, 0, 1, 1]), np.zeros(4))
    assert tr.evaluate(m, d) == 0.5
    assert np.all(np.argmax(m.predict_logits(d.inputs), axis=1) == 0)


def test_evaluate_perfect_rule():
    d = toy(500, schedule=dg.ShiftSchedule.constant(0.0))
    m = models.build_mlp(2, [1], 2)
    m.layers[0][0].value[:] = [[0.0], [100.0]]
    m.layers[1][0].value[:] = [[-1.0, 1.0]]
    assert tr.evaluate(m, d) == 1.0


# ---------------------------------------------------------------- training loop

def test_single_example_step_reduces_loss():
    d = dg.LabeledSequence(np.array([[0.3, -1.2]]), np.array([1]), np.zeros(1))
    m = models.build_mlp(2, [8], 2, seed=0)
    before = tg.softmax_cross_entropy(m(d.inputs), d.labels).item()
    tr.train(m, d, tr.TrainConfig(T=1, batch_size=1, detect_seq_len=1, lam=0.0, total_epochs=1),
             with_traces=False)
    assert tg.softmax_cross_entropy(m(d.inputs), d.labels).item() < before


def test_zero_lambda_run_ignores_penalty_settings():
    d = toy(200, seed=1)
    states = []
    for sigma, seq in ((1e-3, 50), (0.5, 100)):
        m = models.build_mlp(2, [8, 8], 2, seed=0)
        tr.train(m, d, small_cfg(lam=0.0, sigma=sigma, detect_seq_len=seq, total_epochs=2),
                 with_traces=False)
        states.append(m.state_dict())
    for k in states[0]:
        assert states[0][k].tobytes() == states[1][k].tobytes()


def test_training_is_deterministic():
    d = toy(200, seed=2)
    runs = []
    for _ in range(2):
        m = models.build_mlp(2, [8, 8], 2, seed=0)
        rep = tr.train(m, d, small_cfg(erm_epochs=1, total_epochs=2))
        runs.append((m.state_dict(), rep.to_dict()))
    assert runs[0][1] == runs[1][1]
    for k in runs[0][0]:
        assert runs[0][0][k].tobytes() == runs[1][0][k].tobytes()


def test_report_contents():
    d = toy(200, seed=3)
    rep = tr.train(models.build_mlp(2, [8, 8], 2), d, small_cfg(erm_epochs=1, total_epochs=3), toy(200, 9))
    assert [e.lam for e in rep.epochs] == [0.0, 10.0, 10.0]
    assert rep.epochs[0].penalty is None and rep.epochs[1].penalty >= 0
    assert all(0 <= e.train_accuracy <= 1 for e in rep.epochs)
    assert 0 <= rep.train_accuracy <= 1 and 0 <= rep.test_accuracy <= 1
    assert rep.warm_start_trace is not None and len(rep.final_trace.values) == 200


def test_config_invariants():
    with pytest.raises(ValueError):
        tr.TrainConfig(T=10, detect_seq_len=11)
    with pytest.raises(ValueError):
        tr.TrainConfig(erm_epochs=3, total_epochs=2)
    with pytest.raises(ValueError):
        tr.TrainConfig(redraw="batch")


def test_divergence_reports_epoch_and_step():
    d = toy(64, seed=0)
    d.inputs[40] = np.inf
    with pytest.raises(tr.TrainingDiverged) as err:
        tr.train(models.build_mlp(2, [4], 2), d, small_cfg(T=64, batch_size=16, lam=0.0))
    assert err.value.epoch == 1 and err.value.step >= 1


@pytest.mark.slow
def test_erm_collapses_on_toy2d():
    train_d = dg.gen_toy2d(2000, dg.TOY2D_TRAIN, 0)
    test_d = dg.gen_toy2d(2000, dg.TOY2D_TEST, 1000)
    rep = tr.train(models.build_mlp(2, [64, 64], 2, seed=0), train_d,
                   tr.TrainConfig(lam=0.0), test_d, with_traces=False)
    assert rep.train_accuracy - rep.test_accuracy >= 0.15
