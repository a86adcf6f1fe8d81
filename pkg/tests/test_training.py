import math

import numpy as np
import pytest

from ulcnn.dataio import FrameSet, generate_dataset, split
from ulcnn.errors import ConfigError, NumericError
from ulcnn.model import ModelConfig, build
from ulcnn.training import (Adam, ALRConfig, PlateauSchedule, TrainConfig, adam_step, alr_update,
                            cross_entropy, evaluate, fit, metrics_from_predictions)


# --- cross entropy --------------------------------------------------------------

def test_uniform_loss():
    loss, _ = cross_entropy(np.full((4, 11), 1 / 11), np.array([0, 3, 5, 10]))
    assert loss == pytest.approx(math.log(11), abs=1e-12)
    assert round(loss, 4) == 2.3979


def test_onehot_loss_zero():
    probs = np.eye(5)[[1, 4]]
    loss, grad = cross_entropy(probs, np.array([1, 4]))
    assert loss == pytest.approx(0.0, abs=1e-12)
    assert np.allclose(grad, 0.0)


def test_zero_probability_clamped():
    loss, _ = cross_entropy(np.array([[1.0, 0.0]]), np.array([1]))
    assert loss == pytest.approx(-math.log(1e-12))


def test_label_out_of_range():
    with pytest.raises(ConfigError):
        cross_entropy(np.full((1, 3), 1 / 3), np.array([3]))


# --- adam -----------------------------------------------------------------------

def test_adam_first_step_closed_form():
    (w,) = adam_step([np.zeros(1)], [np.ones(1)], {}, lr=0.001)
    # m_hat = v_hat = 1  ->  w = -lr * 1 / (1 + eps)
    assert w[0] == pytest.approx(-0.001 / (1 + 1e-8), rel=1e-12)


def test_adam_zero_gradient_unchanged():
    state = {}
    params = [np.array([1.5, -2.0])]
    for _ in range(20):
        params = adam_step(params, [np.zeros(2)], state, lr=0.01)
    assert np.array_equal(params[0], [1.5, -2.0])


def test_adam_symmetry():
    state = {}
    params = [np.array([0.3]), np.array([0.3])]
    rng = np.random.default_rng(0)
    for _ in range(5):
        g = rng.standard_normal(1)
        params = adam_step(params, [g, g.copy()], state, lr=0.01)
    assert np.array_equal(params[0], params[1])


def test_adam_class_matches_functional(rng):
    p = rng.standard_normal(4)
    g = np.zeros(4)
    opt = Adam([("p", p, g)])
    ref, state = [p.copy()], {}
    for _ in range(3):
        grad = rng.standard_normal(4)
        g[...] = grad
        opt.step(0.01)
        ref = adam_step(ref, [grad], state, 0.01)
    np.testing.assert_allclose(p, ref[0], rtol=1e-14)


def test_adam_nonfinite_aborts():
    p, g = np.ones(2), np.array([np.nan, 0.0])
    opt = Adam([("layer.kernel", p, g)])
    with pytest.raises(NumericError, match="layer.kernel"):
        opt.step(0.1)
    assert np.array_equal(p, [1.0, 1.0])


def test_lr_zero_leaves_model_unchanged(rng):
    model = build(ModelConfig(frame_length=16, n_fmdr=2, n_classes=3))
    before = {n: p.copy() for n, p, _ in model.named_params()}
    logits = model.forward_logits(rng.standard_normal((4, 2, 16)), train=True)
    _, d = cross_entropy(np.exp(logits) / np.exp(logits).sum(1, keepdims=True), np.array([0, 1, 2, 0]))
    model.backward(d)
    Adam(model.named_params()).step(0.0)
    assert all(np.array_equal(before[n], p) for n, p, _ in model.named_params())


# --- adaptive learning rate -----------------------------------------------------

def _scripted(losses, lr=0.001, cfg=None):
    """Replay through alr_update epoch by epoch, as a training loop would."""
    lrs = []
    for i in range(1, len(losses) + 1):
        lr = alr_update(losses[:i], lr, cfg)
        lrs.append(lr)
    return lrs


def test_plateau_decays_at_window_expiry():
    losses = [1.0, 0.9] + [0.95] * 10
    lrs = _scripted(losses)
    assert lrs[:-1] == [0.001] * 11
    assert lrs[-1] == pytest.approx(0.0008)


def test_equal_loss_is_not_improvement():
    lrs = _scripted([1.0, 0.9] + [0.9] * 10)
    assert lrs[-1] == pytest.approx(0.0008)


def test_strict_decrease_never_changes():
    assert _scripted(list(np.linspace(2.0, 0.1, 60))) == [0.001] * 60


def test_repeated_plateaus_sequence():
    losses = [1.0] + [1.0] * 50
    lrs = _scripted(losses, cfg=ALRConfig(min_lr=0.0006))
    changes = [lrs[i] for i in range(len(lrs)) if i == 0 or lrs[i] != lrs[i - 1]]
    assert changes == pytest.approx([0.001, 0.0008, 0.00064, 0.0006])
    # decays happen at epochs 11, 21, 31 (1-based) then floor
    assert [i + 1 for i in range(1, len(lrs)) if lrs[i] != lrs[i - 1]] == [11, 21, 31]


def test_schedule_class_agrees_with_function():
    rng = np.random.default_rng(0)
    losses = list(1 + rng.random(80) * 0.1)
    sched = PlateauSchedule(0.001)
    assert [sched.step(v) for v in losses] == _scripted(losses)


def test_alr_config_validation():
    with pytest.raises(ConfigError):
        ALRConfig(factor=1.2).validate()
    with pytest.raises(ConfigError):
        ALRConfig(patience=0).validate()
    with pytest.raises(ConfigError):
        alr_update([], 0.1)


# --- evaluation -----------------------------------------------------------------

def test_perfect_classifier():
    labels = np.repeat(np.arange(4), 5)
    snr = np.tile([0, 10, 0, 10, 0], 4)
    r = metrics_from_predictions(labels, labels, snr, 4)
    assert r.overall_accuracy == r.average_accuracy == 1.0
    assert all(v == 1.0 for v in r.per_snr.values())
    assert np.array_equal(r.confusion, np.diag(np.bincount(labels)))


def test_constant_predictor():
    labels = np.repeat(np.arange(11), 20)
    r = metrics_from_predictions(np.zeros_like(labels), labels, np.zeros_like(labels), 11)
    assert r.overall_accuracy == pytest.approx(1 / 11)
    assert np.array_equal(r.confusion.sum(axis=1), np.bincount(labels))


def test_average_equals_overall_on_balanced_cells(rng):
    labels = np.repeat(np.arange(3), 40)
    snr = np.tile(np.repeat([-10, 0, 10, 20], 10), 3)
    pred = np.where(rng.random(len(labels)) < 0.7, labels, rng.integers(0, 3, len(labels)))
    r = metrics_from_predictions(pred, labels, snr, 3)
    # independent count
    cells = {s: np.mean(pred[snr == s] == labels[snr == s]) for s in (-10, 0, 10, 20)}
    assert r.average_accuracy == pytest.approx(np.mean(list(cells.values())), abs=1e-15)
    assert r.average_accuracy == pytest.approx(r.overall_accuracy, abs=1e-12)


def test_empty_test_set():
    with pytest.raises(ConfigError):
        evaluate(build(), FrameSet(np.zeros((0, 2, 128)), [], []))


def test_csv_outputs(tmp_path):
    r = metrics_from_predictions(np.array([0, 1, 1]), np.array([0, 1, 0]), np.array([5, 5, 10]), 2)
    r.write_per_snr_csv(tmp_path / "snr.csv")
    r.write_confusion_csv(tmp_path / "cm.csv", ["A", "B"])
    assert (tmp_path / "snr.csv").read_text().splitlines() == ["snr_db,accuracy", "5,1.0", "10,0.0"]
    assert (tmp_path / "cm.csv").read_text().splitlines()[1:] == ["A,1,1", "B,0,1"]


# --- fit ------------------------------------------------------------------------

def _tiny_task(seed=0, per_cell=32):
    fs = generate_dataset(["BPSK", "QPSK"], [10], per_cell, seed=seed, frame_length=16)
    return split(fs, (0.5, 0.5, 0.0), seed=seed)[:2]


TINY = ModelConfig(frame_length=16, n_fmdr=2, n_classes=2)


def test_fit_bookkeeping():
    train, val = _tiny_task()
    model, report = fit(build(TINY), train, val, TrainConfig(epochs=2, batch_size=16))
    assert len(report.history) == 2
    best = min(r.val_loss for r in report.history)
    from ulcnn.training import _dataset_loss
    assert _dataset_loss(model, val)[0] == pytest.approx(best, abs=1e-12)


def test_fit_deterministic():
    train, val = _tiny_task()
    runs = [fit(build(TINY, seed=1), train, val, TrainConfig(epochs=3, batch_size=16, seed=7))[1]
            for _ in range(2)]
    assert [(r.train_loss, r.val_loss) for r in runs[0].history] == \
           [(r.train_loss, r.val_loss) for r in runs[1].history]


def test_da_epoch_sample_count(monkeypatch):
    train, val = _tiny_task()
    seen = []
    import ulcnn.training as tr

    real = tr.cross_entropy

    def counting(probs, labels):
        seen.append(len(labels))
        return real(probs, labels)

    monkeypatch.setattr(tr, "cross_entropy", counting)
    fit(build(TINY), train, val, TrainConfig(epochs=1, batch_size=16, use_da=True))
    train_steps = seen[: -(-4 * len(train) // 16)]
    assert sum(train_steps) == 4 * len(train)
    seen.clear()
    fit(build(TINY), train, val, TrainConfig(epochs=1, batch_size=16, use_da=False))
    assert sum(seen[: -(-len(train) // 16)]) == len(train)


def test_best_checkpoint_invariant():
    train, val = _tiny_task(per_cell=48)
    model, report = fit(build(TINY), train, val, TrainConfig(epochs=4, batch_size=16, initial_lr=0.01))
    from ulcnn.training import _dataset_loss
    final = _dataset_loss(model, val)[0]
    assert all(final <= r.val_loss + 1e-12 for r in report.history)


def test_no_alr_keeps_lr_constant():
    train, val = _tiny_task()
    cfg = TrainConfig(epochs=4, batch_size=16, use_alr=False, alr=ALRConfig(patience=1))
    _, report = fit(build(TINY), train, val, cfg)
    assert {r.lr for r in report.history} == {cfg.initial_lr}


def test_overfits_noise_free_microbatch():
    fs = generate_dataset(["BPSK", "QPSK", "8PSK", "PAM4"], [None], 4, seed=3, frame_length=16)
    model = build(ModelConfig(frame_length=16, n_fmdr=2, n_classes=4), seed=0)
    opt = Adam(model.named_params())
    losses = []
    from ulcnn.rv_layers import softmax
    for _ in range(200):
        logits = model.forward_logits(fs.iq, train=True)
        loss, d = cross_entropy(softmax(logits), fs.labels)
        losses.append(loss)
        model.zero_grad_all()
        model.backward(d)
        opt.step(0.01)
    assert all(b < a for a, b in zip(losses[:5], losses[1:6]))
    assert np.mean(model.forward_logits(fs.iq, train=True).argmax(1) == fs.labels) >= 0.99


def test_fit_rejects_empty():
    train, _ = _tiny_task()
    with pytest.raises(ConfigError):
        fit(build(TINY), train, train[np.array([], dtype=int)])
