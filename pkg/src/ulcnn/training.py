"""Loss, optimizer, plateau learning-rate schedule, the epoch loop and metrics."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .dataio import FrameSet, rotate_augment
from .errors import ConfigError, NumericError, ShapeError
from .rv_layers import softmax

log = logging.getLogger(__name__)

LOG_EPS = 1e-12


def cross_entropy(probs, labels):
    """Mean negative log-likelihood and its gradient w.r.t. the logits (``(p - onehot)/B``)."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    b, n = probs.shape
    if labels.shape != (b,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {b}", axis=0)
    if b and (labels.min() < 0 or labels.max() >= n):
        raise ConfigError(f"label out of range [0, {n})")
    picked = probs[np.arange(b), labels]
    loss = float(-np.log(np.maximum(picked, LOG_EPS)).mean())
    grad = probs.copy()
    grad[np.arange(b), labels] -= 1.0
    return loss, grad / b


@dataclass
class AdamConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


class Adam:
    def __init__(self, named_params, config: AdamConfig | None = None):
        self.cfg = config or AdamConfig()
        self.params = [(n, p, g) for n, p, g in named_params]
        self.m = [np.zeros_like(p) for _, p, _ in self.params]
        self.v = [np.zeros_like(p) for _, p, _ in self.params]
        self.t = 0

    def step(self, lr):
        for name, _, g in self.params:
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for {name}; step aborted")
        self.t += 1
        b1, b2, eps = self.cfg.beta1, self.cfg.beta2, self.cfg.eps
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for (_, p, g), m, v in zip(self.params, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def adam_step(params, grads, state, lr, config: AdamConfig | None = None):
    """Functional Adam on lists of arrays. ``state`` is a dict holding m, v, t; updated in place."""
    cfg = config or AdamConfig()
    for i, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {i}; step aborted")
    if not state:
        state.update(m=[np.zeros_like(p) for p in params], v=[np.zeros_like(p) for p in params], t=0)
    state["t"] += 1
    t = state["t"]
    out = []
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        m[...] = cfg.beta1 * m + (1 - cfg.beta1) * g
        v[...] = cfg.beta2 * v + (1 - cfg.beta2) * g * g
        mhat = m / (1 - cfg.beta1 ** t)
        vhat = v / (1 - cfg.beta2 ** t)
        out.append(p - lr * mhat / (np.sqrt(vhat) + cfg.eps))
    return out


@dataclass
class ALRConfig:
    patience: int = 10
    factor: float = 0.8
    min_lr: float = 1e-6

    def validate(self):
        if not 0 < self.factor < 1:
            raise ConfigError(f"ALR factor must be in (0, 1), got {self.factor}")
        if self.patience < 1:
            raise ConfigError(f"ALR patience must be >= 1, got {self.patience}")
        return self


class PlateauSchedule:
    """Multiply lr by ``factor`` once validation loss has not strictly improved on
    its best value for ``patience`` consecutive epochs; the wait counter then resets."""

    def __init__(self, lr, config: ALRConfig | None = None):
        self.cfg = (config or ALRConfig()).validate()
        self.lr = lr
        self.best = math.inf
        self.wait = 0

    def step(self, val_loss):
        if val_loss < self.best:
            self.best = val_loss
            self.wait = 0
        else:
            self.wait += 1
            if self.wait >= self.cfg.patience:
                self.lr = max(self.lr * self.cfg.factor, self.cfg.min_lr)
                self.wait = 0
        return self.lr


def alr_update(history, current_lr, config: ALRConfig | None = None):
    """Learning rate after the last epoch of ``history`` (validation losses, oldest first)."""
    if not history:
        raise ConfigError("ALR needs at least one validation loss")
    cfg = (config or ALRConfig()).validate()
    best, wait = math.inf, 0
    decay = False
    for loss in history:
        decay = False
        if loss < best:
            best, wait = loss, 0
        else:
            wait += 1
            if wait >= cfg.patience:
                decay, wait = True, 0
    return max(current_lr * cfg.factor, cfg.min_lr) if decay else current_lr


@dataclass
class TrainConfig:
    initial_lr: float = 0.001
    epochs: int = 200
    batch_size: int = 128
    alr: ALRConfig = field(default_factory=ALRConfig)
    adam: AdamConfig = field(default_factory=AdamConfig)
    seed: int = 0
    use_da: bool = True
    use_alr: bool = True

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        alr = ALRConfig(**d.pop("alr", {}))
        adam = AdamConfig(**d.pop("adam", {}))
        try:
            return cls(alr=alr, adam=adam, **d)
        except TypeError as exc:
            raise ConfigError(f"bad train config: {exc}") from None


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_loss: float
    val_acc: float


@dataclass
class MetricsReport:
    overall_accuracy: float
    average_accuracy: float
    per_snr: dict[int, float]
    confusion: np.ndarray
    history: list[EpochRecord] = field(default_factory=list)

    def write_history_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["epoch", "lr", "train_loss", "val_loss", "val_acc"])
            for r in self.history:
                w.writerow([r.epoch, repr(r.lr), repr(r.train_loss), repr(r.val_loss), repr(r.val_acc)])

    def write_per_snr_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["snr_db", "accuracy"])
            for snr, acc in sorted(self.per_snr.items()):
                w.writerow([snr, repr(acc)])

    def write_confusion_csv(self, path, names=None):
        n = self.confusion.shape[0]
        names = list(names) if names is not None else [str(i) for i in range(n)]
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["true\\pred"] + names)
            for name, row in zip(names, self.confusion):
                w.writerow([name] + [int(v) for v in row])


def predict_batches(model, iq, batch_size=512):
    out = [model.forward(iq[i:i + batch_size]) for i in range(0, len(iq), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, model.config.n_classes))


def evaluate(model, data: FrameSet, batch_size=512) -> MetricsReport:
    if len(data) == 0:
        raise ConfigError("cannot evaluate on an empty test set")
    probs = predict_batches(model, data.iq, batch_size)
    return metrics_from_predictions(np.argmax(probs, axis=1), data.labels, data.snr_db,
                                    model.config.n_classes)


def metrics_from_predictions(pred, labels, snr_db, n_classes) -> MetricsReport:
    pred, labels, snr_db = map(np.asarray, (pred, labels, snr_db))
    if len(labels) == 0:
        raise ConfigError("cannot evaluate on an empty test set")
    correct = pred == labels
    per_snr = {int(s): float(correct[snr_db == s].mean()) for s in np.unique(snr_db)}
    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(confusion, (labels, pred), 1)
    return MetricsReport(float(correct.mean()), float(np.mean(list(per_snr.values()))),
                         per_snr, confusion)


def _dataset_loss(model, data: FrameSet, batch_size=512):
    probs = predict_batches(model, data.iq, batch_size)
    loss, _ = cross_entropy(probs, data.labels)
    return loss, float((np.argmax(probs, axis=1) == data.labels).mean())


def fit(model, train: FrameSet, val: FrameSet, config: TrainConfig | None = None, on_epoch=None):
    """Train with Adam and keep the weights of the best validation-loss epoch.

    Returns ``(model, report)`` where ``report.history`` has one record per epoch and
    the accuracy fields describe the validation set under the restored best weights.
    """
    cfg = config or TrainConfig()
    if len(train) == 0 or len(val) == 0:
        raise ConfigError("train and validation sets must be non-empty")
    rng = np.random.default_rng(cfg.seed)
    data = rotate_augment(train) if cfg.use_da else train
    x_all, y_all = data.iq, data.labels
    schedule = PlateauSchedule(cfg.initial_lr, cfg.alr)
    opt = Adam(model.named_params(), cfg.adam)
    lr = cfg.initial_lr
    best_loss, best_state = math.inf, model.state_dict()
    history = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(data))
        total, seen = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            logits = model.forward_logits(x_all[idx], train=True)
            loss, dlogits = cross_entropy(softmax(logits), y_all[idx])
            if not math.isfinite(loss):
                model.load_state_dict(best_state)
                raise NumericError(f"non-finite training loss at epoch {epoch}; restored best checkpoint")
            model.zero_grad_all()
            model.backward(dlogits)
            try:
                opt.step(lr)
            except NumericError:
                model.load_state_dict(best_state)
                raise
            total += loss * len(idx)
            seen += len(idx)
        val_loss, val_acc = _dataset_loss(model, val)
        rec = EpochRecord(epoch, lr, total / seen, val_loss, val_acc)
        history.append(rec)
        log.info("epoch %d lr %.3g train_loss %.4f val_loss %.4f val_acc %.4f",
                 epoch, lr, rec.train_loss, val_loss, val_acc)
        if on_epoch is not None:
            on_epoch(rec)
        if val_loss < best_loss:
            best_loss, best_state = val_loss, model.state_dict()
        if cfg.use_alr:
            lr = schedule.step(val_loss)
    model.load_state_dict(best_state)
    report = evaluate(model, val)
    report.history = history
    return model, report
