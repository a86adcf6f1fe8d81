"""Parameter / MACC accounting and the per-sample inference latency benchmark."""
from __future__ import annotations

import csv
import platform
import time
from dataclasses import dataclass, field

import numpy as np

from .model import ModelConfig, build

# Table values reported for comparison models; display only, never computed here.
LITERATURE = {
    "MCLDNN": (406_199, 18.10),
    "SCNN": (104_395, 1.79),
    "MCNet": (90_763, 3.11),
    "PET-CGDNN": (71_487, 1.30),
}


def macc_cv(k, n_cv, kernel_size, c_in=1):
    """Complex convolution, stride 1: four real products per complex tap."""
    return 4 * k * c_in * n_cv * kernel_size


def macc_real_conv(k, c_in, n_filters, kernel_size, stride=1):
    return (k // stride) * c_in * n_filters * kernel_size


def macc_sep(n, c, n_pw, kernel_size):
    """Depthwise (stride 2) plus pointwise convolution on an ``n x c`` input."""
    half = n // 2
    return half * c * kernel_size + half * c * n_pw


def macc_standard_strided(n, c, n_pw, kernel_size):
    """Standard convolution with ``n_pw`` filters and stride 2, for comparison."""
    return (n // 2) * c * n_pw * kernel_size


def macc_attention(c, reduction):
    hidden = c // reduction
    return 2 * (c * hidden + hidden * c)


@dataclass
class ComplexityRow:
    name: str
    trainable: int
    moving: int
    macc: int

    @property
    def params(self):
        return self.trainable + self.moving


@dataclass
class ComplexityReport:
    rows: list[ComplexityRow] = field(default_factory=list)

    @property
    def n_params(self):
        return sum(r.params for r in self.rows)

    @property
    def n_trainable(self):
        return sum(r.trainable for r in self.rows)

    @property
    def n_macc(self):
        return sum(r.macc for r in self.rows)

    def table(self):
        lines = [f"{'layer':<14}{'trainable':>10}{'moving':>8}{'params':>8}{'macc':>10}"]
        for r in self.rows:
            lines.append(f"{r.name:<14}{r.trainable:>10}{r.moving:>8}{r.params:>8}{r.macc:>10}")
        lines.append(f"{'total':<14}{self.n_trainable:>10}{self.n_params - self.n_trainable:>8}"
                     f"{self.n_params:>8}{self.n_macc:>10}")
        return "\n".join(lines)

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["layer", "trainable", "moving", "params", "macc"])
            for r in self.rows:
                w.writerow([r.name, r.trainable, r.moving, r.params, r.macc])
            w.writerow(["total", self.n_trainable, self.n_params - self.n_trainable,
                        self.n_params, self.n_macc])


def _analytic_params(cfg: ModelConfig):
    """Closed-form (trainable, moving) per component, independent of the built model."""
    s, w, c = cfg.kernel_size, 2 * cfg.n_cv, cfg.n_pw
    if cfg.use_cv_conv:
        front = (2 * s * cfg.n_cv + 2 * cfg.n_cv + 5 * cfg.n_cv, 5 * cfg.n_cv)
    else:
        front = (s * 2 * w + w + 2 * w, 2 * w)
    rows = [("iqcf", front)]
    for i in range(cfg.n_fmdr):
        c_in = w if i == 0 else c
        trainable = s * c_in + c_in * c + c + 2 * c
        if cfg.use_ca:
            h = c // cfg.ca_reduction
            trainable += c * h + h + h * c + c
        rows.append((f"fmdr{i + 1}", (trainable, 2 * c)))
    rows.append(("fc", (c * cfg.n_classes + cfg.n_classes, 0)))
    return rows


def model_complexity(config: ModelConfig | None = None, model=None) -> ComplexityReport:
    """Parameters (from the built model, moving statistics included) and MACC per component.

    MACC counts convolution, attention-perceptron and dense multiplies only;
    BN, activations, pooling and shuffle are excluded.
    """
    cfg = (config or (model.config if model is not None else ModelConfig())).validate()
    model = model if model is not None else build(cfg)
    counts = model.parameter_breakdown()
    k, s = cfg.frame_length, cfg.kernel_size
    report = ComplexityReport()
    if cfg.use_cv_conv:
        front_macc = macc_cv(k, cfg.n_cv, s)
    else:
        front_macc = macc_real_conv(k, 2, 2 * cfg.n_cv, s)
    report.rows.append(ComplexityRow("iqcf", *counts["iqcf"], front_macc))
    n, c = k, 2 * cfg.n_cv
    for i in range(1, cfg.n_fmdr + 1):
        macc = macc_sep(n, c, cfg.n_pw, s)
        if cfg.use_ca:
            macc += macc_attention(cfg.n_pw, cfg.ca_reduction)
        report.rows.append(ComplexityRow(f"fmdr{i}", *counts[f"fmdr{i}"], macc))
        n, c = n // 2, cfg.n_pw
    report.rows.append(ComplexityRow("fc", *counts["fc"], cfg.n_pw * cfg.n_classes))
    return report


def analytic_param_total(config: ModelConfig | None = None):
    return sum(t + m for _, (t, m) in _analytic_params((config or ModelConfig()).validate()))


# --- latency --------------------------------------------------------------------

@dataclass
class BenchRow:
    batch_size: int
    median: float
    p10: float
    p90: float
    inner_loops: int


@dataclass
class BenchReport:
    rows: list[BenchRow]
    warmup: int
    repetitions: int
    hardware: str
    notes: list[str] = field(default_factory=list)

    def median(self, batch_size):
        return next(r.median for r in self.rows if r.batch_size == batch_size)

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["# hardware", self.hardware])
            w.writerow(["# warmup", self.warmup, "repetitions", self.repetitions])
            for note in self.notes:
                w.writerow(["# note", note])
            w.writerow(["batch_size", "median_s_per_sample", "p10_s_per_sample",
                        "p90_s_per_sample", "inner_loops"])
            for r in self.rows:
                w.writerow([r.batch_size, repr(r.median), repr(r.p10), repr(r.p90), r.inner_loops])


def hardware_note():
    return f"{platform.machine()} {platform.processor() or 'cpu'} / {platform.system()} / numpy {np.__version__}"


def bench_latency(model, batch_sizes=(1, 10, 100, 1000), repetitions=30, warmup=5,
                  seed=0, min_interval=1e-3) -> BenchReport:
    """Per-sample eval-mode forward latency for each batch size.

    Each timed repetition runs enough back-to-back forwards (``inner_loops``)
    to span at least ``min_interval`` seconds of the monotonic clock.
    """
    if repetitions < 30 or warmup < 5:
        raise ValueError("benchmark needs repetitions >= 30 and warmup >= 5")
    rng = np.random.default_rng(seed)
    k = model.config.frame_length
    notes = []
    rows = []
    for bs in batch_sizes:
        x = rng.standard_normal((bs, 2, k))
        for _ in range(warmup):
            model.forward(x)
        inner = 1
        while True:
            t0 = time.perf_counter()
            for _ in range(inner):
                model.forward(x)
            if time.perf_counter() - t0 >= min_interval:
                break
            inner *= 2
        if inner > 1:
            notes.append(f"batch {bs}: {inner} forwards per timed repetition for clock resolution")
        per_sample = []
        for _ in range(repetitions):
            t0 = time.perf_counter()
            for _ in range(inner):
                model.forward(x)
            per_sample.append((time.perf_counter() - t0) / (inner * bs))
        p10, med, p90 = np.percentile(per_sample, [10, 50, 90])
        rows.append(BenchRow(bs, float(med), float(p10), float(p90), inner))
    return BenchReport(rows, warmup, repetitions, hardware_note(), notes)
