"""Command-line entry point: ``ulcnn <subcommand>``.

Runs single-threaded by default (reference mode); set ``ULCNN_THREADS`` to
allow more BLAS threads.
"""
import os

_threads = os.environ.get("ULCNN_THREADS", "1")
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, _threads)

import argparse  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
import tempfile  # noqa: E402
from dataclasses import replace  # noqa: E402
from datetime import datetime, timezone  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from . import __version__  # noqa: E402
from .analysis import bench_latency, model_complexity  # noqa: E402
from .dataio import generate_dataset, read_iqf, split, write_iqf  # noqa: E402
from .errors import IO_EXIT_CODE, ConfigError, UlcnnError  # noqa: E402
from .model import ModelConfig, build, load_weights, save_weights  # noqa: E402
from .training import TrainConfig, evaluate, fit, predict_batches  # noqa: E402

MANIFEST_SCHEMA = 1
ABLATIONS = {"cv": "use_cv_conv", "ca": "use_ca", "cs": "use_cs", "clff": "use_clff", "alr": None}

log = logging.getLogger("ulcnn")


def _now():
    return datetime.now(timezone.utc).isoformat()


def _int_list(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"expected comma-separated numbers, got {text!r}") from None


def _atomic_write_text(path, text):
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    with os.fdopen(fd, "w") as f:
        f.write(text)
    os.replace(tmp, path)


class Outputs:
    """Tracks files written by a subcommand so a failed run leaves none behind."""

    def __init__(self):
        self.paths = []

    def add(self, path):
        path = Path(path)
        self.paths.append(path)
        return path

    def remove_all(self):
        for p in self.paths:
            try:
                p.unlink()
            except FileNotFoundError:
                pass


def _labels_path(weights):
    return Path(str(weights) + ".labels.json")


def _load_configs(args):
    model_cfg, train_cfg = {}, {}
    if getattr(args, "config", None):
        try:
            raw = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {args.config} is not valid JSON: {exc}") from None
        model_cfg = raw.get("model", {})
        train_cfg = raw.get("train", {})
    mcfg = ModelConfig.from_dict(model_cfg)
    tcfg = TrainConfig.from_dict(train_cfg)
    for name in getattr(args, "ablate", None) or []:
        if name not in ABLATIONS:
            raise ConfigError(f"unknown ablation {name!r}; choose from {', '.join(ABLATIONS)}")
        if ABLATIONS[name] is None:
            tcfg.use_alr = False
        else:
            mcfg = replace(mcfg, **{ABLATIONS[name]: False})
    return mcfg, tcfg


def _ablate_list(text):
    return [v.strip() for v in text.split(",") if v.strip()]


# --- subcommands ----------------------------------------------------------------

def cmd_gen_data(args, out):
    mods = [m.strip() for m in args.mods.split(",") if m.strip()]
    snrs = _int_list(args.snrs)
    frames = generate_dataset(mods, snrs, args.frames_per_cell, args.sps, args.seed, args.frame_length)
    path = out.add(args.out)
    write_iqf(frames, frames.label_map, path)
    print(f"wrote {len(frames)} frames to {path}")
    for i, name in enumerate(frames.label_map.names):
        for snr in snrs:
            n = int(np.sum((frames.labels == i) & (frames.snr_db == snr)))
            print(f"  {name:>6} {snr:>4} dB: {n}")


def cmd_train(args, out):
    started = _now()
    mcfg, tcfg = _load_configs(args)
    if args.no_da:
        tcfg.use_da = False
    if args.no_alr:
        tcfg.use_alr = False
    if args.epochs is not None:
        tcfg.epochs = args.epochs
    if args.batch_size is not None:
        tcfg.batch_size = args.batch_size
    tcfg.seed = args.seed
    ratios = _float_list(args.split)
    data, label_map = read_iqf(args.data)
    mcfg = replace(mcfg, n_classes=len(label_map), frame_length=data.frame_length)
    train, val, test = split(data, ratios, seed=args.seed)
    print(f"split: train {len(train)}, val {len(val)}, test {len(test)}"
          f"{' (x4 with rotation augmentation)' if tcfg.use_da else ''}")
    model = build(mcfg, seed=args.seed)
    print(f"params: {sum(model.num_params())}")
    model, val_report = fit(model, train, val, tcfg,
                            on_epoch=lambda r: print(f"epoch {r.epoch:>3} lr {r.lr:.3g} "
                                                     f"train_loss {r.train_loss:.4f} "
                                                     f"val_loss {r.val_loss:.4f} val_acc {r.val_acc:.4f}"))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    weights = out.add(out_dir / "weights.ulcw")
    save_weights(model, weights)
    labels = out.add(_labels_path(weights))
    labels.write_text(json.dumps(label_map.names))
    val_report.write_history_csv(out.add(out_dir / "history.csv"))
    artifacts = {"weights": str(weights), "labels": str(labels), "history": str(out_dir / "history.csv")}
    if len(test):
        test_report = evaluate(model, test)
        test_report.write_per_snr_csv(out.add(out_dir / "per_snr.csv"))
        test_report.write_confusion_csv(out.add(out_dir / "confusion.csv"), label_map.names)
        artifacts.update(per_snr=str(out_dir / "per_snr.csv"), confusion=str(out_dir / "confusion.csv"))
        print(f"test overall accuracy {test_report.overall_accuracy:.4f}, "
              f"average over SNR {test_report.average_accuracy:.4f}")
    manifest = {
        "schema_version": MANIFEST_SCHEMA,
        "tool_version": __version__,
        "command": "train",
        "seed": args.seed,
        "config": {"model": mcfg.to_dict(), "train": tcfg.to_dict(),
                   "data": {"path": str(args.data), "split": ratios}},
        "artifacts": artifacts,
        "started": started,
        "finished": _now(),
    }
    _atomic_write_text(out.add(out_dir / "manifest.json"), json.dumps(manifest, indent=2))
    print(f"best val loss epoch accuracy {val_report.overall_accuracy:.4f}; outputs in {out_dir}")


def cmd_eval(args, out):
    model = load_weights(args.weights)
    data, label_map = read_iqf(args.data)
    report = evaluate(model, data)
    print(f"overall accuracy: {report.overall_accuracy:.4f}")
    print(f"average accuracy over SNR: {report.average_accuracy:.4f}")
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        report.write_per_snr_csv(out.add(out_dir / "per_snr.csv"))
        report.write_confusion_csv(out.add(out_dir / "confusion.csv"), _class_names(args.weights, model))
    for snr, acc in sorted(report.per_snr.items()):
        print(f"  {snr:>5} dB: {acc:.4f}")


def _class_names(weights, model):
    path = _labels_path(weights)
    if path.exists():
        return json.loads(path.read_text())
    return [str(i) for i in range(model.config.n_classes)]


def cmd_predict(args, out):
    model = load_weights(args.weights)
    names = json.loads(Path(args.labels).read_text()) if args.labels else _class_names(args.weights, model)
    data, _ = read_iqf(args.input)
    probs = predict_batches(model, data.iq)
    pred = np.argmax(probs, axis=1)
    lines = ["index,class_index,class,probability"]
    lines += [f"{i},{p},{names[p]},{probs[i, p]!r}" for i, p in enumerate(pred)]
    text = "\n".join(lines) + "\n"
    if args.out:
        _atomic_write_text(out.add(args.out), text)
    sys.stdout.write(text)


def cmd_analyze(args, out):
    mcfg, _ = _load_configs(args)
    report = model_complexity(mcfg)
    print(report.table())
    print(f"params: {report.n_params}, macc: {report.n_macc}")
    if args.out:
        report.write_csv(out.add(args.out))


def cmd_bench(args, out):
    if args.weights:
        model = load_weights(args.weights)
    else:
        mcfg, _ = _load_configs(args)
        model = build(mcfg, seed=args.seed)
    report = bench_latency(model, _int_list(args.batches), args.repetitions, args.warmup, seed=args.seed)
    print(f"hardware: {report.hardware}")
    print(f"{'batch':>6} {'median s/sample':>16} {'p10':>11} {'p90':>11}")
    for r in report.rows:
        print(f"{r.batch_size:>6} {r.median:>16.3e} {r.p10:>11.3e} {r.p90:>11.3e}")
    if args.out:
        report.write_csv(out.add(args.out))


def build_parser():
    p = argparse.ArgumentParser(prog="ulcnn", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="synthesize an IQF dataset")
    g.add_argument("--mods", required=True, help="comma list, e.g. bpsk,qpsk,8psk,pam4")
    g.add_argument("--snrs", required=True, help="comma list of integer dB values")
    g.add_argument("--frames-per-cell", type=int, required=True)
    g.add_argument("--sps", type=int, default=1)
    g.add_argument("--frame-length", type=int, default=128)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train on an IQF dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--split", default="0.35,0.15,0.5")
    t.add_argument("--config", help="JSON file with optional 'model' and 'train' sections")
    t.add_argument("--no-da", action="store_true")
    t.add_argument("--no-alr", action="store_true")
    t.add_argument("--ablate", type=_ablate_list, default=[], help="comma list of cv,ca,cs,clff,alr")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate weights on an IQF dataset")
    e.add_argument("--weights", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", help="directory for per-SNR and confusion CSVs")
    e.set_defaults(func=cmd_eval)

    pr = sub.add_parser("predict", help="classify every frame of an IQF file")
    pr.add_argument("--weights", required=True)
    pr.add_argument("--in", dest="input", required=True)
    pr.add_argument("--labels", help="JSON list of class names (default: <weights>.labels.json)")
    pr.add_argument("--out")
    pr.set_defaults(func=cmd_predict)

    a = sub.add_parser("analyze", help="parameter and MACC accounting")
    a.add_argument("--config")
    a.add_argument("--ablate", type=_ablate_list, default=[])
    a.add_argument("--out", help="CSV path")
    a.set_defaults(func=cmd_analyze)

    b = sub.add_parser("bench", help="per-sample inference latency sweep")
    b.add_argument("--weights")
    b.add_argument("--config")
    b.add_argument("--ablate", type=_ablate_list, default=[])
    b.add_argument("--batches", default="1,10,100,1000")
    b.add_argument("--repetitions", type=int, default=30)
    b.add_argument("--warmup", type=int, default=5)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", help="CSV path")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Outputs()
    try:
        args.func(args, out)
    except UlcnnError as exc:
        out.remove_all()
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, UnicodeDecodeError) as exc:
        out.remove_all()
        print(f"error: {exc}", file=sys.stderr)
        return IO_EXIT_CODE
    except BaseException:
        out.remove_all()
        raise
    return 0


if __name__ == "__main__":
    sys.exit(main())
