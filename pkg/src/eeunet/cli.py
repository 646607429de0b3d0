"""Command-line front end: datagen, train, eval, quantize, sweep, report.

Exit codes: 0 success, 1 usage error, 2 runtime error. Every run writes a
``<output>.config.json`` echo next to its primary output.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import evalbench as eb
from . import netgraph as ng
from . import quant
from . import report as rp
from . import scenegen as sg
from . import trainer as tr
from .gate import argmax_classes

log = logging.getLogger("eeunet")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _echo_path(out: str) -> Path:
    return Path(str(out).rstrip("/") + ".config.json")


def _write_echo(args: argparse.Namespace, out: str) -> None:
    values = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    _echo_path(out).write_text(json.dumps(values, indent=1, sort_keys=True) + "\n")


def _require_file(path: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"input not found: {p}")
    return p


def _load_model(path: str) -> tuple[ng.ModelConfig, ng.ParameterSet]:
    with open(_require_file(path), "rb") as fh:
        return ng.load_weights(fh)


def _load_data(path: str, config: ng.ModelConfig | None = None) -> sg.Dataset:
    ds = sg.load_dataset(_require_file(path))
    if config is not None:
        ng.check_input(config, ds.test_x[0])
    return ds


def cmd_datagen(args) -> None:
    env = sg.EnvironmentParams(noise_sigma=args.noise, a_rough_mm=args.a_rough)
    manifest = sg.generate_dataset(args.out, args.scenes, args.res, args.res, args.seed, env)
    n_train = sum(e["split"] == "train" for e in manifest.scenes)
    print(f"wrote {len(manifest.scenes)} scenes to {args.out} ({n_train} train / {len(manifest.scenes) - n_train} test)")


def cmd_train(args) -> None:
    ds = _load_data(args.data)
    res = ds.train_x.shape[-1]
    config = ng.ModelConfig(ds.train_x.shape[1], sg.N_CLASSES, (16, 32, 64), res)
    h = tr.Hyperparams(args.epochs, args.lr, args.lr_decay, args.batch_size, args.momentum, args.seed)
    best, history = tr.fit(config, ds.train_x, ds.train_y, ds.test_x, ds.test_y, h)
    with open(args.out, "wb") as fh:
        ng.save_weights(best, config, fh)
    history.to_csv(args.history or str(args.out) + ".history.csv")
    row = history.rows[history.best_epoch]
    print(f"best epoch {row.epoch}: test IoU full {row.test_iou_full:.4f}, early {row.test_iou_early:.4f}"
          + (" (diverged)" if history.diverged else ""))


def cmd_eval(args) -> None:
    config, params = _load_model(args.model)
    ds = _load_data(args.data, config)
    early, full = [], []
    for x in ds.test_x:
        e, f = ng.forward(params, x, ng.PathKind.DUAL)
        early.append(argmax_classes(e))
        full.append(argmax_classes(f))
    truths = list(ds.test_y)
    c = config.classes

    def as_list(v):
        return [None if np.isnan(x) else float(x) for x in v]

    result = {
        "test_iou_full": eb.dataset_iou(list(zip(full, truths)), c),
        "test_iou_early": eb.dataset_iou(list(zip(early, truths)), c),
        "test_iou_full_micro": eb.dataset_iou(list(zip(full, truths)), c, micro=True),
        "test_iou_early_micro": eb.dataset_iou(list(zip(early, truths)), c, micro=True),
        "recall_full": as_list(eb.per_class_recall(full, truths, c)),
        "recall_early": as_list(eb.per_class_recall(early, truths, c)),
        "histograms": {
            str(k): {
                "full": eb.class_histogram(full, truths, k, c).tolist(),
                "early": eb.class_histogram(early, truths, k, c).tolist(),
            }
            for k in args.hist_classes
        },
    }
    Path(args.out).write_text(json.dumps(result, indent=1) + "\n")
    print(f"test IoU full {result['test_iou_full']:.4f}, early {result['test_iou_early']:.4f}")


def cmd_quantize(args) -> None:
    config, params = _load_model(args.model)
    ds = _load_data(args.data, config)
    qp = quant.calibrate(params, config, ds.train_x[:args.calib_scenes])
    out = args.out or str(args.model) + ".qparams.json"
    Path(out).write_text(qp.to_json())
    args.out = out
    print(f"wrote quantization parameters for {len(qp.weight_scales)} layers / {len(qp.sites)} sites to {out}")


def cmd_sweep(args) -> None:
    config, params = _load_model(args.model)
    ds = _load_data(args.data, config)
    qp = None
    if args.qparams:
        qp = quant.QuantParams.from_json(_require_file(args.qparams).read_text())
    cost = eb.CostModel.for_config(config, args.watts_per_mac)
    rows = eb.sweep(params, config, ds.test_x, ds.test_y, args.t_min, args.t_max, args.t_step,
                    cost, qp, micro=args.micro)
    eb.write_sweep_csv(rows, args.out)
    print(f"wrote {len(rows)} thresholds to {args.out}")


def cmd_report(args) -> None:
    config = ng.ModelConfig(resolution=args.res)
    paths = rp.write_report(_require_file(args.sweep), args.out, args.margin, config, args.full_iou)
    print(paths["recommendation"].read_text().strip())


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="eeunet", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("datagen", help="generate a synthetic scene dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--scenes", type=int, default=555)
    s.add_argument("--res", type=int, default=100)
    s.add_argument("--seed", type=int, default=42)
    s.add_argument("--noise", type=float, default=0.01, help="absolute noise sigma")
    s.add_argument("--a-rough", type=float, default=0.4, help="rms height (mm) per m/s of wind")
    s.set_defaults(func=cmd_datagen)

    s = sub.add_parser("train", help="dual-path training")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--epochs", type=int, default=25)
    s.add_argument("--lr", type=float, default=3e-4)
    s.add_argument("--lr-decay", type=float, default=0.98)
    s.add_argument("--batch-size", type=int, default=4)
    s.add_argument("--momentum", type=float, default=0.0)
    s.add_argument("--seed", type=int, default=42)
    s.add_argument("--history", help="history CSV (default: <out>.history.csv)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="per-path IoU, per-class recall and histograms")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--hist-classes", type=int, nargs="+", default=[1, 5])
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("quantize", help="calibrate int8 post-training quantization")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", help="sidecar JSON (default: <model>.qparams.json)")
    s.add_argument("--calib-scenes", type=int, default=32)
    s.set_defaults(func=cmd_quantize)

    s = sub.add_parser("sweep", help="confidence-threshold sweep to CSV")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--qparams", help="quantization sidecar; adds quantized columns")
    s.add_argument("--t-min", type=float, default=0.850)
    s.add_argument("--t-max", type=float, default=0.990)
    s.add_argument("--t-step", type=float, default=0.001)
    s.add_argument("--watts-per-mac", type=float, default=eb.WATTS_PER_MAC)
    s.add_argument("--micro", action="store_true", help="pool pixel counts over scenes")
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("report", help="markdown table, plot data and recommendation")
    s.add_argument("--sweep", required=True)
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--margin", type=float, default=0.03, help="allowed IoU drop from full path")
    s.add_argument("--full-iou", type=float, help="full-path IoU reference")
    s.add_argument("--res", type=int, default=100, help="resolution for MAC endpoints")
    s.set_defaults(func=cmd_report)
    return p


def dispatch(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
        if args.out:
            _write_echo(args, args.out)
    except (UsageError, ng.ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - runtime errors map to exit code 2
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
