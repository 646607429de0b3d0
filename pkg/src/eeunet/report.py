"""Turn a sweep CSV into a markdown table, plot-data files and a threshold recommendation."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

from . import netgraph as ng
from .evalbench import SWEEP_HEADER
from .netgraph import MacPath, ModelConfig

NO_INTERVAL = "no beneficial interval"


class SweepParseError(ValueError):
    pass


@dataclass
class ParsedRow:
    threshold: float
    exit_rate_float: float
    mean_iou_float: float
    exit_rate_quant: float | None
    mean_iou_quant: float | None
    avg_macs: float
    mac_reduction_pct: float
    est_power_mw: float


def read_sweep_csv(path) -> list[ParsedRow]:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != SWEEP_HEADER:
            raise SweepParseError(f"{path}:1: unexpected header {header}")
        for lineno, rec in enumerate(reader, start=2):
            if len(rec) != len(SWEEP_HEADER):
                raise SweepParseError(f"{path}:{lineno}: expected {len(SWEEP_HEADER)} fields, got {len(rec)}")
            try:
                vals = [float(v) if v != "" else None for v in rec]
            except ValueError as exc:
                raise SweepParseError(f"{path}:{lineno}: {exc}") from None
            if any(vals[i] is None for i in (0, 1, 2, 5, 6, 7)):
                raise SweepParseError(f"{path}:{lineno}: missing float-mode value")
            rows.append(ParsedRow(*vals))
    if not rows:
        raise SweepParseError(f"{path}: no data rows")
    return rows


def _quant_reduction(exit_pct: float, config: ModelConfig) -> float:
    # every layer scales with resolution^2, so the ratio is resolution independent
    early = ng.mac_count(config, MacPath.EARLY)
    full = ng.mac_count(config, MacPath.FULL_WITH_EE)
    base = ng.mac_count(config, MacPath.BASELINE)
    rate = exit_pct / 100.0
    return 100.0 * (base - (rate * early + (1 - rate) * full)) / base


def _groups(rows: list[ParsedRow]) -> list[tuple[ParsedRow, ParsedRow]]:
    """Consecutive rows with identical outcomes collapse into one threshold range."""
    def key(r):
        return (r.exit_rate_float, r.mean_iou_float, r.exit_rate_quant, r.mean_iou_quant)

    groups: list[list[ParsedRow]] = []
    for r in rows:
        if groups and key(groups[-1][-1]) == key(r):
            groups[-1].append(r)
        else:
            groups.append([r])
    return [(g[0], g[-1]) for g in groups]


def _num(v: float | None, fmt: str) -> str:
    return "-" if v is None else format(v, fmt)


def markdown_table(rows: list[ParsedRow], config: ModelConfig = ModelConfig()) -> str:
    early = ng.mac_count(config, MacPath.EARLY)
    full = ng.mac_count(config, MacPath.FULL_WITH_EE)
    base = ng.mac_count(config, MacPath.BASELINE)
    res = config.resolution
    lines = [
        f"MAC endpoints at {res}x{res}x{config.in_channels}: early exit {early / 1e6:.2f}M, "
        f"full path with exit branch {full / 1e6:.2f}M, baseline without exit branch {base / 1e6:.2f}M",
        "",
        "| T | Float mean IoU | Float early exits (%) | Float MAC reduction (%) "
        "| Quant mean IoU | Quant early exits (%) | Quant MAC reduction (%) |",
        "|---|---|---|---|---|---|---|",
    ]
    for first, last in _groups(rows):
        t = f"{first.threshold:.3f}" if first is last else f"{first.threshold:.3f} - {last.threshold:.3f}"
        q_red = None if first.exit_rate_quant is None else _quant_reduction(first.exit_rate_quant, config)
        lines.append(
            f"| {t} | {first.mean_iou_float:.4f} | {first.exit_rate_float:.2f} | {first.mac_reduction_pct:.2f} "
            f"| {_num(first.mean_iou_quant, '.4f')} | {_num(first.exit_rate_quant, '.2f')} | {_num(q_red, '.2f')} |")
    return "\n".join(lines) + "\n"


def recommend_interval(rows: list[ParsedRow], margin: float = 0.03,
                       full_iou: float | None = None) -> tuple[float, float] | None:
    """Widest run of consecutive thresholds with positive MAC reduction and IoU
    within ``margin`` of the full-path IoU.

    Without ``full_iou`` the reference is the IoU at the highest threshold where
    nothing exits early, or the last row when every threshold has exits.
    """
    if full_iou is None:
        no_exit = [r for r in rows if r.exit_rate_float == 0.0]
        full_iou = (no_exit[-1] if no_exit else rows[-1]).mean_iou_float
    best, run = None, []
    for r in rows + [None]:
        if r is not None and r.mac_reduction_pct > 0 and r.mean_iou_float >= full_iou - margin:
            run.append(r)
            continue
        if run and (best is None or len(run) > len(best)):
            best = run
        run = []
    if best is None:
        return None
    return best[0].threshold, best[-1].threshold


def write_report(sweep_csv, out_dir, margin: float = 0.03, config: ModelConfig = ModelConfig(),
                 full_iou: float | None = None) -> dict[str, Path]:
    rows = read_sweep_csv(sweep_csv)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "table": out / "table.md",
        "exit_rate": out / "threshold_vs_exit_rate.dat",
        "iou": out / "threshold_vs_iou.dat",
        "macs": out / "threshold_vs_avg_macs.dat",
        "recommendation": out / "recommendation.txt",
    }
    for key, attr in (("exit_rate", "exit_rate_float"), ("iou", "mean_iou_float"), ("macs", "avg_macs")):
        with open(paths[key], "w") as fh:
            for r in rows:
                fh.write(f"{r.threshold:.6g} {getattr(r, attr)!r}\n")
    interval = recommend_interval(rows, margin, full_iou)
    if interval is None:
        rec = NO_INTERVAL
    else:
        rec = f"recommended threshold interval: [{interval[0]:.3f}, {interval[1]:.3f}]"
    paths["recommendation"].write_text(rec + "\n")
    paths["table"].write_text(markdown_table(rows, config) + "\n" + rec + "\n")
    return paths
