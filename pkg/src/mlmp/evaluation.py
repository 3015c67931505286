"""mIoU bookkeeping, layer-weight statistics and report files."""

from __future__ import annotations

import csv
import json
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import _accel

log = logging.getLogger(__name__)

ORIGINAL = "original"
C_AVERAGE = "-C Average"


class ConfusionMatrix:
    """K x K pixel counts; rows are ground truth, columns are predictions."""

    def __init__(self, num_classes: int, ignore_index: int = 255):
        if num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        self.num_classes = int(num_classes)
        self.ignore_index = int(ignore_index)
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def accumulate(self, label, prediction) -> "ConfusionMatrix":
        label = np.asarray(label)
        prediction = np.asarray(prediction)
        if label.shape != prediction.shape:
            raise ValueError(f"label shape {label.shape} != prediction shape {prediction.shape}")
        k = self.num_classes
        if prediction.size and (prediction.min() < 0 or prediction.max() >= k):
            raise ValueError(f"prediction values must lie in [0, {k - 1}]")
        scored = label[label != self.ignore_index]
        if scored.size and (scored.min() < 0 or scored.max() >= k):
            raise ValueError(f"label values must lie in [0, {k - 1}] or equal {self.ignore_index}")
        self.counts += _accel.confusion_counts(label, prediction, k, self.ignore_index)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge confusion matrices of different size")
        out = ConfusionMatrix(self.num_classes, self.ignore_index)
        out.counts = self.counts + other.counts
        return out

    __add__ = merge

    def __eq__(self, other):
        return isinstance(other, ConfusionMatrix) and np.array_equal(self.counts, other.counts)


def accumulate(cm: ConfusionMatrix, label, prediction) -> ConfusionMatrix:
    return cm.accumulate(label, prediction)


def miou(cm, exclude: Sequence[int] = ()) -> Tuple[np.ndarray, float]:
    """Per-class IoU (NaN where a class has zero union) and their mean.

    Zero-union classes and the ``exclude`` indices are left out of the mean.
    """
    counts = cm.counts if isinstance(cm, ConfusionMatrix) else np.asarray(cm)
    inter = np.diag(counts).astype(np.float64)
    union = counts.sum(axis=0) + counts.sum(axis=1) - np.diag(counts)
    iou = np.full(inter.shape, np.nan)
    present = union > 0
    iou[present] = inter[present] / union[present]
    mask = present.copy()
    mask[list(exclude)] = False
    if not mask.any():
        raise ValueError("no class has any pixels; mIoU is undefined")
    return iou, float(iou[mask].mean())


# ---------------------------------------------------------------------------
# run logs and layer-weight statistics
# ---------------------------------------------------------------------------


def append_run_log(path, record: Dict) -> None:
    with open(path, "a") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def read_run_log(path) -> List[Dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def layer_weight_stats(records: Iterable[Dict]) -> Dict[Tuple[str, str], Dict]:
    """Mean and population std of the confidence weights per (dataset, corruption)."""
    groups: Dict[Tuple[str, str], List] = defaultdict(list)
    layers: Dict[Tuple[str, str], List[int]] = {}
    for rec in records:
        if rec.get("alpha") is None:
            continue
        key = (rec.get("dataset", ""), rec.get("corruption", ORIGINAL))
        groups[key].append(rec["alpha"])
        layers.setdefault(key, rec.get("layers") or list(range(1, len(rec["alpha"]) + 1)))
    if not groups:
        raise ValueError("run log contains no confidence weights")
    out = {}
    for key in sorted(groups):
        a = np.asarray(groups[key], dtype=np.float64)
        out[key] = {
            "layers": layers[key],
            "mean": a.mean(axis=0).tolist(),
            "std": a.std(axis=0).tolist(),
            "count": int(a.shape[0]),
        }
    return out


def layer_weight_table(stats: Dict[Tuple[str, str], Dict]) -> List[Dict]:
    rows = []
    for (dataset, corruption), s in stats.items():
        for layer, m, sd in zip(s["layers"], s["mean"], s["std"]):
            rows.append(
                {"dataset": dataset, "corruption": corruption, "layer": layer, "mean": m, "std": sd}
            )
    return rows


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


@dataclass
class RunReport:
    """mIoU (percent) per repeat, keyed by dataset -> method -> scenario."""

    results: Dict[str, Dict[str, Dict[str, List[Optional[float]]]]] = field(default_factory=dict)
    layer_weights: List[Dict] = field(default_factory=list)
    config: Dict = field(default_factory=dict)
    fingerprint: str = ""

    def add(self, dataset: str, method: str, scenario: str, value: Optional[float]) -> None:
        self.results.setdefault(dataset, {}).setdefault(method, {}).setdefault(scenario, []).append(value)


def _mean_std(values: Sequence[Optional[float]]):
    if not values or any(v is None for v in values):
        return None, None
    a = np.asarray(values, dtype=np.float64)
    return float(a.mean()), float(a.std())


def table_rows(scenarios: Dict[str, List[Optional[float]]]) -> Tuple[List[Dict], bool]:
    """Original row, one row per corruption, then the ``-C Average`` row."""
    rows, partial = [], False
    order = ([ORIGINAL] if ORIGINAL in scenarios else []) + sorted(
        s for s in scenarios if s != ORIGINAL
    )
    for scen in order:
        runs = scenarios[scen]
        mean, std = _mean_std(runs)
        partial |= mean is None
        rows.append({"scenario": scen, "mean": mean, "std": std, "runs": list(runs)})
    corr = [r for r in rows if r["scenario"] != ORIGINAL]
    if corr:
        if any(r["mean"] is None for r in corr):
            rows.append({"scenario": C_AVERAGE, "mean": None, "std": None, "runs": []})
        else:
            n_runs = {len(r["runs"]) for r in corr}
            runs = []
            if len(n_runs) == 1:
                runs = np.mean([r["runs"] for r in corr], axis=0).tolist()
            mean = float(np.mean([r["mean"] for r in corr]))
            std = float(np.std(runs)) if runs else None
            rows.append({"scenario": C_AVERAGE, "mean": mean, "std": std, "runs": runs})
    return rows, partial


def emit_report(report: RunReport, out_dir, plots: bool = False) -> Dict:
    """Write ``report.json`` and ``report.csv`` (and optionally PNG plots).

    Returns the JSON payload. Missing values are written as nulls and the
    status becomes ``partial``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tables, partial = [], False
    for dataset in sorted(report.results):
        for method in sorted(report.results[dataset]):
            rows, part = table_rows(report.results[dataset][method])
            partial |= part
            tables.append({"dataset": dataset, "method": method, "rows": rows})
    if partial:
        log.warning("report has missing cells; status set to partial")
    payload = {
        "status": "partial" if partial else "ok",
        "fingerprint": report.fingerprint,
        "config": report.config,
        "tables": tables,
        "layer_weights": report.layer_weights,
    }
    (out / "report.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    with open(out / "report.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["dataset", "method", "scenario", "mean", "std", "runs"])
        for t in tables:
            for r in t["rows"]:
                writer.writerow(
                    [
                        t["dataset"],
                        t["method"],
                        r["scenario"],
                        _cell(r["mean"]),
                        _cell(r["std"]),
                        ";".join(_cell(v) for v in r["runs"]),
                    ]
                )
    if plots:
        plot_miou_bars(payload, out)
        if report.layer_weights:
            plot_layer_weights(report.layer_weights, out)
    return payload


def _cell(v) -> str:
    return "" if v is None else repr(float(v))


def _parse(cell: str) -> Optional[float]:
    return None if cell == "" else float(cell)


def read_report_csv(path) -> List[Dict]:
    rows = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            rows.append(
                {
                    "dataset": r["dataset"],
                    "method": r["method"],
                    "scenario": r["scenario"],
                    "mean": _parse(r["mean"]),
                    "std": _parse(r["std"]),
                    "runs": [_parse(v) for v in r["runs"].split(";")] if r["runs"] else [],
                }
            )
    return rows


def format_cell(mean: Optional[float], std: Optional[float]) -> str:
    if mean is None:
        return "-"
    return f"{mean:.2f}" if std is None else f"{mean:.2f}±{std:.2f}"


# ---------------------------------------------------------------------------
# plots
# ---------------------------------------------------------------------------


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_layer_weights(table: List[Dict], out_dir) -> List[Path]:
    """One PNG per dataset: mean +- std confidence weight per layer, one line per corruption."""
    plt = _pyplot()
    out_dir = Path(out_dir)
    by_dataset: Dict[str, Dict[str, List[Dict]]] = defaultdict(lambda: defaultdict(list))
    for row in table:
        by_dataset[row["dataset"]][row["corruption"]].append(row)
    paths = []
    for dataset, groups in sorted(by_dataset.items()):
        fig, ax = plt.subplots(figsize=(7, 4))
        for corruption, rows in sorted(groups.items()):
            rows = sorted(rows, key=lambda r: r["layer"])
            layers = [r["layer"] for r in rows]
            ax.errorbar(
                layers, [r["mean"] for r in rows], yerr=[r["std"] for r in rows],
                marker="o", capsize=3, label=corruption,
            )
            ax.set_xticks(layers)
        ax.set_xlabel("layer index")
        ax.set_ylabel("confidence weight")
        ax.set_title(f"{dataset}: layer-wise confidence weights")
        ax.legend(fontsize=7)
        fig.tight_layout()
        path = out_dir / f"layer_weights_{dataset}.png"
        fig.savefig(path, dpi=100)
        plt.close(fig)
        paths.append(path)
    return paths


def miou_bar_values(payload: Dict) -> Dict[str, Dict[str, Dict[str, float]]]:
    """dataset -> method -> scenario -> mean mIoU, as plotted."""
    values: Dict[str, Dict[str, Dict[str, float]]] = defaultdict(dict)
    for t in payload["tables"]:
        values[t["dataset"]][t["method"]] = {
            r["scenario"]: r["mean"] for r in t["rows"] if r["mean"] is not None
        }
    return dict(values)


def plot_miou_bars(payload: Dict, out_dir) -> List[Path]:
    plt = _pyplot()
    out_dir = Path(out_dir)
    paths = []
    for dataset, methods in sorted(miou_bar_values(payload).items()):
        scenarios = sorted({s for m in methods.values() for s in m}, key=lambda s: (s != ORIGINAL, s))
        fig, ax = plt.subplots(figsize=(max(6, 0.6 * len(scenarios) * len(methods)), 4))
        width = 0.8 / max(1, len(methods))
        xs = np.arange(len(scenarios))
        for i, (method, vals) in enumerate(sorted(methods.items())):
            heights = [vals.get(s, math.nan) for s in scenarios]
            ax.bar(xs + i * width, heights, width, label=method)
        ax.set_xticks(xs + width * (len(methods) - 1) / 2)
        ax.set_xticklabels(scenarios, rotation=45, ha="right", fontsize=8)
        ax.set_ylabel("mIoU (%)")
        ax.set_title(dataset)
        ax.legend()
        fig.tight_layout()
        path = out_dir / f"miou_bars_{dataset}.png"
        fig.savefig(path, dpi=100)
        plt.close(fig)
        paths.append(path)
    return paths
