"""Metric report serialization, ROC export and figure rendering."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError
from .imaging import save_image
from .metrics import ClassificationReport, RocCurve, trapezoid_auc

# Full-scale results reported for the original system; desk-scale runs are
# printed next to these for orientation only.
REFERENCE_TARGETS = {
    "detector_accuracy_celeba": 0.9990,
    "detector_accuracy_mafa": 0.9904,
    "detector_accuracy_ssdmnv2": 0.9932,
    "inpainter_psnr_db": 35.92,
    "inpainter_ssim": 0.90,
    "recognizer_accuracy_unmasked": 0.99,
    "recognizer_accuracy_mixed": 0.95,
    "recognizer_auc_per_class": [1.00, 0.99, 0.99, 0.96, 0.98],
}

Row = tuple[str, str, float]


def format_value(value: float) -> str:
    if math.isinf(value):
        return "inf" if value > 0 else "-inf"
    return f"{value:.6f}"


def parse_value(text: str) -> float:
    return float(text)  # float() already accepts "inf"


def write_metric_csv(path, rows: Iterable[Row]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "class", "value"])
        for metric, cls, value in rows:
            w.writerow([metric, cls, format_value(float(value))])


def read_metric_csv(path) -> list[Row]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"report not found: {path}")
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["metric", "class", "value"]:
            raise DataError(f"{path}: expected header metric,class,value")
        return [(r["metric"], r["class"], parse_value(r["value"])) for r in reader]


def _jsonable(value):
    if isinstance(value, float) and math.isinf(value):
        return "inf" if value > 0 else "-inf"
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.generic):
        return _jsonable(value.item())
    return value


def write_json(path, payload: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_jsonable(payload), indent=2, sort_keys=True) + "\n")


def read_json(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"report not found: {path}")
    return json.loads(path.read_text())


def rows_to_json(rows: Iterable[Row]) -> dict:
    """Nest report rows as ``{metric: {class: value}}``."""
    out: dict[str, dict[str, float]] = {}
    for metric, cls, value in rows:
        out.setdefault(metric, {})[cls] = value
    return out


def write_report(stem, rows: Sequence[Row], extra: dict | None = None) -> tuple[Path, Path]:
    """Write ``<stem>.csv`` and an equivalent ``<stem>.json``; returns both paths."""
    stem = Path(stem)
    csv_path, json_path = stem.with_suffix(".csv"), stem.with_suffix(".json")
    write_metric_csv(csv_path, rows)
    payload = {"metrics": rows_to_json(rows)}
    if extra:
        payload.update(extra)
    write_json(json_path, payload)
    return csv_path, json_path


def classification_rows(report: ClassificationReport) -> list[Row]:
    return report.rows()


# --------------------------------------------------------------------------- ROC


def write_roc_csv(path, curve: RocCurve) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fpr", "tpr"])
        for x, y in zip(curve.fpr, curve.tpr):
            w.writerow([repr(float(x)), repr(float(y))])


def read_roc_csv(path) -> tuple[np.ndarray, np.ndarray]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"ROC file not found: {path}")
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["fpr", "tpr"]:
            raise DataError(f"{path}: expected header fpr,tpr")
        pts = [(float(r["fpr"]), float(r["tpr"])) for r in reader]
    arr = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    return arr[:, 0], arr[:, 1]


def reintegrate_roc(path) -> float:
    fpr, tpr = read_roc_csv(path)
    return trapezoid_auc(fpr, tpr)


def plot_roc(path, curves: dict[str, RocCurve], title: str = "ROC") -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 5))
    for name, c in curves.items():
        ax.plot(c.fpr, c.tpr, label=f"{name} (AUC = {c.auc:.2f})")
    ax.plot([0, 1], [0, 1], "k--", lw=0.8)
    ax.set_xlabel("False positive rate")
    ax.set_ylabel("True positive rate")
    ax.set_title(title)
    ax.legend(loc="lower right", fontsize="small")
    fig.tight_layout()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    # Fixed metadata keeps repeated renders byte-identical.
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def save_grid(path, rows: Sequence[Sequence[np.ndarray]], pad: int = 2) -> None:
    """Tile equally sized images into a grid (one list per row) and save as PNG."""
    if not rows or not rows[0]:
        raise ValueError("empty grid")
    h, w, c = rows[0][0].shape
    ncols = max(len(r) for r in rows)
    canvas = np.ones((len(rows) * (h + pad) - pad, ncols * (w + pad) - pad, c), dtype=np.float32)
    for i, row in enumerate(rows):
        for j, img in enumerate(row):
            canvas[i * (h + pad) : i * (h + pad) + h, j * (w + pad) : j * (w + pad) + w] = img
    save_image(path, canvas)
