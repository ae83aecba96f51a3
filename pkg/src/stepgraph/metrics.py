"""MAE / RMSE / MAPE on de-normalised values, with inclusion masks and horizon slicing."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

MAPE_FLOOR = 1e-6
REPORT_HORIZONS = (3, 6, 12)


class MetricError(ValueError):
    pass


def _select(pred, true, mask):
    pred = np.asarray(pred, dtype=np.float64)
    true = np.asarray(true, dtype=np.float64)
    if pred.shape != true.shape:
        raise MetricError(f"prediction shape {pred.shape} != target shape {true.shape}")
    keep = np.ones(pred.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if keep.shape != pred.shape:
        raise MetricError(f"mask shape {keep.shape} != {pred.shape}")
    return pred, true, keep


def mae(pred, true, mask=None):
    pred, true, keep = _select(pred, true, mask)
    if not keep.any():
        raise MetricError("mae: no entries included")
    return float(np.mean(np.abs(pred[keep] - true[keep])))


def rmse(pred, true, mask=None):
    pred, true, keep = _select(pred, true, mask)
    if not keep.any():
        raise MetricError("rmse: no entries included")
    return float(np.sqrt(np.mean((pred[keep] - true[keep]) ** 2)))


def mape_mask(true, mask=None):
    true = np.asarray(true, dtype=np.float64)
    keep = np.abs(true) >= MAPE_FLOOR
    return keep if mask is None else keep & np.asarray(mask, dtype=bool)


def mape(pred, true, mask=None):
    """Fraction, not percent. Targets with |y| < 1e-6 are left out."""
    pred, true, keep = _select(pred, true, mask)
    keep = keep & (np.abs(true) >= MAPE_FLOOR)
    if not keep.any():
        raise MetricError("mape: every entry excluded")
    return float(np.mean(np.abs(pred[keep] - true[keep]) / np.abs(true[keep])))


@dataclass
class MetricReport:
    rows: dict = field(default_factory=dict)  # key -> {"mae", "rmse", "mape", "count", "mape_excluded"}

    def to_json(self):
        return json.dumps(self.rows, sort_keys=True, indent=2) + "\n"

    def to_csv(self, percent=True):
        lines = ["horizon,mae,rmse,mape"]
        for key, row in self.rows.items():
            m = row["mape"] * 100.0 if percent else row["mape"]
            lines.append(",".join([key] + [repr(float(x)) for x in (row["mae"], row["rmse"], m)]))
        return "\n".join(lines) + "\n"


def _row(pred, true, mask):
    keep = np.ones(np.shape(pred), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    mp = mape_mask(true, keep)
    return {
        "mae": mae(pred, true, keep),
        "rmse": rmse(pred, true, keep),
        "mape": mape(pred, true, keep) if mp.any() else float("nan"),
        "count": int(keep.sum()),
        "mape_excluded": int(keep.sum() - mp.sum()),
    }


def horizon_report(pred, true, mask=None, horizons=REPORT_HORIZONS):
    """pred/true: (S, T_f, N, C). Rows for each single horizon step that exists, plus the mean."""
    pred = np.asarray(pred, dtype=np.float64)
    true = np.asarray(true, dtype=np.float64)
    T_f = pred.shape[1]
    report = MetricReport()
    for h in horizons:
        if h <= T_f:
            m = None if mask is None else np.asarray(mask)[:, h - 1]
            report.rows[str(h)] = _row(pred[:, h - 1], true[:, h - 1], m)
    report.rows["mean"] = _row(pred, true, mask)
    return report
