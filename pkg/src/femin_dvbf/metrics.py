"""Accuracy and uncertainty metrics for boundary histories.

Arrays are ``[N, T, C]``: designs, time steps, channels.  Reports use
millimetres, metres per second and kilonewtons so that the numbers read like
the usual crash-simulation tables; the unit choice is written into every
report.
"""

from __future__ import annotations

import csv
import json
import math
from typing import Dict, List, Optional, Sequence

import numpy as np

__all__ = [
    "UndefinedCorrelation",
    "Z95",
    "REPORT_UNITS",
    "mse",
    "r2_variance_weighted",
    "nll_metric",
    "picp",
    "ac",
    "moving_average",
    "pearson",
    "sigma_error_correlation",
    "qoi_metrics",
    "build_report",
    "flatten_report",
    "write_report",
]

Z95 = 1.96
LOG_2PI = math.log(2.0 * math.pi)
# physical SI value times scale -> report unit
REPORT_UNITS = {
    "displacement": ("mm", 1e3),
    "velocity": ("m/s", 1.0),
    "force": ("kN", 1e-3),
}


class UndefinedCorrelation(ValueError):
    pass


def _same_shape(*arrays):
    arrays = [np.asarray(a, float) for a in arrays]
    for a in arrays[1:]:
        if a.shape != arrays[0].shape:
            raise ValueError(f"shape mismatch: {arrays[0].shape} vs {a.shape}")
    return arrays


def _positive(sigma):
    if np.any(~(sigma > 0)):
        raise ValueError("standard deviations must be positive")


def mse(true, pred) -> float:
    true, pred = _same_shape(true, pred)
    return float(np.mean((true - pred) ** 2))


def r2_variance_weighted(true, pred) -> float:
    """R^2 per (n, t) over channels, averaged with weights var_c(true[n, t]).

    Rows whose channels are all equal carry zero weight.
    """
    true, pred = _same_shape(true, pred)
    if true.ndim < 2 or true.shape[-1] < 2:
        raise ValueError("variance-weighted R^2 needs at least two channels")
    rows_t = true.reshape(-1, true.shape[-1])
    rows_p = pred.reshape(-1, true.shape[-1])
    centered = rows_t - rows_t.mean(axis=1, keepdims=True)
    ss_tot = (centered ** 2).sum(axis=1)
    ss_res = ((rows_t - rows_p) ** 2).sum(axis=1)
    total = ss_tot.sum()
    if total == 0:
        return 1.0 if ss_res.sum() == 0 else float("nan")
    live = ss_tot > 0
    # weight_i * R2_i = ss_tot_i/total * (1 - ss_res_i/ss_tot_i)
    return float((ss_tot[live] - ss_res[live]).sum() / total)


def nll_metric(true, mu, sigma) -> float:
    """Gaussian NLL summed over channels, averaged over (n, t)."""
    true, mu, sigma = _same_shape(true, mu, sigma)
    _positive(sigma)
    per = 0.5 * (np.log(sigma ** 2) + ((true - mu) / sigma) ** 2 + LOG_2PI)
    return float(per.sum(axis=-1).mean())


def picp(true, mu, sigma) -> float:
    true, mu, sigma = _same_shape(true, mu, sigma)
    return float(np.mean(np.abs(true - mu) <= Z95 * sigma))


def ac(sigma) -> float:
    """Mean width of the 95 % band, 2 * 1.96 * mean(sigma)."""
    return float(2.0 * Z95 * np.mean(np.asarray(sigma, float)))


def moving_average(series, window: int) -> np.ndarray:
    """Centered moving average; windows shrink at both ends.

    Sample ``i`` averages indices ``i - window//2 .. i + (window-1)//2``
    clipped to the series.
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    x = np.asarray(series, float)
    if window == 1:
        return x.copy()
    n = len(x)
    cs = np.concatenate([[0.0], np.cumsum(x)])
    i = np.arange(n)
    lo = np.maximum(i - window // 2, 0)
    hi = np.minimum(i + (window - 1) // 2 + 1, n)
    return (cs[hi] - cs[lo]) / (hi - lo)


def pearson(a, b) -> float:
    a, b = _same_shape(a, b)
    if a.ndim != 1 or len(a) < 2:
        raise ValueError("pearson needs two 1-D series of length >= 2")
    da, db = a - a.mean(), b - b.mean()
    sa, sb = math.sqrt(float(da @ da)), math.sqrt(float(db @ db))
    if sa == 0 or sb == 0:
        raise UndefinedCorrelation("correlation undefined for a constant series")
    return float(np.clip((da @ db) / (sa * sb), -1.0, 1.0))


def sigma_error_correlation(f_applied, sigma_f, f_true, ma_window: int = 600) -> float:
    """r between the smoothed absolute force error and the predicted sigma.

    Multi-channel inputs ``[T, C]`` are reduced by the per-step channel mean.
    """
    f_applied, sigma_f, f_true = _same_shape(f_applied, sigma_f, f_true)
    if f_applied.ndim == 1:
        f_applied, sigma_f, f_true = f_applied[:, None], sigma_f[:, None], f_true[:, None]
    err = np.abs(f_applied - f_true).mean(axis=1)
    return pearson(moving_average(err, ma_window), sigma_f.mean(axis=1))


# ---------------------------------------------------------------------------
# reports


def _r2_layout(true, pred):
    """Cross-channel R^2, or time-as-channel R^2 when there is one channel."""
    if true.shape[-1] >= 2:
        return r2_variance_weighted(true, pred), "channels"
    return r2_variance_weighted(np.swapaxes(true, 1, 2), np.swapaxes(pred, 1, 2)), "time"


def qoi_metrics(true, mu, sigma=None) -> dict:
    true, mu = _same_shape(true, mu)
    r2, layout = _r2_layout(true, mu)
    out = {"mse": mse(true, mu), "r2": r2, "r2_layout": layout,
           "n_samples": int(true.shape[0]), "n_steps": int(true.shape[1])}
    if sigma is not None and np.all(np.asarray(sigma) > 0):
        out.update(nll=nll_metric(true, mu, sigma), picp=picp(true, mu, sigma), ac=ac(sigma))
    else:
        out.update(nll=None, picp=None, ac=None)
    return out


def build_report(truth: Dict[str, np.ndarray], pred: Dict[str, np.ndarray],
                 sigma: Dict[str, Optional[np.ndarray]], ma_window: int = 600,
                 meta: Optional[dict] = None) -> dict:
    """Per-QoI and combined metrics from SI arrays ``[N, T, C]``.

    ``truth``, ``pred`` and ``sigma`` are keyed by ``displacement``,
    ``velocity`` and ``force``; a ``None`` sigma skips NLL, PICP and AC.
    """
    report = {
        "units": {k: u for k, (u, _) in REPORT_UNITS.items()},
        "unit_note": "metrics in report units (mm, m/s, kN); force sigma correlation unitless",
        "qoi": {},
    }
    parts_t, parts_p, parts_s = [], [], []
    for q, (_, scale) in REPORT_UNITS.items():
        t, p = truth[q] * scale, pred[q] * scale
        s = None if sigma.get(q) is None else sigma[q] * scale
        report["qoi"][q] = qoi_metrics(t, p, s)
        parts_t.append(t)
        parts_p.append(p)
        parts_s.append(s)
    have_sigma = all(s is not None and np.all(s > 0) for s in parts_s)
    ct = np.concatenate(parts_t, axis=-1)
    cp = np.concatenate(parts_p, axis=-1)
    report["qoi"]["combined"] = qoi_metrics(ct, cp, np.concatenate(parts_s, axis=-1) if have_sigma else None)
    report["qoi"]["combined"]["r2_layout"] = "channels"

    per_design_r = []
    s_f = sigma.get("force")
    if s_f is not None and np.all(s_f > 0):
        for n in range(truth["force"].shape[0]):
            try:
                per_design_r.append(sigma_error_correlation(pred["force"][n], s_f[n], truth["force"][n], ma_window))
            except UndefinedCorrelation:
                per_design_r.append(float("nan"))
    report["sigma_error_r"] = float(np.mean(per_design_r)) if per_design_r else None
    report["sigma_error_r_per_design"] = per_design_r
    report["force_r2_per_design"] = [
        _r2_layout(truth["force"][n:n + 1] * 1e-3, pred["force"][n:n + 1] * 1e-3)[0]
        for n in range(truth["force"].shape[0])
    ]
    report["ma_window"] = ma_window
    if meta:
        report["meta"] = meta
    return report


def flatten_report(report: dict) -> Dict[str, object]:
    row = {}
    for k, v in (report.get("meta") or {}).items():
        row[k] = v
    for q, m in report["qoi"].items():
        for k in ("mse", "r2", "nll", "picp", "ac"):
            row[f"{q}.{k}"] = m[k]
    row["sigma_error_r"] = report["sigma_error_r"]
    return row


def write_report(report: dict, json_path, csv_path=None) -> None:
    with open(json_path, "w") as fh:
        json.dump(report, fh, indent=1, sort_keys=True)
    if csv_path is not None:
        row = flatten_report(report)
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(list(row))
            w.writerow([_fmt(v) for v in row.values()])


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else str(v)
