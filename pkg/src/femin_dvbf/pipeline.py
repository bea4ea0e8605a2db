"""Glue between dataset, trained model, coupled runs and metric reports."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from .coupling import FeminRunResult, ReplayForces, SurrogateDiverged, SurrogateForces, run_femin
from .dvbf import DvbfModel
from .fem import IntegrationDiverged, TimeSeriesRecord, truncate_model
from .metrics import build_report, nll_metric, mse
from .training import Dataset, build_mesh

__all__ = ["CoupledRuns", "run_designs", "report_for", "make_online_validator"]

log = logging.getLogger(__name__)


@dataclass
class CoupledRuns:
    indices: List[int]
    results: List[FeminRunResult]
    failures: Dict[int, str]

    def succeeded(self):
        return [(i, r) for i, r in zip(self.indices, self.results) if r.status == "ok"]


def run_designs(dataset: Dataset, indices: Sequence[int], model: Optional[DvbfModel] = None,
                oracle: bool = False) -> CoupledRuns:
    """One coupled run per design; failures are recorded, not raised."""
    if model is None and not oracle:
        raise ValueError("need a model unless replaying recorded forces")
    truncated = truncate_model(build_mesh(dataset.family))
    results, failures = [], {}
    for i in indices:
        rec = dataset.records[i]
        provider = ReplayForces(rec.f_B) if oracle else SurrogateForces(model)
        try:
            res = run_femin(truncated, rec.load_case, provider, rec.T, rec.dt, rec.p)
        except (SurrogateDiverged, IntegrationDiverged) as exc:
            log.warning("design %d: %s", i, exc)
            res = exc.partial
            failures[i] = str(exc)
        results.append(res)
    return CoupledRuns(list(indices), results, failures)


def _stack(records: Sequence[TimeSeriesRecord], runs: Sequence[FeminRunResult]):
    truth = {
        "displacement": np.stack([r.d_B for r in records]),
        "velocity": np.stack([r.v_B for r in records]),
        "force": np.stack([r.f_B for r in records]),
    }
    pred = {
        "displacement": np.stack([r.d_B for r in runs]),
        "velocity": np.stack([r.v_B for r in runs]),
        "force": np.stack([r.f_applied for r in runs]),
    }
    if all(r.kin_sigma is not None for r in runs):
        sigma = {
            "displacement": np.stack([r.kin_sigma[:, 0] for r in runs]),
            "velocity": np.stack([r.kin_sigma[:, 1] for r in runs]),
            "force": np.stack([r.sigma_f for r in runs]),
        }
    else:
        sigma = {"displacement": None, "velocity": None, "force": None}
    return truth, pred, sigma


def report_for(dataset: Dataset, runs: CoupledRuns, ma_window: int = 600, meta: Optional[dict] = None) -> dict:
    ok = runs.succeeded()
    if not ok:
        raise ValueError("no successful coupled runs to report on")
    records = [dataset.records[i] for i, _ in ok]
    truth, pred, sigma = _stack(records, [r for _, r in ok])
    meta = dict(meta or {})
    meta.setdefault("load_case", dataset.family.kind)
    report = build_report(truth, pred, sigma, ma_window, meta)
    report["designs"] = [i for i, _ in ok]
    report["failures"] = {str(k): v for k, v in runs.failures.items()}
    return report


def make_online_validator(dataset: Dataset, split: str = "val"):
    """Online NLL/MSE of the force on ``split`` designs, in kN units.

    A diverged run scores ``inf`` so it is never selected.
    """
    idx = dataset.indices(split) or dataset.indices("train")

    def validate(model: DvbfModel) -> Dict[str, float]:
        runs = run_designs(dataset, idx, model)
        if runs.failures:
            return {"online_nll": float("inf"), "online_mse": float("inf")}
        truth, pred, sigma = _stack([dataset.records[i] for i in idx], runs.results)
        return {
            "online_nll": nll_metric(truth["force"] * 1e-3, pred["force"] * 1e-3, sigma["force"] * 1e-3),
            "online_mse": mse(truth["force"] * 1e-3, pred["force"] * 1e-3),
        }

    return validate
