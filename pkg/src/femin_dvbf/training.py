"""Dataset generation, windowing, the training loop and checkpoint selection."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .config import FamilyConfig, TrainConfig
from .dvbf import DvbfConfig, DvbfModel, NormStats, forward_window
from .fem import IntegrationDiverged, LoadCase, MeshModel, TimeSeriesRecord, critical_dt, make_chain, run_full
from .nn import SGD, ConfigError, Lion, OptimizerState, load_checkpoint, save_checkpoint

__all__ = [
    "Dataset",
    "TrainingDiverged",
    "build_mesh",
    "design_dt",
    "generate_dataset",
    "split_sizes",
    "fit_norm",
    "make_windows",
    "WindowBatch",
    "TrainResult",
    "train",
    "evaluate_offline",
    "select_checkpoint",
]

log = logging.getLogger(__name__)
SPLITS = ("train", "val", "test")


class TrainingDiverged(RuntimeError):
    """Raised on a non-finite loss; ``dump`` holds the offending batch."""

    def __init__(self, message: str, dump: dict):
        super().__init__(message)
        self.dump = dump


# ---------------------------------------------------------------------------
# data generation


def build_mesh(family: FamilyConfig) -> MeshModel:
    ne, nr = family.n_elements, family.n_replaced
    fy = np.r_[np.full(nr, family.weak_yield), np.full(ne - nr, family.strong_yield)]
    return make_chain(
        ne, family.element_length, family.stiffness, family.element_mass, fy,
        family.hardening_ratio * family.stiffness, replaced=range(nr),
        end_mass=family.end_mass if family.kind == "BI" else 0.0,
    )


def design_dt(family: FamilyConfig, mesh: MeshModel) -> float:
    ground = None
    if family.kind == "BI":
        ground = np.zeros(mesh.n_nodes)
        ground[0] = family.penalty
    return family.dt_fraction * critical_dt(mesh, ground)


def _draw_load_case(family: FamilyConfig, rng: np.random.Generator, amplitude: float) -> LoadCase:
    if family.kind == "BI":
        v = float(rng.uniform(*family.v_range))
        gap = float(rng.uniform(*family.gap_range))
        p = (v, gap) if family.use_p else ()
        return LoadCase("BI", v_init=v, wall_gap=gap, penalty=family.penalty, p=p)
    freq = float(rng.uniform(*family.freq_range))
    return LoadCase("TCT", frequency=freq, amplitude=amplitude, clamp_node=0, drive_node=-1, p=())


def split_sizes(n: int) -> tuple:
    """(train, val, test); 16/3/3 for 22 designs, everything in train for n=1."""
    n_hold = min(3, (n - 1) // 3)
    return n - 2 * n_hold, n_hold, n_hold


@dataclass
class Dataset:
    records: List[TimeSeriesRecord]
    split: List[str]
    family: FamilyConfig
    seed: int = 0

    def __post_init__(self):
        if len(self.records) != len(self.split):
            raise ValueError("every record needs a split label")
        if self.records:
            T, dt, nb = self.records[0].T, self.records[0].dt, self.records[0].n_b
            for r in self.records:
                if r.T != T or r.dt != dt or r.n_b != nb:
                    raise ValueError("records must share T, dt and boundary layout")

    def subset(self, name: str) -> List[TimeSeriesRecord]:
        return [r for r, s in zip(self.records, self.split) if s == name]

    def indices(self, name: str) -> List[int]:
        return [i for i, s in enumerate(self.split) if s == name]

    # -- disk layout: design_XX.csv/.json, split.json, family.json --------
    def save(self, out_dir) -> List[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        written = []
        for i, rec in enumerate(self.records):
            stem = out / f"design_{i:02d}"
            rec.to_csv(stem.with_suffix(".csv"))
            with open(stem.with_suffix(".json"), "w") as fh:
                json.dump(rec.sidecar(), fh, indent=1, sort_keys=True)
            written += [stem.with_suffix(".csv"), stem.with_suffix(".json")]
        with open(out / "split.json", "w") as fh:
            json.dump({f"design_{i:02d}": s for i, s in enumerate(self.split)}, fh, indent=1, sort_keys=True)
        with open(out / "family.json", "w") as fh:
            json.dump({"family": dataclasses.asdict(self.family), "seed": self.seed}, fh, indent=1, sort_keys=True)
        written += [out / "split.json", out / "family.json"]
        return written

    @classmethod
    def load(cls, data_dir) -> "Dataset":
        d = Path(data_dir)
        try:
            with open(d / "split.json") as fh:
                split = json.load(fh)
            with open(d / "family.json") as fh:
                fam = json.load(fh)
        except OSError as exc:
            raise FileNotFoundError(f"no dataset in {d}: {exc}") from None
        family = FamilyConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in fam["family"].items()})
        names = sorted(split)
        records = []
        for name in names:
            with open(d / f"{name}.json") as fh:
                meta = json.load(fh)
            records.append(TimeSeriesRecord.from_files(d / f"{name}.csv", meta))
        return cls(records, [split[n] for n in names], family, int(fam.get("seed", 0)))


def generate_dataset(family: FamilyConfig, n_designs: Optional[int] = None, seed: int = 0,
                     max_retries: int = 20) -> Dataset:
    """Draw designs uniformly from the family ranges and run the full mesh.

    Diverged designs are redrawn (and logged).  For the TCT family the drive
    amplitude is raised by 25 % until every design yields plastically.
    """
    n = family.n_designs if n_designs is None else n_designs
    if n < 1:
        raise ConfigError("n_designs must be >= 1")
    rng = np.random.default_rng(seed)
    mesh = build_mesh(family)
    dt = design_dt(family, mesh)
    amplitude = family.amplitude
    while True:
        records = []
        for i in range(n):
            for attempt in range(max_retries):
                lc = _draw_load_case(family, rng, amplitude)
                try:
                    rec = run_full(mesh, lc, family.T, dt)
                    break
                except IntegrationDiverged as exc:
                    log.warning("design %d diverged at step %d; redrawing", i, exc.step_index)
            else:
                raise IntegrationDiverged(-1, f"design {i} diverged {max_retries} times")
            records.append(rec)
        if family.kind != "TCT" or family.T == 0 or all(r.max_plastic_flow > 0 for r in records):
            break
        amplitude *= 1.25
        log.info("TCT designs stayed elastic; raising amplitude to %.4g m", amplitude)
        rng = np.random.default_rng(seed)
    if amplitude != family.amplitude:
        family = dataclasses.replace(family, amplitude=amplitude)
    n_train, n_val, n_test = split_sizes(n)
    labels = np.array(["train"] * n_train + ["val"] * n_val + ["test"] * n_test, dtype=object)
    order = np.random.default_rng([seed, 1]).permutation(n)
    split = [""] * n
    for slot, idx in enumerate(order):
        split[idx] = labels[slot]
    return Dataset(records, split, family, seed)


def fit_norm(records: Sequence[TimeSeriesRecord]) -> NormStats:
    if not records:
        raise ValueError("cannot fit normalization on an empty split")
    d = np.concatenate([r.d_B for r in records])
    v = np.concatenate([r.v_B for r in records])
    f = np.concatenate([r.f_B for r in records])
    p = np.array([list(r.p) for r in records], dtype=float).reshape(len(records), -1)
    return NormStats.fit(d, v, f, p)


# ---------------------------------------------------------------------------
# windows


def make_windows(T: int, window: int, stride: int) -> List[int]:
    """Start indices ``0, S, 2S, ...`` plus a final window ending at ``T``."""
    if window > T:
        raise ValueError(f"record of {T} steps is shorter than the window {window}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    starts = list(range(0, T - window + 1, stride))
    if starts[-1] != T - window:
        starts.append(T - window)
    return starts


@dataclass
class WindowBatch:
    """Standardized window stacks ``[N, T*, n_B]`` and ``p`` ``[N, dim_p]``."""

    d: np.ndarray
    v: np.ndarray
    f: np.ndarray
    p: np.ndarray

    def __len__(self):
        return len(self.d)

    def take(self, idx) -> "WindowBatch":
        return WindowBatch(self.d[idx], self.v[idx], self.f[idx], self.p[idx])


def _standardized(rec: TimeSeriesRecord, norm: NormStats, dim_p: int):
    d, v, f = norm.standardize(rec.d_B, rec.v_B, rec.f_B)
    p = norm.standardize_p(np.asarray(rec.p, float).reshape(dim_p)) if dim_p else np.zeros(0)
    return d, v, f, p


def build_windows(records: Sequence[TimeSeriesRecord], norm: NormStats, window: int, stride: int,
                  dim_p: int) -> WindowBatch:
    ds, vs, fs, ps = [], [], [], []
    for rec in records:
        d, v, f, p = _standardized(rec, norm, dim_p)
        for s in make_windows(rec.T, window, stride):
            ds.append(d[s:s + window])
            vs.append(v[s:s + window])
            fs.append(f[s:s + window])
            ps.append(p)
    return WindowBatch(np.stack(ds), np.stack(vs), np.stack(fs), np.array(ps).reshape(len(ds), dim_p))


# ---------------------------------------------------------------------------
# evaluation


def evaluate_offline(model: DvbfModel, records: Sequence[TimeSeriesRecord], mode: str = "window",
                     stride: Optional[int] = None, batch_size: int = 64, seed: int = 0) -> Dict[str, float]:
    """Negative ELBO and reconstruction NLL (standardized units, per step).

    ``window`` averages over all windows of length T*; ``full_sequence`` runs
    one window spanning each whole record.  Latents are sampled without
    input noise, seeded for repeatability.
    """
    c = model.config
    if mode == "window":
        batch = build_windows(records, model.norm, c.window, stride or c.window // 2, c.dim_p)
    elif mode == "full_sequence":
        batch = build_windows(records, model.norm, records[0].T, 1, c.dim_p)
    else:
        raise ValueError(f"unknown evaluation mode {mode!r}")
    rng = np.random.default_rng(seed)
    nll, kl = [], []
    with ad.no_grad():
        for lo in range(0, len(batch), batch_size):
            b = batch.take(slice(lo, lo + batch_size))
            res = forward_window(model, b.d, b.v, b.f, b.p, rng=rng, mode="eval", keep_trace=False)
            nll.append(res.l_recon.data)
            kl.append(res.l_kl.data)
    nll, kl = np.concatenate(nll), np.concatenate(kl)
    return {"elbo": float(np.mean(nll + kl)), "nll": float(np.mean(nll))}


def select_checkpoint(history: Sequence[dict], metric: str) -> int:
    """Epoch (1-based) with the lowest ``metric``; ties go to the earliest."""
    if not history:
        raise ValueError("empty training history")
    values = [h[metric] for h in history]
    best = int(np.nanargmin(np.where(np.isfinite(values), values, np.inf)))
    return int(history[best]["epoch"])


# ---------------------------------------------------------------------------
# training loop

CURVE_COLUMNS = ("epoch", "train_elbo", "val_elbo", "val_nll_window", "val_nll_full")
SELECTION_COLUMNS = {"offline_nll": "val_nll_window", "online_nll": "online_nll", "online_mse": "online_mse"}


@dataclass
class TrainResult:
    model: DvbfModel
    history: List[dict]
    states: Dict[int, Dict[str, np.ndarray]]
    selected_epoch: int

    def selected_model(self) -> DvbfModel:
        m = DvbfModel(self.model.config, self.model.norm)
        m.params.load_state_dict(self.states[self.selected_epoch])
        return m


def write_curves(history: Sequence[dict], path) -> None:
    cols = list(CURVE_COLUMNS) + [k for k in ("online_nll", "online_mse") if history and k in history[0]]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for h in history:
            w.writerow([h["epoch"]] + [repr(float(h[c])) for c in cols[1:]])


def _optimizer(config: TrainConfig):
    o = config.optimizer
    state = OptimizerState(o.max_lr, o.warmup_steps, o.decay_steps, o.decay_rate, o.weight_decay)
    opt = Lion(o.beta1, o.beta2, o.clip_norm) if o.kind == "lion" else SGD(o.clip_norm)
    return opt, state


def train(dataset: Dataset, config: TrainConfig, out_dir=None,
          online_validator: Optional[Callable[[DvbfModel], Dict[str, float]]] = None,
          progress: Optional[Callable[[dict], None]] = None) -> TrainResult:
    """Window-based training with per-epoch validation and checkpoints.

    ``online_validator`` (used when ``config.online_val``) maps a model to
    ``{"online_nll": ..., "online_mse": ...}`` on the validation designs.
    """
    train_recs = dataset.subset("train")
    val_recs = dataset.subset("val") or train_recs
    if not train_recs:
        raise ConfigError("dataset has no training designs")
    rec0 = train_recs[0]
    mcfg = dataclasses.replace(config.model, n_b=rec0.n_b, dim_p=len(rec0.p))
    if not mcfg.K < mcfg.window <= rec0.T:
        raise ConfigError(f"need K < T* <= T (K={mcfg.K}, T*={mcfg.window}, T={rec0.T})")
    if config.online_val and online_validator is None:
        raise ConfigError("online validation requested without a validator")
    norm = fit_norm(train_recs)
    model = DvbfModel(mcfg, norm, seed=config.seed)
    windows = build_windows(train_recs, norm, mcfg.window, config.stride, mcfg.dim_p)
    opt, ostate = _optimizer(config)
    rng = np.random.default_rng([config.seed, 2])
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    history: List[dict] = []
    states: Dict[int, Dict[str, np.ndarray]] = {}
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(windows))
        losses, sizes = [], []
        for lo in range(0, len(order), config.batch_size):
            idx = order[lo:lo + config.batch_size]
            b = windows.take(idx)
            res = forward_window(model, b.d, b.v, b.f, b.p, rng=rng, mode="train", keep_trace=False)
            loss = res.loss
            if not math.isfinite(float(loss.data)):
                dump = {"epoch": epoch, "step": ostate.step, "window_ids": idx.tolist(),
                        "l_recon": res.l_recon.data.tolist(), "l_kl": res.l_kl.data.tolist()}
                if out is not None:
                    with open(out / "nan_dump.json", "w") as fh:
                        json.dump(dump, fh, indent=1)
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, optimizer step {ostate.step}", dump)
            model.params.zero_grad()
            ad.backward(loss)
            opt.step(model.params, ostate)
            losses.append(float(loss.data))
            sizes.append(len(idx))
        row = {"epoch": epoch, "train_elbo": float(np.average(losses, weights=sizes))}
        val_w = evaluate_offline(model, val_recs, "window", config.stride, seed=config.seed)
        row["val_elbo"] = val_w["elbo"]
        row["val_nll_window"] = val_w["nll"]
        if config.full_seq_val:
            row["val_nll_full"] = evaluate_offline(model, val_recs, "full_sequence", seed=config.seed)["nll"]
        else:
            row["val_nll_full"] = float("nan")
        if config.online_val:
            row.update(online_validator(model))
        history.append(row)
        states[epoch] = model.params.state_dict()
        if out is not None:
            save_checkpoint(out / f"epoch_{epoch:03d}.ckpt", states[epoch], {**model.header(), "epoch": epoch})
            write_curves(history, out / "curves.csv")
        if progress is not None:
            progress(row)
        log.info("epoch %d %s", epoch, row)

    selected = select_checkpoint(history, SELECTION_COLUMNS[config.selection])
    if out is not None:
        with open(out / "selected.json", "w") as fh:
            json.dump({"epoch": selected, "metric": config.selection,
                       "checkpoint": f"epoch_{selected:03d}.ckpt"}, fh, indent=1)
    return TrainResult(model, history, states, selected)


def load_model(path) -> DvbfModel:
    state, meta = load_checkpoint(path)
    return DvbfModel.from_header(meta, state)
