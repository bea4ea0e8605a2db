"""Command line entry point: gen-data, train, run-femin, report.

Exit codes: 0 success, 2 configuration or input error, 3 training failure,
4 every coupled run failed.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import sys
import time
from pathlib import Path
from typing import List, Optional

from .config import load_config
from .nn import ConfigError
from .pipeline import make_online_validator, report_for, run_designs
from .training import Dataset, TrainingDiverged, generate_dataset, load_model, train

log = logging.getLogger("femin_dvbf")

EXIT_OK, EXIT_INPUT, EXIT_TRAIN, EXIT_ONLINE = 0, 2, 3, 4


class InputError(Exception):
    pass


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def dir_hash(path, patterns=("*.csv", "*.json")) -> str:
    h = hashlib.sha256()
    files = sorted({f for pat in patterns for f in Path(path).glob(pat) if f.name != "manifest.json"})
    for f in files:
        h.update(f.name.encode())
        h.update(file_hash(f).encode())
    return h.hexdigest()


def _config_hash(family, train_cfg) -> str:
    blob = json.dumps({"family": dataclasses.asdict(family), "training": train_cfg.to_dict()}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()


def write_manifest(out: Path, command: str, seed: Optional[int], started: float, **hashes) -> None:
    artifacts = sorted(str(p.relative_to(out)) for p in out.rglob("*") if p.is_file() and p.name != "manifest.json")
    manifest = {
        "command": command,
        "seed": seed,
        "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(started)),
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "artifacts": artifacts,
        **hashes,
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)


def _configs(args):
    family, tcfg = load_config(args.config, args.preset)
    if args.seed is not None:
        tcfg = dataclasses.replace(tcfg, seed=args.seed)
    return family, tcfg


def _load_dataset(path) -> Dataset:
    try:
        return Dataset.load(path)
    except FileNotFoundError as exc:
        raise InputError(str(exc)) from None


# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    started = time.time()
    family, tcfg = _configs(args)
    seed = tcfg.seed
    ds = generate_dataset(family, seed=seed)
    out = Path(args.out)
    ds.save(out)
    write_manifest(out, "gen-data", seed, started, config_hash=_config_hash(family, tcfg),
                   dataset_hash=dir_hash(out))
    print(f"wrote {len(ds.records)} designs to {out} "
          f"(train {len(ds.indices('train'))}, val {len(ds.indices('val'))}, test {len(ds.indices('test'))})")
    return EXIT_OK


def cmd_train(args) -> int:
    started = time.time()
    family, tcfg = _configs(args)
    if args.online_val:
        tcfg = dataclasses.replace(tcfg, online_val=True)
    ds = _load_dataset(args.data)
    out = Path(args.out)
    validator = make_online_validator(ds) if tcfg.online_val else None

    def progress(row):
        print(" ".join(f"{k}={v:.5g}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()), flush=True)

    try:
        result = train(ds, tcfg, out, online_validator=validator, progress=progress)
    except TrainingDiverged as exc:
        print(f"training failed: {exc}; dump in {out / 'nan_dump.json'}", file=sys.stderr)
        return EXIT_TRAIN
    with open(out / "train_config.json", "w") as fh:
        json.dump({"preset": args.preset or "desk", "training": tcfg.to_dict()}, fh, indent=1, sort_keys=True)
    ck = out / f"epoch_{result.selected_epoch:03d}.ckpt"
    write_manifest(out, "train", tcfg.seed, started, config_hash=_config_hash(family, tcfg),
                   dataset_hash=dir_hash(args.data), checkpoint_hash=file_hash(ck),
                   selected_checkpoint=ck.name)
    print(f"selected epoch {result.selected_epoch} ({tcfg.selection}) -> {ck}")
    return EXIT_OK


def cmd_run_femin(args) -> int:
    started = time.time()
    ds = _load_dataset(args.data)
    idx = ds.indices(args.split)
    if not idx:
        raise InputError(f"split {args.split!r} has no designs")
    model, ck_hash, preset = None, "", "oracle"
    if not args.oracle_replay:
        if args.checkpoint is None:
            raise InputError("--checkpoint is required unless --oracle-replay is given")
        ck = Path(args.checkpoint)
        if ck.is_dir():
            with open(ck / "selected.json") as fh:
                ck = ck / json.load(fh)["checkpoint"]
        if not ck.is_file():
            raise InputError(f"checkpoint {ck} not found")
        model = load_model(ck)
        ck_hash = file_hash(ck)
        preset = _preset_of(ck)
    runs = run_designs(ds, idx, model, oracle=args.oracle_replay)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, res in zip(runs.indices, runs.results):
        res.write(out / f"run_design_{i:02d}.csv", out / f"run_design_{i:02d}.json",
                  checkpoint_hash=ck_hash, load_case=ds.records[i].load_case)
    meta = {"load_case": ds.family.kind, "preset": preset, "split": args.split}
    if runs.succeeded():
        from .metrics import write_report
        report = report_for(ds, runs, args.ma_window, meta)
        write_report(report, out / "report.json", out / "report.csv")
        f = report["qoi"]["force"]
        c = report["qoi"]["combined"]
        print(f"{len(runs.succeeded())}/{len(idx)} runs ok; combined R2 {c['r2']:.4f}; force R2 {f['r2']:.4f}"
              + (f"; force PICP {f['picp']:.4f}" if f["picp"] is not None else ""))
    write_manifest(out, "run-femin", None, started, dataset_hash=dir_hash(args.data), checkpoint_hash=ck_hash)
    if not runs.succeeded():
        print("every coupled run diverged", file=sys.stderr)
        return EXIT_ONLINE
    return EXIT_OK


def _preset_of(ck: Path) -> str:
    cfg = ck.parent / "train_config.json"
    if cfg.is_file():
        with open(cfg) as fh:
            return json.load(fh).get("preset", "desk")
    return "unknown"


KEY = ("load_case", "preset", "split")


def _rows_from(path: Path) -> List[dict]:
    from .metrics import flatten_report

    rows = []
    if (path / "combined.json").is_file():
        with open(path / "combined.json") as fh:
            rows += json.load(fh)["rows"]
    if (path / "report.json").is_file():
        with open(path / "report.json") as fh:
            rows.append(flatten_report(json.load(fh)))
    return rows


def cmd_report(args) -> int:
    rows = []
    for d in args.run_dirs:
        rows += _rows_from(Path(d))
    if not rows:
        raise InputError("no reports found in the given directories")
    rows.sort(key=lambda r: tuple(str(r.get(k, "")) for k in KEY))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "combined.json", "w") as fh:
        json.dump({"rows": rows}, fh, indent=1, sort_keys=True)
    cols = list(KEY) + sorted({k for r in rows for k in r} - set(KEY))
    with open(out / "combined.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in rows:
            w.writerow(["" if r.get(c) is None else r.get(c) for c in cols])
    print(f"{len(rows)} rows -> {out / 'combined.csv'}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="femin-dvbf", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--preset", help="desk, bi-a1 or tct-a2")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", required=True)

    p = sub.add_parser("gen-data", help="simulate the design family and write the dataset")
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the filter on a dataset")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--online-val", action="store_true", help="coupled validation runs every epoch")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("run-femin", help="coupled runs of a checkpoint on one split")
    p.add_argument("--checkpoint", help="checkpoint file or training output directory")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--out", required=True)
    p.add_argument("--oracle-replay", action="store_true", help="apply recorded forces instead of the model")
    p.add_argument("--ma-window", type=int, default=600)
    p.set_defaults(func=cmd_run_femin)

    p = sub.add_parser("report", help="merge metric reports into one table")
    p.add_argument("run_dirs", nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return ap


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
