"""Command-line entry point: gen-data, train, eval, trajectory, verify-ode, ablate.

Exit codes: 0 success, 1 a verification check failed, 2 configuration error,
3 numerical divergence, 4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .arrayio import FormatError
from .autodiff import ConfigError
from .datagen import MaskConfig, load_dataset, make_dataset
from .model import DivergenceError, LoadError, load_checkpoint
from .oracle import VerifyConfig, verify_correspondence
from .physics import NoiseSpec, ifft2_centered
from .train import (
    TrainConfig,
    evaluate,
    stability_report,
    train,
    trajectory,
    write_metrics,
    write_psnr_curve,
    write_trajectory_csv,
)

SCHEMA_VERSION = 1
EXIT_OK, EXIT_FAILED, EXIT_CONFIG, EXIT_DIVERGENCE, EXIT_IO = 0, 1, 2, 3, 4

log = logging.getLogger("flatrecon")


def _strict(cls, doc: dict, where: str):
    if not isinstance(doc, dict):
        raise ConfigError(f"{where} must be a JSON object")
    known = {f.name for f in fields(cls)}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    return cls(**doc)


@dataclass
class DataConfig:
    seed: int = 0
    counts: dict = field(default_factory=lambda: {"train": 200, "val": 40, "test": 40})
    size: int = 32
    acceleration: int = 8
    center_fraction: float = 0.08
    offset: int = 0
    noise_std: float = 0.0
    noise_seed: int = 0
    n_ellipses_range: tuple = (3, 6)


@dataclass
class OutputConfig:
    error_scale: float = 10.0


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    verify: VerifyConfig = field(default_factory=VerifyConfig)
    output: OutputConfig = field(default_factory=OutputConfig)
    schema_version: int = SCHEMA_VERSION

    @classmethod
    def from_json(cls, doc: dict) -> "ExperimentConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(doc) - {"schema_version", "data", "train", "verify", "output"}
        if unknown:
            raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
        version = doc.get("schema_version")
        if version != SCHEMA_VERSION:
            raise ConfigError(f"config schema_version {version!r} does not match {SCHEMA_VERSION}")
        data = _strict(DataConfig, doc.get("data", {}), "data")
        data.n_ellipses_range = tuple(data.n_ellipses_range)
        tr = _strict(TrainConfig, doc.get("train", {}), "train")
        tr.validate()
        ver = VerifyConfig.from_json(doc.get("verify", {}))
        out = _strict(OutputConfig, doc.get("output", {}), "output")
        return cls(data, tr, ver, out)

    def to_json(self) -> dict:
        return {"schema_version": self.schema_version, "data": asdict(self.data), "train": asdict(self.train),
                "verify": asdict(self.verify), "output": asdict(self.output)}


def load_config(path) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return ExperimentConfig.from_json(doc)


# --------------------------------------------------------------------------
# ablation grids

TABLE3_GRID = [
    ("base", {"ground_parameters": False, "intermediate_supervision": False, "w_velocity": 0.0}),
    ("grounded", {"ground_parameters": True, "intermediate_supervision": False, "w_velocity": 0.0}),
    ("supervised", {"ground_parameters": False, "intermediate_supervision": True}),
    ("flat", {"ground_parameters": True, "intermediate_supervision": True}),
]

VELOCITY_GRID = [
    (f"{norm}_w{w:g}", {"ground_parameters": True, "intermediate_supervision": True,
                        "velocity_norm": norm, "w_velocity": w})
    for norm in ("L1", "L2") for w in (1e-4, 1e-3)
]

GRIDS = {"table3": TABLE3_GRID, "velocity": VELOCITY_GRID}

ABLATION_HEADER = ["name", "ground_parameters", "intermediate_supervision", "velocity_norm", "w_velocity",
                   "seed", "test_psnr", "test_ssim", "n_decreasing_steps_mean", "max_drop_dB", "monotone_fraction"]


def run_training(cfg: TrainConfig, out: Path, dataset=None) -> dict:
    """Train, evaluate on the test split and write every artifact under ``out``."""
    ds = dataset or load_dataset(cfg.dataset)
    res = train(cfg, ds, out)
    summary, trajs = evaluate(res.model, ds.splits["test"])
    stab = stability_report(trajs)
    write_metrics(out, "test", summary, stab)
    write_psnr_curve(out / "psnr_curve_test.csv", stab)
    return {"test_psnr": summary.psnr_mean, "test_ssim": summary.ssim_mean,
            "n_decreasing_steps_mean": stab.n_decreasing_steps_mean, "max_drop_dB": stab.max_drop_dB,
            "monotone_fraction": stab.monotone_fraction}


def run_grid(base: TrainConfig, grid, out: Path, dataset=None) -> list[dict]:
    ds = dataset or load_dataset(base.dataset)
    rows = []
    for name, overrides in grid:
        cfg = replace(base, **overrides)
        log.info("ablation %s", name)
        res = run_training(cfg, out / name, ds)
        rows.append(ablation_row(name, cfg, res))
    write_ablation_csv(out / "ablation.csv", rows)
    return rows


def ablation_row(name: str, cfg: TrainConfig, result: dict) -> dict:
    return {"name": name, "ground_parameters": cfg.ground_parameters,
            "intermediate_supervision": cfg.intermediate_supervision,
            "velocity_norm": cfg.velocity_norm, "w_velocity": cfg.w_velocity, "seed": cfg.seed, **result}


def write_ablation_csv(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ABLATION_HEADER)
        for r in rows:
            w.writerow([repr(r[k]) if isinstance(r[k], float) else r[k] for k in ABLATION_HEADER])


# --------------------------------------------------------------------------
# commands


def _out(args, default: str) -> Path:
    return Path(args.out or default)


def _guard(out: Path, force: bool) -> None:
    if out.exists() and any(out.iterdir()) and not force:
        raise FileExistsError(f"{out} exists and is not empty (use --force)")
    out.mkdir(parents=True, exist_ok=True)


def _train_config(cfg: ExperimentConfig, args) -> TrainConfig:
    tr = cfg.train
    if args.seed is not None:
        tr = replace(tr, seed=args.seed)
    if getattr(args, "dataset", None):
        tr = replace(tr, dataset=args.dataset)
    if not tr.dataset:
        raise ConfigError("no dataset given (train.dataset or --dataset)")
    return tr


def cmd_gen_data(cfg: ExperimentConfig, args) -> int:
    d = cfg.data
    seed = d.seed if args.seed is None else args.seed
    out = _out(args, "data")
    make_dataset(out, seed=seed, counts=d.counts, size=d.size,
                 mask_config=MaskConfig(d.acceleration, d.center_fraction, d.offset),
                 noise=NoiseSpec(d.noise_std, d.noise_seed), n_ellipses_range=d.n_ellipses_range,
                 force=args.force)
    print(f"dataset written to {out}")
    return EXIT_OK


def cmd_train(cfg: ExperimentConfig, args) -> int:
    tr = _train_config(cfg, args)
    out = _out(args, "run")
    _guard(out, args.force)
    res = run_training(tr, out)
    print(json.dumps(res, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_eval(cfg: ExperimentConfig, args) -> int:
    model = load_checkpoint(args.checkpoint)
    root = args.dataset or cfg.train.dataset
    if not root:
        raise ConfigError("no dataset given (train.dataset or --dataset)")
    ds = load_dataset(root, splits=(args.split,))
    summary, trajs = evaluate(model, ds.splits[args.split])
    stab = stability_report(trajs)
    out = _out(args, "eval")
    out.mkdir(parents=True, exist_ok=True)
    write_metrics(out, args.split, summary, stab)
    write_psnr_curve(out / f"psnr_curve_{args.split}.csv", stab)
    print(f"{args.split}: PSNR {summary.psnr_mean:.3f} +- {summary.psnr_std:.3f}  "
          f"SSIM {summary.ssim_mean:.4f} +- {summary.ssim_std:.4f}  "
          f"decreasing steps {stab.n_decreasing_steps_mean:.3f}")
    return EXIT_OK


def trajectory_strip(states, target: np.ndarray, error_scale: float) -> np.ndarray:
    """Two 8-bit rows: magnitude per cascade (plus target), and scaled squared error."""
    mags = [np.abs(ifft2_centered(s)) for s in states]
    top = np.concatenate(mags + [target], axis=1)
    err = np.concatenate([(m - target) ** 2 * error_scale for m in mags] + [np.zeros_like(target)], axis=1)
    img = np.concatenate([top, err], axis=0)
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def cmd_trajectory(cfg: ExperimentConfig, args) -> int:
    from PIL import Image

    model = load_checkpoint(args.checkpoint)
    root = args.dataset or cfg.train.dataset
    if not root:
        raise ConfigError("no dataset given (train.dataset or --dataset)")
    ds = load_dataset(root, splits=(args.split,))
    items = ds.splits[args.split]
    if not 0 <= args.sample < len(items):
        raise ConfigError(f"sample {args.sample} outside split of size {len(items)}")
    sample = items[args.sample]
    rec = trajectory(model, sample)
    out = _out(args, "trajectory")
    out.mkdir(parents=True, exist_ok=True)
    stem = f"{args.split}_{args.sample:04d}"
    write_trajectory_csv(out / f"trajectory_{stem}.csv", rec)
    Image.fromarray(trajectory_strip(rec.states, sample.target, cfg.output.error_scale), mode="L").save(
        out / f"trajectory_{stem}.png")
    print(" ".join(f"{p:.2f}" for p in rec.per_cascade_psnr))
    return EXIT_OK


def cmd_verify_ode(cfg: ExperimentConfig, args) -> int:
    vc = cfg.verify if args.seed is None else replace(cfg.verify, seed=args.seed)
    report = verify_correspondence(vc)
    out = _out(args, "verify")
    out.mkdir(parents=True, exist_ok=True)
    (out / "verify_report.json").write_text(report.to_json())
    print(report.summary())
    return EXIT_OK if report.passed else EXIT_FAILED


def cmd_ablate(cfg: ExperimentConfig, args) -> int:
    tr = _train_config(cfg, args)
    out = _out(args, "ablate")
    _guard(out, args.force)
    rows = run_grid(tr, GRIDS[args.grid], out)
    for r in rows:
        print(f"{r['name']:>12}  PSNR {r['test_psnr']:.3f}  decreasing {r['n_decreasing_steps_mean']:.3f}")
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "trajectory": cmd_trajectory,
            "verify-ode": cmd_verify_ode, "ablate": cmd_ablate}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="ExperimentConfig JSON file")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int, help="override the command's seed")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    p = argparse.ArgumentParser(prog="flatrecon", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    helps = {"gen-data": "generate a phantom dataset", "train": "train one configuration",
             "ablate": "train every row of an ablation grid", "eval": "evaluate a checkpoint on one split",
             "trajectory": "write per-cascade images and PSNR for one sample",
             "verify-ode": "check cascades against the analytic flow"}
    sp = {name: sub.add_parser(name, parents=[common], help=helps[name]) for name in COMMANDS}
    for name in ("train", "ablate", "eval", "trajectory"):
        sp[name].add_argument("--dataset", help="dataset directory (default: train.dataset)")
    sp["ablate"].add_argument("--grid", choices=sorted(GRIDS), default="table3", help="which grid to run")
    for name in ("eval", "trajectory"):
        sp[name].add_argument("--checkpoint", required=True, help="checkpoint directory")
        sp[name].add_argument("--split", default="test", choices=["train", "val", "test"])
    sp["trajectory"].add_argument("--sample", type=int, default=0, help="index within the split")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (OSError, LoadError, FormatError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
