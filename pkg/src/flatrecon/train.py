"""Training (FLAT and final-only baseline), evaluation and cascade-stability analysis."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import AdamW, ConfigError, Tape
from .datagen import Dataset, Sample, load_dataset
from .flow import build_schedule, ideal_state
from .metrics import psnr, ssim, ssim_loss_var
from .model import (
    Bound,
    DivergenceError,
    TrajectoryRecord,
    UnrolledModel,
    forward_unrolled,
    init_model,
    load_checkpoint,
    mask_const,
    save_checkpoint,
    unroll,
)
from .physics import ifft2_centered

log = logging.getLogger(__name__)

TRAIN_LOG_HEADER = ["epoch", "step", "loss_total", "loss_recon", "loss_velocity_sum", "val_psnr", "val_ssim"]
METRICS_HEADER = ["index", "psnr", "ssim"]
TRAJECTORY_HEADER = ["step", "psnr", "ssim"]


@dataclass
class TrainConfig:
    dataset: str = ""
    K: int = 12
    alpha: float = 4.0
    sigma: float = 1.0
    w_velocity: float = 1e-4
    velocity_norm: str = "L1"
    weight_sharing: bool = False
    ground_parameters: bool = True
    intermediate_supervision: bool = True
    lr: float = 1e-3
    epochs: int = 50
    batch_size: int = 1
    seed: int = 0
    train_limit: int | None = None

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigError("epochs must be at least 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.w_velocity < 0:
            raise ConfigError("w_velocity must be nonnegative")
        if self.velocity_norm not in ("L1", "L2"):
            raise ConfigError("velocity_norm must be L1 or L2")
        if self.batch_size != 1:
            raise ConfigError("only batch_size 1 is supported")
        if self.K < 1:
            raise ConfigError("K must be positive")

    @classmethod
    def baseline(cls, **kw) -> "TrainConfig":
        return cls(ground_parameters=False, intermediate_supervision=False, w_velocity=0.0, **kw)

    @classmethod
    def flat(cls, **kw) -> "TrainConfig":
        return cls(ground_parameters=True, intermediate_supervision=True, **kw)


@dataclass
class MetricsSummary:
    psnr_mean: float
    psnr_std: float
    ssim_mean: float
    ssim_std: float
    n: int
    psnr_values: list[float] = field(default_factory=list)
    ssim_values: list[float] = field(default_factory=list)

    @classmethod
    def from_values(cls, p, s) -> "MetricsSummary":
        p, s = np.asarray(p, dtype=np.float64), np.asarray(s, dtype=np.float64)
        return cls(float(p.mean()), float(p.std()), float(s.mean()), float(s.std()), int(p.size),
                   p.tolist(), s.tolist())


# --------------------------------------------------------------------------
# losses


@dataclass
class LossParts:
    total: ad.Var
    recon: ad.Var
    velocity: list[ad.Var]
    states: list[ad.Var]
    bound: Bound


def _velocity_terms(states, sample: Sample, model: UnrolledModel, cfg: TrainConfig, tape: Tape):
    sched = model.schedule
    terms = []
    for k in range(sched.K):
        tk, tk1 = float(sched.t[k]), float(sched.t[k + 1])
        if cfg.ground_parameters:
            target = ideal_state(sample.x0, sample.x1, tk1)
        else:
            # ungrounded ablation: every cascade is pulled towards the final image
            target = sample.x1
        inv = 1.0 / (tk1 - tk)
        v_ideal = ad.scale(ad.sub(tape.const(ad.to_channels(target)), states[k]), inv)
        v_pred = ad.scale(ad.sub(states[k + 1], states[k]), inv)
        gap = ad.sub(v_ideal, v_pred)
        terms.append(ad.reduce_mean(ad.absolute(gap) if cfg.velocity_norm == "L1" else ad.square(gap)))
    return terms


def build_loss(model: UnrolledModel, sample: Sample, cfg: TrainConfig, tape: Tape | None = None) -> LossParts:
    tape = tape or Tape()
    b = Bound.on(model, tape, trainable=True)
    y = tape.const(ad.to_channels(sample.y))
    states = unroll(b, y, mask_const(tape, sample.mask, y.shape))
    ref = tape.const(sample.target[None])
    recon = ssim_loss_var(ref, ad.magnitude(ad.ifft2c(states[-1])))
    velocity = []
    total = recon
    if cfg.intermediate_supervision and cfg.w_velocity > 0:
        velocity = _velocity_terms(states, sample, model, cfg, tape)
        total = ad.add(recon, ad.scale(ad.add_n(velocity), cfg.w_velocity))
    return LossParts(total, recon, velocity, states, b)


def gradients(parts: LossParts) -> dict[str, np.ndarray]:
    ad.backward(parts.bound.tape, parts.total)
    return {name: v.grad if v.grad is not None else np.zeros_like(v.value)
            for name, v in parts.bound.vars.items()}


# --------------------------------------------------------------------------
# evaluation


def trajectory(model: UnrolledModel, sample: Sample) -> TrajectoryRecord:
    rec = forward_unrolled(sample.y, sample.mask, model)
    target = sample.target
    for state in rec.states:
        img = np.abs(ifft2_centered(state))
        rec.per_cascade_psnr.append(psnr(target, img))
        rec.per_cascade_ssim.append(ssim(target, img))
    return rec


def evaluate(model: UnrolledModel, samples: list[Sample]) -> tuple[MetricsSummary, list[TrajectoryRecord]]:
    if not samples:
        raise ValueError("nothing to evaluate")
    trajs = [trajectory(model, s) for s in samples]
    return MetricsSummary.from_values([t.per_cascade_psnr[-1] for t in trajs],
                                      [t.per_cascade_ssim[-1] for t in trajs]), trajs


def evaluate_zero_filled(samples: list[Sample]) -> MetricsSummary:
    p, s = [], []
    for smp in samples:
        img = np.abs(ifft2_centered(smp.x0))
        p.append(psnr(smp.target, img))
        s.append(ssim(smp.target, img))
    return MetricsSummary.from_values(p, s)


@dataclass
class StabilityReport:
    n_decreasing_steps_mean: float
    max_drop_dB: float
    monotone_fraction: float
    per_step_psnr_mean: list[float]


def stability_report(trajectories) -> StabilityReport:
    """Zig-zag diagnostics over per-cascade PSNR curves (records or plain sequences)."""
    curves = [np.asarray(t.per_cascade_psnr if isinstance(t, TrajectoryRecord) else t, dtype=np.float64)
              for t in trajectories]
    if not curves:
        raise ValueError("no trajectories")
    n_dec, max_drop, monotone = [], 0.0, 0
    for c in curves:
        d = np.diff(c)
        n_dec.append(int(np.sum(d < 0)))
        if d.size and d.min() < 0:
            max_drop = max(max_drop, float(-d.min()))
        monotone += int(np.all(d >= 0))
    return StabilityReport(float(np.mean(n_dec)), max_drop, monotone / len(curves),
                           np.mean(np.stack(curves), axis=0).tolist())


# --------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    model: UnrolledModel
    best_val_psnr: float
    best_epoch: int
    log_rows: list[dict]


def make_model(cfg: TrainConfig) -> UnrolledModel:
    sched = build_schedule(cfg.K, cfg.alpha, cfg.sigma)
    return init_model(sched, cfg.weight_sharing, cfg.ground_parameters, cfg.seed)


def train(cfg: TrainConfig, dataset: Dataset | None = None, out=None) -> TrainResult:
    """Per-sample AdamW training with best-validation-PSNR model selection."""
    cfg.validate()
    ds = dataset or load_dataset(cfg.dataset)
    train_set = ds.splits["train"][: cfg.train_limit] if cfg.train_limit else ds.splits["train"]
    val_set = ds.splits["val"]
    model = make_model(cfg)
    opt = AdamW(lr=cfg.lr)
    order_rng = np.random.default_rng(cfg.seed + 7919)
    best = (-np.inf, 0, {n: p.copy() for n, p in model.params.items()})
    rows = []
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        tot = rec = vel = 0.0
        for i in order_rng.permutation(len(train_set)):
            try:
                parts = build_loss(model, train_set[i], cfg)
                grads = gradients(parts)
                opt.step(model.params, grads)
            except FloatingPointError as exc:
                if out is not None:
                    _write_outputs(out, cfg, UnrolledModel(model.schedule, best[2], model.weight_sharing,
                                   model.grounded, model.channels, model.seed), rows)
                raise DivergenceError(getattr(exc, "cascade", -1), f"epoch {epoch} step {step}") from exc
            step += 1
            tot += float(parts.total.value)
            rec += float(parts.recon.value)
            vel += float(sum(float(v.value) for v in parts.velocity))
        n = len(train_set)
        summary, _ = evaluate(model, val_set)
        rows.append({"epoch": epoch, "step": step, "loss_total": tot / n, "loss_recon": rec / n,
                     "loss_velocity_sum": vel / n, "val_psnr": summary.psnr_mean, "val_ssim": summary.ssim_mean})
        log.info("epoch %d loss %.5f val psnr %.3f", epoch, tot / n, summary.psnr_mean)
        if summary.psnr_mean > best[0]:
            best = (summary.psnr_mean, epoch, {n_: p.copy() for n_, p in model.params.items()})
    final = UnrolledModel(model.schedule, best[2], model.weight_sharing, model.grounded, model.channels, model.seed)
    if out is not None:
        _write_outputs(out, cfg, final, rows)
    return TrainResult(final, float(best[0]), best[1], rows)


def _write_outputs(out, cfg: TrainConfig, model: UnrolledModel, rows: list[dict]) -> None:
    out = Path(out)
    save_checkpoint(model, out / "checkpoint", {"train_config": asdict(cfg)})
    write_train_log(out / "train_log.csv", rows)


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_train_log(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRAIN_LOG_HEADER)
        for r in rows:
            w.writerow([_fmt(r[k]) for k in TRAIN_LOG_HEADER])


def write_metrics(out_dir, split: str, summary: MetricsSummary, stability: StabilityReport | None = None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / f"metrics_{split}.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRICS_HEADER)
        for i, (p, s) in enumerate(zip(summary.psnr_values, summary.ssim_values)):
            w.writerow([i, _fmt(p), _fmt(s)])
    doc = {"split": split, **{k: v for k, v in asdict(summary).items() if not k.endswith("_values")}}
    if stability is not None:
        doc["stability"] = asdict(stability)
    (out / f"summary_{split}.json").write_text(json.dumps(doc, indent=2, sort_keys=True))


def write_trajectory_csv(path, rec: TrajectoryRecord) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRAJECTORY_HEADER)
        for k, (p, s) in enumerate(zip(rec.per_cascade_psnr, rec.per_cascade_ssim)):
            w.writerow([k, _fmt(p), _fmt(s)])


def write_psnr_curve(path, stability: StabilityReport) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "psnr_mean"])
        for k, p in enumerate(stability.per_step_psnr_mean):
            w.writerow([k, _fmt(p)])


def load_and_evaluate(checkpoint, dataset_root, split: str = "test"):
    model = load_checkpoint(checkpoint)
    ds = load_dataset(dataset_root, splits=(split,))
    return evaluate(model, ds.splits[split])
