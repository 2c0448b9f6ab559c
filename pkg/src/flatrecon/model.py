"""K-cascade unrolled reconstruction network in k-space.

Each cascade computes

    x_{k+1} = x_k - eta_k A^T(A x_k - y) + eta_k mu Phi_k(x_k),
    Phi_k(x) = F f_theta(F^{-1} x),

where f_theta is a small image-domain CNN on (real, imaginary) channels.  With
grounded parameters (eta_k, mu) come from a :class:`CascadeSchedule`; otherwise
they are learnable scalars starting at 1.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import arrayio
from . import autodiff as ad
from .autodiff import ContractError, ShapeError, Tape, Var
from .flow import CascadeSchedule
from .physics import SamplingMask, check_grid

DEFAULT_CHANNELS = (2, 16, 16, 2)
KERNEL = 3


class DivergenceError(FloatingPointError):
    def __init__(self, cascade: int, detail: str = ""):
        super().__init__(f"non-finite state at cascade {cascade}" + (f": {detail}" if detail else ""))
        self.cascade = cascade


@dataclass
class UnrolledModel:
    schedule: CascadeSchedule
    params: dict[str, np.ndarray]
    weight_sharing: bool = False
    grounded: bool = True
    channels: tuple[int, ...] = DEFAULT_CHANNELS
    seed: int = 0

    @property
    def K(self) -> int:
        return self.schedule.K

    @property
    def n_regularizers(self) -> int:
        return 1 if self.weight_sharing else self.K

    def prefix(self, k: int) -> str:
        return "shared" if self.weight_sharing else f"c{k:02d}"

    def in_channels(self) -> int:
        # shared weights see t_k as an extra constant channel
        return self.channels[0] + (1 if self.weight_sharing else 0)

    def regularizer_params(self, k: int) -> dict[str, np.ndarray]:
        pre = self.prefix(k) + "."
        return {n: p for n, p in self.params.items() if n.startswith(pre)}

    def check(self) -> None:
        if self.schedule.eta is None or len(self.schedule.eta) != self.K:
            raise ContractError("model schedule carries no step sizes")
        prefixes = {n.split(".")[0] for n in self.params if n.startswith(("c", "shared"))}
        if len(prefixes) != self.n_regularizers:
            raise ContractError(f"expected {self.n_regularizers} regularizers, found {len(prefixes)}")
        if not self.grounded and not all(f"eta.{k:02d}" in self.params for k in range(self.K)):
            raise ContractError("ungrounded model is missing learnable step sizes")


def init_model(schedule: CascadeSchedule, weight_sharing: bool = False, grounded: bool = True,
               seed: int = 0, channels: tuple[int, ...] = DEFAULT_CHANNELS) -> UnrolledModel:
    """He-normal conv weights and zero biases drawn from one seeded generator."""
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    n_reg = 1 if weight_sharing else schedule.K
    chans = list(channels)
    if weight_sharing:
        chans[0] += 1
    for r in range(n_reg):
        pre = "shared" if weight_sharing else f"c{r:02d}"
        for i, (cin, cout) in enumerate(zip(chans[:-1], chans[1:])):
            std = np.sqrt(2.0 / (cin * KERNEL * KERNEL))
            params[f"{pre}.conv{i}.w"] = rng.normal(0.0, std, size=(cout, cin, KERNEL, KERNEL))
            params[f"{pre}.conv{i}.b"] = np.zeros(cout)
    if not grounded:
        for k in range(schedule.K):
            params[f"eta.{k:02d}"] = np.ones(1)
        params["mu"] = np.ones(1)
    return UnrolledModel(schedule, params, weight_sharing, grounded, tuple(channels), seed)


# --------------------------------------------------------------------------
# tape graph


@dataclass
class Bound:
    """A model whose parameters have been placed on a tape as leaves."""

    model: UnrolledModel
    tape: Tape
    vars: dict[str, Var] = field(default_factory=dict)

    @classmethod
    def on(cls, model: UnrolledModel, tape: Tape, trainable: bool = True) -> "Bound":
        make = tape.param if trainable else tape.const
        return cls(model, tape, {n: make(p) for n, p in sorted(model.params.items())})


def f_theta(b: Bound, img: Var, k: int) -> Var:
    """conv-relu-conv-relu-conv on a (C, H, W) image; shape preserving."""
    m = b.model
    pre = m.prefix(k)
    h = img
    if m.weight_sharing:
        tk = b.tape.const(np.full((1,) + img.shape[1:], m.schedule.t[k]))
        h = ad.concat([h, tk])
    n_layers = len(m.channels) - 1
    for i in range(n_layers):
        h = ad.conv2d(h, b.vars[f"{pre}.conv{i}.w"], pad=KERNEL // 2)
        h = ad.add_bias(h, b.vars[f"{pre}.conv{i}.b"])
        if i < n_layers - 1:
            h = ad.relu(h)
    return h


def phi(b: Bound, x: Var, k: int) -> Var:
    """Regularizer in k-space: F f_theta(F^{-1} x)."""
    if x.shape[0] != b.model.channels[0]:
        raise ShapeError(f"regularizer expects {b.model.channels[0]} channels, got {x.shape[0]}")
    return ad.fft2c(f_theta(b, ad.ifft2c(x), k))


def mask_const(tape: Tape, mask: SamplingMask, shape: tuple[int, ...]) -> Var:
    if shape[-1] != mask.width:
        raise ShapeError(f"mask width {mask.width} does not match grid width {shape[-1]}")
    return tape.const(np.broadcast_to(mask.column_weights(), shape).copy())


def cascade(b: Bound, x: Var, y: Var, m: Var, k: int) -> Var:
    model = b.model
    dc = ad.mul(ad.sub(ad.mul(x, m), y), m)
    reg = phi(b, x, k)
    if model.grounded:
        eta = float(model.schedule.eta[k])
        mu = float(model.schedule.mu)
        return ad.add(ad.sub(x, ad.scale(dc, eta)), ad.scale(reg, eta * mu))
    eta = b.vars[f"eta.{k:02d}"]
    mu = b.vars["mu"]
    return ad.add(ad.sub(x, ad.scale_by(dc, eta)), ad.scale_by(ad.scale_by(reg, mu), eta))


def unroll(b: Bound, y: Var, m: Var) -> list[Var]:
    """States x^(0) .. x^(K), starting from x^(0) = A^T y."""
    b.model.check()
    states = [ad.mul(y, m)]
    for k in range(b.model.K):
        try:
            states.append(cascade(b, states[-1], y, m, k))
        except FloatingPointError as exc:
            raise DivergenceError(k, str(exc)) from exc
    return states


# --------------------------------------------------------------------------
# complex-grid wrappers


@dataclass
class TrajectoryRecord:
    states: list[np.ndarray]
    per_cascade_psnr: list[float] = field(default_factory=list)
    per_cascade_ssim: list[float] = field(default_factory=list)


def regularizer_apply(x_k: np.ndarray, model: UnrolledModel, k: int = 0) -> np.ndarray:
    x_k = check_grid(x_k)
    tape = Tape()
    b = Bound.on(model, tape, trainable=False)
    return ad.to_complex(phi(b, tape.const(ad.to_channels(x_k)), k).value)


def cascade_update(x_k: np.ndarray, y: np.ndarray, mask: SamplingMask, k: int,
                   model: UnrolledModel) -> np.ndarray:
    if not 0 <= k < model.K:
        raise ValueError(f"cascade index {k} outside [0, {model.K})")
    model.check()
    x_k, y = check_grid(x_k), check_grid(y)
    tape = Tape()
    b = Bound.on(model, tape, trainable=False)
    xv = tape.const(ad.to_channels(x_k))
    yv = tape.const(ad.to_channels(y))
    return ad.to_complex(cascade(b, xv, yv, mask_const(tape, mask, xv.shape), k).value)


def forward_unrolled(y: np.ndarray, mask: SamplingMask, model: UnrolledModel) -> TrajectoryRecord:
    y = check_grid(y)
    tape = Tape()
    b = Bound.on(model, tape, trainable=False)
    yv = tape.const(ad.to_channels(y))
    states = unroll(b, yv, mask_const(tape, mask, yv.shape))
    return TrajectoryRecord([ad.to_complex(s.value) for s in states])


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: UnrolledModel, path, extra: dict | None = None) -> None:
    out = Path(path)
    (out / "params").mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": "flatrecon-checkpoint/1",
        "architecture": {"channels": list(model.channels), "kernel": KERNEL, "activation": "relu"},
        "schedule": model.schedule.to_json(),
        "weight_sharing": model.weight_sharing,
        "grounded": model.grounded,
        "seed": model.seed,
        "params": sorted(model.params),
    }
    if extra:
        manifest.update(extra)
    for name, arr in sorted(model.params.items()):
        arrayio.save(out / "params" / f"{name}.fla", arr)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


class LoadError(RuntimeError):
    pass


def load_checkpoint(path) -> UnrolledModel:
    src = Path(path)
    try:
        manifest = json.loads((src / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise LoadError(f"cannot read checkpoint manifest in {src}: {exc}") from exc
    if manifest.get("format") != "flatrecon-checkpoint/1":
        raise LoadError(f"unknown checkpoint format {manifest.get('format')!r}")
    arch = manifest["architecture"]
    if arch.get("kernel") != KERNEL or arch.get("activation") != "relu":
        raise LoadError(f"unsupported architecture {arch}")
    schedule = CascadeSchedule.from_json(manifest["schedule"])
    params = {n: arrayio.load(src / "params" / f"{n}.fla") for n in manifest["params"]}
    model = UnrolledModel(schedule, params, manifest["weight_sharing"], manifest["grounded"],
                          tuple(arch["channels"]), manifest["seed"])
    reference = init_model(schedule, model.weight_sharing, model.grounded, 0, model.channels)
    if {n: p.shape for n, p in reference.params.items()} != {n: p.shape for n, p in params.items()}:
        raise LoadError("parameter shapes do not match the declared architecture")
    return model
