"""Seeded ellipse phantoms and undersampled k-space datasets on disk."""

from __future__ import annotations

import json
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import arrayio
from .autodiff import ConfigError
from .physics import (
    NoiseSpec,
    SamplingMask,
    adjoint,
    apply_forward,
    fft2_centered,
    ifft2_centered,
    make_equispaced_mask,
)

SPLITS = ("train", "val", "test")
# seeds of split s occupy [root * 2^20 + s * 2^18, root * 2^20 + (s + 1) * 2^18)
_SPLIT_STRIDE = 1 << 18
_ROOT_STRIDE = 1 << 20


@dataclass
class Phantom:
    image: np.ndarray
    seed: int
    ellipses: list[tuple[tuple[float, float], tuple[float, float], float, float]]


def make_phantom(seed: int, size: int = 32, n_ellipses_range: tuple[int, int] = (3, 6)) -> Phantom:
    """Sum of random filled ellipses on [-1, 1]^2, clipped to [0, 1]."""
    lo, hi = n_ellipses_range
    if lo > hi or lo < 0:
        raise ConfigError(f"bad ellipse count range {n_ellipses_range}")
    rng = np.random.default_rng(seed)
    n = int(rng.integers(lo, hi + 1))
    coords = (np.arange(size) + 0.5) / size * 2.0 - 1.0
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    img = np.zeros((size, size))
    ellipses = []
    for _ in range(n):
        cx, cy = rng.uniform(-0.5, 0.5, size=2)
        ax, ay = rng.uniform(0.1, 0.6, size=2)
        angle = rng.uniform(0.0, np.pi)
        intensity = rng.uniform(0.1, 0.6)
        c, s = np.cos(angle), np.sin(angle)
        u = (xx - cx) * c + (yy - cy) * s
        v = -(xx - cx) * s + (yy - cy) * c
        img[(u / ax) ** 2 + (v / ay) ** 2 <= 1.0] += intensity
        ellipses.append(((float(cx), float(cy)), (float(ax), float(ay)), float(angle), float(intensity)))
    return Phantom(np.clip(img, 0.0, 1.0), seed, ellipses)


@dataclass(frozen=True)
class MaskConfig:
    acceleration: int = 8
    center_fraction: float = 0.08
    offset: int = 0

    def build(self, width: int) -> SamplingMask:
        return make_equispaced_mask(width, self.acceleration, self.center_fraction, self.offset)


@dataclass
class Sample:
    x1: np.ndarray
    y: np.ndarray
    x0: np.ndarray
    mask: SamplingMask
    noise: NoiseSpec = field(default_factory=NoiseSpec)

    @property
    def target(self) -> np.ndarray:
        """Magnitude image of the fully sampled k-space."""
        return np.abs(ifft2_centered(self.x1))

    def check(self) -> None:
        if not np.array_equal(self.y, apply_forward(self.x1, self.mask, self.noise)):
            raise ValueError("stored observation does not match the forward model")
        if not np.array_equal(self.x0, adjoint(self.y, self.mask)):
            raise ValueError("stored x0 is not A^T y")


def make_sample(phantom: Phantom, mask_config: MaskConfig | SamplingMask, noise: NoiseSpec | None = None) -> Sample:
    noise = noise or NoiseSpec()
    img = phantom.image.astype(np.complex128)
    mask = mask_config if isinstance(mask_config, SamplingMask) else mask_config.build(img.shape[1])
    x1 = fft2_centered(img)
    y = apply_forward(x1, mask, noise)
    return Sample(x1, y, adjoint(y, mask), mask, noise)


def sample_seed(root_seed: int, split: str, idx: int) -> int:
    if idx >= _SPLIT_STRIDE:
        raise ConfigError(f"split too large, at most {_SPLIT_STRIDE} samples")
    return root_seed * _ROOT_STRIDE + SPLITS.index(split) * _SPLIT_STRIDE + idx


@dataclass
class Dataset:
    root: Path
    manifest: dict
    mask: SamplingMask
    splits: dict[str, list[Sample]]

    @property
    def size(self) -> int:
        return int(self.manifest["size"])


def make_dataset(out, seed: int = 0, counts: dict | None = None, size: int = 32,
                 mask_config: MaskConfig | None = None, noise: NoiseSpec | None = None,
                 n_ellipses_range: tuple[int, int] = (3, 6), force: bool = False) -> Path:
    counts = dict(counts or {"train": 200, "val": 40, "test": 40})
    mask_config = mask_config or MaskConfig()
    noise = noise or NoiseSpec()
    if set(counts) != set(SPLITS) or any(int(c) < 1 for c in counts.values()):
        raise ConfigError(f"counts must give a positive size for each of {SPLITS}")
    if size not in (32, 64):
        raise ConfigError(f"phantom size must be 32 or 64, got {size}")
    out = Path(out)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise FileExistsError(f"{out} exists and is not empty")
        shutil.rmtree(out)
    mask = mask_config.build(size)
    out.mkdir(parents=True, exist_ok=True)
    samples_meta = {}
    for split in SPLITS:
        (out / split).mkdir()
        entries = []
        for i in range(int(counts[split])):
            s = sample_seed(seed, split, i)
            nspec = NoiseSpec(noise.std, noise.seed * _ROOT_STRIDE + s) if noise.std > 0 else NoiseSpec()
            sample = make_sample(make_phantom(s, size, n_ellipses_range), mask, nspec)
            for key in ("x1", "y", "x0"):
                arrayio.save_complex(out / split / f"{i:04d}.{key}.fla", getattr(sample, key))
            entries.append({"index": i, "seed": s, "noise_seed": nspec.seed})
        samples_meta[split] = entries
    (out / "mask.json").write_text(json.dumps(mask.to_json()))
    manifest = {
        "root_seed": seed,
        "counts": {k: int(counts[k]) for k in SPLITS},
        "size": size,
        "mask_config": {"acceleration": mask_config.acceleration,
                        "center_fraction": mask_config.center_fraction,
                        "offset": mask_config.offset},
        "noise": {"std": noise.std, "seed": noise.seed},
        "n_ellipses_range": list(n_ellipses_range),
        "samples": samples_meta,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return out


def load_dataset(root, splits=SPLITS) -> Dataset:
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    mask = SamplingMask.from_json(json.loads((root / "mask.json").read_text()))
    std = float(manifest["noise"]["std"])
    loaded = {}
    for split in splits:
        items = []
        for entry in manifest["samples"][split]:
            i = entry["index"]
            parts = {k: arrayio.load_complex(root / split / f"{i:04d}.{k}.fla") for k in ("x1", "y", "x0")}
            nspec = NoiseSpec(std, entry["noise_seed"]) if std > 0 else NoiseSpec()
            items.append(Sample(parts["x1"], parts["y"], parts["x0"], mask, nspec))
        loaded[split] = items
    return Dataset(root, manifest, mask, loaded)


def check_dataset(root) -> int:
    """Re-verify every stored sample; returns the number checked."""
    ds = load_dataset(root)
    n = 0
    for split, items in ds.splits.items():
        for i, sample in enumerate(items):
            try:
                sample.check()
            except ValueError as exc:
                raise ValueError(f"{split}/{i:04d}: {exc}") from exc
            n += 1
    return n
