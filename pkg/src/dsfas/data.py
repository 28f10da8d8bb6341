"""Toy face data, directory ingestion and leave-one-attack-out protocols."""

from __future__ import annotations

import csv
import hashlib
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

from .losses import LIVE, SPOOF
from .tensor import Tensor

log = logging.getLogger(__name__)

PATTERNS = ("stripes", "dots", "checker", "blur", "blocks", "rings")
LIVE_TYPE = "none"
LABEL_NAMES = {LIVE: "live", SPOOF: "spoof"}


@dataclass(eq=False)
class Sample:
    id: str
    image: Tensor  # [3, H, W] in [0, 1]
    label: int
    attack_type: str
    source: str = "synthetic"

    def __post_init__(self):
        if (self.label == LIVE) != (self.attack_type == LIVE_TYPE):
            raise ValueError(f"{self.id}: live label requires attack_type 'none' and vice versa")
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise ValueError(f"{self.id}: image must be [3,H,W], got {self.image.shape}")
        if self.image.data.min() < 0.0 or self.image.data.max() > 1.0:
            raise ValueError(f"{self.id}: pixel values outside [0, 1]")

    @property
    def is_live(self) -> bool:
        return self.label == LIVE


@dataclass
class Dataset:
    samples: list[Sample] = field(default_factory=list)
    skipped: int = 0  # unreadable files ignored while loading

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i: int) -> Sample:
        return self.samples[i]

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=int)

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.samples]

    def attack_types(self) -> list[str]:
        return sorted({s.attack_type for s in self.samples if not s.is_live})

    def live(self) -> "Dataset":
        return self.filter(lambda s: s.is_live)

    def spoof(self) -> "Dataset":
        return self.filter(lambda s: not s.is_live)

    def filter(self, keep) -> "Dataset":
        return Dataset([s for s in self.samples if keep(s)])

    def images(self, indices: Sequence[int] | None = None) -> np.ndarray:
        idx = range(len(self.samples)) if indices is None else indices
        return np.stack([self.samples[i].image.data for i in idx])

    def manifest_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["id", "label", "attack_type", "source"])
        for s in self.samples:
            writer.writerow([s.id, LABEL_NAMES[s.label], s.attack_type, s.source])
        return buf.getvalue()


# ---------------------------------------------------------------------------
# synthetic faces


@dataclass(frozen=True)
class SynthSpec:
    image_size: int = 32
    n_live: int = 60
    n_per_attack: int = 45
    patterns: tuple[str, ...] = ("stripes", "dots", "checker", "rings")
    noise: float = 0.02
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "patterns", tuple(self.patterns))
        if self.n_live < 1 or self.n_per_attack < 1:
            raise ValueError("n_live and n_per_attack must be >= 1")
        if len(set(self.patterns)) < 2:
            raise ValueError("need at least two distinct attack patterns")
        unknown = set(self.patterns) - set(PATTERNS)
        if unknown:
            raise ValueError(f"unknown attack patterns: {sorted(unknown)}")
        if self.image_size < 8:
            raise ValueError("image_size must be >= 8")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")


def _soft(d: np.ndarray, edge: float) -> np.ndarray:
    # 1 inside (d < 0), 0 outside, smooth transition of width ~edge
    return 1.0 / (1.0 + np.exp(np.clip(d / edge, -50, 50)))


def render_face(rng: np.random.Generator, size: int) -> np.ndarray:
    """Low-frequency blob composition: background, face ellipse, eyes, mouth."""
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    bg = rng.uniform(0.15, 0.85, 3)
    tilt = rng.uniform(-0.15, 0.15, 2)
    img = bg[:, None, None] + (tilt[0] * (xx - 0.5) + tilt[1] * (yy - 0.5))[None]

    cy, cx = 0.5 + rng.uniform(-0.06, 0.06, 2)
    ay, ax = rng.uniform(0.30, 0.40), rng.uniform(0.22, 0.32)
    face = _soft(((yy - cy) / ay) ** 2 + ((xx - cx) / ax) ** 2 - 1.0, 0.08)
    skin = rng.uniform(0.35, 0.95, 3)
    img = img * (1 - face) + skin[:, None, None] * face

    eye_dy = rng.uniform(0.08, 0.14)
    eye_dx = rng.uniform(0.09, 0.14)
    eye_r = rng.uniform(0.035, 0.06)
    dark = rng.uniform(0.0, 0.25)
    for sx in (-1, 1):
        eye = np.exp(-(((yy - (cy - eye_dy)) ** 2 + (xx - (cx + sx * eye_dx)) ** 2) / (2 * eye_r**2)))
        img = img * (1 - eye) + dark * eye

    my = cy + rng.uniform(0.13, 0.2)
    mw, mh = rng.uniform(0.08, 0.14), rng.uniform(0.02, 0.035)
    mouth = _soft(np.maximum(np.abs(xx - cx) / mw, np.abs(yy - my) / mh) - 1.0, 0.15)
    lip = rng.uniform(0.2, 0.5, 3)
    img = img * (1 - mouth) + lip[:, None, None] * mouth
    return img


def _add_noise(img: np.ndarray, rng: np.random.Generator, noise: float) -> np.ndarray:
    if noise > 0:
        img = img + rng.normal(0.0, noise, img.shape)
    return img


def apply_pattern(img: np.ndarray, pattern: str, rng: np.random.Generator) -> np.ndarray:
    """Superimpose one attack pattern on a [3,H,W] image (values may leave [0,1])."""
    _, h, w = img.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    if pattern == "stripes":
        period = rng.uniform(3.0, 4.5)
        theta = rng.uniform(0, np.pi)
        phase = rng.uniform(0, 2 * np.pi)
        wave = np.sin(2 * np.pi * (xx * np.cos(theta) + yy * np.sin(theta)) / period + phase)
        tint = rng.uniform(0.7, 1.0, 3)
        return img + rng.uniform(0.12, 0.2) * tint[:, None, None] * wave[None]
    if pattern == "dots":
        step = int(rng.integers(3, 5))
        oy, ox = rng.integers(0, step, 2)
        r = step * rng.uniform(0.25, 0.35)
        dy = (yy - oy + step / 2) % step - step / 2
        dx = (xx - ox + step / 2) % step - step / 2
        dots = np.exp(-(dy**2 + dx**2) / (2 * r**2))
        return img - rng.uniform(0.3, 0.4) * dots[None]
    if pattern == "checker":
        cell = int(rng.integers(2, 4))
        oy, ox = rng.integers(0, cell, 2)
        board = ((((yy + oy) // cell) + ((xx + ox) // cell)) % 2) * 2 - 1
        return img + rng.uniform(0.1, 0.16) * board[None]
    if pattern == "blur":
        sigma = rng.uniform(1.0, 1.6)
        return ndimage.gaussian_filter(img, sigma=(0, sigma, sigma), mode="nearest")
    if pattern == "blocks":
        bh, bw = (rng.uniform(0.35, 0.55, 2) * (h, w)).astype(int)
        y0 = int(rng.integers(0, h - bh + 1))
        x0 = int(rng.integers(0, w - bw + 1))
        out = img.copy()
        out[:, y0 : y0 + bh, x0 : x0 + bw] = rng.uniform(0.1, 0.9, 3)[:, None, None]
        return out
    if pattern == "rings":
        cy, cx = rng.uniform(0.2, 0.8, 2) * (h, w)
        period = rng.uniform(3.0, 4.5)
        rad = np.hypot(yy - cy, xx - cx)
        return img + rng.uniform(0.12, 0.2) * np.sin(2 * np.pi * rad / period)[None]
    raise ValueError(f"unknown pattern {pattern!r}")


def synth_sample(spec: SynthSpec, kind: str, index: int) -> Sample:
    """One sample, a pure function of (spec, kind, index)."""
    kind_code = 0 if kind == LIVE_TYPE else 1 + PATTERNS.index(kind)
    rng = np.random.default_rng([spec.seed, kind_code, index])
    img = _add_noise(render_face(rng, spec.image_size), rng, spec.noise)
    if kind == LIVE_TYPE:
        return Sample(f"live_{index:04d}", Tensor(np.clip(img, 0, 1)), LIVE, LIVE_TYPE)
    img = apply_pattern(np.clip(img, 0, 1), kind, rng)
    return Sample(f"{kind}_{index:04d}", Tensor(np.clip(img, 0, 1)), SPOOF, kind)


def generate_dataset(spec: SynthSpec) -> Dataset:
    samples = [synth_sample(spec, LIVE_TYPE, i) for i in range(spec.n_live)]
    for pattern in spec.patterns:
        samples += [synth_sample(spec, pattern, i) for i in range(spec.n_per_attack)]
    return Dataset(samples)


# ---------------------------------------------------------------------------
# image files


def to_uint8(image: np.ndarray) -> np.ndarray:
    """[3,H,W] floats in [0,1] to an HxWx3 uint8 array."""
    return np.round(np.clip(image, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)


def save_png(image: np.ndarray, path) -> None:
    Image.fromarray(to_uint8(image), mode="RGB").save(path, format="PNG")


def read_image(path, image_size: int | None = None) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("RGB")
        if image_size is not None and im.size != (image_size, image_size):
            im = im.resize((image_size, image_size), Image.Resampling.BILINEAR)
        arr = np.asarray(im, dtype=np.float64) / 255.0
    return arr.transpose(2, 0, 1)


def load_directory(root, image_size: int = 32) -> Dataset:
    """Read ``root/live/*.png`` and ``root/<attack_type>/*.png``.

    Unreadable files are skipped and counted in ``Dataset.skipped``; a class
    directory with no readable image is an error.
    """
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"no such directory: {root}")
    samples: list[Sample] = []
    skipped = 0
    for sub in sorted(p for p in root.iterdir() if p.is_dir()):
        is_live = sub.name == "live"
        found = 0
        for path in sorted(sub.glob("*.png")):
            try:
                img = read_image(path, image_size)
            except (OSError, UnidentifiedImageError, ValueError) as exc:
                log.warning("skipping unreadable image %s: %s", path, exc)
                skipped += 1
                continue
            samples.append(
                Sample(
                    f"{sub.name}/{path.stem}",
                    Tensor(img),
                    LIVE if is_live else SPOOF,
                    LIVE_TYPE if is_live else sub.name,
                    source=str(path),
                )
            )
            found += 1
        if found == 0:
            raise ValueError(f"class directory {sub} contains no readable PNG images")
    if not samples:
        raise ValueError(f"no class directories found under {root}")
    return Dataset(samples, skipped)


# ---------------------------------------------------------------------------
# protocols


@dataclass(frozen=True)
class ProtocolSpec:
    train_attack_types: tuple[str, ...]
    heldout_attack_type: str
    live_train_fraction: float = 0.8
    live_train_ids: tuple[str, ...] = ()
    live_test_ids: tuple[str, ...] = ()

    def __post_init__(self):
        if self.heldout_attack_type in self.train_attack_types:
            raise ValueError("held-out type may not be a training type")
        if not 0 < self.live_train_fraction < 1:
            raise ValueError("live_train_fraction must lie in (0, 1)")
        if set(self.live_train_ids) & set(self.live_test_ids):
            raise ValueError("live train and test ids overlap")

    @property
    def name(self) -> str:
        return self.heldout_attack_type


def _id_hash(sample_id: str) -> str:
    return hashlib.sha256(sample_id.encode()).hexdigest()


def split_live_ids(ids: Iterable[str], fraction: float) -> tuple[tuple[str, ...], tuple[str, ...]]:
    """Deterministic split: ids ordered by hash, the first round(fraction*n) train."""
    ordered = sorted(set(ids), key=lambda i: (_id_hash(i), i))
    n_train = int(round(fraction * len(ordered)))
    return tuple(sorted(ordered[:n_train])), tuple(sorted(ordered[n_train:]))


def make_protocols(dataset: Dataset, live_train_fraction: float = 0.8) -> list[ProtocolSpec]:
    types = dataset.attack_types()
    if len(types) < 2:
        raise ValueError(f"leave-one-out needs >= 2 attack types, found {types}")
    train_ids, test_ids = split_live_ids(dataset.live().ids, live_train_fraction)
    return [
        ProtocolSpec(
            tuple(t for t in types if t != held),
            held,
            live_train_fraction,
            train_ids,
            test_ids,
        )
        for held in types
    ]


def protocol_splits(dataset: Dataset, protocol: ProtocolSpec) -> tuple[Dataset, Dataset]:
    """(train, test) datasets of one protocol; the held-out type is only in test."""
    train_live = set(protocol.live_train_ids)
    test_live = set(protocol.live_test_ids)
    train_types = set(protocol.train_attack_types)
    train = dataset.filter(
        lambda s: s.id in train_live if s.is_live else s.attack_type in train_types
    )
    test = dataset.filter(
        lambda s: s.id in test_live if s.is_live else s.attack_type == protocol.heldout_attack_type
    )
    return train, test


def resample_balanced(train: Dataset, seed: int) -> Dataset:
    """Oversample the minority class with replacement up to a 1:1 ratio."""
    labels = train.labels
    live = np.flatnonzero(labels == LIVE)
    spoof = np.flatnonzero(labels == SPOOF)
    if len(live) == 0 or len(spoof) == 0:
        raise ValueError("both classes must be present to balance")
    if len(live) == len(spoof):
        return train
    minority, deficit = (live, len(spoof) - len(live)) if len(live) < len(spoof) else (spoof, len(live) - len(spoof))
    rng = np.random.default_rng([seed, 0xBA1])
    extra = rng.choice(minority, size=deficit, replace=True)
    return Dataset(train.samples + [train.samples[i] for i in extra], train.skipped)
