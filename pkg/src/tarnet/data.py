"""Synthetic face-like images, three manipulation kinds, and dataset splits.

Every "real" image is a smooth two-colour background with an elliptical face
carrying a regular sinusoidal skin texture, two eyes and a mouth. The three
fake kinds manipulate a disk around the image centre:

* ``blendswap``: the disk from another real image, pasted with a feathered edge
* ``sharpswap``: the same paste with a hard edge
* ``localwarp``: a swirl of the host's own disk (area preserving, nearest
  neighbour), so pixel values move but are not recoloured

All randomness for sample ``id`` is drawn from ``default_rng([seed, id])``,
which makes each sample a pure function of ``(seed, id)``.
"""

from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, FormatError
from .model import Label
from .ppm import load_ppm, save_ppm

FAKE_KINDS = ("blendswap", "sharpswap", "localwarp")
DOMAINS = ("real",) + FAKE_KINDS
SPLITS = ("base", "fewshot", "test")

REGION_RADIUS = 0.21  # manipulated disk radius, as a fraction of the image side
FEATHER = 0.07


@dataclass
class ImageSample:
    pixels: np.ndarray  # (3, S, S) in [-1, 1]
    label: Label
    domain: str
    id: int

    def __post_init__(self):
        if self.domain not in DOMAINS:
            raise ContractError(f"unknown domain {self.domain!r}; expected one of {DOMAINS}")
        if (self.domain == "real") != (self.label == Label.REAL):
            raise ContractError(f"domain {self.domain!r} is inconsistent with label {self.label.tag}")


def _grid(S: int) -> tuple[np.ndarray, np.ndarray]:
    c = (np.arange(S) + 0.5) / S
    return np.meshgrid(c, c, indexing="ij")  # (yy, xx)


def _real_pixels(rng: np.random.Generator, S: int) -> np.ndarray:
    yy, xx = _grid(S)
    c0 = rng.uniform(-0.9, 0.1, 3)
    c1 = rng.uniform(-0.9, 0.1, 3)
    ang = rng.uniform(0, 2 * np.pi)
    t = np.clip((xx - 0.5) * np.cos(ang) + (yy - 0.5) * np.sin(ang) + 0.5, 0, 1)
    background = c0[:, None, None] * (1 - t) + c1[:, None, None] * t

    cy, cx = 0.5 + rng.uniform(-0.03, 0.03, 2)
    ry, rx = rng.uniform(0.36, 0.42), rng.uniform(0.29, 0.34)
    d = np.sqrt(((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2)
    edge = 1.5 / S / min(rx, ry)
    mask = np.clip((1 - d) / edge + 0.5, 0, 1)

    skin = rng.uniform([0.15, -0.15, -0.35], [0.65, 0.35, 0.15])
    shading = 0.18 * (1 - np.clip(d, 0, 1) ** 2)
    period = 4.0 / 48.0
    theta = rng.uniform(0, np.pi)
    phase = rng.uniform(0, 2 * np.pi)
    texture = 0.12 * np.sin(2 * np.pi / period * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
    face = skin[:, None, None] + (shading + texture)[None]

    def blob(y0, x0, sy, sx, depth):
        return depth * np.exp(-(((yy - y0) / sy) ** 2 + ((xx - x0) / sx) ** 2) / 2)

    eye_dx = rng.uniform(0.10, 0.13)
    eye_y = cy - rng.uniform(0.06, 0.10)
    features = (
        blob(eye_y, cx - eye_dx, 0.025, 0.035, -0.7)
        + blob(eye_y, cx + eye_dx, 0.025, 0.035, -0.7)
        + blob(cy + rng.uniform(0.14, 0.18), cx, 0.02, 0.07, -0.5)
    )
    face = face + features[None]
    img = background * (1 - mask) + face * mask
    img = img + rng.normal(0, 0.02, img.shape)
    return np.clip(img, -1, 1)


def gen_real(seed: int, n: int, S: int, start_id: int = 0) -> list[ImageSample]:
    """``n`` real images of size ``S``; sample ``i`` gets id ``start_id + i``."""
    out = []
    for i in range(n):
        sid = start_id + i
        rng = np.random.default_rng([seed, sid])
        out.append(ImageSample(_real_pixels(rng, S).astype(np.float32), Label.REAL, "real", sid))
    return out


def region_radius_px(S: int) -> float:
    return REGION_RADIUS * S


def _radius(S: int) -> np.ndarray:
    yy, xx = _grid(S)
    return np.sqrt((yy - 0.5) ** 2 + (xx - 0.5) ** 2)


def blend_alpha(S: int) -> np.ndarray:
    r = _radius(S)
    t = np.clip((REGION_RADIUS + FEATHER - r) / (2 * FEATHER), 0, 1)
    return t * t * (3 - 2 * t)


def hard_alpha(S: int) -> np.ndarray:
    return (_radius(S) < REGION_RADIUS).astype(np.float64)


def _blendswap(host: np.ndarray, donor: np.ndarray, rng) -> np.ndarray:
    a = blend_alpha(host.shape[1])
    return host * (1 - a) + donor * a


def _sharpswap(host: np.ndarray, donor: np.ndarray, rng) -> np.ndarray:
    m = hard_alpha(host.shape[1]) > 0
    return np.where(m[None], donor, host)


def swirl_source(S: int, strength: float) -> tuple[np.ndarray, np.ndarray]:
    """Integer source coordinates of a swirl about the image centre."""
    yy, xx = _grid(S)
    dy, dx = yy - 0.5, xx - 0.5
    r = np.sqrt(dy**2 + dx**2)
    angle = np.where(r < REGION_RADIUS, strength * (1 - r / REGION_RADIUS) ** 2, 0.0)
    ca, sa = np.cos(angle), np.sin(angle)
    sy = 0.5 + dy * ca - dx * sa
    sx = 0.5 + dy * sa + dx * ca
    iy = np.clip(np.floor(sy * S), 0, S - 1).astype(int)
    ix = np.clip(np.floor(sx * S), 0, S - 1).astype(int)
    return iy, ix


def _localwarp(host: np.ndarray, donor: np.ndarray, rng) -> np.ndarray:
    strength = rng.uniform(1.2, 2.2) * rng.choice([-1.0, 1.0])
    iy, ix = swirl_source(host.shape[1], strength)
    return host[:, iy, ix]


_MANIPULATIONS = {"blendswap": _blendswap, "sharpswap": _sharpswap, "localwarp": _localwarp}


def gen_fake(
    kind: str,
    real_pool: list[ImageSample],
    seed: int,
    n: int | None = None,
    start_id: int = 0,
) -> list[ImageSample]:
    """Manipulate hosts from ``real_pool`` (cycled) into ``n`` fakes of ``kind``.

    Swaps take their donor from a different, randomly chosen pool member.
    """
    if kind not in _MANIPULATIONS:
        raise ConfigError(f"unknown fake kind {kind!r}; expected one of {FAKE_KINDS}")
    if not real_pool:
        raise ConfigError("gen_fake needs a non-empty real pool")
    n = len(real_pool) if n is None else n
    fn = _MANIPULATIONS[kind]
    out = []
    for i in range(n):
        sid = start_id + i
        rng = np.random.default_rng([seed, sid, FAKE_KINDS.index(kind)])
        host = real_pool[i % len(real_pool)].pixels.astype(np.float64)
        if len(real_pool) > 1:
            j = int(rng.integers(len(real_pool) - 1))
            j = j + 1 if j >= i % len(real_pool) else j
        else:
            j = 0
        donor = real_pool[j].pixels.astype(np.float64)
        pixels = np.clip(fn(host, donor, rng), -1, 1).astype(np.float32)
        out.append(ImageSample(pixels, Label.FAKE, kind, sid))
    return out


# ---------------------------------------------------------------------------
# splits


@dataclass(frozen=True)
class SplitSpec:
    """Per-class sample counts for each split, used for every fake domain."""

    base: int = 1000
    fewshot: int = 50
    test: int = 200
    domains: tuple[str, ...] = FAKE_KINDS

    def __post_init__(self):
        for name in ("base", "fewshot", "test"):
            if getattr(self, name) < 0:
                raise ConfigError(f"SplitSpec.{name} must be >= 0")
        bad = [d for d in self.domains if d not in FAKE_KINDS]
        if bad:
            raise ConfigError(f"unknown domains {bad}; expected a subset of {FAKE_KINDS}")

    @property
    def per_domain(self) -> int:
        return self.base + self.fewshot + self.test

    def count(self, split: str) -> int:
        return getattr(self, split)


@dataclass
class Dataset:
    """Samples keyed by (domain, split); each split holds real and fake samples."""

    parts: dict[tuple[str, str], list[ImageSample]] = field(default_factory=dict)
    seed: int = 0

    @property
    def domains(self) -> list[str]:
        return sorted({d for d, _ in self.parts}, key=lambda d: FAKE_KINDS.index(d) if d in FAKE_KINDS else 99)

    def get(self, domain: str, split: str) -> list[ImageSample]:
        if domain not in self.domains:
            raise ConfigError(f"unknown domain {domain!r}; known domains: {', '.join(self.domains)}")
        if split not in SPLITS:
            raise ConfigError(f"unknown split {split!r}; expected one of {SPLITS}")
        return self.parts.get((domain, split), [])

    def records(self) -> list[tuple[int, str, str, str, int]]:
        rows = []
        for (domain, split), samples in self.parts.items():
            for s in samples:
                rows.append((s.id, domain, split, s.label.tag, self.seed))
        return sorted(rows)


def make_splits(
    real: list[ImageSample],
    fakes: dict[str, list[ImageSample]],
    spec: SplitSpec,
    seed: int,
) -> Dataset:
    """Assign samples to disjoint base / fewshot / test splits per domain.

    Real images are shared across domains but each real image lands in
    exactly one (domain, split).
    """
    need_real = spec.per_domain * len(spec.domains)
    if len(real) < need_real:
        raise ConfigError(f"need {need_real} real samples for {len(spec.domains)} domains, got {len(real)}")
    for d in spec.domains:
        have = len(fakes.get(d, []))
        if have < spec.per_domain:
            raise ConfigError(f"need {spec.per_domain} fake samples for domain {d!r}, got {have}")
    rng = np.random.default_rng(seed)
    real_order = rng.permutation(len(real))
    parts: dict[tuple[str, str], list[ImageSample]] = {}
    cursor = 0
    for d in spec.domains:
        fake_order = rng.permutation(len(fakes[d]))
        fcursor = 0
        for split in SPLITS:
            k = spec.count(split)
            reals = [real[i] for i in real_order[cursor : cursor + k]]
            fk = [fakes[d][i] for i in fake_order[fcursor : fcursor + k]]
            cursor += k
            fcursor += k
            parts[(d, split)] = sorted(reals + fk, key=lambda s: s.id)
    return Dataset(parts, seed)


def synthesize(spec: SplitSpec, S: int, seed: int) -> Dataset:
    """Generate real and fake pools sized for ``spec`` and split them."""
    n_real = spec.per_domain * len(spec.domains)
    real = gen_real(seed, n_real, S)
    fakes = {}
    for k, kind in enumerate(spec.domains):
        hosts = gen_real(seed + 7919 * (k + 1), spec.per_domain, S, start_id=(k + 1) * 1_000_000)
        fakes[kind] = gen_fake(kind, hosts, seed, start_id=(k + 1) * 1_000_000 + 500_000)
    return make_splits(real, fakes, spec, seed)


def stack(samples: list[ImageSample], dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
    """(N, 3, S, S) pixel array and (N,) integer labels."""
    if not samples:
        raise ConfigError("empty sample list")
    x = np.stack([s.pixels for s in samples]).astype(dtype, copy=False)
    y = np.asarray([int(s.label) for s in samples], dtype=np.int64)
    return x, y


def label_counts(samples: list[ImageSample]) -> dict[Label, int]:
    c = Counter(s.label for s in samples)
    return {Label.REAL: c.get(Label.REAL, 0), Label.FAKE: c.get(Label.FAKE, 0)}


# ---------------------------------------------------------------------------
# on-disk layout: <root>/<domain>/<split>/<label>/<id>.ppm + manifest.csv

MANIFEST_FIELDS = ("id", "domain", "split", "label", "seed")


def save_dataset(ds: Dataset, root: str | Path) -> Path:
    root = Path(root)
    for (domain, split), samples in ds.parts.items():
        for s in samples:
            d = root / domain / split / s.label.tag
            d.mkdir(parents=True, exist_ok=True)
            save_ppm(s.pixels, d / f"{s.id}.ppm")
    manifest = root / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_FIELDS)
        w.writerows(ds.records())
    return manifest


def load_dataset(root: str | Path, domains: list[str] | None = None) -> Dataset:
    root = Path(root)
    manifest = root / "manifest.csv"
    if not manifest.exists():
        raise FormatError(f"no manifest.csv under {root}")
    parts: dict[tuple[str, str], list[ImageSample]] = {}
    seed = 0
    with open(manifest, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != MANIFEST_FIELDS:
            raise FormatError(f"manifest header {reader.fieldnames} != {list(MANIFEST_FIELDS)}")
        for row in reader:
            domain, split, label = row["domain"], row["split"], Label.parse(row["label"])
            if domains is not None and domain not in domains:
                continue
            sid = int(row["id"])
            seed = int(row["seed"])
            px = load_ppm(root / domain / split / label.tag / f"{sid}.ppm")
            tag = "real" if label == Label.REAL else domain
            parts.setdefault((domain, split), []).append(ImageSample(px, label, tag, sid))
    return Dataset(parts, seed)


# ---------------------------------------------------------------------------
# photometric preprocessing, computed in [0, 1] working space


def adjust_brightness(img: np.ndarray, delta: float) -> np.ndarray:
    """``p' = clamp(p + delta, 0, 1)`` with ``p = (v + 1) / 2``."""
    img = np.asarray(img)
    if delta == 0:
        return img.copy()
    p = (img + 1.0) / 2.0
    return (2.0 * np.clip(p + delta, 0.0, 1.0) - 1.0).astype(img.dtype)


def adjust_contrast(img: np.ndarray, factor: float) -> np.ndarray:
    """``p' = clamp((p - 0.5) * factor + 0.5, 0, 1)``; mid-grey is a fixed point."""
    if factor <= 0:
        raise ContractError(f"contrast factor must be positive, got {factor}")
    img = np.asarray(img)
    if factor == 1:
        return img.copy()
    p = (img + 1.0) / 2.0
    return (2.0 * np.clip((p - 0.5) * factor + 0.5, 0.0, 1.0) - 1.0).astype(img.dtype)


def adjust(img: np.ndarray, brightness: float = 0.0, contrast: float = 1.0) -> np.ndarray:
    """Brightness first, then contrast."""
    return adjust_contrast(adjust_brightness(img, brightness), contrast)


def histogram_l1(a: np.ndarray, b: np.ndarray, bins: int = 32) -> float:
    """L1 distance between normalized per-channel value histograms (range 0..2)."""
    total = 0.0
    for ca, cb in zip(a, b):
        ha, _ = np.histogram(ca, bins=bins, range=(-1, 1))
        hb, _ = np.histogram(cb, bins=bins, range=(-1, 1))
        total += np.abs(ha / ha.sum() - hb / hb.sum()).sum()
    return total / len(a)


def seam_gradient(img: np.ndarray, radius_px: float, band: float = 1.0) -> float:
    """Mean gradient magnitude on the ring of pixels at ``radius_px`` from the centre."""
    S = img.shape[-1]
    gy, gx = np.gradient(np.asarray(img, dtype=np.float64), axis=(1, 2))
    mag = np.sqrt(gy**2 + gx**2).mean(axis=0)
    r = _radius(S) * S
    ring = np.abs(r - radius_px) <= band
    return float(mag[ring].mean())
