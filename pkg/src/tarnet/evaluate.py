"""Accuracy evaluation, accuracy tables, activation heatmaps and overlays."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import ImageSample, adjust, stack
from .errors import ConfigError, ShapeError
from .model import ModelParams, activations_numpy, classify_activations, decode, decoder_layer_names, encode
from .tensor import Tensor, no_grad

DASH = "—"


@dataclass
class SampleRecord:
    id: int
    a1: float
    a2: float
    prediction: int
    label: int


@dataclass
class EvalResult:
    accuracy: float
    correct: int
    total: int
    records: list[SampleRecord]


def predict_latents(mp: ModelParams, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Raw latents for an (N, 3, S, S) array, inference mode."""
    dtype = mp.params.values()[0].dtype
    out = []
    with no_grad():
        for s in range(0, len(x), batch_size):
            out.append(encode(mp, Tensor(x[s : s + batch_size], dtype=dtype)).H.data)
    return np.concatenate(out)


def evaluate(
    mp: ModelParams,
    samples: Sequence[ImageSample],
    brightness: float = 0.0,
    contrast: float = 1.0,
    batch_size: int = 64,
) -> EvalResult:
    """Classify every sample from its raw latent and count correct predictions.

    Optional brightness/contrast adjustments are applied to each image first.
    """
    samples = list(samples)
    if not samples:
        raise ConfigError("cannot evaluate on an empty test set")
    x, y = stack(samples)
    if brightness != 0.0 or contrast != 1.0:
        x = np.stack([adjust(img, brightness, contrast) for img in x])
    H = predict_latents(mp, x, batch_size)
    a1, a2 = activations_numpy(H)
    pred = classify_activations(a1, a2)
    records = [
        SampleRecord(s.id, float(u), float(v), int(p), int(l))
        for s, u, v, p, l in zip(samples, a1, a2, pred, y)
    ]
    correct = int((pred == y).sum())
    return EvalResult(correct / len(y), correct, len(y), records)


def zero_activation_fraction(mp: ModelParams, x: np.ndarray, batch_size: int = 64) -> float:
    """Fraction of inputs whose raw latent gives A1 = A2 = 0 exactly."""
    a1, a2 = activations_numpy(predict_latents(mp, x, batch_size))
    return float(((a1 == 0) & (a2 == 0)).mean())


# ---------------------------------------------------------------------------
# tables


@dataclass
class AccuracyMatrix:
    """Rows are model states, columns test domains, cells accuracies in [0, 1].

    ``deltas[i]`` is the per-domain change against the previous row (or the
    supplied baseline for row 0); ``None`` renders as a dash.
    """

    rows: list[str]
    columns: list[str]
    cells: np.ndarray
    deltas: list[np.ndarray | None] = field(default_factory=list)
    base_column: str | None = None

    def __post_init__(self):
        self.cells = np.asarray(self.cells, dtype=np.float64)
        if self.cells.shape != (len(self.rows), len(self.columns)):
            raise ShapeError(f"cells {self.cells.shape} do not match {len(self.rows)} rows x {len(self.columns)} columns")
        if ((self.cells < 0) | (self.cells > 1)).any():
            raise ConfigError("accuracy cells must lie in [0, 1]")
        if not self.deltas:
            self.deltas = [None] * len(self.rows)

    @property
    def averages(self) -> np.ndarray:
        return self.cells.mean(axis=1)

    def cell(self, row: str, column: str) -> float:
        return float(self.cells[self.rows.index(row), self.columns.index(column)])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["model"] + self.columns + ["average"] + [f"delta_{c}" for c in self.columns])
        for name, row, avg, delta in zip(self.rows, self.cells, self.averages, self.deltas):
            d = [DASH] * len(self.columns) if delta is None else [f"{v:.6f}" for v in delta]
            w.writerow([name] + [f"{v:.6f}" for v in row] + [f"{avg:.6f}"] + d)
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> AccuracyMatrix:
        reader = list(csv.reader(io.StringIO(text)))
        header = reader[0]
        k = header.index("average")
        columns = header[1:k]
        rows, cells, deltas = [], [], []
        for r in reader[1:]:
            rows.append(r[0])
            cells.append([float(v) for v in r[1:k]])
            d = r[k + 1 :]
            deltas.append(None if all(v == DASH for v in d) else np.array([float(v) for v in d]))
        return cls(rows, columns, np.array(cells), deltas)

    def to_markdown(self) -> str:
        head = ["model"] + [f"{c}*" if c == self.base_column else c for c in self.columns] + ["avg"]
        head += [f"Δ {c}" for c in self.columns]
        lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
        for name, row, avg, delta in zip(self.rows, self.cells, self.averages, self.deltas):
            vals = [f"{100 * v:.1f}" for v in row] + [f"{100 * avg:.1f}"]
            vals += [DASH] * len(row) if delta is None else [f"{100 * v:+.1f}" for v in delta]
            lines.append("| " + " | ".join([name] + vals) + " |")
        if self.base_column:
            lines.append("")
            lines.append(f"\\* base (training) domain: {self.base_column}")
        return "\n".join(lines) + "\n"


def zero_shot_matrix(
    mp: ModelParams,
    test_sets: dict[str, Sequence[ImageSample]],
    base_domain: str,
    name: str | None = None,
    brightness: float = 0.0,
    contrast: float = 1.0,
) -> AccuracyMatrix:
    """One row: accuracy of a single-domain model on every domain's test set."""
    if base_domain not in test_sets:
        raise ConfigError(f"base domain {base_domain!r} has no test set")
    columns = list(test_sets)
    accs = [evaluate(mp, test_sets[d], brightness, contrast).accuracy for d in columns]
    return AccuracyMatrix([name or base_domain], columns, np.array([accs]), base_column=base_domain)


def transfer_table(snapshots, baseline: dict[str, float] | None = None) -> AccuracyMatrix:
    """One row per transfer stage with deltas against the previous stage.

    Row 0's delta is against ``baseline`` when given, otherwise a dash.
    """
    if not snapshots:
        raise ConfigError("transfer_table needs at least one snapshot")
    columns = list(snapshots[0].accuracies)
    cells = np.array([[s.accuracies[c] for c in columns] for s in snapshots], dtype=np.float64)
    deltas: list[np.ndarray | None] = []
    for i in range(len(snapshots)):
        if i > 0:
            deltas.append(cells[i] - cells[i - 1])
        elif baseline is not None:
            deltas.append(cells[0] - np.array([baseline[c] for c in columns]))
        else:
            deltas.append(None)
    return AccuracyMatrix([s.name for s in snapshots], columns, cells, deltas)


def write_report(matrix: AccuracyMatrix, out_dir: str | Path, name: str = "report") -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"{name}.csv"
    md_path = out_dir / f"{name}.md"
    csv_path.write_text(matrix.to_csv())
    md_path.write_text(matrix.to_markdown())
    return csv_path, md_path


# ---------------------------------------------------------------------------
# activation maps

CAM_EPS = 1e-12
# blue -> yellow -> red at heat 0, 0.5, 1 (RGB in [0, 1])
COLORMAP_ANCHORS = np.array([[0.0, 0.0, 1.0], [1.0, 1.0, 0.0], [1.0, 0.0, 0.0]])


@dataclass
class Heatmap:
    values: np.ndarray  # (S, S) in [0, 1]
    layer: str
    raw: np.ndarray  # (M', M') before normalization and upsampling


def normalize_map(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return (v - v.min()) / (v.max() - v.min() + CAM_EPS)


def cam_from_activations(act: np.ndarray, size: int, layer: str = "") -> Heatmap:
    """Channel mean of |activation|, min-max normalized, nearest-upsampled to ``size``."""
    raw = np.abs(np.asarray(act, dtype=np.float64)).mean(axis=0)
    norm = normalize_map(raw)
    factor = size // raw.shape[0]
    values = norm.repeat(factor, axis=0).repeat(factor, axis=1)
    return Heatmap(values, layer, raw)


def cam_map(mp: ModelParams, img: np.ndarray, layer: str | None = None) -> Heatmap:
    """Heatmap of one decoder stage's activations for a single (3, S, S) image.

    The raw (un-masked) latent is decoded in inference mode. The default
    layer is the first decoder stage.
    """
    names = decoder_layer_names(mp.config)
    layer = layer or names[0]
    if layer not in names:
        raise ConfigError(f"unknown layer {layer!r}; valid layers: {', '.join(names)}")
    S = mp.config.input_size
    img = np.asarray(img)
    if img.shape != (3, S, S):
        raise ShapeError(f"cam_map expects an image of shape (3, {S}, {S}), got {img.shape}")
    dtype = mp.params.values()[0].dtype
    trace: dict = {}
    with no_grad():
        latent = encode(mp, Tensor(img[None], dtype=dtype))
        decode(mp, latent, trace=trace)
    return cam_from_activations(trace[layer].data[0], S, layer)


def colormap(heat: np.ndarray) -> np.ndarray:
    """(S, S) heat in [0, 1] to a (3, S, S) RGB image in [0, 1]."""
    h = np.clip(np.asarray(heat, dtype=np.float64), 0, 1) * 2
    lo = np.minimum(np.floor(h), 1).astype(int)
    t = (h - lo)[..., None]
    rgb = COLORMAP_ANCHORS[lo] * (1 - t) + COLORMAP_ANCHORS[lo + 1] * t
    return rgb.transpose(2, 0, 1)


def overlay(img: np.ndarray, heat: Heatmap | np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """``(1 - alpha) * img + alpha * colormap(heat)``, all in [-1, 1] space."""
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
    values = heat.values if isinstance(heat, Heatmap) else np.asarray(heat)
    img = np.asarray(img, dtype=np.float64)
    if img.shape[1:] != values.shape:
        raise ShapeError(f"image {img.shape} and heatmap {values.shape} differ in spatial size")
    if alpha == 0.0:
        return img.copy()
    colored = colormap(values) * 2 - 1
    if alpha == 1.0:
        return colored
    return (1 - alpha) * img + alpha * colored
