"""Losses, base-domain training and sequential few-shot transfer."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import ImageSample, label_counts, stack
from .errors import ConfigError, ContractError, NumericError
from .model import Label, ModelParams, classify, forward_train
from .optim import Optimizer, OptimizerConfig
from .tensor import Tensor, absolute, add_const, l1_sum, precision

log = logging.getLogger(__name__)

DEFAULT_LAMBDA = 0.1
ACTIVATION_SOURCES = ("raw", "facilitated")
LR_SCHEDULES = ("constant", "cosine")


@dataclass(frozen=True)
class LossWeights:
    lam: float = DEFAULT_LAMBDA

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")


def _labels(labels) -> np.ndarray:
    arr = np.atleast_1d(np.asarray(labels))
    if arr.dtype.kind not in "iu" or not np.isin(arr, (1, 2)).all():
        raise ContractError(f"labels must be 1 (real) or 2 (fake), got {np.unique(arr).tolist()}")
    return arr.astype(np.int64)


def activation_loss(a1: Tensor, a2: Tensor, labels) -> Tensor:
    """``sum_m |A_m2 - l_m + 1| + sum_m |A_m1 + l_m - 2|``.

    Zero exactly when every real sample has (A1, A2) = (1, 0) and every fake
    sample (0, 1).
    """
    lab = _labels(labels)
    if a1.shape != lab.shape or a2.shape != lab.shape:
        raise ContractError(f"activations {a1.shape}/{a2.shape} do not match {lab.size} labels")
    lf = lab.astype(a1.dtype)
    return absolute(add_const(a2, 1.0 - lf)).sum() + absolute(add_const(a1, lf - 2.0)).sum()


def reconstruction_loss(x: Tensor, recon: Tensor) -> Tensor:
    """Sum of per-sample L1 distances divided by the batch's element count."""
    if x.shape != recon.shape:
        raise ContractError(f"reconstruction shapes differ: {x.shape} vs {recon.shape}")
    return l1_sum(x - recon) / x.size


def total_loss(l_recon, l_activ, weights: LossWeights | float = DEFAULT_LAMBDA):
    lam = weights.lam if isinstance(weights, LossWeights) else weights
    if lam < 0:
        raise ConfigError(f"lambda must be >= 0, got {lam}")
    return l_recon * lam + l_activ


@dataclass
class TrainConfig:
    lr: float = 1e-4
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    opt_eps: float = 1e-8
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0
    precision: str = "single"
    lam: float = DEFAULT_LAMBDA
    lr_mult: float = 1.0
    patience: int | None = None
    # latent the activation loss is measured on: "raw" or "facilitated"
    activation_source: str = "raw"
    # "constant" or "cosine" (decays the step size to 0 over all batches)
    lr_schedule: str = "constant"
    # mirror a random half of each batch left-right
    flip: bool = False

    def __post_init__(self):
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2 for batch norm, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.lam < 0:
            raise ConfigError(f"lam must be >= 0, got {self.lam}")
        if self.precision not in ("single", "double"):
            raise ConfigError(f"precision must be 'single' or 'double', got {self.precision!r}")
        if self.activation_source not in ACTIVATION_SOURCES:
            raise ConfigError(f"activation_source must be one of {ACTIVATION_SOURCES}, got {self.activation_source!r}")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ConfigError(f"lr_schedule must be one of {LR_SCHEDULES}, got {self.lr_schedule!r}")
        self.optimizer_config()  # validates kind and lr

    def optimizer_config(self) -> OptimizerConfig:
        return OptimizerConfig(self.optimizer, self.lr, self.beta1, self.beta2, self.opt_eps)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class EpochRecord:
    epoch: int
    l_total: float
    l_activ: float
    l_recon: float
    train_acc: float


HISTORY_FIELDS = ("epoch", "l_total", "l_activ", "l_recon", "train_acc")


def _fit(
    mp: ModelParams,
    samples: Sequence[ImageSample],
    config: TrainConfig,
    optimizer: Optimizer | None = None,
    on_epoch: Callable[[EpochRecord, ModelParams], None] | None = None,
) -> tuple[ModelParams, list[EpochRecord], Optimizer]:
    """Train a copy of ``mp``; returns (model, history, optimizer).

    Epoch losses are per-sample means: the activation loss summed over the
    epoch divided by the sample count, the reconstruction loss weighted by
    batch size. ``l_total = lam * l_recon + l_activ``.
    """
    dtype = np.float64 if config.precision == "double" else np.float32
    model = mp.astype(dtype) if mp.params.values()[0].dtype != dtype else mp.copy()
    x_all, y_all = stack(list(samples), dtype)
    n = len(y_all)
    if n < 2:
        raise ConfigError("need at least two training samples")
    rng = np.random.default_rng(config.seed)
    opt = optimizer or Optimizer(config.optimizer_config())
    history: list[EpochRecord] = []
    best, stale = np.inf, 0
    bs = config.batch_size
    starts = list(range(0, n, bs))
    if n - starts[-1] < 2 and len(starts) > 1:
        starts.pop()  # fold a trailing singleton into the previous batch
    total_steps = config.epochs * len(starts)
    with precision(config.precision):
        for epoch in range(1, config.epochs + 1):
            order = rng.permutation(n)
            activ_sum = recon_sum = 0.0
            correct = 0
            for k, s in enumerate(starts):
                e = starts[k + 1] if k + 1 < len(starts) else n
                idx = order[s:e]
                xs = x_all[idx]
                if config.flip:
                    mirror = rng.random(len(idx)) < 0.5
                    xs = np.where(mirror[:, None, None, None], xs[..., ::-1], xs)
                xb = Tensor(xs)
                yb = y_all[idx]
                model.params.zero_grad()
                fw = forward_train(model, xb, yb)
                if config.activation_source == "raw":
                    l_act = activation_loss(fw.a1_raw, fw.a2_raw, yb)
                else:
                    l_act = activation_loss(fw.a1, fw.a2, yb)
                l_rec = reconstruction_loss(xb, fw.recon)
                loss = total_loss(l_rec, l_act, config.lam)
                if not np.isfinite(loss.data).all():
                    raise NumericError(f"non-finite loss at epoch {epoch}, batch {k}")
                loss.backward()
                for name, p in model.params.items():
                    if not np.isfinite(p.grad).all():
                        raise NumericError(f"non-finite gradient for {name!r} at epoch {epoch}, batch {k}")
                scale = config.lr_mult
                if config.lr_schedule == "cosine":
                    step = (epoch - 1) * len(starts) + k
                    scale *= 0.5 * (1 + np.cos(np.pi * step / total_steps))
                opt.step(model.params, scale)
                activ_sum += float(l_act.data)
                recon_sum += float(l_rec.data) * len(idx)
                correct += int((classify(fw.latent_raw) == yb).sum())
            l_activ = activ_sum / n
            l_recon = recon_sum / n
            rec = EpochRecord(epoch, config.lam * l_recon + l_activ, l_activ, l_recon, correct / n)
            history.append(rec)
            log.info(
                "epoch %d: total %.4f activ %.4f recon %.4f acc %.4f",
                epoch, rec.l_total, rec.l_activ, rec.l_recon, rec.train_acc,
            )
            if on_epoch is not None:
                on_epoch(rec, model)
            if config.patience is not None:
                if rec.l_total < best:
                    best, stale = rec.l_total, 0
                else:
                    stale += 1
                    if stale >= config.patience:
                        break
    return model, history, opt


def train_base(
    mp: ModelParams,
    samples: Sequence[ImageSample],
    config: TrainConfig,
    on_epoch: Callable[[EpochRecord, ModelParams], None] | None = None,
) -> tuple[ModelParams, list[EpochRecord]]:
    """Train on one domain's base split. The input model is not modified."""
    if config.epochs < 1:
        raise ConfigError("train_base needs epochs >= 1")
    counts = label_counts(list(samples))
    if min(counts.values()) == 0:
        raise ConfigError(f"training set must contain both labels, got {({k.tag: v for k, v in counts.items()})}")
    model, history, _ = _fit(mp, samples, config, on_epoch=on_epoch)
    return model, history


def transfer_few_shot(
    mp: ModelParams,
    target_set: Sequence[ImageSample],
    config: TrainConfig,
    shots: int | None = 50,
) -> ModelParams:
    """Fine-tune every layer of a copy of ``mp`` on a small target-domain set.

    ``shots`` is the required count per class; pass ``None`` to accept any
    balance. Zero epochs returns an identical copy.
    """
    counts = label_counts(list(target_set))
    if shots is not None and (counts[Label.REAL] != shots or counts[Label.FAKE] != shots):
        raise ConfigError(
            f"few-shot set has {counts[Label.REAL]} real / {counts[Label.FAKE]} fake samples, expected {shots}:{shots}"
        )
    if config.epochs == 0:
        return mp.copy()
    model, _, _ = _fit(mp, target_set, config)
    return model


@dataclass
class TransferPlan:
    """Ordered target domains after a source domain, e.g. source A, targets [B, C]."""

    source: str
    targets: list[str]
    shots: int = 50
    config: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=100, batch_size=10))
    stage_configs: list[TrainConfig] | None = None
    # stage i (0-based) trains with lr_mult scaled by lr_decay ** i
    lr_decay: float = 1.0

    def __post_init__(self):
        if not self.targets:
            raise ConfigError("transfer plan needs at least one target domain")
        seq = [self.source] + list(self.targets)
        if len(set(seq)) != len(seq):
            raise ConfigError(f"transfer sequence must visit distinct domains, got {' -> '.join(seq)}")
        if self.stage_configs is not None and len(self.stage_configs) != len(self.targets):
            raise ConfigError("stage_configs must have one entry per target")
        if self.shots < 1:
            raise ConfigError(f"shots must be >= 1, got {self.shots}")
        if self.lr_decay <= 0:
            raise ConfigError(f"lr_decay must be > 0, got {self.lr_decay}")

    def stage_config(self, i: int) -> TrainConfig:
        if self.stage_configs is not None:
            return self.stage_configs[i]
        if self.lr_decay == 1.0:
            return self.config
        return dataclasses.replace(self.config, lr_mult=self.config.lr_mult * self.lr_decay**i)

    def stage_name(self, i: int) -> str:
        return "→".join([self.source] + list(self.targets[: i + 1]))


@dataclass
class StageSnapshot:
    name: str
    domain: str
    accuracies: dict[str, float]
    model: ModelParams | None = None


def sequence_transfer(
    mp: ModelParams,
    plan: TransferPlan,
    fewshot_sets: dict[str, Sequence[ImageSample]],
    test_sets: dict[str, Sequence[ImageSample]] | None = None,
    keep_models: bool = False,
) -> tuple[ModelParams, list[StageSnapshot]]:
    """Apply :func:`transfer_few_shot` once per target, in order.

    After each stage the model is scored on every set in ``test_sets``.
    """
    from .evaluate import evaluate

    missing = [d for d in plan.targets if d not in fewshot_sets]
    if missing:
        raise ConfigError(f"no few-shot set for domain(s) {missing}")
    model = mp
    snapshots = []
    for i, domain in enumerate(plan.targets):
        model = transfer_few_shot(model, fewshot_sets[domain], plan.stage_config(i), plan.shots)
        accs = {d: evaluate(model, s).accuracy for d, s in (test_sets or {}).items()}
        snapshots.append(StageSnapshot(plan.stage_name(i), domain, accs, model if keep_models else None))
        log.info("stage %s: %s", plan.stage_name(i), accs)
    return model, snapshots
