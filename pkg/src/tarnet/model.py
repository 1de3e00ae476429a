"""Residual autoencoder with a class-partitioned latent space.

The encoder maps a (B, 3, S, S) image batch in [-1, 1] to a latent block H of
shape (B, 2N, M, M). Channels ``[0, N)`` form the real half H1 and channels
``[N, 2N)`` the fake half H2. During training the half that does not belong
to the sample's label is zeroed before decoding; at test time the raw latent
is classified by comparing the mean absolute activation of the two halves.

Layout (defaults in parentheses):

* encoder: one residual stage per entry of ``encoder_channels`` (16, 32, 64),
  each repeated ``repeats`` (3) times, the first repeat with stride 2; then a
  stride-2 3x3 conv to 2N channels followed by leaky relu.
* decoder: ``len(encoder_channels) + 1`` stages, each preceded by a 2x nearest
  upsampling and built from stride-1 residual repeats; then a 3x3 conv to 3
  channels followed by tanh.

A residual repeat is conv-BN-relu-conv-BN, plus the shortcut, then relu. The
shortcut is a 1x1 conv + BN whenever the repeat changes channels or stride.
Convolutions that feed a batch norm carry no bias.
"""

from __future__ import annotations

import dataclasses
import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, ShapeError
from .tensor import (
    BNState,
    ParamStore,
    Tensor,
    absolute,
    add,
    batchnorm2d,
    conv2d,
    conv_output_size,
    get_dtype,
    leaky_relu,
    relu,
    tanh,
    upsample_nearest2x,
    where,
)

REFERENCE_CONV_LAYERS = 45
VARIANTS = ("full", "leaky-no-residual", "relu-no-residual")


class Label(enum.IntEnum):
    REAL = 1
    FAKE = 2

    @classmethod
    def parse(cls, value) -> Label:
        if isinstance(value, str):
            try:
                return cls[value.upper()]
            except KeyError:
                raise ContractError(f"unknown label {value!r}; expected 'real' or 'fake'") from None
        try:
            return cls(int(value))
        except ValueError:
            raise ContractError(f"label must be 1 (real) or 2 (fake), got {value!r}") from None

    @property
    def tag(self) -> str:
        return self.name.lower()


@dataclass(frozen=True)
class ArchConfig:
    input_size: int = 240
    in_channels: int = 3
    encoder_channels: tuple[int, ...] = (16, 32, 64)
    decoder_channels: tuple[int, ...] | None = None
    repeats: int = 3
    latent_channels: int = 64
    slope: float = 1e-7
    kernel_size: int = 3
    residual: bool = True
    final_activation: str = "leaky"
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "encoder_channels", tuple(int(c) for c in self.encoder_channels))
        if self.decoder_channels is None:
            enc = self.encoder_channels
            dec = tuple(reversed(enc)) + (max(1, enc[0] // 2),) if enc else ()
            object.__setattr__(self, "decoder_channels", dec)
        else:
            object.__setattr__(self, "decoder_channels", tuple(int(c) for c in self.decoder_channels))
        problems = self.violations()
        if problems:
            raise ConfigError("invalid ArchConfig: " + "; ".join(problems))

    def violations(self) -> list[str]:
        out = []
        stages = len(self.encoder_channels)
        factor = 2 ** (stages + 1)
        if stages < 1:
            out.append("need at least one encoder stage")
        if self.input_size < factor or self.input_size % factor:
            out.append(f"input_size {self.input_size} must be a positive multiple of {factor}")
        if len(self.decoder_channels) != stages + 1:
            out.append(f"decoder needs {stages + 1} stages to restore the input size, got {len(self.decoder_channels)}")
        if any(c < 1 for c in self.encoder_channels + self.decoder_channels):
            out.append("channel counts must be >= 1")
        if self.latent_channels < 1:
            out.append(f"latent_channels N must be >= 1, got {self.latent_channels}")
        if self.repeats < 1:
            out.append(f"repeats r must be >= 1, got {self.repeats}")
        if self.in_channels != 3:
            out.append(f"in_channels must be 3, got {self.in_channels}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            out.append(f"kernel_size must be odd and positive, got {self.kernel_size}")
        if self.slope < 0:
            out.append(f"slope must be >= 0, got {self.slope}")
        if self.final_activation not in ("leaky", "relu"):
            out.append(f"final_activation must be 'leaky' or 'relu', got {self.final_activation!r}")
        return out

    @property
    def latent_size(self) -> int:
        return self.input_size // 2 ** (len(self.encoder_channels) + 1)

    @property
    def latent_depth(self) -> int:
        return 2 * self.latent_channels

    @property
    def variant(self) -> str:
        if self.residual and self.final_activation == "leaky":
            return "full"
        if not self.residual:
            return "leaky-no-residual" if self.final_activation == "leaky" else "relu-no-residual"
        return "relu-residual"

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["encoder_channels"] = list(self.encoder_channels)
        d["decoder_channels"] = list(self.decoder_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ArchConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown ArchConfig fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def reference(cls) -> ArchConfig:
        return cls()

    @classmethod
    def desk(cls) -> ArchConfig:
        return cls(input_size=48, encoder_channels=(8, 16, 32), latent_channels=32, repeats=3)

    @classmethod
    def micro(cls) -> ArchConfig:
        """16x16 configuration small enough for exhaustive gradient checks.

        The latent slope is 0.01: at 1e-7 the gradients of decoder weights fed
        by negative latent entries are ~1e-10, below what a double-precision
        finite difference can resolve.
        """
        return cls(input_size=16, encoder_channels=(2, 3, 4), latent_channels=2, repeats=1, slope=0.01)


PRESETS = {"reference": ArchConfig.reference, "desk": ArchConfig.desk, "micro": ArchConfig.micro}


@dataclass
class ModelParams:
    config: ArchConfig
    params: ParamStore
    bn: dict[str, BNState] = field(default_factory=dict)

    def copy(self) -> ModelParams:
        return ModelParams(self.config, self.params.copy(), {k: v.copy() for k, v in self.bn.items()})

    def astype(self, dtype) -> ModelParams:
        bn = {k: BNState(v.mean.astype(dtype), v.var.astype(dtype)) for k, v in self.bn.items()}
        return ModelParams(self.config, self.params.astype(dtype), bn)

    def equal(self, other: ModelParams) -> bool:
        if self.config != other.config or not self.params.equal(other.params):
            return False
        if sorted(self.bn) != sorted(other.bn):
            return False
        return all(
            self.bn[k].mean.tobytes() == other.bn[k].mean.tobytes()
            and self.bn[k].var.tobytes() == other.bn[k].var.tobytes()
            for k in self.bn
        )


# ---------------------------------------------------------------------------
# layer plan


@dataclass(frozen=True)
class Block:
    name: str
    cin: int
    cout: int
    stride: int
    projection: bool


def _stage_blocks(prefix: str, stage: int, cin: int, cout: int, stride: int, cfg: ArchConfig) -> list[Block]:
    blocks = []
    for r in range(cfg.repeats):
        s = stride if r == 0 else 1
        c_in = cin if r == 0 else cout
        proj = cfg.residual and (c_in != cout or s != 1)
        blocks.append(Block(f"{prefix}.s{stage}.r{r}", c_in, cout, s, proj))
    return blocks


def encoder_plan(cfg: ArchConfig) -> list[list[Block]]:
    stages, cin = [], cfg.in_channels
    for i, c in enumerate(cfg.encoder_channels):
        stages.append(_stage_blocks("enc", i, cin, c, 2, cfg))
        cin = c
    return stages


def decoder_plan(cfg: ArchConfig) -> list[list[Block]]:
    stages, cin = [], cfg.latent_depth
    for i, c in enumerate(cfg.decoder_channels):
        stages.append(_stage_blocks("dec", i, cin, c, 1, cfg))
        cin = c
    return stages


def conv_layer_breakdown(cfg: ArchConfig) -> dict[str, int]:
    """Conv counts split into residual-path, projection and head convs per side."""
    out = {}
    for side, plan in (("encoder", encoder_plan(cfg)), ("decoder", decoder_plan(cfg))):
        blocks = [b for stage in plan for b in stage]
        out[f"{side}_residual"] = 2 * len(blocks)
        out[f"{side}_projection"] = sum(b.projection for b in blocks)
        out[f"{side}_head"] = 1
    return out


def count_conv_layers(cfg: ArchConfig, part: str = "all") -> int:
    """Number of conv layers, shortcut projections included.

    ``part`` is ``"all"``, ``"encoder"`` or ``"decoder"``. The reference preset
    gives 51, or 44 without the 7 projection convs; :func:`summary` prints this
    next to the figure of 45 whose counting convention is unknown.
    """
    b = conv_layer_breakdown(cfg)
    if part == "all":
        return sum(b.values())
    if part not in ("encoder", "decoder"):
        raise ContractError(f"part must be 'all', 'encoder' or 'decoder', got {part!r}")
    return sum(v for k, v in b.items() if k.startswith(part))


# ---------------------------------------------------------------------------
# construction


def build_model(config: ArchConfig, seed: int = 0) -> ModelParams:
    """Initialise every parameter deterministically from ``seed``.

    Conv weights are He-uniform (bound ``sqrt(6 / fan_in)``), biases zero,
    batch-norm scale one and shift zero, running statistics (0, 1).
    """
    bad = config.violations()
    if bad:
        raise ConfigError("invalid ArchConfig: " + "; ".join(bad))
    rng = np.random.default_rng(seed)
    dtype = get_dtype()
    params: dict[str, np.ndarray] = {}
    bn: dict[str, BNState] = {}
    k = config.kernel_size

    def conv(name, cin, cout, ksize, bias):
        fan_in = cin * ksize * ksize
        bound = np.sqrt(6.0 / fan_in)
        params[f"{name}.w"] = rng.uniform(-bound, bound, size=(cout, cin, ksize, ksize)).astype(dtype)
        if bias:
            params[f"{name}.b"] = np.zeros(cout, dtype=dtype)

    def norm(name, c):
        params[f"{name}.gamma"] = np.ones(c, dtype=dtype)
        params[f"{name}.beta"] = np.zeros(c, dtype=dtype)
        bn[name] = BNState.fresh(c, dtype)

    for plan in (encoder_plan(config), decoder_plan(config)):
        for stage in plan:
            for b in stage:
                conv(f"{b.name}.conv1", b.cin, b.cout, k, bias=False)
                norm(f"{b.name}.bn1", b.cout)
                conv(f"{b.name}.conv2", b.cout, b.cout, k, bias=False)
                norm(f"{b.name}.bn2", b.cout)
                if b.projection:
                    conv(f"{b.name}.proj", b.cin, b.cout, 1, bias=False)
                    norm(f"{b.name}.projbn", b.cout)
    conv("enc.out", config.encoder_channels[-1], config.latent_depth, 3, bias=True)
    conv("dec.out", config.decoder_channels[-1], config.in_channels, 3, bias=True)
    store = ParamStore({name: Tensor(v, dtype=dtype) for name, v in params.items()})
    return ModelParams(config, store, bn)


def ablation_variant(config: ArchConfig, variant: str, seed: int = 0) -> ModelParams:
    """Build ``full``, ``leaky-no-residual`` or ``relu-no-residual``.

    The no-residual variants drop every shortcut (and therefore every
    projection conv); the relu variant also swaps the encoder's final leaky
    relu for a plain relu.
    """
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    if variant == "full":
        cfg = dataclasses.replace(config, residual=True, final_activation="leaky")
    elif variant == "leaky-no-residual":
        cfg = dataclasses.replace(config, residual=False, final_activation="leaky")
    else:
        cfg = dataclasses.replace(config, residual=False, final_activation="relu")
    return build_model(cfg, seed)


# ---------------------------------------------------------------------------
# forward passes


def _bn(mp: ModelParams, name: str, x: Tensor, train: bool) -> Tensor:
    p = mp.params
    cfg = mp.config
    return batchnorm2d(
        x, p[f"{name}.gamma"], p[f"{name}.beta"], mp.bn[name], train, cfg.bn_eps, cfg.bn_momentum
    )


def _residual(mp: ModelParams, b: Block, x: Tensor, train: bool) -> Tensor:
    p = mp.params
    pad = mp.config.kernel_size // 2
    h = conv2d(x, p[f"{b.name}.conv1.w"], stride=b.stride, pad=pad)
    h = relu(_bn(mp, f"{b.name}.bn1", h, train))
    h = conv2d(h, p[f"{b.name}.conv2.w"], stride=1, pad=pad)
    h = _bn(mp, f"{b.name}.bn2", h, train)
    if mp.config.residual:
        if b.projection:
            skip = _bn(mp, f"{b.name}.projbn", conv2d(x, p[f"{b.name}.proj.w"], stride=b.stride), train)
        else:
            skip = x
        h = add(h, skip)
    return relu(h)


@dataclass(frozen=True)
class LatentTensor:
    """Latent block H (B, 2N, M, M) with its real half H1 and fake half H2."""

    H: Tensor

    @property
    def N(self) -> int:
        return self.H.shape[1] // 2

    @property
    def H1(self) -> Tensor:
        return self.H[:, : self.N]

    @property
    def H2(self) -> Tensor:
        return self.H[:, self.N :]

    @property
    def shape(self) -> tuple[int, ...]:
        return self.H.shape


def encode(mp: ModelParams, x: Tensor, train: bool = False, trace: dict | None = None) -> LatentTensor:
    cfg = mp.config
    S = cfg.input_size
    if x.ndim != 4 or x.shape[1:] != (cfg.in_channels, S, S):
        raise ShapeError(f"encode expects input of shape (B, {cfg.in_channels}, {S}, {S}), got {x.shape}")
    h = x
    for i, stage in enumerate(encoder_plan(cfg)):
        for b in stage:
            h = _residual(mp, b, h, train)
        if trace is not None:
            trace[f"enc.s{i}"] = h
    p = mp.params
    h = conv2d(h, p["enc.out.w"], p["enc.out.b"], stride=2, pad=1)
    if trace is not None:
        trace["enc.pre"] = h
    if cfg.final_activation == "leaky":
        h = leaky_relu(h, cfg.slope)
    else:
        h = relu(h)
    return LatentTensor(h)


def decode(mp: ModelParams, latent: LatentTensor, train: bool = False, trace: dict | None = None) -> Tensor:
    cfg = mp.config
    M = cfg.latent_size
    H = latent.H
    if H.ndim != 4 or H.shape[1:] != (cfg.latent_depth, M, M):
        raise ShapeError(f"decode expects latent of shape (B, {cfg.latent_depth}, {M}, {M}), got {H.shape}")
    h = H
    for i, stage in enumerate(decoder_plan(cfg)):
        h = upsample_nearest2x(h)
        for b in stage:
            h = _residual(mp, b, h, train)
        if trace is not None:
            trace[f"dec.s{i}"] = h
    p = mp.params
    return tanh(conv2d(h, p["dec.out.w"], p["dec.out.b"], stride=1, pad=1))


def decoder_layer_names(cfg: ArchConfig) -> list[str]:
    return [f"dec.s{i}" for i in range(len(cfg.decoder_channels))]


def _label_array(labels, batch: int) -> np.ndarray:
    arr = np.asarray([int(Label.parse(l)) for l in np.atleast_1d(labels)], dtype=np.int64)
    if arr.size == 1 and batch > 1:
        arr = np.full(batch, arr[0])
    if arr.size != batch:
        raise ShapeError(f"got {arr.size} labels for a batch of {batch}")
    return arr


def facilitate(latent: LatentTensor, labels) -> LatentTensor:
    """Zero the latent half of the opposite class; the kept half is untouched.

    ``labels`` is a single label applied to the whole batch or one label per
    sample. Returns a new latent; the input is not modified.
    """
    H = latent.H
    B, C = H.shape[0], H.shape[1]
    N = C // 2
    lab = _label_array(labels, B)
    channel_is_fake = np.arange(C) >= N
    keep = channel_is_fake[None, :] == (lab[:, None] == Label.FAKE)
    return LatentTensor(where(keep[:, :, None, None], H))


def per_class_activation(latent: LatentTensor) -> tuple[Tensor, Tensor]:
    """Per-sample mean absolute activation of each half: ``||H_c||_1 / (M*M*N)``."""
    H = latent.H
    B = H.shape[0]
    N = H.shape[1] // 2
    K = N * H.shape[2] * H.shape[3]
    a = absolute(H).reshape(B, 2, K).sum(axis=2) / K
    return a[:, 0], a[:, 1]


def activations_numpy(H: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Float64 (A1, A2) for a raw latent array, used for classification."""
    H = np.asarray(H, dtype=np.float64)
    B, C = H.shape[:2]
    N = C // 2
    a = np.abs(H).reshape(B, 2, -1).mean(axis=2)
    return a[:, 0], a[:, 1]


def classify_activations(a1, a2) -> np.ndarray:
    """Fake (2) iff A2 > A1, otherwise real (1); ties go to real."""
    a1 = np.asarray(a1)
    a2 = np.asarray(a2)
    return np.where(a2 > a1, int(Label.FAKE), int(Label.REAL))


def classify(latent: LatentTensor | np.ndarray) -> np.ndarray:
    """Label per sample of a raw (un-facilitated) latent."""
    H = latent.H.data if isinstance(latent, LatentTensor) else latent
    return classify_activations(*activations_numpy(H))


@dataclass
class TrainForward:
    recon: Tensor
    latent_raw: LatentTensor
    latent_fac: LatentTensor
    a1: Tensor
    a2: Tensor
    a1_raw: Tensor
    a2_raw: Tensor


def forward_train(mp: ModelParams, x: Tensor, labels) -> TrainForward:
    """Training path: encode, mask by label, decode the masked latent.

    ``a1``/``a2`` are measured on the masked latent, ``a1_raw``/``a2_raw`` on
    the unmasked one; the loss picks one pair. Batch statistics are live and
    running statistics are updated.
    """
    raw = encode(mp, x, train=True)
    fac = facilitate(raw, labels)
    recon = decode(mp, fac, train=True)
    a1, a2 = per_class_activation(fac)
    a1_raw, a2_raw = per_class_activation(raw)
    return TrainForward(recon, raw, fac, a1, a2, a1_raw, a2_raw)


def summary(config: ArchConfig) -> str:
    """Layer table with output shapes and the conv-layer count."""
    S = config.input_size
    lines = [f"{'layer':<14}{'output (C x H x W)':>22}{'convs':>8}"]
    size = S
    for stage in encoder_plan(config):
        convs = 0
        for b in stage:
            size = conv_output_size(size, config.kernel_size, b.stride, config.kernel_size // 2)
            convs += 2 + b.projection
        lines.append(f"{stage[0].name.rsplit('.', 1)[0]:<14}{f'{stage[0].cout} x {size} x {size}':>22}{convs:>8}")
    size = conv_output_size(size, 3, 2, 1)
    lines.append(f"{'enc.out':<14}{f'{config.latent_depth} x {size} x {size}':>22}{1:>8}")
    for stage in decoder_plan(config):
        size *= 2
        convs = sum(2 + b.projection for b in stage)
        lines.append(f"{stage[0].name.rsplit('.', 1)[0]:<14}{f'{stage[0].cout} x {size} x {size}':>22}{convs:>8}")
    lines.append(f"{'dec.out':<14}{f'{config.in_channels} x {size} x {size}':>22}{1:>8}")
    parts = conv_layer_breakdown(config)
    total = sum(parts.values())
    projections = parts["encoder_projection"] + parts["decoder_projection"]
    lines.append(
        f"conv layers: {total} ({total - projections} without shortcut projections;"
        f" reference figure {REFERENCE_CONV_LAYERS})"
    )
    lines.append(f"latent: {config.latent_depth} x {config.latent_size} x {config.latent_size} (N = {config.latent_channels} per class)")
    return "\n".join(lines)
