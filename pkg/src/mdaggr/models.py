"""Network builders: translators, the discriminator families, the task
network with its feature head, and checkpoint packing.

All builders are deterministic given an initialization seed; conv weights
start from normal(0, 0.02) and biases from zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import os
import tempfile

import torch
from torch import Tensor, nn

from .errors import CheckpointError, ConfigurationError, InferenceError
from .losses import GridSpec

KIND_CLASSIFICATION = "classification"
KIND_SEGMENTATION = "segmentation"


def init_weights(module: nn.Module, seed: int) -> None:
    """Deterministic normal(0, 0.02) init for conv/linear weights."""
    gen = torch.Generator().manual_seed(int(seed))
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            with torch.no_grad():
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * 0.02)
                if m.bias is not None:
                    m.bias.zero_()


# ---------------------------------------------------------------------------
# Translators
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TranslatorConfig:
    residual_blocks: int = 9
    base_width: int = 64
    channels: int = 3

    def __post_init__(self):
        if self.residual_blocks < 1:
            raise ConfigurationError("residual_blocks must be >= 1, got %r"
                                     % (self.residual_blocks,))
        if self.base_width < 1:
            raise ConfigurationError("base_width must be >= 1, got %r" % (self.base_width,))
        if self.channels not in (1, 3):
            raise ConfigurationError("channels must be 1 or 3, got %r" % (self.channels,))


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1),
            nn.InstanceNorm2d(channels),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels, 3, padding=1),
            nn.InstanceNorm2d(channels),
        )

    def forward(self, x):
        return x + self.block(x)


class TranslatorNet(nn.Module):
    """Encoder / residual / decoder image map with a saturating output, so
    translated pixels stay in [-1, 1]."""

    def __init__(self, config: TranslatorConfig):
        super().__init__()
        self.config = config
        b, c = config.base_width, config.channels
        self.stem = nn.Sequential(
            nn.ReflectionPad2d(3), nn.Conv2d(c, b, 7),
            nn.InstanceNorm2d(b), nn.ReLU(inplace=True))
        self.down = nn.Sequential(
            nn.Conv2d(b, 2 * b, 3, stride=2, padding=1),
            nn.InstanceNorm2d(2 * b), nn.ReLU(inplace=True),
            nn.Conv2d(2 * b, 4 * b, 3, stride=2, padding=1),
            nn.InstanceNorm2d(4 * b), nn.ReLU(inplace=True))
        self.blocks = nn.Sequential(*[ResidualBlock(4 * b)
                                      for _ in range(config.residual_blocks)])
        self.up = nn.Sequential(
            nn.ConvTranspose2d(4 * b, 2 * b, 3, stride=2, padding=1, output_padding=1),
            nn.InstanceNorm2d(2 * b), nn.ReLU(inplace=True),
            nn.ConvTranspose2d(2 * b, b, 3, stride=2, padding=1, output_padding=1),
            nn.InstanceNorm2d(b), nn.ReLU(inplace=True))
        self.final = nn.Sequential(nn.ReflectionPad2d(3), nn.Conv2d(b, c, 7))

    @property
    def final_conv(self) -> nn.Conv2d:
        return self.final[-1]

    def forward(self, x: Tensor) -> Tensor:
        if x.dim() != 4 or x.shape[1] != self.config.channels:
            raise InferenceError("translator expects (B, %d, H, W), got %r"
                                 % (self.config.channels, tuple(x.shape)))
        if x.shape[2] % 4 or x.shape[3] % 4:
            raise InferenceError("translator input sides must be multiples of 4, got %r"
                                 % (tuple(x.shape[2:]),))
        h = self.down(self.stem(x))
        h = self.up(self.blocks(h))
        return torch.tanh(self.final(h))


@dataclass
class TranslatorPair:
    """Forward (source to target) and backward (target to source) maps."""

    forward: TranslatorNet
    backward: TranslatorNet

    def parameters(self):
        yield from self.forward.parameters()
        yield from self.backward.parameters()

    def train(self, mode: bool = True) -> None:
        self.forward.train(mode)
        self.backward.train(mode)


def build_translator(config: TranslatorConfig = TranslatorConfig(),
                     seed: int = 0) -> TranslatorPair:
    fwd = TranslatorNet(config)
    bwd = TranslatorNet(config)
    init_weights(fwd, seed)
    init_weights(bwd, seed + 1)
    return TranslatorPair(forward=fwd, backward=bwd)


# ---------------------------------------------------------------------------
# Discriminators
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DiscriminatorConfig:
    base_width: int = 64
    channels: int = 3

    def __post_init__(self):
        if self.base_width < 1:
            raise ConfigurationError("base_width must be >= 1, got %r" % (self.base_width,))
        if self.channels < 1:
            raise ConfigurationError("channels must be >= 1, got %r" % (self.channels,))


class PixelDiscriminator(nn.Module):
    """4-layer strided patch discriminator; emits raw per-patch scores, the
    logistic map is applied at the loss boundary."""

    # (kernel, stride) per conv, used by the receptive-field recurrence
    LAYER_SPEC = ((4, 2), (4, 2), (4, 2), (4, 1))

    def __init__(self, config: DiscriminatorConfig):
        super().__init__()
        self.config = config
        b, c = config.base_width, config.channels
        self.net = nn.Sequential(
            nn.Conv2d(c, b, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(b, 2 * b, 4, stride=2, padding=1),
            nn.InstanceNorm2d(2 * b), nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(2 * b, 4 * b, 4, stride=2, padding=1),
            nn.InstanceNorm2d(4 * b), nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(4 * b, 1, 4, stride=1, padding=1))

    @classmethod
    def receptive_field(cls) -> int:
        """Receptive field of one output cell via the standard recurrence
        r <- r + (k - 1) * jump, jump <- jump * stride."""
        r, jump = 1, 1
        for k, s in cls.LAYER_SPEC:
            r += (k - 1) * jump
            jump *= s
        return r

    def forward(self, x: Tensor) -> Tensor:
        if x.dim() != 4 or x.shape[1] != self.config.channels:
            raise InferenceError("discriminator expects (B, %d, H, W), got %r"
                                 % (self.config.channels, tuple(x.shape)))
        return self.net(x)


def build_pixel_discriminator(config: DiscriminatorConfig = DiscriminatorConfig(),
                              seed: int = 0) -> PixelDiscriminator:
    net = PixelDiscriminator(config)
    init_weights(net, seed)
    return net


class FeatureDiscriminator(nn.Module):
    """3 convolutions over a task feature map; raw per-cell scores."""

    def __init__(self, in_channels: int, base_width: int = 64):
        super().__init__()
        self.in_channels = in_channels
        self.net = nn.Sequential(
            nn.Conv2d(in_channels, base_width, 3, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(base_width, base_width, 3, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(base_width, 1, 1))

    def forward(self, feat: Tensor) -> Tensor:
        if feat.dim() != 4 or feat.shape[1] != self.in_channels:
            raise InferenceError("feature discriminator expects (B, %d, h, w), got %r"
                                 % (self.in_channels, tuple(feat.shape)))
        return self.net(feat)


def build_feature_discriminator(in_channels: int, base_width: int = 64,
                                seed: int = 0) -> FeatureDiscriminator:
    net = FeatureDiscriminator(in_channels, base_width)
    init_weights(net, seed)
    return net


class ClassCellDiscriminator(nn.Module):
    """Shared trunk with one scalar head per class, scored on the alignment
    grid: features are pooled to (rows, cols) and each cell gets L raw
    scores, returned as (B, L, N)."""

    def __init__(self, in_channels: int, num_classes: int, grid: GridSpec,
                 base_width: int = 64):
        super().__init__()
        self.in_channels = in_channels
        self.num_classes = num_classes
        self.grid = grid
        self.trunk = nn.Sequential(
            nn.Conv2d(in_channels, base_width, 1),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(base_width, base_width, 1),
            nn.LeakyReLU(0.2, inplace=True))
        self.heads = nn.Conv2d(base_width, num_classes, 1)

    def forward(self, feat: Tensor) -> Tensor:
        if feat.dim() != 4 or feat.shape[1] != self.in_channels:
            raise InferenceError("class discriminator expects (B, %d, h, w), got %r"
                                 % (self.in_channels, tuple(feat.shape)))
        pooled = nn.functional.adaptive_avg_pool2d(feat, (self.grid.rows, self.grid.cols))
        raw = self.heads(self.trunk(pooled))
        return raw.reshape(feat.shape[0], self.num_classes, self.grid.num_cells)


def build_class_discriminator(in_channels: int, num_classes: int, grid: GridSpec,
                              base_width: int = 64, seed: int = 0) -> ClassCellDiscriminator:
    net = ClassCellDiscriminator(in_channels, num_classes, grid, base_width)
    init_weights(net, seed)
    return net


@dataclass
class DiscriminatorSet:
    """Every adversary of one training run. ``per_class`` stays None outside
    segmentation mode."""

    target_pixel: PixelDiscriminator
    per_source_pixel: list[PixelDiscriminator]
    aggregation: list[PixelDiscriminator]
    feature: FeatureDiscriminator
    per_class: ClassCellDiscriminator | None = None


# ---------------------------------------------------------------------------
# Task network
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TaskConfig:
    kind: str
    num_classes: int
    base_width: int = 64
    channels: int = 3

    def __post_init__(self):
        if self.kind not in (KIND_CLASSIFICATION, KIND_SEGMENTATION):
            raise ConfigurationError("kind must be classification or segmentation, got %r"
                                     % (self.kind,))
        if self.num_classes < 2:
            raise ConfigurationError("num_classes must be >= 2, got %r" % (self.num_classes,))
        if self.base_width < 1:
            raise ConfigurationError("base_width must be >= 1, got %r" % (self.base_width,))


class TaskNetwork(nn.Module):
    """Shared encoder plus a classification or segmentation head.

    ``extract_features`` returns the last-conv feature map that the feature
    and class discriminators consume. ``role`` is a bookkeeping tag: the
    same instance serves as F (trained model), F_A (dynamic consistency
    model, always parameter-aliased to F), or a frozen per-source snapshot.
    """

    def __init__(self, config: TaskConfig):
        super().__init__()
        self.config = config
        self.role = "F"
        b, c = config.base_width, config.channels
        self.encoder = nn.Sequential(
            nn.Conv2d(c, b, 3, padding=1),
            nn.InstanceNorm2d(b), nn.ReLU(inplace=True),
            nn.Conv2d(b, 2 * b, 3, stride=2, padding=1),
            nn.InstanceNorm2d(2 * b), nn.ReLU(inplace=True),
            nn.Conv2d(2 * b, 4 * b, 3, stride=2, padding=1),
            nn.InstanceNorm2d(4 * b), nn.ReLU(inplace=True),
            nn.Conv2d(4 * b, 4 * b, 3, padding=1),
            nn.InstanceNorm2d(4 * b), nn.ReLU(inplace=True))
        if config.kind == KIND_CLASSIFICATION:
            self.head = nn.Linear(4 * b, config.num_classes)
        else:
            self.head = nn.Conv2d(4 * b, config.num_classes, 1)

    @property
    def feature_channels(self) -> int:
        return 4 * self.config.base_width

    def extract_features(self, x: Tensor) -> Tensor:
        if x.dim() != 4 or x.shape[1] != self.config.channels:
            raise InferenceError("task network expects (B, %d, H, W), got %r"
                                 % (self.config.channels, tuple(x.shape)))
        return self.encoder(x)

    def forward(self, x: Tensor) -> Tensor:
        logits, _ = self.logits_and_features(x)
        return logits

    def logits_and_features(self, x: Tensor) -> tuple[Tensor, Tensor]:
        feat = self.extract_features(x)
        if self.config.kind == KIND_CLASSIFICATION:
            pooled = feat.mean(dim=(2, 3))
            return self.head(pooled), feat
        logits = self.head(feat)
        logits = nn.functional.interpolate(logits, size=x.shape[2:], mode="bilinear",
                                           align_corners=False)
        return logits, feat


def build_task_network(kind: str, num_classes: int, base_width: int = 64,
                       channels: int = 3, seed: int = 0) -> TaskNetwork:
    net = TaskNetwork(TaskConfig(kind=kind, num_classes=num_classes,
                                 base_width=base_width, channels=channels))
    init_weights(net, seed)
    return net


def extract_features(net: TaskNetwork, batch: Tensor) -> Tensor:
    return net.extract_features(batch)


def predict(net: TaskNetwork, batch: Tensor) -> Tensor:
    return net(batch)


def parameter_count(module) -> int:
    return sum(p.numel() for p in module.parameters())


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_FORMAT = 1


def pack_checkpoint(components: Mapping[str, nn.Module], config: dict,
                    extra: dict | None = None) -> dict:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "config": dict(config),
        "components": {name: mod.state_dict() for name, mod in components.items()},
    }
    if extra:
        payload.update(extra)
    return payload


def save_checkpoint(path: Path, payload: dict) -> None:
    """Atomic write: serialize to a temp file in the same directory, then
    rename over the destination."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            torch.save(payload, f)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: Path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError("checkpoint not found: %s" % (path,))
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError("unreadable checkpoint %s: %s" % (path, exc)) from exc
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError("unsupported checkpoint format %r" % (payload.get("format"),))
    return payload


def restore_components(payload: dict, components: Mapping[str, nn.Module],
                       config: dict) -> None:
    """Load every named component; a mismatched config or missing component
    is a checkpoint error."""
    if payload["config"] != dict(config):
        raise CheckpointError("checkpoint config does not match the requested config")
    stored = payload["components"]
    for name, module in components.items():
        if name not in stored:
            raise CheckpointError("checkpoint is missing component %r" % (name,))
        try:
            module.load_state_dict(stored[name])
        except RuntimeError as exc:
            raise CheckpointError("component %r does not fit its config: %s"
                                  % (name, exc)) from exc
