"""Residual backbone with per-resolution channel masks and a varying-length head."""

from __future__ import annotations

import hashlib
import io
import os
import tempfile
from dataclasses import asdict, dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .errors import DomainError, IncompatibleCheckpointError, ShapeError
from .losses import PrototypeClassifier, VerificationHead
from .resolution import (
    DEFAULT_RATIOS,
    EmbeddingLayout,
    ResolutionLevel,
    VaryingLengthEmbedding,
    check_known_ratios,
)

CHECKPOINT_FORMAT = 1
FULL_SCALE_CHANNELS = (256, 512, 1024, 2048)


@dataclass
class ModelConfig:
    """Everything needed to rebuild a network before loading its weights."""

    scale: str = "desk"
    block_channels: tuple[int, ...] = (16, 32, 64)
    input_size: tuple[int, int] = (64, 32)
    last_stride: int = 1
    embedding_dims: tuple[int, ...] = (16, 16, 16, 16)
    known_ratios: tuple[str, ...] = tuple(str(r) for r in DEFAULT_RATIOS)
    num_classes: int = 10
    mask_init_std: float = 0.1
    use_masks: bool = True
    varying_length: bool = True
    verifier_hidden: int | None = None

    def __post_init__(self):
        self.block_channels = tuple(int(c) for c in self.block_channels)
        self.input_size = tuple(int(s) for s in self.input_size)
        self.embedding_dims = tuple(int(d) for d in self.embedding_dims)
        self.known_ratios = tuple(str(Fraction(r)) for r in self.known_ratios)
        if self.scale not in ("desk", "full"):
            raise DomainError(f"scale must be 'desk' or 'full', got {self.scale!r}")
        if self.scale == "full":
            self.block_channels = FULL_SCALE_CHANNELS
        if len(self.embedding_dims) != len(self.known_ratios):
            raise DomainError(
                f"{len(self.embedding_dims)} sub-vectors but {len(self.known_ratios)} resolution levels"
            )
        check_known_ratios(self.ratios)

    @property
    def layout(self) -> EmbeddingLayout:
        return EmbeddingLayout(self.embedding_dims)

    @property
    def ratios(self) -> tuple[Fraction, ...]:
        return tuple(Fraction(r) for r in self.known_ratios)

    @property
    def num_blocks(self) -> int:
        return len(self.block_channels)

    def to_dict(self) -> dict:
        return asdict(self)


class ResidualBlock(nn.Module):
    """Two 3x3 conv/BN layers with a shortcut, ReLU after the sum."""

    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.relu = nn.ReLU()
        self.shortcut = nn.Identity()
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride, bias=False), nn.BatchNorm2d(out_ch)
            )

    def forward(self, x):
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu(out + self.shortcut(x))


def desk_backbone(block_channels: Sequence[int], last_stride: int = 1):
    """Small residual network: stride-2 stem, then len(block_channels) blocks.

    The first block keeps resolution, middle blocks halve it and the final
    block uses ``last_stride``.
    """
    stem = nn.Sequential(
        nn.Conv2d(3, block_channels[0], 3, 2, 1, bias=False),
        nn.BatchNorm2d(block_channels[0]),
        nn.ReLU(),
    )
    blocks = []
    in_ch = block_channels[0]
    n = len(block_channels)
    for i, ch in enumerate(block_channels):
        stride = 1 if i == 0 else (last_stride if i == n - 1 else 2)
        blocks.append(ResidualBlock(in_ch, ch, stride))
        in_ch = ch
    return stem, nn.ModuleList(blocks)


def resnet50_backbone(last_stride: int = 1):
    """ResNet-50 split into stem and its four residual stages, randomly initialised."""
    from torchvision.models import resnet50

    net = resnet50(weights=None)
    if last_stride != 2:
        net.layer4[0].conv2.stride = (last_stride, last_stride)
        net.layer4[0].downsample[0].stride = (last_stride, last_stride)
    stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool)
    return stem, nn.ModuleList([net.layer1, net.layer2, net.layer3, net.layer4])


class MaskBank(nn.Module):
    """Learnable channel masks, one (m, d^l) parameter per masked block.

    Blocks are numbered l = 1..L with l = 1 nearest the output. A block's
    masks do nothing until ``introduce(l)`` draws their initial values;
    with ``identity=True`` no mask is ever applied.
    """

    def __init__(self, block_channels: Sequence[int], m: int, init_std: float = 0.1, identity: bool = False):
        super().__init__()
        self.m = m
        self.init_std = init_std
        self.identity = identity
        self.params = nn.ParameterList(
            [nn.Parameter(torch.zeros(m, c), requires_grad=False) for c in block_channels]
        )
        self.register_buffer("introduced", torch.zeros(len(block_channels), dtype=torch.bool))
        self.register_buffer("frozen", torch.zeros(len(block_channels), dtype=torch.bool))

    @property
    def num_blocks(self) -> int:
        return len(self.params)

    def param(self, l: int) -> nn.Parameter:
        if not 1 <= l <= self.num_blocks:
            raise DomainError(f"mask block {l} outside 1..{self.num_blocks}")
        return self.params[l - 1]

    def channels(self, l: int) -> int:
        return self.param(l).shape[1]

    def introduce(self, l: int, generator: torch.Generator | None = None) -> None:
        """Gaussian-initialise block l's masks and make them trainable."""
        p = self.param(l)
        if self.identity:
            return
        with torch.no_grad():
            p.copy_(torch.randn(p.shape, generator=generator, dtype=p.dtype) * self.init_std)
        p.requires_grad_(True)
        self.introduced[l - 1] = True
        self.frozen[l - 1] = False

    def freeze(self, l: int) -> None:
        self.param(l).requires_grad_(False)
        self.frozen[l - 1] = True

    def active(self, l: int) -> bool:
        return not self.identity and bool(self.introduced[l - 1])

    def activation(self, l: int, levels: torch.Tensor) -> torch.Tensor:
        """sigmoid(M^l_k) for each row's level k, shape (B, d^l)."""
        return torch.sigmoid(self.param(l)[levels.long() - 1])

    def restore_grad_flags(self) -> None:
        for l in range(1, self.num_blocks + 1):
            trainable = self.active(l) and not bool(self.frozen[l - 1])
            self.param(l).requires_grad_(trainable)

    def _load_from_state_dict(self, *args, **kwargs):
        super()._load_from_state_dict(*args, **kwargs)
        self.restore_grad_flags()


def apply_resolution_mask(x: torch.Tensor, levels, bank: MaskBank, block: int) -> torch.Tensor:
    """Scale channel c of ``x`` by sigmoid(M^block_k[c]) where k is the input's level.

    ``x`` is (C, H, W) with an int level, or (B, C, H, W) with a level per row.
    Only the selected level's mask is read.
    """
    single = x.dim() == 3
    if single:
        x = x[None]
    if x.dim() != 4:
        raise ShapeError(f"expected a (B, C, H, W) feature map, got shape {tuple(x.shape)}")
    if x.shape[1] != bank.channels(block):
        raise ShapeError(f"feature map has {x.shape[1]} channels, block {block} masks have {bank.channels(block)}")
    if isinstance(levels, ResolutionLevel):
        levels = levels.index
    levels = torch.as_tensor(levels, device=x.device).reshape(-1).expand(x.shape[0])
    if levels.min() < 1 or levels.max() > bank.m:
        raise DomainError(f"level outside 1..{bank.m}")
    if bank.active(block):
        x = x * bank.activation(block, levels).to(x.dtype)[:, :, None, None]
    return x[0] if single else x


class ResolutionAdaptiveNet(nn.Module):
    """Backbone + mask bank + projection to d, plus the training heads."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.layout = config.layout
        self.known_ratios = config.ratios
        if config.scale == "full":
            self.stem, self.blocks = resnet50_backbone(config.last_stride)
        else:
            self.stem, self.blocks = desk_backbone(config.block_channels, config.last_stride)
        # mask block l sits after backbone block L - l
        channels_by_l = list(reversed(config.block_channels))
        self.masks = MaskBank(channels_by_l, self.layout.m, config.mask_init_std, identity=not config.use_masks)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.projection = nn.Linear(config.block_channels[-1], self.layout.total_dim)
        self.classifier = PrototypeClassifier(self.layout, config.num_classes)
        self.verifier = VerificationHead(self.layout.total_dim, config.verifier_hidden)

    @property
    def m(self) -> int:
        return self.layout.m

    def feature_map(self, x: torch.Tensor, levels: torch.Tensor) -> torch.Tensor:
        h, w = self.config.input_size
        if x.dim() != 4 or tuple(x.shape[1:]) != (3, h, w):
            raise ShapeError(f"expected input (B, 3, {h}, {w}), got {tuple(x.shape)}")
        x = self.stem(x)
        n = len(self.blocks)
        for i, block in enumerate(self.blocks):
            x = apply_resolution_mask(block(x), levels, self.masks, n - i)
        return x

    def forward(self, x: torch.Tensor, levels) -> torch.Tensor:
        """Full penultimate vectors (B, d), masks chosen by each row's level."""
        levels = torch.as_tensor(levels, device=x.device).reshape(-1).expand(x.shape[0])
        return self.projection(self.pool(self.feature_map(x, levels)).flatten(1))

    def embedding_levels(self, levels: torch.Tensor) -> torch.Tensor:
        """Level used for the embedding length; always m without varying length."""
        if self.config.varying_length:
            return levels
        return torch.full_like(levels, self.m)

    def level(self, index: int) -> ResolutionLevel:
        return ResolutionLevel(index, self.known_ratios[index - 1])


def embed(image, level: ResolutionLevel, model: ResolutionAdaptiveNet) -> VaryingLengthEmbedding:
    """Embed one normalized H x W x 3 image at the given resolution level."""
    x = torch.as_tensor(np.asarray(image), dtype=next(model.parameters()).dtype)
    if x.dim() != 3 or x.shape[-1] != 3:
        raise ShapeError(f"expected an H x W x 3 image, got {tuple(x.shape)}")
    x = x.permute(2, 0, 1)[None]
    was_training = model.training
    model.eval()
    with torch.no_grad():
        v = model(x, level.index)[0]
    model.train(was_training)
    out_level = level if model.config.varying_length else model.level(model.m)
    return VaryingLengthEmbedding.from_vector(v.double().numpy(), out_level, model.layout)


def state_digest(model: nn.Module) -> str:
    """SHA-256 over the model's state dict, used as an embedding-cache key."""
    h = hashlib.sha256()
    for name, t in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def atomic_write_bytes(path, data: bytes) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path, model: ResolutionAdaptiveNet, metadata: dict | None = None) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "model_config": model.config.to_dict(),
        "state_dict": model.state_dict(),
        "metadata": metadata or {},
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    atomic_write_bytes(path, buf.getvalue())


def load_checkpoint(path) -> tuple[ResolutionAdaptiveNet, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise IncompatibleCheckpointError(f"unsupported checkpoint format {payload.get('format')!r}")
    config = ModelConfig(**payload["model_config"])
    model = ResolutionAdaptiveNet(config)
    model.to(payload["state_dict"]["projection.weight"].dtype)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload["metadata"]
