"""Run configuration: one flat key-value schema shared by config files and CLI flags.

Precedence is CLI flag > config file > built-in default. Every key carries
its default, a help string and, where it comes from the method's published
setup, a provenance note.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from .data import AugmentationConfig
from .errors import ConfigError
from .losses import LossWeights
from .model import ModelConfig
from .resolution import EmbeddingLayout, ratios_from_rates
from .training import MODES, PROGRESSIVE, OptimizerConfig

ABLATIONS = ("no-mask", "no-val")


@dataclass(frozen=True)
class Key:
    name: str
    kind: type
    default: Any
    help: str
    provenance: str = ""
    choices: tuple = ()
    item: type | None = None  # element type for list keys


KEYS = (
    Key("scale", str, "desk", "backbone size: small residual net or ResNet-50", choices=("desk", "full")),
    Key("blocks", int, 3, "number of masked residual blocks L (ResNet-50 has 4)", "masks after every residual block"),
    Key("block_channels", list, None, "channels per block, input side first; default 16*2^i", item=int),
    Key("input_size", list, [64, 32], "canonical H W every image is resized to (full scale: 256 128)",
        "256x128 at full scale", item=int),
    Key("last_stride", int, 1, "stride of the final residual block", "last stride set to 1"),
    Key("embedding_dim", int, 64, "penultimate dimension d, split equally over the m levels (full: 2048)"),
    Key("rates", list, [2, 3, 4], "integer down-sampling rates of the LR training images", "r in {2,3,4}", item=int),
    Key("mask_init_std", float, 0.1, "std of the Gaussian mask initialisation", "Gaussian mask init"),
    Key("lambda", float, 0.5, "weight of the verification loss", "lambda = 0.5"),
    Key("base_lr", float, 3.5e-4, "Adam learning rate after warm-up", "lr 0.00035, Adam"),
    Key("decay_epochs", list, [40, 70], "epochs after which the lr is multiplied by decay_factor",
        "decay after 40 and 70 epochs", item=int),
    Key("decay_factor", float, 0.1, "lr decay multiplier", "3.5e-5 then 3.5e-6"),
    Key("warmup_epochs", int, 10, "linear warm-up length in epochs", "warm-up lr"),
    Key("warmup_start_factor", float, 0.1, "warm-up starts at base_lr times this"),
    Key("epochs", int, 120, "total training epochs across all stages", "120 epochs"),
    Key("stage_epochs", list, None, "epochs per progressive stage; default equal split", item=int),
    Key("steps_per_epoch", int, None, "iterations per epoch; default ceil(#images / batch_size)"),
    Key("batch_size", int, 32, "triplets per mini-batch", "batch size 32"),
    Key("grad_clip", float, None, "max gradient norm; off by default"),
    Key("pad_pixels", int, 10, "zero padding before the random crop", "padded with 10 pixels"),
    Key("hflip_prob", float, 0.5, "horizontal flip probability", "flipped with 0.5 probability"),
    Key("positive_fraction", float, 0.5, "probability a training gallery image shares the query identity"),
    Key("mode", str, PROGRESSIVE, "mask training schedule", "progressive vs end-to-end", choices=MODES),
    Key("ablate", list, [], "ablations: no-mask (identity masks), no-val (always full-length embeddings)",
        "w/o mask, w/o val variants", item=str),
    Key("seed", int, 0, "master random seed"),
)
KEY_INDEX = {k.name: k for k in KEYS}


def _coerce(key: Key, value, problems: list[str]):
    if value is None:
        return None
    try:
        if key.kind is list:
            if isinstance(value, str):
                value = [v for v in value.replace(",", " ").split() if v]
            if not isinstance(value, (list, tuple)):
                raise TypeError("expected a list")
            return [key.item(v) for v in value]
        if key.kind is bool:
            if isinstance(value, str):
                return value.lower() in ("1", "true", "yes", "on")
            return bool(value)
        if key.kind is int and isinstance(value, float) and not value.is_integer():
            raise TypeError("expected an integer")
        return key.kind(value)
    except (TypeError, ValueError) as exc:
        problems.append(f"{key.name}: cannot interpret {value!r} ({exc})")
        return key.default


class RunConfig(dict):
    """Validated mapping of every schema key to its effective value."""

    @classmethod
    def build(cls, file_values: dict | None = None, overrides: dict | None = None) -> "RunConfig":
        problems: list[str] = []
        merged = {k.name: k.default for k in KEYS}
        for source in (file_values or {}, {k: v for k, v in (overrides or {}).items() if v is not None}):
            for name, value in source.items():
                name = name.replace("-", "_")
                if name not in KEY_INDEX:
                    problems.append(f"unknown config key {name!r}")
                    continue
                merged[name] = _coerce(KEY_INDEX[name], value, problems)
        cfg = cls(merged)
        problems.extend(cfg.problems())
        if problems:
            raise ConfigError(problems)
        return cfg

    @classmethod
    def from_file(cls, path, overrides: dict | None = None) -> "RunConfig":
        try:
            values = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        if not isinstance(values, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        return cls.build(values, overrides)

    def problems(self) -> list[str]:
        out = []
        for key in KEYS:
            v = self[key.name]
            if key.choices and v not in key.choices:
                out.append(f"{key.name}: {v!r} not in {key.choices}")
        if self["scale"] == "full" and self["blocks"] != 4:
            out.append("blocks: full scale has exactly 4 residual blocks")
        if self["scale"] == "desk" and not 1 <= self["blocks"] <= 4:
            out.append("blocks: desk scale supports 1 to 4 blocks")
        chans = self["block_channels"]
        if chans is not None and len(chans) != self["blocks"]:
            out.append(f"block_channels: {len(chans)} entries for {self['blocks']} blocks")
        if chans is not None and any(c < 1 for c in chans):
            out.append("block_channels: must be positive")
        if len(self["input_size"]) != 2 or any(s < 8 for s in self["input_size"]):
            out.append("input_size: need two sides of at least 8 pixels")
        if any(r < 2 for r in self["rates"]):
            out.append("rates: LR rates must be integers >= 2")
        m = len(set(self["rates"])) + 1
        if self["embedding_dim"] < m or self["embedding_dim"] % m:
            out.append(f"embedding_dim: {self['embedding_dim']} does not split evenly into {m} levels")
        for name in ("mask_init_std", "base_lr", "lambda", "decay_factor", "warmup_start_factor"):
            if self[name] < 0:
                out.append(f"{name}: must be >= 0")
        for name in ("epochs", "batch_size"):
            if self[name] < 1:
                out.append(f"{name}: must be >= 1")
        if self["warmup_epochs"] < 0:
            out.append("warmup_epochs: must be >= 0")
        if self["steps_per_epoch"] is not None and self["steps_per_epoch"] < 1:
            out.append("steps_per_epoch: must be >= 1")
        if not 0 <= self["hflip_prob"] <= 1:
            out.append("hflip_prob: must lie in [0, 1]")
        if not 0 <= self["positive_fraction"] <= 1:
            out.append("positive_fraction: must lie in [0, 1]")
        if self["pad_pixels"] < 0:
            out.append("pad_pixels: must be >= 0")
        for a in self["ablate"]:
            if a not in ABLATIONS:
                out.append(f"ablate: unknown ablation {a!r} (choose from {ABLATIONS})")
        se = self["stage_epochs"]
        if se is not None:
            if len(se) != self["blocks"]:
                out.append(f"stage_epochs: {len(se)} entries for {self['blocks']} blocks")
            elif any(e < 1 for e in se):
                out.append("stage_epochs: every stage needs >= 1 epoch")
            elif sum(se) != self["epochs"]:
                out.append(f"stage_epochs: sum {sum(se)} != epochs {self['epochs']}")
        elif self["epochs"] < self["blocks"]:
            out.append(f"epochs: {self['epochs']} epochs cannot cover {self['blocks']} stages")
        return out

    # -- views onto the component configs --

    @property
    def known_ratios(self):
        return ratios_from_rates(self["rates"])

    def model_config(self, num_classes: int = 1) -> ModelConfig:
        m = len(self.known_ratios)
        layout = EmbeddingLayout.equal(self["embedding_dim"], m)
        chans = self["block_channels"] or [16 * 2**i for i in range(self["blocks"])]
        return ModelConfig(
            scale=self["scale"],
            block_channels=tuple(chans),
            input_size=tuple(self["input_size"]),
            last_stride=self["last_stride"],
            embedding_dims=layout.dims,
            known_ratios=tuple(str(r) for r in self.known_ratios),
            num_classes=num_classes,
            mask_init_std=self["mask_init_std"],
            use_masks="no-mask" not in self["ablate"],
            varying_length="no-val" not in self["ablate"],
        )

    def optimizer_config(self) -> OptimizerConfig:
        return OptimizerConfig(
            base_lr=self["base_lr"],
            decay_epochs=tuple(self["decay_epochs"]),
            decay_factor=self["decay_factor"],
            warmup_epochs=self["warmup_epochs"],
            warmup_start_factor=self["warmup_start_factor"],
            epochs=self["epochs"],
            batch_size=self["batch_size"],
            grad_clip=self["grad_clip"],
        )

    def augmentation_config(self) -> AugmentationConfig:
        return AugmentationConfig(tuple(self["input_size"]), self["pad_pixels"], self["hflip_prob"])

    def loss_weights(self) -> LossWeights:
        return LossWeights(self["lambda"])

    def to_json(self) -> str:
        return json.dumps(dict(self), indent=2, sort_keys=True) + "\n"


def describe_keys() -> str:
    """Help text listing every config key with default and provenance."""
    lines = ["config keys (JSON file via --config; flags override the file):"]
    for k in KEYS:
        default = json.dumps(k.default)
        note = f" [published setup: {k.provenance}]" if k.provenance else ""
        lines.append(f"  {k.name:<20} default {default:<10} {k.help}{note}")
    return "\n".join(lines)


def training_set(cfg: RunConfig, records):
    from .data import make_mlr_training_set

    return make_mlr_training_set(
        records,
        cfg["rates"],
        known_ratios=cfg.known_ratios,
        size=tuple(cfg["input_size"]),
        augmentation=cfg.augmentation_config(),
        positive_fraction=cfg["positive_fraction"],
    )


def train_with_config(cfg: RunConfig, records, log_file=None, on_step=None, on_stage=None):
    """Build the MLR training set from ``records`` and run training as configured."""
    from .training import train

    dataset = training_set(cfg, records)
    result = train(
        dataset,
        cfg.model_config(dataset.num_classes),
        cfg.optimizer_config(),
        mode=cfg["mode"],
        weights=cfg.loss_weights(),
        seed=cfg["seed"],
        steps_per_epoch=cfg["steps_per_epoch"],
        stage_epochs=cfg["stage_epochs"],
        log_file=log_file,
        on_step=on_step,
        on_stage=on_stage,
    )
    result.metadata.update(config=dict(cfg), ablations=list(cfg["ablate"]))
    return result, dataset
