"""Progressive mask training, the learning-rate plan and the end-to-end ablation."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, NamedTuple, Sequence

import numpy as np
import torch

from .data import MLRTrainingSet, TrainSample, to_tensor
from .errors import DataError, DomainError, NumericError
from .losses import LossWeights, id_logits, id_loss, total_loss, verification_loss_from_logits
from .model import ModelConfig, ResolutionAdaptiveNet
from .resolution import pad_batch

log = logging.getLogger(__name__)

PROGRESSIVE = "progressive"
END_TO_END = "end_to_end"
MODES = (PROGRESSIVE, END_TO_END)


@dataclass(frozen=True)
class OptimizerConfig:
    """Adam with step decay and a linear warm-up ramp."""

    base_lr: float = 3.5e-4
    decay_epochs: tuple[int, ...] = (40, 70)
    decay_factor: float = 0.1
    warmup_epochs: int = 10
    warmup_start_factor: float = 0.1
    epochs: int = 120
    batch_size: int = 32
    grad_clip: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "decay_epochs", tuple(int(e) for e in self.decay_epochs))


def learning_rate(epoch: int, config: OptimizerConfig = OptimizerConfig()) -> float:
    """Step-decayed learning rate for a 0-based epoch, warm-up included.

    Epochs up to and including each decay point use the rate before it.
    """
    if not 0 <= epoch < config.epochs:
        raise DomainError(f"epoch {epoch} outside 0..{config.epochs - 1}")
    lr = config.base_lr * config.decay_factor ** sum(epoch > d for d in config.decay_epochs)
    if epoch < config.warmup_epochs:
        s = config.warmup_start_factor
        lr *= s + (1.0 - s) * epoch / config.warmup_epochs
    return lr


@dataclass(frozen=True)
class Stage:
    index: int
    introduce: tuple[int, ...]
    trainable_masks: tuple[int, ...]
    frozen_masks: tuple[int, ...]
    uninitialized_masks: tuple[int, ...]
    iterations: int


@dataclass(frozen=True)
class TrainingStagePlan:
    num_blocks: int
    mode: str
    stages: tuple[Stage, ...]

    @property
    def total_iterations(self) -> int:
        return sum(s.iterations for s in self.stages)


def build_stage_plan(L: int, T, mode: str = PROGRESSIVE) -> TrainingStagePlan:
    """Stage l introduces and trains the block-l masks with blocks 1..l-1 frozen.

    Block 1 is nearest the output. ``T`` is the iteration count per stage
    (an int, or one value per stage). End-to-end mode is a single stage of
    ``sum(T)`` iterations training every mask.
    """
    if L < 1:
        raise DomainError(f"need at least one masked block, got {L}")
    if mode not in MODES:
        raise DomainError(f"unknown training mode {mode!r}")
    iters = [int(T)] * L if isinstance(T, (int, np.integer)) else [int(t) for t in T]
    if len(iters) != L or any(t < 1 for t in iters):
        raise DomainError(f"need {L} positive per-stage iteration counts, got {T}")
    blocks = tuple(range(1, L + 1))
    if mode == END_TO_END:
        stages = (Stage(1, blocks, blocks, (), (), sum(iters)),)
    else:
        stages = tuple(
            Stage(l, (l,), (l,), tuple(range(1, l)), tuple(range(l + 1, L + 1)), iters[l - 1]) for l in blocks
        )
    return TrainingStagePlan(L, mode, stages)


def split_epochs(epochs: int, L: int) -> list[int]:
    """Equal per-stage epoch split; leftover epochs go to the earliest stages."""
    base, extra = divmod(epochs, L)
    if base == 0:
        raise DomainError(f"{epochs} epochs cannot cover {L} stages")
    return [base + (1 if i < extra else 0) for i in range(L)]


def enter_stage(model: ResolutionAdaptiveNet, stage: Stage, generator: torch.Generator | None = None) -> None:
    bank = model.masks
    for l in stage.introduce:
        bank.introduce(l, generator)
    for l in stage.frozen_masks:
        bank.freeze(l)


class StepLosses(NamedTuple):
    cls: float
    verif: float
    total: float


def sample_pairs(q_labels: np.ndarray, g_labels: np.ndarray, rng: np.random.Generator):
    """Every positive (query, gallery) pair plus as many random negatives."""
    same = q_labels[:, None] == g_labels[None, :]
    pos = np.argwhere(same)
    neg = np.argwhere(~same)
    n_neg = min(len(neg), max(len(pos), 1))
    if n_neg:
        neg = neg[np.sort(rng.choice(len(neg), size=n_neg, replace=False))]
    else:
        neg = neg[:0]
    pairs = np.concatenate([pos, neg]) if len(neg) else pos
    y = np.concatenate([np.ones(len(pos)), np.zeros(len(neg))])
    return pairs[:, 0], pairs[:, 1], y


def compute_losses(
    model: ResolutionAdaptiveNet,
    images: torch.Tensor,
    mask_levels: torch.Tensor,
    labels: torch.Tensor,
    pair_i: Sequence[int],
    pair_j: Sequence[int],
    pair_y: Sequence[float],
    weights: LossWeights = LossWeights(),
):
    """(cls, verif, total) for a batch whose rows are indexed by the pair lists.

    Rows are embedded with masks at ``mask_levels`` and zero-padded to their
    embedding level before both heads see them.
    """
    v = model(images, mask_levels)
    z = pad_batch(v, model.embedding_levels(mask_levels), model.layout)
    cls = id_loss(id_logits(z, model.classifier), labels)
    i = torch.as_tensor(np.asarray(pair_i), dtype=torch.long)
    j = torch.as_tensor(np.asarray(pair_j), dtype=torch.long)
    verif = verification_loss_from_logits(model.verifier(z[i] - z[j]), torch.as_tensor(np.asarray(pair_y))).mean
    return cls, verif, total_loss(cls, verif, weights)


def check_masks(model: ResolutionAdaptiveNet) -> None:
    bank = model.masks
    for l in range(1, bank.num_blocks + 1):
        if bank.active(l):
            a = torch.sigmoid(bank.param(l).detach())
            if not bool(((a > 0) & (a < 1)).all()):
                raise NumericError(f"block {l} mask activations left the open interval (0, 1)")


def train_step(
    batch: Sequence[TrainSample],
    model: ResolutionAdaptiveNet,
    optimizer: torch.optim.Optimizer,
    stage: Stage | None = None,
    weights: LossWeights = LossWeights(),
    rng: np.random.Generator | None = None,
    grad_clip: float | None = None,
) -> StepLosses:
    """One update: queries at their levels, galleries at level m, both losses, backprop.

    Frozen masks have ``requires_grad`` off, so Adam never touches them.
    """
    if not batch:
        raise DomainError("empty batch")
    rng = rng if rng is not None else np.random.default_rng(0)
    if stage is not None:
        for l in stage.frozen_masks:
            model.masks.freeze(l)
    model.train()
    n = len(batch)
    m = model.m
    dtype = model.projection.weight.dtype
    images = to_tensor([s.query_image for s in batch] + [s.gallery_image for s in batch], dtype)
    levels = torch.tensor([s.query_level.index for s in batch] + [m] * n)
    q_lab = np.array([s.query_label for s in batch])
    g_lab = np.array([s.gallery_label for s in batch])
    labels = torch.from_numpy(np.concatenate([q_lab, g_lab]))
    pi, pj, y = sample_pairs(q_lab, g_lab, rng)
    cls, verif, total = compute_losses(model, images, levels, labels, pi, pj + n, y, weights)
    if not torch.isfinite(total):
        raise NumericError(f"non-finite total loss (cls={float(cls)}, verif={float(verif)})")
    optimizer.zero_grad(set_to_none=True)
    total.backward()
    if grad_clip:
        torch.nn.utils.clip_grad_norm_([p for p in model.parameters() if p.grad is not None], grad_clip)
    optimizer.step()
    check_masks(model)
    return StepLosses(float(cls.detach()), float(verif.detach()), float(total.detach()))


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)


def snapshot_masks(model: ResolutionAdaptiveNet, blocks: Sequence[int]) -> dict[int, torch.Tensor]:
    return {l: model.masks.param(l).detach().clone() for l in blocks}


@dataclass
class TrainResult:
    model: ResolutionAdaptiveNet
    history: list[dict]
    stage_log: list[dict]
    metadata: dict = field(default_factory=dict)


def train(
    dataset: MLRTrainingSet,
    model_config: ModelConfig,
    config: OptimizerConfig = OptimizerConfig(),
    mode: str = PROGRESSIVE,
    weights: LossWeights = LossWeights(),
    seed: int = 0,
    steps_per_epoch: int | None = None,
    plan: TrainingStagePlan | None = None,
    stage_epochs: Sequence[int] | None = None,
    log_file=None,
    on_step: Callable[[dict], None] | None = None,
    on_stage: Callable[[str, Stage, ResolutionAdaptiveNet], None] | None = None,
) -> TrainResult:
    """Run all stages of the plan and return the trained model with its logs.

    Without an explicit plan, ``stage_epochs`` (default: ``config.epochs``
    split evenly) sets each progressive stage's length. The learning rate
    follows the global epoch count.
    """
    if dataset is None or len(dataset) == 0:
        raise DataError("training dataset is empty")
    seed_everything(seed)
    rng = np.random.default_rng(seed)
    mask_gen = torch.Generator().manual_seed(seed + 1)
    model_config = replace(model_config, num_classes=dataset.num_classes)
    model = ResolutionAdaptiveNet(model_config)
    L = model.masks.num_blocks
    spe = steps_per_epoch or math.ceil(len(dataset) / config.batch_size)
    if plan is None:
        epochs = list(stage_epochs) if stage_epochs else split_epochs(config.epochs, L)
        plan = build_stage_plan(L, [e * spe for e in epochs], mode)
    if plan.num_blocks != L or plan.mode != mode:
        raise DomainError(f"plan ({plan.mode}, L={plan.num_blocks}) does not match mode {mode} with L={L}")
    optimizer = torch.optim.Adam(model.parameters(), lr=config.base_lr)
    history, stage_log = [], []
    step = 0
    for stage in plan.stages:
        enter_stage(model, stage, mask_gen)
        if on_stage:
            on_stage("start", stage, model)
        before = snapshot_masks(model, stage.frozen_masks)
        first = last = None
        for _ in range(stage.iterations):
            epoch = min(step // spe, config.epochs - 1)
            lr = learning_rate(epoch, config)
            for group in optimizer.param_groups:
                group["lr"] = lr
            batch = dataset.sample_batch(config.batch_size, rng)
            losses = train_step(batch, model, optimizer, stage, weights, rng, config.grad_clip)
            record = {"step": step, "epoch": epoch, "stage": stage.index, "lr": lr, **losses._asdict()}
            history.append(record)
            if log_file is not None:
                log_file.write(json.dumps(record) + "\n")
            if on_step:
                on_step(record)
            first = first or losses
            last = losses
            step += 1
        after = snapshot_masks(model, stage.frozen_masks)
        if on_stage:
            on_stage("end", stage, model)
        stage_log.append(
            {
                "stage": stage.index,
                "trained_masks": list(stage.trainable_masks) if not model.masks.identity else [],
                "frozen_masks": list(stage.frozen_masks),
                "iterations": stage.iterations,
                "frozen_unchanged": all(torch.equal(before[l], after[l]) for l in before),
                "first_total": first.total,
                "last_total": last.total,
            }
        )
        log.info("stage %d done: total loss %.4f -> %.4f", stage.index, first.total, last.total)
    model.eval()
    metadata = {
        "mode": mode,
        "seed": seed,
        "steps_per_epoch": spe,
        "optimizer": asdict(config),
        "lambda": weights.lam,
        "stage_log": stage_log,
        "identities": [int(i) for i in dataset.identities],
    }
    return TrainResult(model, history, stage_log, metadata)
