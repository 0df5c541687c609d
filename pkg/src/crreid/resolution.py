"""Resolution levels, embedding layouts and varying-length embeddings."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np
import torch

from .errors import DomainError, ShapeError

DEFAULT_RATES = (2, 3, 4)


def as_fraction(value) -> Fraction:
    """Convert an int, float, Fraction or "a/b" string to a Fraction."""
    if isinstance(value, Fraction):
        return value
    if isinstance(value, float):
        return Fraction(value).limit_denominator(10**6)
    return Fraction(value)


@dataclass(frozen=True, order=True)
class ResolutionLevel:
    """Quantized resolution: 1-based ``index`` ascending with ``ratio``."""

    index: int
    ratio: Fraction

    @property
    def rate(self) -> Fraction:
        """Down-sampling rate, the reciprocal of ``ratio``."""
        return 1 / self.ratio


def ratios_from_rates(rates: Iterable[int]) -> tuple[Fraction, ...]:
    """Known ratios for a set of integer down-sampling rates, HR included."""
    out = {Fraction(1)}
    for r in rates:
        if int(r) < 1:
            raise DomainError(f"down-sampling rate must be >= 1, got {r}")
        out.add(Fraction(1, int(r)))
    return tuple(sorted(out))


DEFAULT_RATIOS = ratios_from_rates(DEFAULT_RATES)


def check_known_ratios(known_ratios: Sequence) -> tuple[Fraction, ...]:
    ratios = tuple(as_fraction(r) for r in known_ratios)
    if not ratios:
        raise DomainError("known_ratios is empty")
    if any(b <= a for a, b in zip(ratios, ratios[1:])):
        raise DomainError(f"known_ratios must be strictly ascending: {ratios}")
    if ratios[-1] != 1:
        raise DomainError(f"largest known ratio must be 1, got {ratios[-1]}")
    if ratios[0] <= 0:
        raise DomainError("known ratios must be positive")
    return ratios


def level_for(index: int, known_ratios: Sequence) -> ResolutionLevel:
    ratios = check_known_ratios(known_ratios)
    if not 1 <= index <= len(ratios):
        raise DomainError(f"level {index} outside 1..{len(ratios)}")
    return ResolutionLevel(index, ratios[index - 1])


def quantize_resolution(ratio, known_ratios: Sequence = DEFAULT_RATIOS) -> ResolutionLevel:
    """Map a height/width ratio in (0, 1] onto the nearest known level.

    Exact matches win; otherwise the closest ratio is taken, ties going to
    the higher resolution.
    """
    ratio = as_fraction(ratio)
    if ratio <= 0 or ratio > 1:
        raise DomainError(f"resolution ratio must lie in (0, 1], got {ratio}")
    ratios = check_known_ratios(known_ratios)
    if ratio in ratios:
        return ResolutionLevel(ratios.index(ratio) + 1, ratio)
    best = min(range(len(ratios)), key=lambda i: (abs(ratios[i] - ratio), -ratios[i]))
    return ResolutionLevel(best + 1, ratios[best])


@dataclass(frozen=True)
class EmbeddingLayout:
    """Per-level sub-vector sizes of the penultimate feature vector."""

    dims: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if not self.dims:
            raise DomainError("layout needs at least one level")
        if any(d <= 0 for d in self.dims):
            raise DomainError(f"sub-vector dims must be positive: {self.dims}")

    @classmethod
    def equal(cls, total_dim: int, m: int) -> "EmbeddingLayout":
        if total_dim % m:
            raise DomainError(f"{total_dim} does not split into {m} equal parts")
        return cls((total_dim // m,) * m)

    @property
    def m(self) -> int:
        return len(self.dims)

    @property
    def total_dim(self) -> int:
        return sum(self.dims)

    @property
    def offsets(self) -> tuple[int, ...]:
        """Cumulative ends: ``offsets[k]`` is the length of a level-k prefix."""
        out = [0]
        for d in self.dims:
            out.append(out[-1] + d)
        return tuple(out)

    def prefix_length(self, level) -> int:
        k = level.index if isinstance(level, ResolutionLevel) else int(level)
        if not 1 <= k <= self.m:
            raise DomainError(f"level {k} outside 1..{self.m}")
        return self.offsets[k]

    def split(self, vector) -> list:
        """Partition a vector of length ``total_dim`` (or a prefix) into sub-vectors."""
        n = len(vector)
        if n not in self.offsets[1:]:
            raise ShapeError(f"length {n} is not a prefix length of layout {self.dims}")
        offs = self.offsets
        return [vector[offs[j]:offs[j + 1]] for j in range(self.offsets.index(n))]


@dataclass(frozen=True)
class VaryingLengthEmbedding:
    """The first ``level.index`` sub-vectors of an image's penultimate vector."""

    level: ResolutionLevel
    subvectors: tuple[np.ndarray, ...]

    def __post_init__(self):
        subs = tuple(np.asarray(v, dtype=np.float64).reshape(-1) for v in self.subvectors)
        object.__setattr__(self, "subvectors", subs)
        if len(subs) != self.level.index:
            raise ShapeError(
                f"level {self.level.index} embedding needs {self.level.index} sub-vectors, got {len(subs)}"
            )

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate(self.subvectors) if self.subvectors else np.zeros(0)

    def check_layout(self, layout: EmbeddingLayout) -> None:
        for j, v in enumerate(self.subvectors):
            if len(v) != layout.dims[j]:
                raise ShapeError(f"sub-vector {j + 1} has length {len(v)}, layout expects {layout.dims[j]}")

    @classmethod
    def from_vector(cls, vector, level: ResolutionLevel, layout: EmbeddingLayout):
        vector = np.asarray(vector, dtype=np.float64)
        n = layout.prefix_length(level)
        if len(vector) < n:
            raise ShapeError(f"vector of length {len(vector)} too short for level {level.index}")
        return cls(level, tuple(layout.split(vector[:n])))


def zero_pad(z: VaryingLengthEmbedding, layout: EmbeddingLayout) -> np.ndarray:
    """Fill the sub-vectors of levels above ``z.level`` with zeros."""
    z.check_layout(layout)
    out = np.zeros(layout.total_dim, dtype=np.float64)
    v = z.vector
    out[: len(v)] = v
    return out


def prefix_mask(levels: torch.Tensor, layout: EmbeddingLayout) -> torch.Tensor:
    """Boolean (B, d) mask, True on the dims a level-k row keeps."""
    ends = torch.tensor(layout.offsets, device=levels.device)[levels.long()]
    return torch.arange(layout.total_dim, device=levels.device)[None, :] < ends[:, None]


def pad_batch(v: torch.Tensor, levels: torch.Tensor, layout: EmbeddingLayout) -> torch.Tensor:
    """Batched zero-padding of full penultimate vectors to each row's level.

    ``torch.where`` keeps the gradient into padded positions exactly zero.
    """
    if v.shape[-1] != layout.total_dim:
        raise ShapeError(f"expected last dim {layout.total_dim}, got {v.shape[-1]}")
    keep = prefix_mask(levels, layout)
    return torch.where(keep, v, torch.zeros((), dtype=v.dtype, device=v.device))
