"""Resolution-adaptive ranking and the MLR evaluation protocol."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from fractions import Fraction
from typing import NamedTuple, Sequence

import numpy as np
import torch

from .data import (
    IdentityImageRecord,
    load_image,
    make_mlr_query_gallery,
    synthesize_lr,
    to_tensor,
)
from .errors import DomainError, ShapeError
from .model import ResolutionAdaptiveNet, state_digest
from .resolution import (
    EmbeddingLayout,
    ResolutionLevel,
    VaryingLengthEmbedding,
    as_fraction,
    check_known_ratios,
    quantize_resolution,
)

log = logging.getLogger(__name__)

DEFAULT_RANKS = (1, 5, 10, 20)


def cross_res_distance(z_p: VaryingLengthEmbedding, z_g: VaryingLengthEmbedding, layout: EmbeddingLayout) -> float:
    """Squared L2 between a level-k query and the first k sub-vectors of a full gallery embedding."""
    if z_g.level.index != layout.m:
        raise ShapeError(f"gallery embedding must be full length (level {layout.m}), got level {z_g.level.index}")
    z_p.check_layout(layout)
    z_g.check_layout(layout)
    q = z_p.vector
    g = z_g.vector[: len(q)]
    return float(np.sum((q - g) ** 2))


def distance_matrix(queries: np.ndarray, query_levels: Sequence[int], gallery: np.ndarray, layout: EmbeddingLayout) -> np.ndarray:
    """(Q, G) sliced distances; ``queries`` rows hold at least their level's prefix."""
    queries = np.asarray(queries, dtype=np.float64)
    gallery = np.asarray(gallery, dtype=np.float64)
    if gallery.ndim != 2 or gallery.shape[1] != layout.total_dim:
        raise ShapeError(f"gallery must be (G, {layout.total_dim}), got {gallery.shape}")
    levels = np.asarray(query_levels, dtype=int)
    out = np.empty((len(queries), len(gallery)))
    for k in np.unique(levels):
        rows = np.flatnonzero(levels == k)
        n = layout.prefix_length(int(k))
        q = queries[rows, :n]
        g = gallery[:, :n]
        # explicit difference keeps the slice-pad identity exact
        out[rows] = ((q[:, None, :] - g[None, :, :]) ** 2).sum(-1)
    return out


def resolve_unseen_resolution(ratio, known_ratios: Sequence) -> ResolutionLevel:
    """Assign a query to the trained level with the nearest integer down-sampling rate.

    Ties go to the higher-resolution (smaller-rate) neighbour.
    """
    ratio = as_fraction(ratio)
    if ratio <= 0 or ratio > 1:
        raise DomainError(f"resolution ratio must lie in (0, 1], got {ratio}")
    ratios = check_known_ratios(known_ratios)
    rate = 1 / ratio
    best = min(range(len(ratios)), key=lambda i: (abs(1 / ratios[i] - rate), 1 / ratios[i]))
    return ResolutionLevel(best + 1, ratios[best])


@dataclass
class RankedList:
    query_id: str
    gallery_ids: list
    distances: np.ndarray


def rank(
    query: VaryingLengthEmbedding,
    gallery: Sequence[VaryingLengthEmbedding],
    layout: EmbeddingLayout,
    gallery_ids: Sequence | None = None,
    query_id: str = "",
) -> RankedList:
    """Gallery sorted by ascending distance at the query's level; ties by gallery id."""
    if not len(gallery):
        raise DomainError("empty gallery")
    ids = list(range(len(gallery))) if gallery_ids is None else list(gallery_ids)
    dist = np.array([cross_res_distance(query, g, layout) for g in gallery])
    return rank_from_distances(dist, ids, query_id)


def rank_from_distances(dist: np.ndarray, gallery_ids: Sequence, query_id: str = "") -> RankedList:
    order = sorted(range(len(gallery_ids)), key=lambda i: (dist[i], gallery_ids[i]))
    return RankedList(query_id, [gallery_ids[i] for i in order], np.asarray(dist)[order])


@dataclass
class TrialResult:
    cmc: np.ndarray
    mAP: float
    num_queries: int
    excluded: list = field(default_factory=list)


def average_precision(matches: np.ndarray) -> float:
    """Uninterpolated AP of a 0/1 relevance vector in rank order."""
    matches = np.asarray(matches, dtype=np.float64)
    n_rel = matches.sum()
    if n_rel == 0:
        return 0.0
    precision = np.cumsum(matches) / np.arange(1, len(matches) + 1)
    return float((precision * matches).sum() / n_rel)


def cmc_map(
    ranked: Sequence[RankedList],
    query_identities: Sequence,
    gallery_identity: dict,
    max_rank: int | None = None,
) -> TrialResult:
    """CMC curve and mAP for one trial.

    ``gallery_identity`` maps gallery id -> identity. Queries without any
    gallery match are excluded and listed in the result.
    """
    all_cmc, all_ap, excluded = [], [], []
    for rl, qid in zip(ranked, query_identities):
        matches = np.array([gallery_identity[g] == qid for g in rl.gallery_ids], dtype=np.int64)
        if not matches.any():
            excluded.append(rl.query_id)
            continue
        cmc = (np.cumsum(matches) >= 1).astype(np.float64)
        all_cmc.append(cmc if max_rank is None else cmc[:max_rank])
        all_ap.append(average_precision(matches))
    if excluded:
        log.warning("%d queries have no gallery match and were excluded", len(excluded))
    if not all_cmc:
        raise DomainError("no query has a gallery match")
    return TrialResult(np.mean(all_cmc, axis=0), float(np.mean(all_ap)), len(all_cmc), excluded)


@dataclass
class EvalReport:
    ranks: tuple[int, ...]
    cmc_trials: np.ndarray  # (trials, max_rank)
    map_trials: np.ndarray
    num_queries: list
    assignments: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    @property
    def trials(self) -> int:
        return len(self.map_trials)

    @property
    def cmc_mean(self) -> np.ndarray:
        return self.cmc_trials.mean(axis=0)

    @property
    def cmc_std(self) -> np.ndarray:
        return self.cmc_trials.std(axis=0)

    @property
    def mAP(self) -> float:
        return float(self.map_trials.mean())

    def rank_k(self, k: int) -> float:
        return float(self.cmc_mean[min(k, self.cmc_trials.shape[1]) - 1])

    def to_dict(self) -> dict:
        def at(curve, k):
            return round(float(curve[min(k, len(curve)) - 1]), 6)

        return {
            "trials": self.trials,
            "ranks": {f"rank-{k}": {"mean": at(self.cmc_mean, k), "std": at(self.cmc_std, k)} for k in self.ranks},
            "mAP": {"mean": round(self.mAP, 6), "std": round(float(self.map_trials.std()), 6)},
            "per_trial": [
                {
                    "trial": t,
                    "num_queries": int(self.num_queries[t]),
                    "mAP": round(float(self.map_trials[t]), 6),
                    **{f"rank-{k}": at(self.cmc_trials[t], k) for k in self.ranks},
                }
                for t in range(self.trials)
            ],
            "assignments": self.assignments,
            "config": self.config,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def summary(self) -> str:
        parts = [f"rank-{k} {100 * self.rank_k(k):.1f}%" for k in self.ranks]
        return f"{self.trials} trial(s): " + ", ".join(parts) + f", mAP {100 * self.mAP:.1f}%"


class Embedder:
    """Batched embedding of records with a cache keyed by (checkpoint digest, image id, rate)."""

    def __init__(self, model: ResolutionAdaptiveNet, batch_size: int = 64, normalize: bool = False):
        self.model = model
        self.batch_size = batch_size
        self.normalize = normalize
        self.digest = state_digest(model)
        self.cache: dict[tuple, np.ndarray] = {}
        self.dtype = model.projection.weight.dtype

    def image(self, record: IdentityImageRecord, rate: int) -> np.ndarray:
        size = self.model.config.input_size
        hr = load_image(record, size)
        return synthesize_lr(hr, rate) if rate > 1 else hr

    def vectors(self, records: Sequence[IdentityImageRecord], rates: Sequence[int], mask_levels: Sequence[int]) -> np.ndarray:
        """Full penultimate vectors (N, d), masks selected by ``mask_levels``."""
        keys = [(self.digest, r.image_id, int(rate), int(k)) for r, rate, k in zip(records, rates, mask_levels)]
        todo = [i for i, key in enumerate(keys) if key not in self.cache]
        self.model.eval()
        with torch.no_grad():
            for s in range(0, len(todo), self.batch_size):
                idx = todo[s:s + self.batch_size]
                x = to_tensor([self.image(records[i], rates[i]) for i in idx], self.dtype)
                v = self.model(x, torch.tensor([mask_levels[i] for i in idx])).double().numpy()
                for i, row in zip(idx, v):
                    self.cache[keys[i]] = row
        out = np.stack([self.cache[k] for k in keys]) if keys else np.zeros((0, self.model.layout.total_dim))
        if self.normalize and len(out):
            out = out / np.maximum(np.linalg.norm(out, axis=1, keepdims=True), 1e-12)
        return out


def query_level(rate: int, known_ratios: Sequence) -> ResolutionLevel:
    """Level for a query rate; unseen rates go through the nearest-rate rule."""
    ratio = Fraction(1, int(rate))
    if ratio in tuple(as_fraction(r) for r in known_ratios):
        return quantize_resolution(ratio, known_ratios)
    return resolve_unseen_resolution(ratio, known_ratios)


def evaluate_mlr(
    model: ResolutionAdaptiveNet,
    test_records: Sequence[IdentityImageRecord],
    rates: Sequence[int] = (2, 3, 4),
    trials: int = 10,
    seed: int = 0,
    ranks: Sequence[int] = DEFAULT_RANKS,
    normalize: bool = False,
    embedder: Embedder | None = None,
) -> EvalReport:
    """MLR protocol: per trial, random LR queries against one HR gallery image per identity."""
    if trials < 1:
        raise DomainError("trials must be >= 1")
    ranks = tuple(sorted(set(int(k) for k in ranks)))
    embedder = embedder or Embedder(model, normalize=normalize)
    layout = model.layout
    m = layout.m
    assignments = {}
    for r in sorted(set(int(r) for r in rates)):
        lvl = query_level(r, model.known_ratios)
        assignments[str(r)] = {"level": lvl.index, "assigned_rate": str(lvl.rate)}
        if Fraction(1, r) not in model.known_ratios:
            log.info("unseen rate %d assigned to trained rate %s (level %d)", r, lvl.rate, lvl.index)
    trial_seeds = np.random.SeedSequence(seed).generate_state(trials)
    cmc_rows, maps, counts = [], [], []
    for t in range(trials):
        queries, gallery = make_mlr_query_gallery(test_records, rates, int(trial_seeds[t]))
        if not gallery:
            raise DomainError("empty gallery")
        g_vec = embedder.vectors(gallery, [1] * len(gallery), [m] * len(gallery))
        q_mask_levels = [assignments[str(q.rate)]["level"] for q in queries]
        q_vec = embedder.vectors([q.record for q in queries], [q.rate for q in queries], q_mask_levels)
        q_len_levels = q_mask_levels if model.config.varying_length else [m] * len(queries)
        dist = distance_matrix(q_vec, q_len_levels, g_vec, layout)
        g_ids = [g.image_id for g in gallery]
        ranked = [rank_from_distances(dist[i], g_ids, q.record.image_id) for i, q in enumerate(queries)]
        result = cmc_map(
            ranked,
            [q.record.identity_id for q in queries],
            {g.image_id: g.identity_id for g in gallery},
            max_rank=max(ranks),
        )
        cmc = result.cmc
        if len(cmc) < max(ranks):
            cmc = np.concatenate([cmc, np.full(max(ranks) - len(cmc), cmc[-1])])
        cmc_rows.append(cmc)
        maps.append(result.mAP)
        counts.append(result.num_queries)
    return EvalReport(
        ranks=ranks,
        cmc_trials=np.array(cmc_rows),
        map_trials=np.array(maps),
        num_queries=counts,
        assignments=assignments,
        config={"rates": sorted(set(int(r) for r in rates)), "trials": trials, "seed": seed, "normalize": normalize},
    )


class ClassDistances(NamedTuple):
    intra: float
    inter: float

    @property
    def ratio(self) -> float:
        return self.intra / self.inter


def class_distances(
    model: ResolutionAdaptiveNet,
    records: Sequence[IdentityImageRecord],
    rates: Sequence[int] = (2, 3, 4),
    standardize: bool = True,
) -> ClassDistances:
    """Mean sliced distance from each LR image to the other HR images of its
    identity (intra) and to the HR images of other identities (inter).

    With ``standardize`` every vector has the mean HR vector subtracted and is
    then L2-normalized, so neither a shared offset nor the overall feature
    scale moves the numbers.
    """
    embedder = Embedder(model)
    layout = model.layout
    m = layout.m
    hr = embedder.vectors(records, [1] * len(records), [m] * len(records))
    center = hr.mean(axis=0) if standardize else 0.0

    def prep(v):
        if not standardize:
            return v
        v = v - center
        return v / np.maximum(np.linalg.norm(v, axis=1, keepdims=True), 1e-12)

    gallery = prep(hr)
    ids = np.array([r.identity_id for r in records])
    same = (ids[:, None] == ids[None, :]) & ~np.eye(len(records), dtype=bool)
    other = ids[:, None] != ids[None, :]
    if not same.any() or not other.any():
        raise DomainError("need at least two identities with two images each")
    intra, inter = [], []
    for rate in rates:
        lvl = query_level(rate, model.known_ratios)
        q = prep(embedder.vectors(records, [rate] * len(records), [lvl.index] * len(records)))
        k = lvl.index if model.config.varying_length else m
        dist = distance_matrix(q, [k] * len(records), gallery, layout)
        intra.append(dist[same].mean())
        inter.append(dist[other].mean())
    return ClassDistances(float(np.mean(intra)), float(np.mean(inter)))


def intra_class_distance(model, records, rates=(2, 3, 4), standardize: bool = True) -> float:
    return class_distances(model, records, rates, standardize).intra


# ---------------------------------------------------------------------------
# embedding export: tab-separated, one image per line
#   image_id <TAB> identity <TAB> level <TAB> v_1 ... v_{d_1+..+d_k} (space separated)


def export_embeddings(path, rows: Sequence[tuple[str, int, VaryingLengthEmbedding]], layout: EmbeddingLayout) -> None:
    with open(path, "w") as f:
        f.write(f"# dims={','.join(map(str, layout.dims))}\n")
        f.write("# image_id\tidentity\tlevel\tvalues\n")
        for image_id, identity, z in rows:
            z.check_layout(layout)
            values = " ".join(repr(float(x)) for x in z.vector)
            f.write(f"{image_id}\t{identity}\t{z.level.index}\t{values}\n")


def load_embeddings(path, known_ratios: Sequence) -> tuple[EmbeddingLayout, list[tuple[str, int, VaryingLengthEmbedding]]]:
    rows = []
    layout = None
    ratios = check_known_ratios(known_ratios)
    with open(path) as f:
        for line in f:
            line = line.rstrip("\n")
            if line.startswith("# dims="):
                layout = EmbeddingLayout(tuple(int(d) for d in line[len("# dims="):].split(",")))
                continue
            if not line or line.startswith("#"):
                continue
            if layout is None:
                raise ShapeError(f"{path}: missing '# dims=' header before the first record")
            image_id, identity, level, values = line.split("\t")
            vec = np.array([float(x) for x in values.split()])
            lvl = ResolutionLevel(int(level), ratios[int(level) - 1])
            rows.append((image_id, int(identity), VaryingLengthEmbedding.from_vector(vec, lvl, layout)))
    if layout is None:
        raise ShapeError(f"{path}: missing '# dims=' header")
    return layout, rows
