"""MLR dataset synthesis, augmentation and sampling.

Images are float32 H x W x 3 arrays in [0, 1]; ``to_tensor`` converts a
batch to normalized N x 3 x H x W model input.
"""

from __future__ import annotations

import colorsys
import json
import logging
import os
import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import DataError, DomainError
from .resolution import DEFAULT_RATIOS, ResolutionLevel, quantize_resolution, ratios_from_rates

log = logging.getLogger(__name__)

CANONICAL_SIZE = (256, 128)
DESK_SIZE = (64, 32)
MIN_LR_SIDE = 4
IMAGENET_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
IMAGENET_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)
IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp")
# Market-1501 style: 0002_c1s1_000451_03.jpg; our LR copies append _r<rate>
_NAME_RE = re.compile(r"^(?P<pid>-?\d+)_c(?P<cam>\d+)")
_RATE_RE = re.compile(r"_r(?P<rate>\d+)$")


@dataclass(frozen=True)
class IdentityImageRecord:
    identity_id: int
    camera_id: int
    image_id: str
    path: str | None = None
    pixels: np.ndarray | None = field(default=None, repr=False, compare=False)
    native_size: tuple[int, int] | None = None
    is_synthetic_lr: bool = False
    down_rate: int = 1

    def __post_init__(self):
        if self.identity_id < 0:
            raise DomainError(f"identity_id must be nonnegative, got {self.identity_id}")
        if self.down_rate < 1:
            raise DomainError(f"down_rate must be >= 1, got {self.down_rate}")
        if self.path is None and self.pixels is None:
            raise DomainError(f"record {self.image_id} has neither a path nor pixels")


@dataclass(frozen=True)
class AugmentationConfig:
    target_size: tuple[int, int] = CANONICAL_SIZE
    pad_pixels: int = 10
    hflip_prob: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise DomainError(f"hflip_prob must lie in [0, 1], got {self.hflip_prob}")
        if self.pad_pixels < 0:
            raise DomainError("pad_pixels must be >= 0")


@dataclass
class TrainSample:
    query_image: np.ndarray
    gallery_image: np.ndarray
    query_level: ResolutionLevel
    query_label: int
    gallery_label: int
    query_rate: int = 1


@dataclass(frozen=True)
class QueryItem:
    record: IdentityImageRecord
    rate: int


def resize_bilinear(image: np.ndarray, size: Sequence[int]) -> np.ndarray:
    """Bilinear resize with half-pixel centres (align_corners off), no antialiasing."""
    h, w = int(size[0]), int(size[1])
    if image.shape[:2] == (h, w):
        return image
    x = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32)).permute(2, 0, 1)[None]
    y = F.interpolate(x, size=(h, w), mode="bilinear", align_corners=False, antialias=False)
    return y[0].permute(1, 2, 0).contiguous().numpy()


def downsampled_size(size: Sequence[int], rate: int) -> tuple[int, int]:
    return tuple(max(MIN_LR_SIDE, int(s) // int(rate)) for s in size)


def synthesize_lr(image: np.ndarray, rate: int, size: Sequence[int] | None = None) -> np.ndarray:
    """Simulate a low-resolution capture: bilinear down by ``rate``, then back up.

    Rate 1 is a passthrough; any other rate below 2 is rejected.
    """
    size = tuple(size or image.shape[:2])
    if rate == 1:
        return image if image.shape[:2] == size else resize_bilinear(image, size)
    if rate < 2 or int(rate) != rate:
        raise DomainError(f"down-sampling rate must be an integer >= 2, got {rate}")
    image = resize_bilinear(image, size)
    small = resize_bilinear(image, downsampled_size(size, rate))
    return resize_bilinear(small, size)


def augment(
    image: np.ndarray,
    config: AugmentationConfig,
    rng: np.random.Generator,
    offset: tuple[int, int] | None = None,
    flip: bool | None = None,
) -> np.ndarray:
    """Resize, zero-pad, random-crop back to size, random horizontal flip."""
    h, w = config.target_size
    image = resize_bilinear(image, (h, w))
    p = config.pad_pixels
    if p:
        image = np.pad(image, ((p, p), (p, p), (0, 0)))
    if offset is None:
        offset = (int(rng.integers(0, 2 * p + 1)), int(rng.integers(0, 2 * p + 1)))
    top, left = offset
    out = image[top:top + h, left:left + w]
    if flip is None:
        flip = bool(rng.random() < config.hflip_prob)
    if flip:
        out = out[:, ::-1]
    return np.ascontiguousarray(out, dtype=np.float32)


def to_tensor(images: Sequence[np.ndarray], dtype=torch.float32) -> torch.Tensor:
    """Stack H x W x 3 images in [0, 1] into a normalized N x 3 x H x W tensor."""
    batch = (np.stack(images).astype(np.float32) - IMAGENET_MEAN) / IMAGENET_STD
    return torch.from_numpy(batch).permute(0, 3, 1, 2).contiguous().to(dtype)


def normalize(image: np.ndarray) -> np.ndarray:
    """Single H x W x 3 image, normalized, channel-last (the ``embed`` input)."""
    return (np.asarray(image, dtype=np.float32) - IMAGENET_MEAN) / IMAGENET_STD


# ---------------------------------------------------------------------------
# records and I/O


def load_image(record: IdentityImageRecord, size: Sequence[int] | None = None) -> np.ndarray:
    """Pixels of a record, bilinearly resized to ``size`` when given."""
    if record.pixels is not None:
        img = np.asarray(record.pixels, dtype=np.float32)
    else:
        try:
            with Image.open(record.path) as im:
                img = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
        except OSError as exc:
            raise DataError(f"cannot read image {record.path}: {exc}") from exc
    return resize_bilinear(img, size) if size is not None else img


def parse_image_name(name: str) -> tuple[int, int, int] | None:
    """(identity, camera, rate) from a Market-1501 style file name, or None."""
    stem = os.path.splitext(os.path.basename(name))[0]
    m = _NAME_RE.match(stem)
    if not m:
        return None
    r = _RATE_RE.search(stem)
    return int(m["pid"]), int(m["cam"]), int(r["rate"]) if r else 1


def read_dataset(directory) -> list[IdentityImageRecord]:
    """Ingest ``<pid>_c<cam>...<ext>`` files; negative pids (junk) are skipped."""
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"dataset directory not found: {directory}")
    records = []
    for path in sorted(directory.iterdir()):
        if path.suffix.lower() not in IMAGE_EXTENSIONS:
            continue
        parsed = parse_image_name(path.name)
        if parsed is None:
            raise DataError(f"malformed image name (expected <pid>_c<cam>...): {path.name}")
        pid, cam, rate = parsed
        if pid < 0:
            continue
        with Image.open(path) as im:
            w, h = im.size
        records.append(
            IdentityImageRecord(
                identity_id=pid,
                camera_id=cam,
                image_id=path.stem,
                path=str(path),
                native_size=(h, w),
                is_synthetic_lr=rate > 1,
                down_rate=rate,
            )
        )
    if not records:
        raise DataError(f"no images found in {directory}")
    return records


def save_image(path, image: np.ndarray) -> None:
    arr = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def write_dataset(records: Iterable[IdentityImageRecord], directory) -> list[IdentityImageRecord]:
    """Write in-memory records as PNGs named ``<image_id>.png``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    out = []
    for rec in records:
        path = directory / f"{rec.image_id}.png"
        save_image(path, load_image(rec))
        out.append(replace(rec, path=str(path), pixels=None))
    return out


def write_mlr_copy(records: Sequence[IdentityImageRecord], directory, rates: Sequence[int]) -> list[IdentityImageRecord]:
    """HR images plus one natively down-sampled copy per rate (``_r<rate>`` suffix)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    out = []
    for rec in records:
        img = load_image(rec)
        size = img.shape[:2]
        base = rec.image_id
        save_image(directory / f"{base}.png", img)
        out.append(replace(rec, path=str(directory / f"{base}.png"), pixels=None, native_size=size))
        for r in rates:
            small = resize_bilinear(img, downsampled_size(size, r))
            name = f"{base}_r{r}.png"
            save_image(directory / name, small)
            out.append(
                replace(
                    rec,
                    image_id=f"{base}_r{r}",
                    path=str(directory / name),
                    pixels=None,
                    native_size=small.shape[:2],
                    is_synthetic_lr=True,
                    down_rate=int(r),
                )
            )
    return out


def manifest(records: Sequence[IdentityImageRecord]) -> dict:
    """Counts per identity and per down-sampling rate."""
    per_identity = Counter(r.identity_id for r in records)
    per_rate = Counter(r.down_rate for r in records)
    return {
        "num_images": len(records),
        "num_identities": len(per_identity),
        "per_identity": {str(k): per_identity[k] for k in sorted(per_identity)},
        "per_rate": {str(k): per_rate[k] for k in sorted(per_rate)},
    }


def write_manifest(path, data: dict) -> None:
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# synthetic fixture


def make_fixture(
    num_identities: int = 10,
    images_per_camera: int = 4,
    cameras: int = 2,
    size: Sequence[int] = DESK_SIZE,
    seed: int = 0,
) -> list[IdentityImageRecord]:
    """Procedural pedestrians: each identity has its own torso/leg colours and stripes.

    Camera 1 is clean, camera 2 adds stronger noise and a colour cast.
    """
    if num_identities < 1 or images_per_camera < 1 or cameras < 1:
        raise DomainError("fixture needs at least one identity, camera and image")
    h, w = int(size[0]), int(size[1])
    records = []
    for pid in range(num_identities):
        rng = np.random.default_rng([seed, pid])
        hue = (pid / num_identities + 0.05 * rng.random()) % 1.0
        torso = np.array(colorsys.hsv_to_rgb(hue, 0.55 + 0.4 * rng.random(), 0.55 + 0.4 * rng.random()))
        legs = np.array(colorsys.hsv_to_rgb((hue + 0.5 + 0.3 * rng.random()) % 1.0, 0.6, 0.3 + 0.5 * rng.random()))
        stripe = np.array(colorsys.hsv_to_rgb((hue + 0.33) % 1.0, 0.3 + 0.6 * rng.random(), 0.9))
        period = int(rng.integers(3, 7)) * max(1, h // 32)
        vertical = pid % 3 == 1
        plain = pid % 3 == 2
        for cam in range(1, cameras + 1):
            noise = 0.02 if cam == 1 else 0.06
            cast = np.zeros(3) if cam == 1 else np.array([0.05, -0.02, -0.04])
            for j in range(images_per_camera):
                img_rng = np.random.default_rng([seed, pid, cam, j])
                img = np.empty((h, w, 3))
                img[:] = 0.35 + 0.3 * img_rng.random()
                dy = int(img_rng.integers(-h // 16, h // 16 + 1))
                dx = int(img_rng.integers(-w // 16, w // 16 + 1))
                top, mid, bottom = h // 8 + dy, h // 2 + dy, h - h // 16 + dy
                left, right = w // 4 + dx, w - w // 4 + dx
                ys, xs = np.mgrid[0:h, 0:w]
                body = (xs >= left) & (xs < right)
                t = body & (ys >= top) & (ys < mid)
                img[t] = torso
                if not plain:
                    coord = xs if vertical else ys
                    img[t & ((coord // period) % 2 == 0)] = stripe
                img[body & (ys >= mid) & (ys < bottom)] = legs
                head = (ys >= top - h // 10) & (ys < top) & (xs >= left + w // 8) & (xs < right - w // 8)
                img[head] = (0.85, 0.7, 0.55)
                img = img * (0.9 + 0.2 * img_rng.random()) + cast
                img = img + img_rng.normal(0.0, noise, img.shape)
                records.append(
                    IdentityImageRecord(
                        identity_id=pid,
                        camera_id=cam,
                        image_id=f"{pid:04d}_c{cam}_{j:03d}",
                        pixels=np.clip(img, 0.0, 1.0).astype(np.float32),
                        native_size=(h, w),
                    )
                )
    return records


# ---------------------------------------------------------------------------
# MLR sampling


def group_by_identity(records: Iterable[IdentityImageRecord]) -> dict[int, list[IdentityImageRecord]]:
    groups = defaultdict(list)
    for r in records:
        groups[r.identity_id].append(r)
    return {pid: sorted(rs, key=lambda r: r.image_id) for pid, rs in sorted(groups.items())}


class MLRTrainingSet:
    """Draws (LR-or-HR query, HR gallery, query level) training triplets.

    Query rates are uniform over ``{1} | rates``. The gallery image shares
    the query's identity with probability ``positive_fraction``.
    """

    def __init__(
        self,
        hr_records: Sequence[IdentityImageRecord],
        rates: Sequence[int] = (2, 3, 4),
        known_ratios: Sequence = DEFAULT_RATIOS,
        size: Sequence[int] = CANONICAL_SIZE,
        augmentation: AugmentationConfig | None = None,
        positive_fraction: float = 0.5,
    ):
        self.rates = (1,) + tuple(int(r) for r in sorted(set(rates)) if int(r) != 1)
        self.known_ratios = tuple(known_ratios)
        self.size = tuple(size)
        self.augmentation = augmentation
        self.positive_fraction = positive_fraction
        self.excluded = []
        groups = group_by_identity(r for r in hr_records if r.down_rate == 1)
        for pid, rs in list(groups.items()):
            if len(rs) < 2:
                self.excluded.append({"identity_id": pid, "reason": f"only {len(rs)} HR image"})
                log.warning("identity %s excluded from training: fewer than 2 HR images", pid)
                del groups[pid]
        if not groups:
            raise DataError("training set is empty after excluding identities with < 2 images")
        self.groups = groups
        self.identities = list(groups)
        self.label_of = {pid: i for i, pid in enumerate(self.identities)}
        self.records = [r for rs in groups.values() for r in rs]
        self.levels = {r: quantize_resolution(Fraction(1, r), self.known_ratios) for r in self.rates}
        self._pixels: dict[tuple[str, int], np.ndarray] = {}

    def __len__(self) -> int:
        return len(self.records)

    @property
    def num_classes(self) -> int:
        return len(self.identities)

    def pixels(self, record: IdentityImageRecord, rate: int = 1) -> np.ndarray:
        key = (record.image_id, rate)
        if key not in self._pixels:
            hr = load_image(record, self.size)
            self._pixels[key] = hr if rate == 1 else synthesize_lr(hr, rate)
        return self._pixels[key]

    def _finish(self, image, rng):
        if self.augmentation is None:
            return image
        return augment(image, self.augmentation, rng)

    def sample(self, rng: np.random.Generator) -> TrainSample:
        query = self.records[int(rng.integers(len(self.records)))]
        rate = self.rates[int(rng.integers(len(self.rates)))]
        if rng.random() < self.positive_fraction or len(self.identities) == 1:
            pool = [r for r in self.groups[query.identity_id] if r.image_id != query.image_id]
        else:
            others = [pid for pid in self.identities if pid != query.identity_id]
            pool = self.groups[others[int(rng.integers(len(others)))]]
        gallery = pool[int(rng.integers(len(pool)))]
        return TrainSample(
            query_image=self._finish(self.pixels(query, rate), rng),
            gallery_image=self._finish(self.pixels(gallery, 1), rng),
            query_level=self.levels[rate],
            query_label=self.label_of[query.identity_id],
            gallery_label=self.label_of[gallery.identity_id],
            query_rate=rate,
        )

    def sample_batch(self, batch_size: int, rng: np.random.Generator) -> list[TrainSample]:
        return [self.sample(rng) for _ in range(batch_size)]


def make_mlr_training_set(hr_records, rates=(2, 3, 4), known_ratios=None, **kwargs) -> MLRTrainingSet:
    """Training triplet source over HR records and their synthetic LR versions."""
    if known_ratios is None:
        known_ratios = DEFAULT_RATIOS if set(rates) <= {2, 3, 4} else ratios_from_rates(rates)
    return MLRTrainingSet(hr_records, rates, known_ratios, **kwargs)


def make_mlr_query_gallery(
    test_records: Sequence[IdentityImageRecord],
    rates: Sequence[int] = (2, 3, 4),
    trial_seed: int = 0,
) -> tuple[list[QueryItem], list[IdentityImageRecord]]:
    """One random HR gallery image per identity; every other image becomes a
    query down-sampled at a rate drawn from ``rates``."""
    rates = tuple(int(r) for r in rates)
    if not rates:
        raise DomainError("need at least one query rate")
    rng = np.random.default_rng(trial_seed)
    queries, gallery = [], []
    for pid, rs in group_by_identity(r for r in test_records if r.down_rate == 1).items():
        g = int(rng.integers(len(rs)))
        gallery.append(rs[g])
        if len(rs) == 1:
            log.warning("identity %s has a single image: gallery only, no query", pid)
        for i, rec in enumerate(rs):
            if i != g:
                queries.append(QueryItem(rec, rates[int(rng.integers(len(rates)))]))
    return queries, gallery
