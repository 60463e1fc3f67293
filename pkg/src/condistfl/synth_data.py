"""Synthetic partially annotated "organ + tumor" images.

Every 64x64 image holds four non-overlapping elliptical organs, each in its
own intensity band, and organs A-C may carry a tumor blob strictly inside
them. Four clients each see only their own organ (and its tumor) in the
labels; an external set keeps the full labels.

Datasets are stored as ``.cdds`` files::

    b"CDDS" | u32 version | u32 count | u16 H | u16 W |
    count x (float32 image[H*W], u8 label[H*W])

all little-endian, one file per split per client.
"""
from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterator

import numpy as np

from .losses import ClassTopology

MAGIC = b"CDDS"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIIHH")

NUM_CLASSES = 8
CLASS_NAMES = ("background", "organA", "tumorA", "organB", "tumorB", "organC", "tumorC", "organD")
CLIENTS = ("A", "B", "C", "D")
# organ class and tumor class (None: organ without tumors) per client
ORGANS = {"A": (1, 2), "B": (3, 4), "C": (5, 6), "D": (7, None)}
SPLITS = ("train", "val", "test")
EXTERNAL = "external"


class PlacementError(RuntimeError):
    """Organs could not be placed without overlap within the retry budget."""


class DatasetFormatError(ValueError):
    """Malformed or truncated dataset file."""


# --------------------------------------------------------------------------- #
# Class layout
# --------------------------------------------------------------------------- #
def client_classes(client: str) -> tuple[int, ...]:
    organ, tumor = ORGANS[client]
    return (organ,) if tumor is None else (organ, tumor)


def client_topology(client: str) -> ClassTopology:
    """Foreground = the client's organ and tumor; one background group per other organ."""
    if client not in ORGANS:
        raise KeyError(f"unknown client {client!r}; expected one of {CLIENTS}")
    groups = [(0,)] + [client_classes(k) for k in CLIENTS if k != client]
    return ClassTopology(NUM_CLASSES, client_classes(client), tuple(groups))


def full_topology() -> ClassTopology:
    return ClassTopology(NUM_CLASSES, tuple(range(1, NUM_CLASSES)), ((0,),))


def partial_label(full: np.ndarray, client: str) -> np.ndarray:
    """Keep the client's classes, fold everything else into background."""
    keep = np.isin(full, client_classes(client))
    return np.where(keep, full, 0).astype(full.dtype)


# --------------------------------------------------------------------------- #
# Spec
# --------------------------------------------------------------------------- #
@dataclass(frozen=True)
class DatasetSpec:
    seed: int = 0
    image_size: int = 64
    train_samples: int = 64
    val_samples: int = 16
    test_samples: int = 16
    external_samples: int = 32
    background_mean: float = 0.0
    # per organ A, B, C, D
    organ_means: tuple[float, ...] = (0.25, 0.5, 0.75, 1.0)
    organ_radius: tuple[float, float] = (6.0, 12.0)
    tumor_shift: float = -0.125
    tumor_prob: float = 0.7
    intensity_jitter: float = 0.03
    noise_sigma: float = 0.05
    max_retries: int = 200

    def __post_init__(self):
        object.__setattr__(self, "organ_means", tuple(float(m) for m in self.organ_means))
        object.__setattr__(self, "organ_radius", tuple(float(r) for r in self.organ_radius))
        errors = []
        if self.image_size < 16 or self.image_size > 0xFFFF:
            errors.append(f"image_size must be in [16, 65535], got {self.image_size}")
        for name in ("train_samples", "val_samples", "test_samples", "external_samples"):
            if getattr(self, name) < 0:
                errors.append(f"{name} must be >= 0")
        if len(self.organ_means) != len(CLIENTS):
            errors.append(f"organ_means needs {len(CLIENTS)} entries, got {len(self.organ_means)}")
        lo, hi = self.organ_radius if len(self.organ_radius) == 2 else (0, -1)
        if not 2 <= lo <= hi:
            errors.append(f"organ_radius must be (lo, hi) with 2 <= lo <= hi, got {self.organ_radius}")
        if not 0 <= self.tumor_prob <= 1:
            errors.append(f"tumor_prob must be in [0, 1], got {self.tumor_prob}")
        if self.noise_sigma < 0 or self.intensity_jitter < 0:
            errors.append("noise_sigma and intensity_jitter must be >= 0")
        if self.max_retries < 1:
            errors.append("max_retries must be >= 1")
        if errors:
            raise ValueError("; ".join(errors))

    def split_sizes(self) -> dict[str, int]:
        return {"train": self.train_samples, "val": self.val_samples, "test": self.test_samples}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["organ_means"] = list(self.organ_means)
        d["organ_radius"] = list(self.organ_radius)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown dataset keys: {', '.join(unknown)}")
        d = dict(d)
        for k in ("organ_means", "organ_radius"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


# --------------------------------------------------------------------------- #
# Dataset container and file format
# --------------------------------------------------------------------------- #
@dataclass(eq=False)
class Dataset:
    """Images ``[n, 1, H, W]`` float32 and labels ``[n, H, W]`` uint8, read-only."""

    images: np.ndarray
    labels: np.ndarray
    name: str = ""

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.uint8)
        if self.images.ndim != 4 or self.images.shape[1] != 1:
            raise ValueError(f"images must be [n, 1, H, W], got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],) + self.images.shape[2:]:
            raise ValueError(f"labels {self.labels.shape} do not match images {self.images.shape}")
        self.images.setflags(write=False)
        self.labels.setflags(write=False)

    def __len__(self):
        return self.images.shape[0]

    @property
    def spatial(self) -> tuple[int, int]:
        return self.images.shape[2], self.images.shape[3]

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.images.shape == other.images.shape and self.images.tobytes() == other.images.tobytes()
                and self.labels.tobytes() == other.labels.tobytes())

    def to_bytes(self) -> bytes:
        n = len(self)
        H, W = self.spatial
        out = [_HEADER.pack(MAGIC, FORMAT_VERSION, n, H, W)]
        imgs = self.images.astype("<f4").reshape(n, H * W)
        for i in range(n):
            out.append(imgs[i].tobytes())
            out.append(self.labels[i].tobytes())
        return b"".join(out)

    @classmethod
    def from_bytes(cls, buf: bytes, name: str = "") -> "Dataset":
        if len(buf) < _HEADER.size:
            raise DatasetFormatError(f"dataset file too short for header ({len(buf)} bytes)")
        magic, version, n, H, W = _HEADER.unpack_from(buf, 0)
        if magic != MAGIC:
            raise DatasetFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
        if version != FORMAT_VERSION:
            raise DatasetFormatError(f"dataset format version {version}, expected {FORMAT_VERSION}")
        rec = H * W * 5
        expected = _HEADER.size + n * rec
        if len(buf) != expected:
            raise DatasetFormatError(f"dataset size {len(buf)} bytes, header implies {expected}")
        raw = np.frombuffer(buf, dtype=np.uint8, offset=_HEADER.size).reshape(n, rec)
        images = raw[:, : 4 * H * W].copy().view("<f4").reshape(n, 1, H, W)
        labels = raw[:, 4 * H * W:].reshape(n, H, W)
        if labels.size and labels.max() >= NUM_CLASSES:
            raise DatasetFormatError(f"label value {int(labels.max())} outside [0, {NUM_CLASSES})")
        return cls(images.astype(np.float32), labels, name)


def save_dataset(ds: Dataset, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(ds.to_bytes())
    return path


def load_dataset(path) -> Dataset:
    path = Path(path)
    return Dataset.from_bytes(path.read_bytes(), name=path.stem)


# --------------------------------------------------------------------------- #
# Iteration
# --------------------------------------------------------------------------- #
def _seed_words(seed) -> list[int]:
    return [int(s) for s in seed] if isinstance(seed, (tuple, list)) else [int(seed)]


def iterate(ds: Dataset, batch: int, seed, epoch: int = 0) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """One epoch of ``(images, labels)`` batches in a seeded order; the last may be short.

    ``seed`` is an int or a tuple of non-negative ints.
    """
    if batch < 1:
        raise ValueError(f"batch must be >= 1, got {batch}")
    order = np.random.default_rng(_seed_words(seed) + [epoch]).permutation(len(ds))
    for i in range(0, len(ds), batch):
        idx = order[i:i + batch]
        yield ds.images[idx], ds.labels[idx]


def batch_stream(ds: Dataset, batch: int, seed) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Endless full batches, reshuffling every epoch."""
    if len(ds) < batch:
        raise ValueError(f"dataset of {len(ds)} samples cannot fill a batch of {batch}")
    epoch = 0
    while True:
        for x, y in iterate(ds, batch, seed, epoch):
            if len(x) == batch:
                yield x, y
        epoch += 1


# --------------------------------------------------------------------------- #
# Generation
# --------------------------------------------------------------------------- #
def _ellipse(shape, cy, cx, a, b, theta):
    """Boolean mask and the normalised radius field of a rotated ellipse."""
    yy, xx = np.mgrid[0:shape[0], 0:shape[1]].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    c, s = np.cos(theta), np.sin(theta)
    u = (dx * c + dy * s) / a
    v = (-dx * s + dy * c) / b
    r = np.sqrt(u * u + v * v)
    return r <= 1.0, u, v


def _dilate(mask: np.ndarray, k: int) -> np.ndarray:
    out = mask.copy()
    for _ in range(k):
        grown = out.copy()
        grown[1:] |= out[:-1]
        grown[:-1] |= out[1:]
        grown[:, 1:] |= out[:, :-1]
        grown[:, :-1] |= out[:, 1:]
        out = grown
    return out


def generate_sample(spec: DatasetSpec, rng: np.random.Generator, tag: str = "") -> tuple[np.ndarray, np.ndarray]:
    """One image ``[1, H, W]`` and its full label ``[H, W]``."""
    H = W = spec.image_size
    label = np.zeros((H, W), dtype=np.uint8)
    image = np.full((H, W), spec.background_mean, dtype=np.float64)
    occupied = np.zeros((H, W), dtype=bool)
    lo, hi = spec.organ_radius
    for k, client in enumerate(CLIENTS):
        organ, tumor = ORGANS[client]
        for _attempt in range(spec.max_retries):
            a, b = rng.uniform(lo, hi, size=2)
            theta = rng.uniform(0, np.pi)
            m = max(a, b) + 1
            if 2 * m >= H:
                continue
            cy, cx = rng.uniform(m, H - m), rng.uniform(m, W - m)
            mask, u, v = _ellipse((H, W), cy, cx, a, b, theta)
            if mask.any() and not (_dilate(mask, 2) & occupied).any():
                break
        else:
            raise PlacementError(
                f"could not place {CLASS_NAMES[organ]} after {spec.max_retries} attempts (seed {spec.seed}, {tag})"
            )
        occupied |= mask
        level = spec.organ_means[k] + rng.normal(0, spec.intensity_jitter)
        label[mask] = organ
        image[mask] = level
        if tumor is not None and rng.random() < spec.tumor_prob:
            # a circle of radius f in the organ's normalised frame, kept 0.15 clear of the rim
            f = rng.uniform(0.25, 0.4)
            reach = rng.uniform(0, 1.0 - f - 0.15)
            phi = rng.uniform(0, 2 * np.pi)
            tmask = np.hypot(u - reach * np.cos(phi), v - reach * np.sin(phi)) <= f
            tmask &= mask
            if tmask.any():
                label[tmask] = tumor
                image[tmask] = level + spec.tumor_shift
    image += rng.normal(0, spec.noise_sigma, size=(H, W))
    return image.astype(np.float32)[None], label


def _generate_split(spec: DatasetSpec, stream: int, n: int, name: str) -> tuple[np.ndarray, np.ndarray]:
    H = spec.image_size
    images = np.zeros((n, 1, H, H), dtype=np.float32)
    labels = np.zeros((n, H, H), dtype=np.uint8)
    for i in range(n):
        rng = np.random.default_rng([spec.seed, stream, i])
        images[i], labels[i] = generate_sample(spec, rng, f"{name} sample {i}")
    return images, labels


@dataclass
class FederatedData:
    """Per-client partially labelled splits plus the fully labelled external test set."""

    spec: DatasetSpec
    clients: dict[str, dict[str, Dataset]] = field(default_factory=dict)
    external: Dataset | None = None


def generate(spec: DatasetSpec) -> FederatedData:
    data = FederatedData(spec)
    for ci, client in enumerate(CLIENTS):
        data.clients[client] = {}
        for si, split in enumerate(SPLITS):
            name = f"client_{client}/{split}"
            imgs, full = _generate_split(spec, 1 + 3 * ci + si, spec.split_sizes()[split], name)
            data.clients[client][split] = Dataset(imgs, partial_label(full, client), name)
    imgs, full = _generate_split(spec, 0, spec.external_samples, "external/test")
    data.external = Dataset(imgs, full, "external/test")
    return data


def dataset_path(root, client: str | None, split: str = "test") -> Path:
    """``root/client_X/split.cdds``, or ``root/external/test.cdds`` when ``client`` is None."""
    root = Path(root)
    return root / EXTERNAL / "test.cdds" if client is None else root / f"client_{client}" / f"{split}.cdds"


def write_data(data: FederatedData, root) -> Path:
    """Write all splits and a ``spec.toml`` provenance sidecar."""
    import tomli_w

    root = Path(root)
    for client, splits in data.clients.items():
        for split, ds in splits.items():
            save_dataset(ds, dataset_path(root, client, split))
    if data.external is not None:
        save_dataset(data.external, dataset_path(root, None))
    (root / "spec.toml").write_text(tomli_w.dumps({"data": data.spec.to_dict()}))
    return root


def read_data(root) -> FederatedData:
    from ._toml import load_toml

    root = Path(root)
    sidecar = root / "spec.toml"
    if not sidecar.exists():
        raise FileNotFoundError(f"no spec.toml under {root}; run gen-data first")
    spec = DatasetSpec.from_dict(load_toml(sidecar).get("data", {}))
    data = FederatedData(spec)
    for client in CLIENTS:
        data.clients[client] = {s: load_dataset(dataset_path(root, client, s)) for s in SPLITS}
    ext = dataset_path(root, None)
    data.external = load_dataset(ext) if ext.exists() else None
    return data
