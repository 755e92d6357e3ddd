"""Dataset ingestion, the K-trial known/unknown split protocol and batching.

Random streams: every concern (splits, shuffling, augmentation,
descriptors, init, synthetic data) draws from its own PCG64 generator keyed
by ``(master_seed, concern, *extra keys)`` through ``SeedSequence`` spawn
keys, so toggling one concern never shifts the draws of another.
"""

from __future__ import annotations

import ast
import json
import math
import struct
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

STREAMS = {"splits": 0, "shuffle": 1, "augment": 2, "descriptors": 3, "init": 4, "synthetic": 5, "noise": 6}
NPY_MAGIC = b"\x93NUMPY"
NPY_DTYPES = {"|u1": np.uint8, "<u1": np.uint8, "<i8": np.int64}
STD_FLOOR = 1e-6


def stream(master_seed: int, concern: str, *keys: int) -> np.random.Generator:
    seq = np.random.SeedSequence(int(master_seed), spawn_key=(STREAMS[concern], *(int(k) for k in keys)))
    return np.random.Generator(np.random.PCG64(seq))


class DataError(ValueError):
    """Problem with input data files."""


class NpyFormatError(DataError):
    def __init__(self, kind: str, message: str):
        self.kind = kind
        super().__init__(f"[{kind}] {message}")


# ---------------------------------------------------------------------------
# NPY / NPZ


def parse_npy(raw: bytes, source: str = "<bytes>") -> np.ndarray:
    """Decode an NPY v1.0 buffer holding a C-ordered uint8 or int64 array."""
    if raw[:6] != NPY_MAGIC:
        raise NpyFormatError("magic", f"{source}: missing \\x93NUMPY magic")
    if len(raw) < 10:
        raise NpyFormatError("truncated", f"{source}: header cut short")
    major, minor = raw[6], raw[7]
    if (major, minor) != (1, 0):
        raise NpyFormatError("version", f"{source}: NPY version {major}.{minor} unsupported")
    (header_len,) = struct.unpack("<H", raw[8:10])
    start = 10 + header_len
    if len(raw) < start:
        raise NpyFormatError("truncated", f"{source}: header cut short")
    try:
        header = ast.literal_eval(raw[10:start].decode("latin1"))
        descr, fortran, shape = header["descr"], header["fortran_order"], tuple(header["shape"])
    except (ValueError, SyntaxError, KeyError, TypeError) as exc:
        raise NpyFormatError("header", f"{source}: unreadable header ({exc})") from None
    if fortran:
        raise NpyFormatError("order", f"{source}: Fortran-ordered arrays are unsupported")
    if descr not in NPY_DTYPES:
        raise NpyFormatError("dtype", f"{source}: dtype {descr!r} unsupported (uint8 or int64 only)")
    dtype = np.dtype(NPY_DTYPES[descr]).newbyteorder("<")
    count = math.prod(shape)
    payload = raw[start:start + count * dtype.itemsize]
    if len(payload) != count * dtype.itemsize:
        raise NpyFormatError("truncated", f"{source}: expected {count * dtype.itemsize} data bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype=dtype).astype(NPY_DTYPES[descr]).reshape(shape)


def load_npy(path) -> np.ndarray:
    return parse_npy(Path(path).read_bytes(), str(path))


def load_npz_member(path, member: str) -> np.ndarray:
    name = member if member.endswith(".npy") else member + ".npy"
    try:
        with zipfile.ZipFile(path) as zf:
            raw = zf.read(name)
    except KeyError:
        raise DataError(f"{path}: archive has no member {name!r}") from None
    except zipfile.BadZipFile as exc:
        raise DataError(f"{path}: {exc}") from None
    return parse_npy(raw, f"{path}:{name}")


@dataclass
class ImageDataset:
    images: np.ndarray        # N×H×W×ch uint8 (or N×features for vector data)
    labels: np.ndarray        # N int64 class ids in [0, C_total)
    split: str = "train"
    class_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if len(self.images) != len(self.labels):
            raise DataError(f"{self.split}: {len(self.images)} images but {len(self.labels)} labels")
        if self.labels.size and self.labels.min() < 0:
            raise DataError(f"{self.split}: negative class labels")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1 if self.labels.size else 0


def _as_images(images: np.ndarray) -> np.ndarray:
    # grayscale MedMNIST exports omit the channel axis
    return images[..., None] if images.ndim == 3 else images


def load_dataset(path) -> dict[str, ImageDataset]:
    """Load ``train`` and ``test`` splits from a directory of NPY files or an NPZ archive."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such dataset")
    out = {}
    for part in ("train", "test"):
        if path.is_dir():
            images = load_npy(path / f"{part}_images.npy")
            labels = load_npy(path / f"{part}_labels.npy")
        else:
            images = load_npz_member(path, f"{part}_images")
            labels = load_npz_member(path, f"{part}_labels")
        out[part] = ImageDataset(_as_images(images), labels, part)
    return out


# ---------------------------------------------------------------------------
# split protocol


@dataclass
class OpenSetSplit:
    k: int
    known: list[int]
    unknown: list[int]
    master_seed: int
    pinned: list[int] = field(default_factory=list)

    def __post_init__(self):
        if set(self.known) & set(self.unknown):
            raise DataError(f"trial {self.k}: known and unknown overlap")
        if not set(self.pinned) <= set(self.known):
            raise DataError(f"trial {self.k}: pinned classes must be known")

    @property
    def n_known(self) -> int:
        return len(self.known)

    @property
    def label_map(self) -> dict[int, int]:
        """Original class id -> training index ``0..C-1`` (ordered by id)."""
        return {c: i for i, c in enumerate(self.known)}

    def remap(self, labels) -> np.ndarray:
        lookup = np.full(max(self.known + self.unknown) + 1, -1, dtype=np.int64)
        for c, i in self.label_map.items():
            lookup[c] = i
        out = lookup[np.asarray(labels)]
        if (out < 0).any():
            raise DataError(f"trial {self.k}: remap of non-known class")
        return out

    def unmap(self, indices) -> np.ndarray:
        return np.asarray(self.known)[np.asarray(indices)]


def make_splits(n_classes: int, K: int, master_seed: int = 2023, pinned=(),
                n_known: int | None = None) -> list[OpenSetSplit]:
    """Draw ``K`` distinct known/unknown partitions of ``range(n_classes)``.

    Half the classes (rounded up) are known unless ``n_known`` says
    otherwise; ``pinned`` classes are known in every trial.
    """
    pinned = sorted(set(int(p) for p in pinned))
    n_known = math.ceil(n_classes / 2) if n_known is None else n_known
    if any(p < 0 or p >= n_classes for p in pinned):
        raise DataError(f"pinned classes {pinned} outside 0..{n_classes - 1}")
    if len(pinned) > n_known or n_known > n_classes or n_known < 1:
        raise DataError(f"cannot pin {len(pinned)} classes into a known set of {n_known}")
    free = [c for c in range(n_classes) if c not in pinned]
    n_draw = n_known - len(pinned)
    if K > math.comb(len(free), n_draw):
        raise DataError(f"only {math.comb(len(free), n_draw)} distinct splits exist, {K} requested")
    rng = stream(master_seed, "splits")
    seen, splits = set(), []
    while len(splits) < K:
        chosen = tuple(sorted(int(c) for c in rng.choice(free, size=n_draw, replace=False)))
        if chosen in seen:
            continue
        seen.add(chosen)
        known = sorted(pinned + list(chosen))
        unknown = [c for c in range(n_classes) if c not in known]
        splits.append(OpenSetSplit(len(splits), known, unknown, master_seed, pinned))
    return splits


def splits_to_json(splits, dataset: str = "") -> str:
    doc = {
        "dataset": dataset,
        "master_seed": splits[0].master_seed if splits else None,
        "pinned": splits[0].pinned if splits else [],
        "trials": [
            {"k": s.k, "known": s.known, "unknown": s.unknown,
             "label_map": {str(c): i for c, i in s.label_map.items()}}
            for s in splits
        ],
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def splits_from_json(text: str) -> tuple[str, list[OpenSetSplit]]:
    doc = json.loads(text)
    splits = []
    for trial in doc["trials"]:
        split = OpenSetSplit(trial["k"], list(trial["known"]), list(trial["unknown"]),
                             doc["master_seed"], list(doc.get("pinned", [])))
        stored = {int(c): i for c, i in trial.get("label_map", {}).items()}
        if stored and stored != split.label_map:
            raise DataError(f"trial {split.k}: label_map inconsistent with known list")
        splits.append(split)
    return doc.get("dataset", ""), splits


def write_split_file(path, splits, dataset: str = "") -> Path:
    path = Path(path)
    path.write_text(splits_to_json(splits, dataset))
    return path


def read_split_file(path) -> tuple[str, list[OpenSetSplit]]:
    return splits_from_json(Path(path).read_text())


# ---------------------------------------------------------------------------
# normalization and augmentation


def to_float(images) -> np.ndarray:
    images = np.asarray(images)
    if images.dtype == np.uint8:
        return images.astype(np.float64) / 255.0
    return images.astype(np.float64)


@dataclass
class ChannelStats:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, images) -> "ChannelStats":
        x = to_float(images)
        axes = tuple(range(x.ndim - 1))
        return cls(x.mean(axis=axes), x.std(axis=axes))

    def apply(self, images) -> np.ndarray:
        # a channel whose std is under the floor carries no signal and maps to 0
        live = self.std >= STD_FLOOR
        out = (to_float(images) - self.mean) / np.where(live, self.std, 1.0)
        return np.where(live, out, 0.0)

    def to_json(self) -> str:
        return json.dumps({"mean": self.mean.tolist(), "std": self.std.tolist()}, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ChannelStats":
        doc = json.loads(text)
        return cls(np.asarray(doc["mean"], dtype=np.float64), np.asarray(doc["std"], dtype=np.float64))


@dataclass
class AugmentConfig:
    pad: int = 4
    flip_prob: float = 0.5


def hflip(image: np.ndarray) -> np.ndarray:
    return image[:, ::-1]


def random_crop(image: np.ndarray, rng: np.random.Generator, pad: int = 4):
    """Zero-pad by ``pad`` and crop back to the original size; returns ``(image, (dy, dx))``."""
    h, w = image.shape[:2]
    padded = np.pad(image, ((pad, pad), (pad, pad)) + ((0, 0),) * (image.ndim - 2))
    dy, dx = (int(v) for v in rng.integers(0, 2 * pad + 1, size=2))
    return padded[dy:dy + h, dx:dx + w], (dy, dx)


def augment(image: np.ndarray, rng: np.random.Generator, stats: ChannelStats,
            config: AugmentConfig | None = None) -> np.ndarray:
    """Random crop, random horizontal flip, then per-channel standardization."""
    config = config or AugmentConfig()
    out, _ = random_crop(image, rng, config.pad)
    if rng.random() < config.flip_prob:
        out = hflip(out)
    return stats.apply(out)


def augment_batch(images: np.ndarray, rng: np.random.Generator, stats: ChannelStats,
                  config: AugmentConfig | None = None) -> np.ndarray:
    return np.stack([augment(img, rng, stats, config) for img in images])


# ---------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    images: np.ndarray
    labels: np.ndarray      # training indices 0..C-1
    indices: np.ndarray


def batch_indices(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    if batch_size < 1:
        raise ValueError("batch size must be positive")
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def iterate_batches(images, labels, batch_size: int, rng: np.random.Generator, transform=None):
    """Yield shuffled batches; the final short batch is kept."""
    for idx in batch_indices(len(labels), batch_size, rng):
        x = images[idx]
        yield Batch(transform(x) if transform is not None else x, labels[idx], idx)


@dataclass
class TrialData:
    """Arrays for one trial: training inputs are restricted to known classes."""

    split: OpenSetSplit
    x_train: np.ndarray
    y_train: np.ndarray           # 0..C-1
    x_known: np.ndarray
    y_known: np.ndarray           # 0..C-1
    x_unknown: np.ndarray
    c_unknown: np.ndarray         # original class ids of unknown test samples
    stats: ChannelStats


def select_trial(train: ImageDataset, test: ImageDataset, split: OpenSetSplit) -> TrialData:
    known_train = np.isin(train.labels, split.known)
    known_test = np.isin(test.labels, split.known)
    unknown_test = np.isin(test.labels, split.unknown)
    x_train = train.images[known_train]
    if len(x_train) == 0:
        raise DataError(f"trial {split.k}: no training samples of known classes")
    return TrialData(
        split=split,
        x_train=x_train,
        y_train=split.remap(train.labels[known_train]),
        x_known=test.images[known_test],
        y_known=split.remap(test.labels[known_test]),
        x_unknown=test.images[unknown_test],
        c_unknown=test.labels[unknown_test],
        stats=ChannelStats.fit(x_train),
    )


# ---------------------------------------------------------------------------
# synthetic data


def gaussian_mixture(n_classes: int = 8, per_class: int = 500, seed: int = 0, radius: float = 4.0,
                     std: float = 1.0, split: str = "train") -> ImageDataset:
    """Isotropic 2-D Gaussian blobs with centers evenly spaced on a circle.

    Train and test draws come from separate streams of the same seed.
    """
    key = {"train": 0, "test": 1}[split]
    rng = stream(seed, "synthetic", key)
    angles = 2 * np.pi * np.arange(n_classes) / n_classes
    centers = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    labels = np.repeat(np.arange(n_classes), per_class)
    points = centers[labels] + std * rng.standard_normal((len(labels), 2))
    return ImageDataset(points, labels, split, [f"blob{c}" for c in range(n_classes)])


def write_npy_dataset(directory, parts: dict[str, ImageDataset]) -> Path:
    """Write ``{part}_images.npy`` / ``{part}_labels.npy`` files (numpy's writer)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for part, ds in parts.items():
        np.save(directory / f"{part}_images.npy", ds.images)
        np.save(directory / f"{part}_labels.npy", ds.labels.astype(np.int64))
    return directory
