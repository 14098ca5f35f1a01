"""MNIST IDX files, the fMRI CSV interchange format, the synthetic voxel
simulator and stratified fold assignment."""

from __future__ import annotations

import csv
import gzip
import importlib.util
import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
NUM_PIXELS = 784


class FormatError(ValueError):
    pass


# -- IDX ------------------------------------------------------------------------


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def parse_idx(raw: bytes, expected_magic: int, name: str = "<idx>") -> np.ndarray:
    if len(raw) < 4:
        raise FormatError(f"{name}: truncated header at offset 0")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise FormatError(f"{name}: bad magic 0x{magic:08x} at offset 0, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise FormatError(f"{name}: truncated dimension block at offset 4")
    dims = struct.unpack(f">{ndim}I", raw[4:header_end])
    count = int(np.prod(dims, dtype=np.int64))
    if len(raw) - header_end < count:
        raise FormatError(f"{name}: truncated data at offset {len(raw)}, expected {count} bytes from offset {header_end}")
    if len(raw) - header_end > count:
        raise FormatError(f"{name}: {len(raw) - header_end - count} trailing bytes after offset {header_end + count}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header_end).reshape(dims)


def encode_idx(array: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(array, dtype=np.uint8)
    magic = 0x00000800 | arr.ndim
    return struct.pack(f">I{arr.ndim}I", magic, *arr.shape) + arr.tobytes()


def write_idx(path, array: np.ndarray) -> None:
    Path(path).write_bytes(encode_idx(array))


def load_mnist(images_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    """Images scaled to [0, 1] as float32 ``N×28×28`` and integer labels."""
    pixels = parse_idx(_read_bytes(images_path), IMAGE_MAGIC, str(images_path))
    labels = parse_idx(_read_bytes(labels_path), LABEL_MAGIC, str(labels_path))
    if pixels.shape[0] != labels.shape[0]:
        raise FormatError(f"{images_path}: {pixels.shape[0]} images at offset 4 but {labels_path} holds {labels.shape[0]} labels")
    return (pixels.astype(np.float32) / 255.0), labels.astype(np.int64)


MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def _resolve(directory: Path, stem: str) -> Path:
    for candidate in (directory / stem, directory / f"{stem}.gz"):
        if candidate.exists():
            return candidate
    raise FileNotFoundError(f"{directory / stem}[.gz] not found")


def load_mnist_dir(directory, split: str = "train") -> tuple[np.ndarray, np.ndarray]:
    directory = Path(directory)
    img, lab = MNIST_FILES[split]
    return load_mnist(_resolve(directory, img), _resolve(directory, lab))


def bundled_mnist_5k() -> tuple[np.ndarray, np.ndarray]:
    """The 5000-digit MNIST sample shipped inside ``mlxtend`` as uint8 pixels and labels."""
    spec = importlib.util.find_spec("mlxtend")
    if spec is None or spec.origin is None:
        raise FileNotFoundError("mlxtend is not installed; `pip install --no-deps mlxtend` to get the 5k MNIST sample")
    path = Path(spec.origin).parent / "data" / "data" / "mnist_5k.csv.gz"
    table = np.loadtxt(gzip.open(path), delimiter=",", dtype=np.int64)
    return table[:, :NUM_PIXELS].reshape(-1, 28, 28).astype(np.uint8), table[:, NUM_PIXELS]


def export_mnist_subset(out_dir, test_per_class: int = 100, seed: int = 0) -> dict[str, int]:
    """Split the bundled 5k sample per class into IDX train/test files under ``out_dir``."""
    pixels, labels = bundled_mnist_5k()
    rng = np.random.default_rng(seed)
    test_idx, train_idx = [], []
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        test_idx.extend(idx[:test_per_class])
        train_idx.extend(idx[test_per_class:])
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    counts = {}
    for split, idx in (("train", np.sort(train_idx)), ("test", np.sort(test_idx))):
        img_name, lab_name = MNIST_FILES[split]
        write_idx(out / img_name, pixels[idx])
        write_idx(out / lab_name, labels[idx])
        counts[split] = len(idx)
    return counts


# -- voxel datasets ----------------------------------------------------------------


@dataclass
class VoxelDataset:
    images: np.ndarray  # N×28×28, float64 in [0, 1]
    voxels: np.ndarray  # N×V
    labels: np.ndarray  # N
    folds: np.ndarray | None = None
    provenance: str = "real"
    signal_voxels: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.voxels = np.asarray(self.voxels, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = self.images.shape[0]
        if self.voxels.ndim != 2 or self.voxels.shape[0] != n or self.labels.shape != (n,):
            raise FormatError(f"inconsistent dataset: images {self.images.shape}, voxels {self.voxels.shape}, labels {self.labels.shape}")
        if self.folds is not None:
            self.folds = np.asarray(self.folds, dtype=np.int64)

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def num_voxels(self) -> int:
        return self.voxels.shape[1]

    def subset(self, idx) -> "VoxelDataset":
        idx = np.asarray(idx)
        return VoxelDataset(self.images[idx], self.voxels[idx], self.labels[idx],
                            None if self.folds is None else self.folds[idx], self.provenance, self.signal_voxels)


def write_fmri_csv(dataset: VoxelDataset, path) -> None:
    """One row per sample: label, 784 pixels, V voxels; the header names every column."""
    buf = io.StringIO()
    v = dataset.num_voxels
    header = ["label"] + [f"p{i}" for i in range(NUM_PIXELS)] + [f"v{i}" for i in range(v)]
    buf.write(",".join(header) + "\n")
    for label, img, vox in zip(dataset.labels, dataset.images.reshape(len(dataset), -1), dataset.voxels):
        buf.write(str(int(label)))
        buf.write(",")
        buf.write(",".join(map(repr, map(float, img))))
        buf.write(",")
        buf.write(",".join(map(repr, map(float, vox))))
        buf.write("\n")
    Path(path).write_text(buf.getvalue())


def load_fmri_csv(path) -> VoxelDataset:
    text = Path(path).read_text()
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise FormatError(f"{path}: empty file")
    header = rows[0]
    if not header or header[0] != "label":
        raise FormatError(f"{path}: row 1 is not a header starting with 'label'")
    pix = header[1:1 + NUM_PIXELS]
    if pix != [f"p{i}" for i in range(NUM_PIXELS)]:
        raise FormatError(f"{path}: header must list p0..p{NUM_PIXELS - 1} after 'label'")
    vox_names = header[1 + NUM_PIXELS:]
    if not vox_names or vox_names != [f"v{i}" for i in range(len(vox_names))]:
        raise FormatError(f"{path}: header must declare voxel columns v0..v(V-1)")
    v = len(vox_names)
    width = 1 + NUM_PIXELS + v
    if len(rows) < 2:
        raise FormatError(f"{path}: header declares V={v} but there are no sample rows")
    labels, images, voxels = [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != width:
            raise FormatError(f"{path}: row {lineno} has {len(row)} fields, expected {width}")
        try:
            label = int(row[0])
            values = np.array([float(x) for x in row[1:]], dtype=np.float64)
        except ValueError as exc:
            raise FormatError(f"{path}: row {lineno}: non-numeric field ({exc})") from None
        if not 0 <= label <= 9:
            raise FormatError(f"{path}: row {lineno}: label {label} outside 0..9")
        if not np.all(np.isfinite(values)):
            raise FormatError(f"{path}: row {lineno}: non-finite value")
        labels.append(label)
        images.append(values[:NUM_PIXELS].reshape(28, 28))
        voxels.append(values[NUM_PIXELS:])
    return VoxelDataset(np.stack(images), np.stack(voxels), np.array(labels), provenance="real")


# -- simulator ------------------------------------------------------------------------


@dataclass(frozen=True)
class SynthConfig:
    signal_count: int = 100
    noise_sigma: float = 0.25
    seed: int = 0
    voxels: int = 3092

    def __post_init__(self):
        if not 0 <= self.signal_count <= self.voxels:
            raise ValueError(f"signal_count {self.signal_count} outside 0..{self.voxels}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")


def synthesize_fmri(capsnet, images, labels, cfg: SynthConfig = SynthConfig()) -> VoxelDataset:
    """Voxel responses driven linearly by each stimulus's true-class capsule.

    Signal voxel v responds ``w_v · capsule + b_v + N(0, sigma^2)``; ``w_v`` is
    a standard normal draw rescaled so the noiseless response has unit
    variance across the stimulus set, ``b_v`` is standard normal.  Every
    other voxel is pure N(0, 1) noise.  Stimuli are normally digits 6 and 9.
    """
    from .capsnet import predict_capsules

    images = np.asarray(images, dtype=np.float64).reshape(-1, 28, 28)
    labels = np.asarray(labels, dtype=np.int64)
    caps = predict_capsules(capsnet, images[:, None].astype(np.float32)).astype(np.float64)
    feats = caps[np.arange(len(labels)), labels]
    return synthesize_from_features(images, labels, feats, cfg)


def synthesize_from_features(images, labels, features: np.ndarray, cfg: SynthConfig) -> VoxelDataset:
    rng = np.random.default_rng(cfg.seed)
    n, d = features.shape
    signal = np.sort(rng.choice(cfg.voxels, size=cfg.signal_count, replace=False))
    w = rng.standard_normal((cfg.signal_count, d))
    b = rng.standard_normal(cfg.signal_count)
    base = rng.standard_normal((n, cfg.voxels))
    response = features @ w.T
    scale = response.std(axis=0)
    scale[scale == 0] = 1.0
    voxels = base.copy()
    voxels[:, signal] = response / scale + b + cfg.noise_sigma * base[:, signal]
    provenance = f"synthetic(seed={cfg.seed}, sigma={cfg.noise_sigma!r}, signal_count={cfg.signal_count})"
    return VoxelDataset(images, voxels, labels, provenance=provenance, signal_voxels=signal)


def select_stimuli(images: np.ndarray, labels: np.ndarray, per_class: int = 50, classes=(6, 9),
                  seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``per_class`` digits of each class (default 50 sixes and 50 nines)."""
    rng = np.random.default_rng(seed)
    picks = []
    for c in classes:
        pool = np.flatnonzero(np.asarray(labels) == c)
        if len(pool) < per_class:
            raise ValueError(f"only {len(pool)} digits of class {c}, need {per_class}")
        picks.append(np.sort(rng.choice(pool, size=per_class, replace=False)))
    idx = np.concatenate(picks)
    return np.asarray(images)[idx], np.asarray(labels)[idx]


# -- folds ------------------------------------------------------------------------------


def kfold_split(n: int, k: int, seed: int = 0, labels=None) -> np.ndarray:
    """Fold index per sample, stratified by label, sizes differing by at most one."""
    if k < 1 or k > n:
        raise ValueError(f"cannot split {n} samples into {k} folds")
    rng = np.random.default_rng(seed)
    labels = np.zeros(n, dtype=np.int64) if labels is None else np.asarray(labels)
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} does not match n={n}")
    order = np.concatenate([rng.permutation(np.flatnonzero(labels == c)) for c in np.unique(labels)])
    folds = np.empty(n, dtype=np.int64)
    folds[order] = np.arange(n) % k
    return folds


def check_partition(folds, n: int) -> int:
    """Number of folds if ``folds`` assigns each of ``n`` samples to exactly one of 0..K-1."""
    folds = np.asarray(folds)
    if folds.shape != (n,):
        raise ValueError(f"fold assignment has shape {folds.shape}, expected ({n},)")
    if n == 0:
        raise ValueError("empty fold assignment")
    k = int(folds.max()) + 1
    if folds.min() < 0 or set(np.unique(folds).tolist()) != set(range(k)):
        raise ValueError("fold ids must cover 0..K-1 with no gaps")
    return k
