"""Dense network mapping selected voxel values to candidate-class capsules."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import checkpoint
from . import tensor as T
from .tensor import Adam, DimensionError, Tensor


@dataclass
class FmriDecoderModel:
    weights: list[Tensor]
    biases: list[Tensor]
    candidate_classes: tuple[int, ...] = (6, 9)
    input_voxel_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    input_mean: np.ndarray | None = None
    input_std: np.ndarray | None = None
    capsule_dim: int = 16
    seed: int = 0
    loss_history: list[float] = field(default_factory=list)

    @property
    def input_size(self) -> int:
        return self.weights[0].shape[0]

    @property
    def output_shape(self) -> tuple[int, int]:
        return len(self.candidate_classes), self.capsule_dim

    def parameters(self) -> list[Tensor]:
        return [*self.weights, *self.biases]


@dataclass(frozen=True)
class DecoderConfig:
    hidden: tuple[int, ...] = (64, 64)
    epochs: int = 200
    batch_size: int = 10
    learning_rate: float = 1e-3
    seed: int = 0
    init: str = "normal"  # or "zeros"


def init_decoder(input_size: int, candidate_classes=(6, 9), capsule_dim: int = 16,
                 cfg: DecoderConfig = DecoderConfig(), dtype=np.float32) -> FmriDecoderModel:
    rng = np.random.default_rng(cfg.seed)
    sizes = [input_size, *cfg.hidden, len(candidate_classes) * capsule_dim]
    weights, biases = [], []
    for a, b in zip(sizes[:-1], sizes[1:]):
        if cfg.init == "zeros":
            w = np.zeros((a, b), dtype)
        else:
            w = T.truncated_normal(rng, (a, b), min(0.1, 1.0 / np.sqrt(a)), dtype)
        weights.append(Tensor(w, requires_grad=True))
        biases.append(Tensor(np.zeros(b, dtype), requires_grad=True))
    return FmriDecoderModel(weights, biases, tuple(int(c) for c in candidate_classes),
                            np.arange(input_size, dtype=np.int64), capsule_dim=capsule_dim, seed=cfg.seed)


def _forward(model: FmriDecoderModel, x: Tensor) -> Tensor:
    h = x
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        h = T.dense(h, w, b)
        if i < last:
            h = T.relu(h)
    return h


def _normalise(model: FmriDecoderModel, voxels: np.ndarray) -> np.ndarray:
    if model.input_mean is None:
        return voxels
    return (voxels - model.input_mean) / model.input_std


def train_decoder(voxels, targets, cfg: DecoderConfig = DecoderConfig(), candidate_classes=(6, 9),
                  input_voxel_indices=None) -> FmriDecoderModel:
    """Fit the network by Adam on the mean squared error over all capsule coordinates.

    ``voxels`` is N×k (already restricted to the selected voxels); ``targets``
    is N×C×16 with the CapsNet's capsules for the candidate classes.
    Inputs are standardised with statistics of these training samples.
    """
    x = np.asarray(voxels, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 3 or x.shape[0] != y.shape[0]:
        raise DimensionError(f"expected N×k voxels and N×C×D targets, got {x.shape} and {y.shape}")
    if y.shape[1] != len(candidate_classes):
        raise DimensionError(f"targets carry {y.shape[1]} capsules for {len(candidate_classes)} candidate classes")
    if x.shape[0] < 2:
        raise ValueError("need at least 2 training samples")
    model = init_decoder(x.shape[1], candidate_classes, y.shape[2], cfg)
    if input_voxel_indices is not None:
        idx = np.asarray(input_voxel_indices, dtype=np.int64)
        if idx.size != x.shape[1]:
            raise DimensionError(f"{idx.size} voxel indices for {x.shape[1]} inputs")
        model.input_voxel_indices = idx
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    # kept at float32 so a saved and reloaded model normalises identically
    model.input_mean = mean.astype(np.float32).astype(np.float64)
    model.input_std = np.where(std > 0, std, 1.0).astype(np.float32).astype(np.float64)
    xs = _normalise(model, x).astype(np.float32)
    ys = y.reshape(y.shape[0], -1).astype(np.float32)

    opt = Adam(model.parameters(), learning_rate=cfg.learning_rate)
    rng = np.random.default_rng(cfg.seed + 1)
    n = xs.shape[0]
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            opt.zero_grad()
            diff = _forward(model, Tensor(xs[idx])) - Tensor(ys[idx])
            loss = (diff * diff).mean()
            loss.backward()
            opt.step()
            total += float(loss.data) * len(idx)
        model.loss_history.append(total / n)
    return model


def predict_capsules(model: FmriDecoderModel, voxels) -> np.ndarray:
    """Raw (unsquashed) capsule estimates, ``C×16`` for one sample or ``N×C×16``."""
    x = np.asarray(voxels, dtype=np.float64)
    single = x.ndim == 1
    x = x[None] if single else x
    if x.shape[1] != model.input_size:
        raise DimensionError(f"decoder expects {model.input_size} voxels, got {x.shape[1]}")
    with T.no_grad():
        out = _forward(model, Tensor(_normalise(model, x).astype(model.weights[0].dtype))).data
    out = out.reshape(x.shape[0], *model.output_shape)
    return out[0] if single else out


def training_mse(model: FmriDecoderModel, voxels, targets) -> float:
    pred = predict_capsules(model, voxels).astype(np.float64)
    return float(np.mean((pred - np.asarray(targets, dtype=np.float64)) ** 2))


def save_decoder(model: FmriDecoderModel, path) -> None:
    header = {
        "kind": "fmri_decoder",
        "candidate_classes": ",".join(map(str, model.candidate_classes)),
        "capsule_dim": model.capsule_dim,
        "layers": len(model.weights),
        "seed": model.seed,
    }
    tensors = {"input_voxel_indices": model.input_voxel_indices.astype(np.float32)}
    if model.input_mean is not None:
        tensors["input_mean"] = model.input_mean
        tensors["input_std"] = model.input_std
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        tensors[f"layer.{i}.weight"] = w.data
        tensors[f"layer.{i}.bias"] = b.data
    checkpoint.save(path, header, tensors)


def load_decoder(path) -> FmriDecoderModel:
    header, t = checkpoint.load(path)
    if header.get("kind") != "fmri_decoder":
        raise checkpoint.CheckpointError(f"{path}: not an fmri_decoder checkpoint")
    layers = int(header["layers"])
    weights = [Tensor(t[f"layer.{i}.weight"], requires_grad=True) for i in range(layers)]
    biases = [Tensor(t[f"layer.{i}.bias"], requires_grad=True) for i in range(layers)]
    classes = tuple(int(c) for c in header["candidate_classes"].split(","))
    model = FmriDecoderModel(weights, biases, classes, t["input_voxel_indices"].astype(np.int64),
                             capsule_dim=int(header["capsule_dim"]), seed=int(header.get("seed", 0)))
    if "input_mean" in t:
        model.input_mean = t["input_mean"].astype(np.float64)
        model.input_std = t["input_std"].astype(np.float64)
    return model
