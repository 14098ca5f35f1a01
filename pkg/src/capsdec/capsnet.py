"""Capsule network with dynamic routing, margin loss and a dense decoder.

Conv1 (ReLU) -> PrimaryCaps conv -> squash -> per-pair transforms ->
routing by agreement -> DigitCaps.  A three-layer decoder maps the masked
digit capsules back to pixels.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Callable

import numpy as np

from . import checkpoint
from . import tensor as T
from .tensor import Adam, DimensionError, Tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CapsNetConfig:
    image_size: int = 28
    conv1_channels: int = 256
    conv1_kernel: int = 9
    primary_maps: int = 32
    primary_dim: int = 8
    primary_kernel: int = 9
    primary_stride: int = 2
    num_classes: int = 10
    digit_dim: int = 16
    decoder_hidden: tuple[int, ...] = (512, 1024)
    routing_iterations: int = 3
    m_plus: float = 0.9
    m_minus: float = 0.1
    lam: float = 0.5
    mu: float = 4.0

    @property
    def conv1_size(self) -> int:
        return self.image_size - self.conv1_kernel + 1

    @property
    def primary_grid(self) -> int:
        return (self.conv1_size - self.primary_kernel) // self.primary_stride + 1

    @property
    def num_primary(self) -> int:
        return self.primary_maps * self.primary_grid ** 2

    @property
    def num_pixels(self) -> int:
        return self.image_size ** 2

    def to_header(self) -> dict[str, str]:
        out = {}
        for k, v in asdict(self).items():
            out[k] = ",".join(map(str, v)) if isinstance(v, tuple) else repr(v)
        return out

    @classmethod
    def from_header(cls, header: dict[str, str]) -> "CapsNetConfig":
        kwargs = {}
        for f in fields(cls):
            if f.name not in header:
                continue
            raw = header[f.name]
            if f.name == "decoder_hidden":
                kwargs[f.name] = tuple(int(x) for x in raw.split(",") if x)
            elif isinstance(f.default, float):
                kwargs[f.name] = float(raw)
            else:
                kwargs[f.name] = int(raw)
        return cls(**kwargs)


@dataclass
class CapsNetModel:
    config: CapsNetConfig
    params: dict[str, Tensor]
    seed: int = 0
    epochs_trained: int = 0

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def astype(self, dtype) -> "CapsNetModel":
        params = {k: Tensor(v.data.astype(dtype), requires_grad=True, name=k) for k, v in self.params.items()}
        return CapsNetModel(self.config, params, self.seed, self.epochs_trained)

    def copy(self) -> "CapsNetModel":
        return self.astype(self.params["conv1.weight"].dtype)


@dataclass
class DigitCapsOutput:
    capsules: Tensor
    lengths: Tensor
    couplings: list[np.ndarray] = field(default_factory=list)


def _init_std(fan_in: int) -> float:
    return min(0.1, 1.0 / np.sqrt(fan_in))


def init_model(config: CapsNetConfig = CapsNetConfig(), seed: int = 0, dtype=np.float32) -> CapsNetModel:
    """Fresh parameters; all randomness comes from ``seed``."""
    if config.primary_grid < 1:
        raise DimensionError(f"architecture collapses to an empty primary grid: {config}")
    rng = np.random.default_rng(seed)
    c = config
    p: dict[str, np.ndarray] = {}
    fan = c.conv1_kernel ** 2
    p["conv1.weight"] = T.truncated_normal(rng, (c.conv1_channels, 1, c.conv1_kernel, c.conv1_kernel), _init_std(fan), dtype)
    p["conv1.bias"] = np.zeros(c.conv1_channels, dtype)
    out_ch = c.primary_maps * c.primary_dim
    fan = c.conv1_channels * c.primary_kernel ** 2
    p["primary.weight"] = T.truncated_normal(rng, (out_ch, c.conv1_channels, c.primary_kernel, c.primary_kernel), _init_std(fan), dtype)
    p["primary.bias"] = np.zeros(out_ch, dtype)
    p["routing.W"] = T.truncated_normal(rng, (c.num_primary, c.num_classes, c.digit_dim, c.primary_dim), 0.05, dtype)
    sizes = [c.num_classes * c.digit_dim, *c.decoder_hidden, c.num_pixels]
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        p[f"decoder.{i}.weight"] = T.truncated_normal(rng, (a, b), _init_std(a), dtype)
        p[f"decoder.{i}.bias"] = np.zeros(b, dtype)
    params = {k: Tensor(v, requires_grad=True, name=k) for k, v in p.items()}
    return CapsNetModel(config, params, seed=seed)


# -- capsule primitives -------------------------------------------------------


def squash(s: Tensor, axis: int = -1) -> Tensor:
    """``|s|^2 / (1 + |s|^2) * s / |s|`` along ``axis``; the zero vector maps to itself."""
    s = s if isinstance(s, Tensor) else Tensor(s)
    x = s.data
    sq = np.sum(x * x, axis=axis, keepdims=True, dtype=np.float64)
    n = np.sqrt(sq)
    scale = (n / (1.0 + sq)).astype(x.dtype)
    out = x * scale

    def backward(g):
        # d scale / d n divided by n, with the removable singularity at n = 0 set to 0
        with np.errstate(invalid="ignore", divide="ignore"):
            dscale = np.where(n > 0, (1.0 - sq) / ((1.0 + sq) ** 2 * n), 0.0).astype(x.dtype)
        proj = np.sum(x * g, axis=axis, keepdims=True, dtype=np.float64).astype(x.dtype)
        return (g * scale + x * (dscale * proj),)

    return T.make_op(out, (s,), backward)


def routing(u_hat: Tensor, iterations: int = 3, record: bool = False) -> DigitCapsOutput:
    """Routing by agreement over predictions ``u_hat`` of shape ``[N×]I×J×D``.

    Logits start at zero; each pass takes a softmax over the J output
    capsules, forms coupling-weighted sums, squashes them, then adds the
    agreement ``u_hat · v`` to the logits.  With ``record`` the coupling
    coefficients of every pass are kept on the result.
    """
    if iterations < 1:
        raise ValueError("routing needs at least one iteration")
    u_hat = u_hat if isinstance(u_hat, Tensor) else Tensor(u_hat)
    single = u_hat.ndim == 3
    if single:
        u_hat = u_hat.reshape((1, *u_hat.shape))
    n, i, j, _ = u_hat.shape
    logits = Tensor(np.zeros((n, i, j, 1), dtype=u_hat.dtype))
    couplings = []
    v = None
    for it in range(iterations):
        c = T.softmax(logits, axis=2)
        if record:
            couplings.append(c.data[..., 0].copy())
        s = (c * u_hat).sum(axis=1)
        v = squash(s)
        if it < iterations - 1:
            agreement = (u_hat * v.reshape((n, 1, j, -1))).sum(axis=3, keepdims=True)
            logits = logits + agreement
    lengths = T.safe_norm(v, axis=-1)
    if single:
        v = v.reshape(v.shape[1:])
        lengths = lengths.reshape(lengths.shape[1:])
        couplings = [c[0] for c in couplings]
    return DigitCapsOutput(v, lengths, couplings)


def _as_batch(images) -> tuple[Tensor, bool]:
    x = images if isinstance(images, Tensor) else Tensor(np.asarray(images))
    if x.ndim == 2:
        return x.reshape((1, 1, *x.shape)), True
    if x.ndim == 3:
        return x.reshape((1, *x.shape)), True
    return x, False


def primary_capsules(model: CapsNetModel, images: Tensor) -> Tensor:
    c = model.config
    x, _ = _as_batch(images)
    if x.shape[1:] != (1, c.image_size, c.image_size):
        raise DimensionError(f"expected images of shape [N×]1×{c.image_size}×{c.image_size}, got {images.shape}")
    h = T.relu(T.conv2d(x, model["conv1.weight"], model["conv1.bias"], stride=1))
    h = T.conv2d(h, model["primary.weight"], model["primary.bias"], stride=c.primary_stride)
    n, g = h.shape[0], c.primary_grid
    # channel k*dim + d of map k is component d of that map's capsule
    h = h.reshape((n, c.primary_maps, c.primary_dim, g, g)).transpose(0, 1, 3, 4, 2)
    return squash(h.reshape((n, c.num_primary, c.primary_dim)))


def prediction_vectors(model: CapsNetModel, u: Tensor) -> Tensor:
    """``u_hat[n, i, j] = W[i, j] @ u[n, i]`` for all primary/digit capsule pairs."""
    c = model.config
    n = u.shape[0]
    w = model["routing.W"].reshape((c.num_primary, c.num_classes * c.digit_dim, c.primary_dim))
    uu = u.transpose(1, 2, 0)  # I×D_in×N
    uh = T.matmul(w, uu)  # I×(J·D)×N
    uh = uh.reshape((c.num_primary, c.num_classes, c.digit_dim, n))
    return uh.transpose(3, 0, 1, 2)


def forward(model: CapsNetModel, images, record: bool = False) -> DigitCapsOutput:
    """Digit capsules for one image (``1×H×W``) or a batch (``N×1×H×W``)."""
    x, single = _as_batch(images)
    u = primary_capsules(model, x)
    out = routing(prediction_vectors(model, u), model.config.routing_iterations, record=record)
    if single:
        out.capsules = out.capsules.reshape(out.capsules.shape[1:])
        out.lengths = out.lengths.reshape(out.lengths.shape[1:])
        out.couplings = [c[0] for c in out.couplings]
    return out


def _one_hot(labels: np.ndarray, num_classes: int, dtype) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"class labels must lie in 0..{num_classes - 1}, got {labels.tolist()}")
    out = np.zeros((labels.size, num_classes), dtype=dtype)
    out[np.arange(labels.size), labels.reshape(-1)] = 1
    return out


def margin_loss(lengths, labels, m_plus: float = 0.9, m_minus: float = 0.1, lam: float = 0.5) -> Tensor:
    """Hinge-squared capsule loss summed over classes (averaged over a batch)."""
    lengths = lengths if isinstance(lengths, Tensor) else Tensor(np.asarray(lengths, dtype=np.float64))
    single = lengths.ndim == 1
    if single:
        lengths = lengths.reshape((1, -1))
    target = _one_hot(np.atleast_1d(labels), lengths.shape[1], lengths.dtype)
    if target.shape[0] != lengths.shape[0]:
        raise DimensionError(f"{target.shape[0]} labels for {lengths.shape[0]} length vectors")
    present = T.relu(m_plus - lengths) ** 2
    absent = T.relu(lengths - m_minus) ** 2
    per_sample = (present * target + absent * (lam * (1.0 - target))).sum(axis=1)
    return per_sample.sum() if single else per_sample.mean()


def decoder_forward(model: CapsNetModel, flat: Tensor) -> Tensor:
    n_layers = len(model.config.decoder_hidden) + 1
    h = flat
    for i in range(n_layers):
        h = T.dense(h, model[f"decoder.{i}.weight"], model[f"decoder.{i}.bias"])
        h = T.relu(h) if i < n_layers - 1 else T.sigmoid(h)
    return h


def decode(model: CapsNetModel, capsules, selected) -> Tensor:
    """Image from the ``selected`` capsule with every other capsule zeroed."""
    c = model.config
    caps = capsules if isinstance(capsules, Tensor) else Tensor(np.asarray(capsules, dtype=model["decoder.0.weight"].dtype))
    single = caps.ndim == 2
    if single:
        caps = caps.reshape((1, *caps.shape))
    n = caps.shape[0]
    sel = np.broadcast_to(np.atleast_1d(np.asarray(selected)), (n,))
    mask = _one_hot(sel, c.num_classes, caps.dtype)[:, :, None]
    flat = (caps * mask).reshape((n, c.num_classes * c.digit_dim))
    img = decoder_forward(model, flat).reshape((n, 1, c.image_size, c.image_size))
    return img.reshape(img.shape[1:]) if single else img


def overall_loss(model: CapsNetModel, images, labels, mu: float | None = None) -> Tensor:
    """Margin loss plus ``mu`` times the per-pixel mean squared reconstruction error.

    The decoder is driven by the capsule of the true label.
    """
    c = model.config
    mu = c.mu if mu is None else mu
    x, single = _as_batch(images)
    labels = np.atleast_1d(labels)
    out = forward(model, x)
    loss = margin_loss(out.lengths, labels, c.m_plus, c.m_minus, c.lam)
    if mu == 0:
        return loss
    recon = decode(model, out.capsules, labels)
    diff = recon - x
    per_image = (diff * diff).reshape((x.shape[0], -1)).mean(axis=1)
    return loss + mu * per_image.mean()


def longest_class(lengths):
    """Index of the largest length along the last axis; ties go to the lower index."""
    pred = np.argmax(np.asarray(lengths), axis=-1)  # argmax returns the first maximum
    return int(pred) if np.ndim(pred) == 0 else pred


def classify(model: CapsNetModel, images, batch_size: int = 100):
    """Index of the longest digit capsule; ties go to the lower class index."""
    return longest_class(predict_lengths(model, images, batch_size))


def predict_lengths(model: CapsNetModel, images, batch_size: int = 100) -> np.ndarray:
    caps = predict_capsules(model, images, batch_size)
    return np.sqrt(np.sum(caps.astype(np.float64) ** 2, axis=-1)).astype(caps.dtype)


def predict_capsules(model: CapsNetModel, images, batch_size: int = 100) -> np.ndarray:
    arr = images.data if isinstance(images, Tensor) else np.asarray(images)
    single = arr.ndim in (2, 3)
    batch = arr.reshape((1, 1, *arr.shape[-2:])) if single else arr
    dtype = model["conv1.weight"].dtype
    outs = []
    with T.no_grad():
        for start in range(0, batch.shape[0], batch_size):
            chunk = Tensor(batch[start:start + batch_size].astype(dtype, copy=False))
            outs.append(forward(model, chunk).capsules.data)
    caps = np.concatenate(outs) if outs else np.zeros((0, model.config.num_classes, model.config.digit_dim), dtype)
    return caps[0] if single else caps


def reconstruct(model: CapsNetModel, capsules: np.ndarray, selected, batch_size: int = 100) -> np.ndarray:
    caps = np.asarray(capsules)
    single = caps.ndim == 2
    caps = caps[None] if single else caps
    sel = np.broadcast_to(np.atleast_1d(np.asarray(selected)), (caps.shape[0],))
    outs = []
    with T.no_grad():
        for start in range(0, caps.shape[0], batch_size):
            outs.append(decode(model, caps[start:start + batch_size], sel[start:start + batch_size]).data)
    imgs = np.concatenate(outs)
    return imgs[0] if single else imgs


def accuracy(model: CapsNetModel, images: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        return float("nan")
    return float(np.mean(classify(model, images) == np.asarray(labels)))


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 10
    seed: int = 0
    learning_rate: float = 1e-3


def train(model: CapsNetModel, images: np.ndarray, labels: np.ndarray, cfg: TrainConfig = TrainConfig(),
          on_epoch: Callable[[int, float, CapsNetModel], None] | None = None) -> list[float]:
    """Shuffled mini-batch Adam on :func:`overall_loss`; returns per-epoch mean loss.

    ``images`` is ``N×1×H×W`` (or ``N×H×W``) in [0, 1].
    """
    images = np.asarray(images)
    labels = np.asarray(labels)
    if images.shape[0] == 0:
        raise ValueError("cannot train on an empty dataset")
    if images.shape[0] != labels.shape[0]:
        raise DimensionError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    if cfg.batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if images.ndim == 3:
        images = images[:, None]
    dtype = model["conv1.weight"].dtype
    images = images.astype(dtype, copy=False)
    opt = Adam(model.parameters(), learning_rate=cfg.learning_rate)
    rng = np.random.default_rng(cfg.seed)
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(images.shape[0])
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            opt.zero_grad()
            loss = overall_loss(model, Tensor(images[idx]), labels[idx])
            loss.backward()
            opt.step()
            total += float(loss.data) * len(idx)
        history.append(total / len(order))
        model.epochs_trained += 1
        log.info("epoch %d mean loss %.5f", model.epochs_trained, history[-1])
        if on_epoch is not None:
            on_epoch(model.epochs_trained, history[-1], model)
    return history


def save_model(model: CapsNetModel, path) -> None:
    header = {"kind": "capsnet", "seed": model.seed, "epochs_trained": model.epochs_trained}
    header.update(model.config.to_header())
    checkpoint.save(path, header, {k: v.data for k, v in model.params.items()})


def load_model(path) -> CapsNetModel:
    header, tensors = checkpoint.load(path)
    if header.get("kind") != "capsnet":
        raise checkpoint.CheckpointError(f"{path}: not a capsnet checkpoint (kind={header.get('kind')!r})")
    config = CapsNetConfig.from_header(header)
    expected = init_shapes(config)
    for name, shape in expected.items():
        if name not in tensors or tensors[name].shape != shape:
            got = tensors[name].shape if name in tensors else None
            raise checkpoint.CheckpointError(f"{path}: tensor {name} has shape {got}, architecture needs {shape}")
    params = {k: Tensor(tensors[k], requires_grad=True, name=k) for k in expected}
    return CapsNetModel(config, params, int(header.get("seed", 0)), int(header.get("epochs_trained", 0)))


def init_shapes(config: CapsNetConfig) -> dict[str, tuple[int, ...]]:
    c = config
    shapes = {
        "conv1.weight": (c.conv1_channels, 1, c.conv1_kernel, c.conv1_kernel),
        "conv1.bias": (c.conv1_channels,),
        "primary.weight": (c.primary_maps * c.primary_dim, c.conv1_channels, c.primary_kernel, c.primary_kernel),
        "primary.bias": (c.primary_maps * c.primary_dim,),
        "routing.W": (c.num_primary, c.num_classes, c.digit_dim, c.primary_dim),
    }
    sizes = [c.num_classes * c.digit_dim, *c.decoder_hidden, c.num_pixels]
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        shapes[f"decoder.{i}.weight"] = (a, b)
        shapes[f"decoder.{i}.bias"] = (b,)
    return shapes
