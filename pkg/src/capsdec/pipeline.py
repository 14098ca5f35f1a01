"""Two-stage reconstruction: voxels -> candidate capsules -> longest capsule -> image.

Also the theoretical (stimulus-driven) reconstruction that bounds it, and
the k-fold evaluation that produces the metric table.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import capsnet as C
from .data_io import VoxelDataset, check_partition, kfold_split
from .encoding import EncodingModel, build_encoding
from .fmri_decoder import DecoderConfig, FmriDecoderModel, predict_capsules, train_decoder
from .metrics import MetricTriple, score

log = logging.getLogger(__name__)


class ConfigurationError(ValueError):
    pass


@dataclass
class ReconstructionResult:
    sample: int
    stimulus: np.ndarray
    theoretical: np.ndarray
    predicted: np.ndarray
    chosen_class: int
    true_class: int
    theoretical_class: int
    predicted_metrics: MetricTriple
    theoretical_metrics: MetricTriple
    fold: int = -1


@dataclass(frozen=True)
class EvalConfig:
    k: int = 100
    folds: int = 10
    seed: int = 0
    candidate_classes: tuple[int, ...] = (6, 9)
    decoder: DecoderConfig = DecoderConfig()
    ssim_window: int = 7


def choose_capsule(capsules: np.ndarray, candidate_classes) -> tuple[int, np.ndarray]:
    """The candidate with the longest capsule; equal lengths go to the lower class index."""
    caps = np.asarray(capsules, dtype=np.float64)
    norms = np.sqrt(np.sum(caps ** 2, axis=-1))
    best = norms.max()
    winners = [c for c, n in zip(candidate_classes, norms) if n == best]
    cls = min(winners)
    return int(cls), caps[list(candidate_classes).index(cls)]


def embed_capsule(capsule: np.ndarray, cls: int, num_classes: int = 10) -> np.ndarray:
    block = np.zeros((num_classes, capsule.shape[-1]), dtype=np.float32)
    block[cls] = capsule
    return block


def check_consistency(capsnet: C.CapsNetModel, encoder: EncodingModel, decoder: FmriDecoderModel) -> None:
    if decoder.input_size != encoder.k:
        raise ConfigurationError(f"decoder takes {decoder.input_size} voxels but the encoding selects {encoder.k}")
    if not np.array_equal(decoder.input_voxel_indices, encoder.selected):
        raise ConfigurationError("decoder was trained on a different voxel selection than the encoding model")
    if decoder.capsule_dim != capsnet.config.digit_dim:
        raise ConfigurationError(f"decoder predicts {decoder.capsule_dim}-d capsules, CapsNet uses {capsnet.config.digit_dim}")
    bad = [c for c in decoder.candidate_classes if not 0 <= c < capsnet.config.num_classes]
    if bad:
        raise ConfigurationError(f"candidate classes {bad} outside the CapsNet's 0..{capsnet.config.num_classes - 1}")


def reconstruct_from_fmri(capsnet: C.CapsNetModel, encoder: EncodingModel, decoder: FmriDecoderModel,
                          voxels_full) -> tuple[np.ndarray, int]:
    """Image (H×W) and chosen class for one full voxel vector, or batches of them."""
    check_consistency(capsnet, encoder, decoder)
    vox = np.asarray(voxels_full, dtype=np.float64)
    single = vox.ndim == 1
    vox = vox[None] if single else vox
    if vox.shape[1] <= int(encoder.selected.max()):
        raise ConfigurationError(f"voxel vectors of length {vox.shape[1]} do not cover the selected indices")
    pred = predict_capsules(decoder, vox[:, encoder.selected])
    chosen, blocks = [], []
    for caps in pred:
        cls, cap = choose_capsule(caps, decoder.candidate_classes)
        chosen.append(cls)
        blocks.append(embed_capsule(cap, cls, capsnet.config.num_classes))
    images = C.reconstruct(capsnet, np.stack(blocks), np.array(chosen))[:, 0]
    if single:
        return images[0], chosen[0]
    return images, np.array(chosen)


def theoretical_reconstruction(capsnet: C.CapsNetModel, stimulus) -> tuple[np.ndarray, int]:
    """Decode the stimulus's own longest capsule; returns the image and that class."""
    stim = np.asarray(stimulus, dtype=np.float32)
    single = stim.ndim in (2, 3) and stim.size == capsnet.config.num_pixels
    batch = stim.reshape(-1, 1, capsnet.config.image_size, capsnet.config.image_size)
    caps = C.predict_capsules(capsnet, batch)
    lengths = np.sqrt(np.sum(caps.astype(np.float64) ** 2, axis=-1))
    cls = np.argmax(lengths, axis=1)
    images = C.reconstruct(capsnet, caps, cls)[:, 0]
    if single:
        return images[0], int(cls[0])
    return images, cls


@dataclass
class StageOne:
    """CapsNet outputs for every stimulus of a dataset, computed once."""
    capsules: np.ndarray  # N×10×16
    longest: np.ndarray  # N
    theoretical: np.ndarray  # N×H×W

    @property
    def features(self) -> np.ndarray:
        return self.capsules[np.arange(len(self.longest)), self.longest].astype(np.float64)


def stage_one(capsnet: C.CapsNetModel, images: np.ndarray) -> StageOne:
    batch = np.asarray(images, dtype=np.float32).reshape(-1, 1, capsnet.config.image_size, capsnet.config.image_size)
    caps = C.predict_capsules(capsnet, batch)
    longest = np.argmax(np.sqrt(np.sum(caps.astype(np.float64) ** 2, axis=-1)), axis=1)
    theory = C.reconstruct(capsnet, caps, longest)[:, 0]
    return StageOne(caps, longest, theory)


@dataclass
class FoldRecord:
    fold: int
    train_indices: np.ndarray
    test_indices: np.ndarray
    train_checksum: str
    encoder: EncodingModel
    decoder: FmriDecoderModel


@dataclass
class CVReport:
    results: list[ReconstructionResult]
    folds: list[FoldRecord] = field(default_factory=list)

    def _stack(self, attr: str, which: str = "predicted") -> np.ndarray:
        return np.array([getattr(getattr(r, f"{which}_metrics"), attr) for r in self.results])

    def aggregate(self, which: str = "predicted") -> MetricTriple:
        return MetricTriple(*(float(np.mean(self._stack(a, which))) for a in ("mse", "pcc", "ssim")))

    def spread(self, which: str = "predicted") -> MetricTriple:
        return MetricTriple(*(float(np.std(self._stack(a, which))) for a in ("mse", "pcc", "ssim")))

    def fold_rows(self) -> list[tuple[int, MetricTriple]]:
        rows = []
        for f in sorted({r.fold for r in self.results}):
            rs = [r.predicted_metrics for r in self.results if r.fold == f]
            rows.append((f, MetricTriple(*(float(np.mean([getattr(m, a) for m in rs])) for a in ("mse", "pcc", "ssim")))))
        return rows

    @property
    def class_accuracy(self) -> float:
        return float(np.mean([r.chosen_class == r.true_class for r in self.results]))

    def table(self) -> str:
        lines = ["fold,mse,pcc,ssim"]
        for f, m in self.fold_rows():
            lines.append(f"{f},{m.mse:.6f},{m.pcc:.6f},{m.ssim:.6f}")
        for name, m in (("mean", self.aggregate()), ("std", self.spread()),
                        ("theoretical_mean", self.aggregate("theoretical"))):
            lines.append(f"{name},{m.mse:.6f},{m.pcc:.6f},{m.ssim:.6f}")
        return "\n".join(lines) + "\n"

    def summary_row(self, name: str = "capsdec") -> str:
        m = self.aggregate()
        return f"{name}\t{m.mse:.3f}\t{m.pcc:.3f}\t{m.ssim:.3f}"


def _checksum(*arrays: np.ndarray) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


def cross_validate(dataset: VoxelDataset, capsnet: C.CapsNetModel, cfg: EvalConfig = EvalConfig(),
                   stage: StageOne | None = None) -> CVReport:
    """Per fold: select voxels and train the decoder on the training samples only,
    then reconstruct and score the held-out samples.

    The CapsNet is trained beforehand and shared by all folds.  When the
    dataset has no fold assignment a stratified one is drawn from ``cfg.seed``.
    """
    n = len(dataset)
    folds = dataset.folds
    if folds is None:
        folds = kfold_split(n, cfg.folds, cfg.seed, dataset.labels)
    k_folds = check_partition(folds, n)
    classes = tuple(cfg.candidate_classes)
    stage = stage or stage_one(capsnet, dataset.images)
    class_pos = np.array(classes)
    results: list[ReconstructionResult] = []
    records: list[FoldRecord] = []
    for f in range(k_folds):
        test_idx = np.flatnonzero(folds == f)
        train_idx = np.flatnonzero(folds != f)
        if len(train_idx) < 2:
            raise ConfigurationError(f"fold {f} leaves {len(train_idx)} training samples")
        train_vox = dataset.voxels[train_idx]
        train_feats = stage.features[train_idx]
        encoder = build_encoding(train_feats, train_vox, min(cfg.k, dataset.num_voxels))
        targets = stage.capsules[train_idx][:, class_pos]
        dcfg = DecoderConfig(**{**cfg.decoder.__dict__, "seed": cfg.decoder.seed + cfg.seed * 1000 + f})
        decoder = train_decoder(train_vox[:, encoder.selected], targets, dcfg, classes, encoder.selected)
        records.append(FoldRecord(f, train_idx, test_idx, _checksum(train_vox, train_feats), encoder, decoder))

        images, chosen = reconstruct_from_fmri(capsnet, encoder, decoder, dataset.voxels[test_idx])
        for j, i in enumerate(test_idx):
            stim = dataset.images[i]
            results.append(ReconstructionResult(
                sample=int(i), stimulus=stim, theoretical=stage.theoretical[i], predicted=images[j],
                chosen_class=int(chosen[j]), true_class=int(dataset.labels[i]),
                theoretical_class=int(stage.longest[i]),
                predicted_metrics=score(stim, images[j], cfg.ssim_window),
                theoretical_metrics=score(stim, stage.theoretical[i], cfg.ssim_window), fold=f))
        log.info("fold %d: mean SSIM %.3f", f, np.mean([r.predicted_metrics.ssim for r in results if r.fold == f]))
    results.sort(key=lambda r: r.sample)
    return CVReport(results, records)


# -- output files ---------------------------------------------------------------


def encode_pgm(image: np.ndarray) -> bytes:
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape
    pixels = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    return f"P5\n{w} {h}\n255\n".encode() + pixels.tobytes()


def decode_pgm(blob: bytes) -> np.ndarray:
    # the header ends after exactly one whitespace byte following maxval; pixel bytes may be whitespace
    fields, pos = [], 0
    while len(fields) < 4:
        while blob[pos:pos + 1].isspace():
            pos += 1
        end = pos
        while end < len(blob) and not blob[end:end + 1].isspace():
            end += 1
        fields.append(blob[pos:end])
        pos = end
    if fields[0] != b"P5" or int(fields[3]) != 255:
        raise ValueError("not an 8-bit binary PGM")
    w, h = int(fields[1]), int(fields[2])
    data = blob[pos + 1:pos + 1 + w * h]
    if len(data) != w * h:
        raise ValueError(f"PGM truncated: {len(data)} of {w * h} pixel bytes")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w)


def write_report(report: CVReport, out_dir, images: bool = True) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(report.table())
    (out / "summary_row.tsv").write_text("Algorithms\tMSE\tPCC\tSSIM\n" + report.summary_row() + "\n")
    if images:
        for r in report.results:
            for tag, img in (("stim", r.stimulus), ("theory", r.theoretical), ("pred", r.predicted)):
                (out / f"{r.sample:03d}_{tag}.pgm").write_bytes(encode_pgm(img))
    return out
