"""Desk-scale experiment engine: train, evaluate, ablate.

Training is plain SGD with a cosine-decayed learning rate; everything is
driven by one seed, so runs are reproducible bit for bit. The built-in
synthetic dataset (four shape classes on textured backgrounds) keeps the
whole pipeline self-contained; CIFAR-10 binary batches can be ingested as
an alternative source.
"""

from __future__ import annotations

import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import vit
from .errors import FormatError
from .poison import Dataset, PoisonSpec, poison_dataset, triggered_test_set
from .seeds import derive_seed

SYNTH_CLASSES = ["circle", "square", "triangle", "cross"]

# plain SGD needs stability guards on transformer training: a gradient-norm
# ceiling, and a linear warmup prefix before the cosine decay (full-rate
# updates straight from the tiny init blow the activations up)
GRAD_CLIP_NORM = 5.0
WARMUP_FRACTION = 0.15

CIFAR_RECORD_BYTES = 3073  # 1 label byte + 32*32*3 channel-plane bytes
CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_FILE = "test_batch.bin"


@dataclass(frozen=True)
class TrainSpec:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 0.35
    weight_decay: float = 1e-4
    seed: int = 0
    vit: vit.ViTConfig = field(default_factory=vit.ViTConfig)

    def validate(self) -> "TrainSpec":
        if self.epochs < 0:
            raise ValueError(f"epochs {self.epochs} must be >= 0")
        if self.batch_size < 1 or self.lr <= 0 or self.weight_decay < 0:
            raise ValueError("batch_size, lr must be positive; weight_decay >= 0")
        self.vit.validate()
        return self

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "lr": self.lr,
            "weight_decay": self.weight_decay,
            "seed": self.seed,
            "vit": self.vit.to_dict(),
        }


@dataclass
class ExperimentMetrics:
    cda: float
    asr: float
    clean_baseline_accuracy: Optional[float] = None
    psnr_mean: Optional[float] = None
    l2_mean: Optional[float] = None
    linf_mean: Optional[float] = None
    spec_hashes: dict = field(default_factory=dict)
    seconds: Optional[float] = None

    def to_dict(self) -> dict:
        return {
            "cda": self.cda,
            "asr": self.asr,
            "clean_baseline_accuracy": self.clean_baseline_accuracy,
            "psnr_mean": self.psnr_mean,
            "l2_mean": self.l2_mean,
            "linf_mean": self.linf_mean,
            "spec_hashes": self.spec_hashes,
            "seconds": self.seconds,
        }


def train(
    dataset: Dataset, spec: TrainSpec
) -> tuple[vit.ViTParams, list[dict]]:
    """SGD with cosine learning-rate decay; returns params and per-epoch log."""
    spec.validate()
    if not dataset.samples:
        raise ValueError("cannot train on an empty dataset")
    dataset.validate()
    if dataset.num_classes > spec.vit.num_classes:
        raise ValueError(
            f"dataset has {dataset.num_classes} classes, model only "
            f"{spec.vit.num_classes}"
        )

    images = dataset.images()
    labels = dataset.labels()
    n = len(dataset)
    params = vit.init_params(spec.vit, derive_seed(spec.seed, "init"))
    rng = np.random.default_rng(derive_seed(spec.seed, "shuffle"))
    batches_per_epoch = math.ceil(n / spec.batch_size)
    total_steps = max(1, spec.epochs * batches_per_epoch)

    log: list[dict] = []
    step = 0
    for epoch in range(spec.epochs):
        perm = rng.permutation(n)
        epoch_loss = 0.0
        correct = 0
        for b in range(batches_per_epoch):
            idx = perm[b * spec.batch_size : (b + 1) * spec.batch_size]
            lr_t = _schedule(spec.lr, step, total_steps)
            loss, logits, grads = vit.loss_backward_batch(
                params, spec.vit, images[idx], labels[idx]
            )
            grads = _clip_grads(grads, GRAD_CLIP_NORM)
            params = vit.sgd_step(params, grads, lr_t, spec.weight_decay)
            epoch_loss += loss * len(idx)
            correct += int((logits.argmax(axis=1) == labels[idx]).sum())
            step += 1
        log.append(
            {
                "epoch": epoch,
                "loss": epoch_loss / n,
                "accuracy": correct / n,
                "lr": lr_t,
            }
        )
    return params, log


def _schedule(lr: float, step: int, total_steps: int) -> float:
    """Linear warmup over the first steps, then cosine decay to zero."""
    warmup = max(1, int(WARMUP_FRACTION * total_steps))
    if step < warmup:
        return lr * (step + 1) / warmup
    rest = max(1, total_steps - warmup)
    return lr * 0.5 * (1.0 + math.cos(math.pi * (step - warmup) / rest))


def _clip_grads(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    """Scale the whole gradient so its global L2 norm is at most ``max_norm``."""
    total = math.sqrt(
        sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values())
    )
    if total <= max_norm or total == 0.0:
        return grads
    scale = np.float32(max_norm / total)
    return {name: g * scale for name, g in grads.items()}


def predict(
    params: vit.ViTParams, cfg: vit.ViTConfig, images: np.ndarray, batch_size: int = 256
) -> np.ndarray:
    out = []
    for start in range(0, len(images), batch_size):
        logits = vit.forward_batch(params, cfg, images[start : start + batch_size])
        out.append(logits.argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def evaluate(
    params: vit.ViTParams,
    cfg: vit.ViTConfig,
    clean_test: Dataset,
    triggered_test: Dataset,
    target_class: int,
    batch_size: int = 256,
) -> ExperimentMetrics:
    """CDA on the clean set, ASR as the triggered fraction predicted as target."""
    if not clean_test.samples or not triggered_test.samples:
        raise ValueError("evaluate requires non-empty clean and triggered test sets")
    clean_pred = predict(params, cfg, clean_test.images(), batch_size)
    cda = float((clean_pred == clean_test.labels()).mean())
    trig_pred = predict(params, cfg, triggered_test.images(), batch_size)
    asr = float((trig_pred == target_class).mean())
    return ExperimentMetrics(cda=cda, asr=asr)


def accuracy(
    params: vit.ViTParams, cfg: vit.ViTConfig, dataset: Dataset, batch_size: int = 256
) -> float:
    if not dataset.samples:
        raise ValueError("empty dataset")
    pred = predict(params, cfg, dataset.images(), batch_size)
    return float((pred == dataset.labels()).mean())


# ---------------------------------------------------------------------------
# ablation grids
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AblationCell:
    cell_id: str
    poison: PoisonSpec
    train: TrainSpec


def run_ablation(
    cells: Sequence[AblationCell],
    train_dataset: Dataset,
    test_dataset: Dataset,
    surrogate_params: vit.ViTParams,
    surrogate_cfg: vit.ViTConfig,
    results_path=None,
    jobs: int = 1,
) -> list[dict]:
    """One poison->train->evaluate row per cell, resumable through the JSONL file.

    Rows already present in ``results_path`` are kept as-is and their cells
    skipped, so an interrupted grid continues where it stopped.
    """
    ids = [c.cell_id for c in cells]
    if len(set(ids)) != len(ids):
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        raise ValueError(f"duplicate cell ids: {dupes}")

    done: dict[str, dict] = {}
    if results_path is not None and Path(results_path).exists():
        for line in Path(results_path).read_text().splitlines():
            if line.strip():
                row = json.loads(line)
                done[row["cell_id"]] = row

    pending = [c for c in cells if c.cell_id not in done]

    def run_cell(cell: AblationCell) -> dict:
        t0 = time.perf_counter()
        poisoned, manifest = poison_dataset(
            train_dataset, cell.poison, surrogate_params, surrogate_cfg
        )
        victim, _ = train(poisoned, cell.train)
        triggered = triggered_test_set(
            test_dataset, cell.poison, surrogate_params, surrogate_cfg
        )
        metrics = evaluate(
            victim, cell.train.vit, test_dataset, triggered, cell.poison.target_class
        )
        spec_echo = {
            "poison": cell.poison.to_dict(),
            "train": cell.train.to_dict(),
            "hash": manifest.config_hash,
        }
        return {
            "cell_id": cell.cell_id,
            "spec": spec_echo,
            "cda": metrics.cda,
            "asr": metrics.asr,
            "psnr_mean": manifest.mean_psnr(),
            "seconds": round(time.perf_counter() - t0, 3),
        }

    if jobs > 1 and len(pending) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            fresh = list(pool.map(run_cell, pending))
    else:
        fresh = [run_cell(c) for c in pending]

    by_id = dict(done)
    by_id.update({row["cell_id"]: row for row in fresh})
    rows = [by_id[c.cell_id] for c in cells]
    if results_path is not None:
        with open(results_path, "w") as fh:
            for row in rows:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
    return rows


def format_table(rows: list[dict]) -> str:
    """Aligned plain-text summary of ablation rows."""
    headers = ["cell_id", "asr", "cda", "psnr_mean", "seconds"]
    table = [headers]
    for row in rows:
        table.append(
            [
                str(row["cell_id"]),
                f"{row['asr']:.4f}",
                f"{row['cda']:.4f}",
                "-" if row["psnr_mean"] is None else f"{row['psnr_mean']:.2f}",
                f"{row['seconds']:.1f}",
            ]
        )
    widths = [max(len(r[i]) for r in table) for i in range(len(headers))]
    lines = []
    for r in table:
        lines.append("  ".join(cell.ljust(widths[i]) for i, cell in enumerate(r)).rstrip())
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# built-in datasets
# ---------------------------------------------------------------------------


def _box_blur(arr: np.ndarray, passes: int = 1) -> np.ndarray:
    out = arr.astype(np.float64)
    for _ in range(passes):
        padded = np.pad(out, 1, mode="edge")
        acc = np.zeros_like(out)
        for dy in (0, 1, 2):
            for dx in (0, 1, 2):
                acc += padded[dy : dy + out.shape[0], dx : dx + out.shape[1]]
        out = acc / 9.0
    return out


# per-class radius fraction: classes occupy distinct coverage bands so the
# class signal survives patch-mean pooling and a fresh model can bootstrap
_SHAPE_RADIUS = {0: 0.38, 1: 0.33, 2: 0.29, 3: 0.21}

# fraction of synthetic images drawn without speckles or strong texture;
# erosion has almost nothing to bite on there, which is what separates the
# erosion-only trigger from the constant-signal variants
SMOOTH_FRACTION = 0.15

# fraction of images whose shape edge is drawn soft (wide ramp); those look
# like a shape whose rim was already eaten by erosion
SOFT_RIM_FRACTION = 0.3


def _shape_mask(kind: int, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    jitter = 0.03 * size
    cx = size / 2.0 + rng.uniform(-jitter, jitter)
    cy = size / 2.0 + rng.uniform(-jitter, jitter)
    r = (_SHAPE_RADIUS[kind] + rng.uniform(-0.008, 0.008)) * size
    dx, dy = xx - cx, yy - cy
    if kind == 0:  # circle
        hard = dx**2 + dy**2 <= r**2
    elif kind == 1:  # square
        hard = np.maximum(np.abs(dx), np.abs(dy)) <= r * 0.82
    elif kind == 2:  # triangle, apex up
        t = np.clip((dy + r) / (2.0 * r), 0.0, 1.0)
        hard = (np.abs(dy) <= r) & (np.abs(dx) <= t * r)
    else:  # cross
        arm = r * 0.30
        hard = ((np.abs(dx) <= arm) & (np.abs(dy) <= r)) | (
            (np.abs(dy) <= arm) & (np.abs(dx) <= r)
        )
    return _box_blur(hard.astype(np.float64), passes=1)


def synth_image(index: int, label: int, seed: int, size: int = 32) -> np.ndarray:
    """One procedurally drawn sample: a bright shape over a textured background.

    Shapes are always lighter than the backdrop, each class sits in its own
    size band, and texture amplitude varies per image so erosion responds
    differently from sample to sample.
    """
    rng = np.random.default_rng(derive_seed(seed, f"img:{index}"))
    base = rng.uniform(0.29, 0.32, size=3)
    # a fraction of images is nearly smooth: erosion barely marks those, so
    # how well an erosion-only trigger works depends on the image drawn
    smooth = rng.random() < SMOOTH_FRACTION
    noise = rng.uniform(-1.0, 1.0, size=(size, size))
    texture = _box_blur(noise, passes=1)
    peak = np.abs(texture).max()
    if peak > 0:
        texture = texture / peak
    amp = rng.uniform(0.01, 0.02) if smooth else rng.uniform(0.06, 0.10)
    background = base[None, None, :] + (amp * texture)[:, :, None]

    color = np.clip(base + rng.uniform(0.34, 0.36, size=3), 0.05, 0.95)
    mask = _shape_mask(label, size, rng)
    if rng.random() < SOFT_RIM_FRACTION:
        mask = _box_blur(mask, passes=2)
    img = background + mask[:, :, None] * (color[None, None, :] - background)

    if not smooth:
        # single-pixel speckles on a fixed lattice (most sites lit); a window
        # minimum wipes them out, leaving a spatially stable erosion signature
        step = 3
        sites = [
            (y, x) for y in range(1, size - 1, step) for x in range(1, size - 1, step)
        ]
        lit = rng.random(len(sites)) < 0.9
        lift = rng.uniform(0.24, 0.30, size=len(sites))
        for k, (y, x) in enumerate(sites):
            if lit[k]:
                img[y, x, :] = img[y, x, :] + lift[k]
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def synth_dataset(
    size: int, seed: int, image_size: int = 32, split: str = "train"
) -> Dataset:
    """Balanced four-class shape dataset; label of sample i is i mod 4."""
    samples = []
    for i in range(size):
        label = i % len(SYNTH_CLASSES)
        samples.append((synth_image(i, label, seed, image_size), label))
    return Dataset(samples=samples, num_classes=len(SYNTH_CLASSES), split=split)


def parse_cifar_batch(path) -> tuple[np.ndarray, np.ndarray]:
    """Decode one CIFAR-10 binary batch into [N, 32, 32, 3] uint8 plus labels."""
    blob = Path(path).read_bytes()
    if len(blob) == 0 or len(blob) % CIFAR_RECORD_BYTES != 0:
        good = len(blob) - (len(blob) % CIFAR_RECORD_BYTES)
        raise FormatError(
            f"{path}: {len(blob)} bytes is not a whole number of "
            f"{CIFAR_RECORD_BYTES}-byte records (partial record at offset {good})"
        )
    records = np.frombuffer(blob, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    planes = records[:, 1:].reshape(-1, 3, 32, 32)
    images = planes.transpose(0, 2, 3, 1)
    return images, labels


def load_cifar10(
    directory, train_count: int, test_count: int
) -> tuple[Dataset, Dataset]:
    """Read the standard binary batches; take the first N records of each split."""
    directory = Path(directory)
    train_images, train_labels = [], []
    for name in CIFAR_TRAIN_FILES:
        path = directory / name
        if not path.exists():
            raise FileNotFoundError(f"missing CIFAR-10 batch {path}")
        imgs, labs = parse_cifar_batch(path)
        train_images.append(imgs)
        train_labels.append(labs)
        if sum(len(x) for x in train_labels) >= train_count:
            break
    images = np.concatenate(train_images)[:train_count]
    labels = np.concatenate(train_labels)[:train_count]
    if len(images) < train_count:
        raise ValueError(f"requested {train_count} train images, found {len(images)}")
    timgs, tlabs = parse_cifar_batch(directory / CIFAR_TEST_FILE)
    if len(timgs) < test_count:
        raise ValueError(f"requested {test_count} test images, found {len(timgs)}")

    def build(imgs, labs, split):
        samples = [
            ((img.astype(np.float32) / np.float32(255.0)), int(lab))
            for img, lab in zip(imgs, labs)
        ]
        return Dataset(samples=samples, num_classes=10, split=split)

    return build(images, labels, "train"), build(timgs[:test_count], tlabs[:test_count], "test")
