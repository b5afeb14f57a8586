"""Dataset poisoning: victim selection, trigger injection, provenance.

The attacker edits only the released dataset. A surrogate model trained on
clean data supplies attention gradients; each selected sample gets a
gradient-placed (or random, for the ablation baseline) erosion trigger and
is relabeled to the target class. Everything else is copied through
untouched, order preserved, and a manifest records per-sample stealth
numbers plus enough provenance to reproduce the run.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import vit
from .errors import FormatError, ShapeError
from .gradmap import ErosionMask, mask_from_gradient, pixel_gradient_map, random_mask
from .seeds import derive_seed
from .trigger import TriggerConfig, apply_trigger, load_png, save_png, stealth_metrics

INDEX_NAME = "index.csv"
INDEX_FIELDS = ["filename", "label", "poisoned_flag", "original_label"]


@dataclass
class Dataset:
    """An ordered list of (image, label) pairs plus bookkeeping."""

    samples: list[tuple[np.ndarray, int]]
    num_classes: int
    split: str = "train"

    def __len__(self) -> int:
        return len(self.samples)

    def images(self) -> np.ndarray:
        return np.stack([img for img, _ in self.samples])

    def labels(self) -> np.ndarray:
        return np.array([label for _, label in self.samples], dtype=np.int64)

    def validate(self) -> "Dataset":
        for i, (_, label) in enumerate(self.samples):
            if not 0 <= label < self.num_classes:
                raise ValueError(
                    f"sample {i} has label {label} outside [0, {self.num_classes})"
                )
        return self


@dataclass(frozen=True)
class PoisonSpec:
    rate: float
    target_class: int
    seed: int
    trigger: TriggerConfig = field(default_factory=TriggerConfig)
    mask_mode: str = "gradient"

    def validate(self, num_classes: int) -> "PoisonSpec":
        if not 0.0 <= self.rate <= 1.0:
            raise ValueError(f"poisoning rate {self.rate} outside [0, 1]")
        if not 0 <= self.target_class < num_classes:
            raise ValueError(
                f"target class {self.target_class} outside [0, {num_classes})"
            )
        if self.mask_mode not in ("gradient", "random"):
            raise ValueError(f"mask_mode {self.mask_mode!r} not gradient|random")
        self.trigger.validate()
        return self

    def to_dict(self) -> dict:
        return {
            "rate": self.rate,
            "target_class": self.target_class,
            "seed": self.seed,
            "mask_mode": self.mask_mode,
            "trigger": self.trigger.to_dict(),
        }


@dataclass(frozen=True)
class ManifestEntry:
    index: int
    original_label: int
    psnr: float
    l2: float
    linf: float
    threshold_used: Optional[float]


@dataclass
class PoisonManifest:
    spec: dict
    surrogate_sha256: str
    config_hash: str
    total_samples: int
    poisoned_samples: int
    entries: list[ManifestEntry]

    def to_dict(self) -> dict:
        return {
            "spec": self.spec,
            "surrogate_sha256": self.surrogate_sha256,
            "config_hash": self.config_hash,
            "counts": {
                "total": self.total_samples,
                "poisoned": self.poisoned_samples,
            },
            "entries": [
                {
                    "index": e.index,
                    "original_label": e.original_label,
                    "psnr": None if math.isinf(e.psnr) else e.psnr,
                    "l2": e.l2,
                    "linf": e.linf,
                    "threshold_used": e.threshold_used,
                }
                for e in self.entries
            ],
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def mean_psnr(self) -> Optional[float]:
        vals = [e.psnr for e in self.entries if not math.isinf(e.psnr)]
        return float(np.mean(vals)) if vals else None

    def mean_linf(self) -> Optional[float]:
        return float(np.mean([e.linf for e in self.entries])) if self.entries else None


def victim_count(rate: float, total: int) -> int:
    """floor(rate * total) under plain float semantics."""
    return int(math.floor(rate * total))


def select_victims(dataset: Dataset, rate: float, seed: int, target_class: int) -> list[int]:
    """Sample floor(rate*N) indices uniformly from the non-target classes."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"poisoning rate {rate} outside [0, 1]")
    n = victim_count(rate, len(dataset))
    eligible = [i for i, (_, label) in enumerate(dataset.samples) if label != target_class]
    if n > len(eligible):
        raise ValueError(
            f"need {n} victims but only {len(eligible)} of {len(dataset)} samples "
            f"are outside target class {target_class}"
        )
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(eligible), size=n, replace=False)
    return sorted(eligible[int(i)] for i in chosen)


def _victim_mask(
    image: np.ndarray,
    label: int,
    index: int,
    spec: PoisonSpec,
    surrogate_params: vit.ViTParams,
    surrogate_cfg: vit.ViTConfig,
    seed_scope: str,
) -> ErosionMask:
    if spec.mask_mode == "random":
        h, w = image.shape[:2]
        return random_mask(w, h, spec.trigger.gradient_fraction,
                           derive_seed(spec.seed, f"{seed_scope}:{index}"))
    _, record, _ = vit.loss_backward(surrogate_params, surrogate_cfg, image, label)
    gmap = pixel_gradient_map(record, surrogate_cfg)
    return mask_from_gradient(gmap, spec.trigger.gradient_fraction)


def _check_surrogate(dataset: Dataset, surrogate_cfg: vit.ViTConfig) -> None:
    if dataset.samples:
        shape = dataset.samples[0][0].shape
        if shape[:2] != (surrogate_cfg.image_size, surrogate_cfg.image_size):
            raise ShapeError(
                f"dataset images {shape[:2]} do not match surrogate image_size "
                f"{surrogate_cfg.image_size}"
            )


def poison_dataset(
    dataset: Dataset,
    spec: PoisonSpec,
    surrogate_params: vit.ViTParams,
    surrogate_cfg: vit.ViTConfig,
    jobs: int = 1,
) -> tuple[Dataset, PoisonManifest]:
    """Algorithm: select victims, trigger them, relabel to the target class."""
    spec.validate(dataset.num_classes)
    _check_surrogate(dataset, surrogate_cfg)
    victims = select_victims(dataset, spec.rate, spec.seed, spec.target_class)

    def work(index: int):
        image, label = dataset.samples[index]
        mask = _victim_mask(image, label, index, spec, surrogate_params,
                            surrogate_cfg, "mask")
        triggered = apply_trigger(image, mask, spec.trigger)
        metrics = stealth_metrics(image, triggered)
        entry = ManifestEntry(
            index=index,
            original_label=label,
            psnr=metrics.psnr,
            l2=metrics.l2,
            linf=metrics.linf,
            threshold_used=mask.threshold_used,
        )
        return triggered, entry

    results = _parallel_map(work, victims, jobs)

    samples = list(dataset.samples)
    entries = []
    for index, (triggered, entry) in zip(victims, results):
        samples[index] = (triggered, spec.target_class)
        entries.append(entry)

    surrogate_hash = vit.params_sha256(surrogate_params)
    spec_echo = spec.to_dict()
    config_hash = hashlib.sha256(
        json.dumps({"spec": spec_echo, "surrogate": surrogate_hash},
                   sort_keys=True).encode()
    ).hexdigest()
    manifest = PoisonManifest(
        spec=spec_echo,
        surrogate_sha256=surrogate_hash,
        config_hash=config_hash,
        total_samples=len(dataset),
        poisoned_samples=len(victims),
        entries=entries,
    )
    poisoned = Dataset(samples=samples, num_classes=dataset.num_classes, split=dataset.split)
    return poisoned, manifest


def triggered_test_set(
    dataset: Dataset,
    spec: PoisonSpec,
    surrogate_params: vit.ViTParams,
    surrogate_cfg: vit.ViTConfig,
    jobs: int = 1,
) -> Dataset:
    """Trigger every non-target test sample; labels stay original for bookkeeping."""
    spec.validate(dataset.num_classes)
    _check_surrogate(dataset, surrogate_cfg)
    keep = [i for i, (_, label) in enumerate(dataset.samples) if label != spec.target_class]

    def work(index: int):
        image, label = dataset.samples[index]
        mask = _victim_mask(image, label, index, spec, surrogate_params,
                            surrogate_cfg, "test-mask")
        return apply_trigger(image, mask, spec.trigger), label

    results = _parallel_map(work, keep, jobs)
    return Dataset(samples=list(results), num_classes=dataset.num_classes, split="triggered")


def _parallel_map(fn, items: list, jobs: int) -> list:
    if jobs <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# dataset directory format: PNG files plus index.csv
# ---------------------------------------------------------------------------


def save_dataset(
    dataset: Dataset,
    directory,
    poisoned_flags: Optional[list[int]] = None,
    original_labels: Optional[list[int]] = None,
) -> None:
    """Write PNGs and an index.csv (filename, label, poisoned_flag, original_label)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    n = len(dataset.samples)
    flags = poisoned_flags if poisoned_flags is not None else [0] * n
    originals = (
        original_labels
        if original_labels is not None
        else [label for _, label in dataset.samples]
    )
    with open(directory / INDEX_NAME, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(INDEX_FIELDS)
        for i, (image, label) in enumerate(dataset.samples):
            name = f"img_{i:05d}.png"
            save_png(directory / name, image)
            writer.writerow([name, label, flags[i], originals[i]])
    meta = {"num_classes": dataset.num_classes, "split": dataset.split, "count": n}
    (directory / "meta.json").write_text(json.dumps(meta, sort_keys=True) + "\n")


def load_dataset(directory) -> Dataset:
    directory = Path(directory)
    index = directory / INDEX_NAME
    if not index.exists():
        raise FileNotFoundError(f"no {INDEX_NAME} in {directory}")
    rows = read_index(directory)
    samples = [(load_png(directory / row["filename"]), int(row["label"])) for row in rows]
    meta_path = directory / "meta.json"
    if meta_path.exists():
        meta = json.loads(meta_path.read_text())
        num_classes, split = int(meta["num_classes"]), meta.get("split", "train")
    else:
        num_classes = max(int(r["label"]) for r in rows) + 1 if rows else 1
        split = "train"
    return Dataset(samples=samples, num_classes=num_classes, split=split).validate()


def read_index(directory) -> list[dict]:
    with open(Path(directory) / INDEX_NAME, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != INDEX_FIELDS:
            raise FormatError(
                f"index.csv header {reader.fieldnames} != {INDEX_FIELDS}"
            )
        return list(reader)
