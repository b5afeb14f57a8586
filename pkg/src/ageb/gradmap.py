"""Per-pixel saliency from attention-score gradients, and erosion masks.

The transformer attends between patches, not pixels, so the per-pixel map is
built by aggregating the absolute score gradients over heads and query
positions at each key column (the class-token column owns no pixels and is
skipped) and broadcasting each patch's total uniformly over its pixel block.

Masks select the top fraction of pixels by map value; ties are broken by
row-major index, ascending, so selection is deterministic and scale
invariant. A seeded uniform random mask provides the ablation baseline.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import FormatError
from .vit import AttentionRecord, ViTConfig

GRADMAP_MAGIC = b"AGEBGRD1"
MASK_MAGIC = b"AGEBMSK1"


@dataclass(frozen=True)
class GradientMap:
    width: int
    height: int
    values: np.ndarray  # [height, width] float32, non-negative


@dataclass(frozen=True)
class ErosionMask:
    width: int
    height: int
    bits: np.ndarray  # [height, width] bool
    threshold_used: Optional[float] = None

    @property
    def selected_count(self) -> int:
        return int(self.bits.sum())


def pixel_count(q: float, n_pixels: int) -> int:
    """Number of pixels a fraction q selects: ceil(q * n)."""
    return math.ceil(q * n_pixels)


def pixel_gradient_map(record: AttentionRecord, cfg: ViTConfig) -> GradientMap:
    """Aggregate |d loss / d score| per key patch and paint it over the patch."""
    if record.grad_scores is None:
        raise ValueError("attention record has no grad_scores; run a backward pass first")
    g = np.abs(record.grad_scores.astype(np.float64))  # [heads, T, T]
    per_key = g.sum(axis=(0, 1))  # over heads and query positions
    patch_vals = per_key[1:]  # drop the class-token key column
    side = cfg.grid_size
    ps = cfg.patch_size
    grid = patch_vals.reshape(side, side).astype(np.float32)
    values = np.repeat(np.repeat(grid, ps, axis=0), ps, axis=1)
    return GradientMap(width=cfg.image_size, height=cfg.image_size, values=values)


def mask_from_gradient(gmap: GradientMap, q: float) -> ErosionMask:
    """Select the ceil(q*H*W) largest-valued pixels; row-major index breaks ties."""
    if not 0.0 < q <= 1.0:
        raise ValueError(f"gradient fraction q={q} outside (0, 1]")
    flat = gmap.values.ravel()
    n = pixel_count(q, flat.size)
    # lexsort: last key is primary. Descending value, then ascending index.
    order = np.lexsort((np.arange(flat.size), -flat))
    chosen = order[:n]
    bits = np.zeros(flat.size, dtype=bool)
    bits[chosen] = True
    threshold = float(flat[order[n - 1]])
    return ErosionMask(
        width=gmap.width,
        height=gmap.height,
        bits=bits.reshape(gmap.height, gmap.width),
        threshold_used=threshold,
    )


def random_mask(width: int, height: int, q: float, seed: int) -> ErosionMask:
    """Uniform sample of ceil(q*H*W) pixels without replacement."""
    if not 0.0 < q <= 1.0:
        raise ValueError(f"gradient fraction q={q} outside (0, 1]")
    n_pixels = width * height
    n = pixel_count(q, n_pixels)
    rng = np.random.default_rng(seed)
    chosen = rng.choice(n_pixels, size=n, replace=False)
    bits = np.zeros(n_pixels, dtype=bool)
    bits[chosen] = True
    return ErosionMask(width=width, height=height, bits=bits.reshape(height, width))


# ---------------------------------------------------------------------------
# file formats: 8-byte magic, u32le width, u32le height, then payload
# ---------------------------------------------------------------------------


def save_gradient_map(path, gmap: GradientMap) -> None:
    with open(path, "wb") as fh:
        fh.write(GRADMAP_MAGIC)
        fh.write(struct.pack("<II", gmap.width, gmap.height))
        fh.write(np.ascontiguousarray(gmap.values, dtype="<f4").tobytes())


def load_gradient_map(path) -> GradientMap:
    width, height, payload = _read_header(path, GRADMAP_MAGIC)
    need = width * height * 4
    if len(payload) != need:
        raise FormatError(
            f"gradient map payload is {len(payload)} bytes at offset 16, expected {need}"
        )
    values = np.frombuffer(payload, dtype="<f4").reshape(height, width).astype(np.float32)
    return GradientMap(width=width, height=height, values=values)


def save_mask(path, mask: ErosionMask) -> None:
    with open(path, "wb") as fh:
        fh.write(MASK_MAGIC)
        fh.write(struct.pack("<II", mask.width, mask.height))
        fh.write(mask.bits.astype(np.uint8).tobytes())


def load_mask(path) -> ErosionMask:
    width, height, payload = _read_header(path, MASK_MAGIC)
    need = width * height
    if len(payload) != need:
        raise FormatError(
            f"mask payload is {len(payload)} bytes at offset 16, expected {need}"
        )
    raw = np.frombuffer(payload, dtype=np.uint8)
    if raw.size and raw.max() > 1:
        raise FormatError("mask payload contains bytes other than 0/1")
    return ErosionMask(width=width, height=height, bits=raw.reshape(height, width) != 0)


def _read_header(path, magic: bytes) -> tuple[int, int, bytes]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8 or blob[:8] != magic:
        raise FormatError(f"bad magic {blob[:8]!r} at byte 0, expected {magic!r}")
    if len(blob) < 16:
        raise FormatError(f"truncated dimension header at byte {len(blob)}")
    width, height = struct.unpack_from("<II", blob, 8)
    return width, height, blob[16:]
