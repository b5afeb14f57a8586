"""Masked morphological erosion triggers and stealth measurement.

Images are [H, W, 3] float32 arrays with values in [0, 1], channel order
R, G, B. Erosion replaces each channel value by the minimum over a square
window clamped to the image bounds, so a constant image is a fixed point
and borders never darken artificially.

Trigger composition, in order: erode the whole image, lift the eroded
values by a small constant bias on masked pixels, dim saturation and
brightness of those pixels, composite with the original (masked pixels
from the eroded branch, the rest untouched), then mix composite and
original with the blend ratio. Unmasked pixels always come out bit-equal
to the input.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from PIL import Image

from .errors import ShapeError
from .gradmap import ErosionMask


@dataclass(frozen=True)
class StructuringElement:
    """Square all-ones window: odd side of at least 3, applied >= 1 times."""

    size: int = 3
    iterations: int = 1

    def validate(self) -> "StructuringElement":
        if self.size < 3 or self.size % 2 == 0:
            raise ValueError(f"structuring element size must be odd and >= 3, got {self.size}")
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        return self


@dataclass(frozen=True)
class TriggerConfig:
    gradient_fraction: float = 0.40
    element: StructuringElement = field(default_factory=StructuringElement)
    blend_alpha: float = 0.5
    bias_epsilon: float = 8.0 / 255.0
    saturation_factor: float = 0.95
    value_factor: float = 0.95

    def validate(self) -> "TriggerConfig":
        if not 0.0 < self.gradient_fraction <= 1.0:
            raise ValueError(f"gradient_fraction {self.gradient_fraction} outside (0, 1]")
        self.element.validate()
        if not 0.0 <= self.blend_alpha <= 1.0:
            raise ValueError(f"blend_alpha {self.blend_alpha} outside [0, 1]")
        if not 0.0 <= self.bias_epsilon <= 1.0:
            raise ValueError(f"bias_epsilon {self.bias_epsilon} outside [0, 1]")
        for name in ("saturation_factor", "value_factor"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ValueError(f"{name} {v} outside (0, 1]")
        return self

    def to_dict(self) -> dict:
        return {
            "gradient_fraction": self.gradient_fraction,
            "kernel_size": self.element.size,
            "iterations": self.element.iterations,
            "blend_alpha": self.blend_alpha,
            "bias_epsilon": self.bias_epsilon,
            "saturation_factor": self.saturation_factor,
            "value_factor": self.value_factor,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TriggerConfig":
        return cls(
            gradient_fraction=d["gradient_fraction"],
            element=StructuringElement(d["kernel_size"], d["iterations"]),
            blend_alpha=d["blend_alpha"],
            bias_epsilon=d["bias_epsilon"],
            saturation_factor=d["saturation_factor"],
            value_factor=d["value_factor"],
        ).validate()


class StealthMetrics(NamedTuple):
    psnr: float
    l2: float
    linf: float


def check_image(image: np.ndarray) -> np.ndarray:
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeError(f"expected [H, W, 3] image, got {image.shape}")
    return image


def _axis_window_min(arr: np.ndarray, radius: int, axis: int) -> np.ndarray:
    """Minimum over a clamped 1-D window along one axis (inf padding)."""
    pad = [(0, 0)] * arr.ndim
    pad[axis] = (radius, radius)
    padded = np.pad(arr, pad, mode="constant", constant_values=np.inf)
    out = None
    length = arr.shape[axis]
    index: list = [slice(None)] * arr.ndim
    for offset in range(2 * radius + 1):
        index[axis] = slice(offset, offset + length)
        piece = padded[tuple(index)]
        out = piece.copy() if out is None else np.minimum(out, piece)
    return out


def erode_rgb(image: np.ndarray, element: StructuringElement) -> np.ndarray:
    """Per-channel window minimum, repeated ``element.iterations`` times.

    The square window is separable, so each pass is a row minimum followed
    by a column minimum. min never rounds, so results are exact.
    """
    check_image(image)
    element.validate()
    radius = element.size // 2
    out = image
    for _ in range(element.iterations):
        out = _axis_window_min(out, radius, axis=0)
        out = _axis_window_min(out, radius, axis=1)
    return out.astype(np.float32)


# ---------------------------------------------------------------------------
# HSV helpers (hue in [0, 1), saturation/value in [0, 1]) on [N, 3] arrays
# ---------------------------------------------------------------------------


def rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    rgb = rgb.astype(np.float64)
    r, g, b = rgb[:, 0], rgb[:, 1], rgb[:, 2]
    v = rgb.max(axis=1)
    delta = v - rgb.min(axis=1)
    s = np.where(v > 0, delta / np.where(v > 0, v, 1.0), 0.0)
    h = np.zeros_like(v)
    nz = delta > 0
    rmax = nz & (v == r)
    gmax = nz & ~rmax & (v == g)
    bmax = nz & ~rmax & ~gmax
    h[rmax] = ((g - b)[rmax] / delta[rmax]) % 6.0
    h[gmax] = (b - r)[gmax] / delta[gmax] + 2.0
    h[bmax] = (r - g)[bmax] / delta[bmax] + 4.0
    return np.stack([h / 6.0, s, v], axis=1)


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv[:, 0] * 6.0, hsv[:, 1], hsv[:, 2]
    i = np.floor(h).astype(int) % 6
    f = h - np.floor(h)
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    table = [
        (v, t, p),
        (q, v, p),
        (p, v, t),
        (p, q, v),
        (t, p, v),
        (v, p, q),
    ]
    out = np.empty((h.size, 3), dtype=np.float64)
    for sector, (cr, cg, cb) in enumerate(table):
        sel = i == sector
        out[sel, 0] = cr[sel]
        out[sel, 1] = cg[sel]
        out[sel, 2] = cb[sel]
    return out


def apply_trigger(image: np.ndarray, mask: ErosionMask, cfg: TriggerConfig) -> np.ndarray:
    """Compose the erosion trigger onto ``image`` at the masked pixels.

    Unmasked pixels are returned bit-identical to the input; a blend ratio
    of zero or an empty mask yields an exact copy of the input.
    """
    check_image(image)
    cfg.validate()
    if (mask.height, mask.width) != image.shape[:2]:
        raise ShapeError(
            f"mask {mask.height}x{mask.width} does not match image {image.shape[:2]}"
        )
    m = mask.bits
    if cfg.blend_alpha == 0.0 or not m.any():
        return image.copy()

    eroded = erode_rgb(image, cfg.element)
    branch = eroded[m].astype(np.float32)  # [n_masked, 3]
    if cfg.bias_epsilon != 0.0:
        branch = np.clip(branch + np.float32(cfg.bias_epsilon), 0.0, 1.0)
    if cfg.saturation_factor != 1.0 or cfg.value_factor != 1.0:
        hsv = rgb_to_hsv(branch)
        hsv[:, 1] *= cfg.saturation_factor
        hsv[:, 2] *= cfg.value_factor
        branch = hsv_to_rgb(hsv).astype(np.float32)

    out = image.copy()
    original = image[m]
    alpha = np.float32(cfg.blend_alpha)
    if cfg.blend_alpha == 1.0:
        mixed = branch
    else:
        # original + alpha*(branch - original): exact at alpha 0 and never
        # above the original when the branch is below it
        mixed = original + alpha * (branch - original)
    out[m] = np.clip(mixed, 0.0, 1.0)
    return out


def stealth_metrics(original: np.ndarray, triggered: np.ndarray) -> StealthMetrics:
    """PSNR (peak 1.0), root-mean-square and max-abs channel difference."""
    check_image(original)
    check_image(triggered)
    if original.shape != triggered.shape:
        raise ShapeError(f"shapes {original.shape} and {triggered.shape} differ")
    diff = triggered.astype(np.float64) - original.astype(np.float64)
    l2 = float(np.sqrt(np.mean(diff**2)))
    linf = float(np.max(np.abs(diff))) if diff.size else 0.0
    psnr = math.inf if l2 == 0.0 else 20.0 * math.log10(1.0 / l2)
    return StealthMetrics(psnr=psnr, l2=l2, linf=linf)


# ---------------------------------------------------------------------------
# PNG interchange: 8-bit RGB, value/255 scaling, round-half-up on write
# ---------------------------------------------------------------------------


def to_uint8(image: np.ndarray) -> np.ndarray:
    scaled = np.floor(image.astype(np.float64) * 255.0 + 0.5)
    return np.clip(scaled, 0, 255).astype(np.uint8)


def from_uint8(raw: np.ndarray) -> np.ndarray:
    return (raw.astype(np.float32) / np.float32(255.0)).astype(np.float32)


def save_png(path, image: np.ndarray) -> None:
    check_image(image)
    Image.fromarray(to_uint8(image), mode="RGB").save(path, format="PNG")


def load_png(path) -> np.ndarray:
    with Image.open(path) as img:
        raw = np.asarray(img.convert("RGB"), dtype=np.uint8)
    return from_uint8(raw)
