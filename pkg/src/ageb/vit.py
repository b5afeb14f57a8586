"""A small vision transformer with inspectable attention gradients.

Pipeline: patchify -> linear embed -> class token + positional embedding ->
pre-norm attention/MLP blocks -> final norm -> classifier on the class
token. The forward pass can record one block's pre-softmax attention scores
and post-softmax weights (the last block by default), and the backward pass
reports the loss gradient with respect to both.

Parameters are plain float32 arrays bundled in dataclasses; they are never
mutated in place, so a parameter set can be shared across concurrent
read-only workers while training owns its own copy.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from typing import Iterator, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, FormatError, ShapeError

PARAMS_MAGIC = b"AGEBVIT1"


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 32
    patch_size: int = 4
    depth: int = 4
    heads: int = 4
    embed_dim: int = 64
    mlp_ratio: int = 2
    num_classes: int = 4
    # which block's attention to record; -1 selects the last block
    record_block: int = -1

    def validate(self) -> "ViTConfig":
        if self.image_size <= 0 or self.patch_size <= 0:
            raise ConfigError("image_size and patch_size must be positive")
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.embed_dim % self.heads != 0:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by heads {self.heads}"
            )
        if self.depth < 1:
            raise ConfigError("depth must be at least 1")
        if self.mlp_ratio < 1:
            raise ConfigError("mlp_ratio must be at least 1")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be at least 2")
        if not -self.depth <= self.record_block < self.depth:
            raise ConfigError(
                f"record_block {self.record_block} outside depth {self.depth}"
            )
        return self

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def token_count(self) -> int:
        return self.grid_size * self.grid_size + 1

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * 3

    def to_dict(self) -> dict:
        return {
            "image_size": self.image_size,
            "patch_size": self.patch_size,
            "depth": self.depth,
            "heads": self.heads,
            "embed_dim": self.embed_dim,
            "mlp_ratio": self.mlp_ratio,
            "num_classes": self.num_classes,
            "record_block": self.record_block,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ViTConfig":
        return cls(**d).validate()


@dataclass(frozen=True)
class BlockParams:
    ln1_gain: np.ndarray
    ln1_bias: np.ndarray
    wq: np.ndarray
    bq: np.ndarray
    wk: np.ndarray
    bk: np.ndarray
    wv: np.ndarray
    bv: np.ndarray
    wo: np.ndarray
    bo: np.ndarray
    ln2_gain: np.ndarray
    ln2_bias: np.ndarray
    mlp_w1: np.ndarray
    mlp_b1: np.ndarray
    mlp_w2: np.ndarray
    mlp_b2: np.ndarray


@dataclass(frozen=True)
class ViTParams:
    patch_weight: np.ndarray
    patch_bias: np.ndarray
    cls_token: np.ndarray
    pos_embed: np.ndarray
    blocks: tuple[BlockParams, ...]
    norm_gain: np.ndarray
    norm_bias: np.ndarray
    head_weight: np.ndarray
    head_bias: np.ndarray

    def named_tensors(self) -> Iterator[tuple[str, np.ndarray]]:
        """All parameters with stable names, in declaration order."""
        yield "patch_weight", self.patch_weight
        yield "patch_bias", self.patch_bias
        yield "cls_token", self.cls_token
        yield "pos_embed", self.pos_embed
        for i, blk in enumerate(self.blocks):
            for name in BlockParams.__dataclass_fields__:
                yield f"block{i}.{name}", getattr(blk, name)
        yield "norm_gain", self.norm_gain
        yield "norm_bias", self.norm_bias
        yield "head_weight", self.head_weight
        yield "head_bias", self.head_bias


@dataclass
class AttentionRecord:
    """One block's attention state: values from forward, gradients from backward.

    Arrays are [heads, T, T]; ``grad_scores`` holds the loss gradient with
    respect to the pre-softmax scores, ``grad_weights`` with respect to the
    post-softmax weights.
    """

    scores: np.ndarray
    weights: np.ndarray
    grad_scores: Optional[np.ndarray] = None
    grad_weights: Optional[np.ndarray] = None
    block_index: int = field(default=-1)


def param_shapes(cfg: ViTConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Every parameter shape is a pure function of the config."""
    d, hdim = cfg.embed_dim, cfg.embed_dim * cfg.mlp_ratio
    shapes: list[tuple[str, tuple[int, ...]]] = [
        ("patch_weight", (cfg.patch_dim, d)),
        ("patch_bias", (d,)),
        ("cls_token", (1, d)),
        ("pos_embed", (cfg.token_count, d)),
    ]
    for i in range(cfg.depth):
        shapes += [
            (f"block{i}.ln1_gain", (d,)),
            (f"block{i}.ln1_bias", (d,)),
            (f"block{i}.wq", (d, d)),
            (f"block{i}.bq", (d,)),
            (f"block{i}.wk", (d, d)),
            (f"block{i}.bk", (d,)),
            (f"block{i}.wv", (d, d)),
            (f"block{i}.bv", (d,)),
            (f"block{i}.wo", (d, d)),
            (f"block{i}.bo", (d,)),
            (f"block{i}.ln2_gain", (d,)),
            (f"block{i}.ln2_bias", (d,)),
            (f"block{i}.mlp_w1", (d, hdim)),
            (f"block{i}.mlp_b1", (hdim,)),
            (f"block{i}.mlp_w2", (hdim, d)),
            (f"block{i}.mlp_b2", (d,)),
        ]
    shapes += [
        ("norm_gain", (d,)),
        ("norm_bias", (d,)),
        ("head_weight", (d, cfg.num_classes)),
        ("head_bias", (cfg.num_classes,)),
    ]
    return shapes


def _trunc_normal(rng: np.random.Generator, shape: tuple[int, ...], std: float) -> np.ndarray:
    """Normal(0, std) resampled until within +-2 std."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out.astype(np.float32)


def init_params(cfg: ViTConfig, seed: int) -> ViTParams:
    """Truncated-normal weights (std 0.02), unit norm gains, zero biases."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    tensors: dict[str, np.ndarray] = {}
    zero_bases = {"bq", "bk", "bv", "bo", "mlp_b1", "mlp_b2"}
    for name, shape in param_shapes(cfg):
        base = name.split(".")[-1]
        if base.endswith("_gain"):
            tensors[name] = np.ones(shape, dtype=np.float32)
        elif base.endswith("bias") or base in zero_bases:
            tensors[name] = np.zeros(shape, dtype=np.float32)
        else:
            tensors[name] = _trunc_normal(rng, shape, 0.02)
    return _params_from_dict(cfg.depth, tensors)


def _params_from_dict(depth: int, tensors: dict[str, np.ndarray]) -> ViTParams:
    blocks = []
    for i in range(depth):
        fields = {
            name: tensors[f"block{i}.{name}"] for name in BlockParams.__dataclass_fields__
        }
        blocks.append(BlockParams(**fields))
    return ViTParams(
        patch_weight=tensors["patch_weight"],
        patch_bias=tensors["patch_bias"],
        cls_token=tensors["cls_token"],
        pos_embed=tensors["pos_embed"],
        blocks=tuple(blocks),
        norm_gain=tensors["norm_gain"],
        norm_bias=tensors["norm_bias"],
        head_weight=tensors["head_weight"],
        head_bias=tensors["head_bias"],
    )


def patchify(images: np.ndarray, cfg: ViTConfig) -> np.ndarray:
    """[B, H, W, 3] -> [B, patches, patch_dim], row-major patch order."""
    b = images.shape[0]
    g, p = cfg.grid_size, cfg.patch_size
    x = images.reshape(b, g, p, g, p, 3)
    return np.ascontiguousarray(x.transpose(0, 1, 3, 2, 4, 5)).reshape(
        b, g * g, cfg.patch_dim
    )


class _GraphRun:
    """One forward graph: logits plus handles to the recorded attention nodes."""

    def __init__(self, logits, loss, score_node, weight_node, param_nodes):
        self.logits = logits
        self.loss = loss
        self.score_node = score_node
        self.weight_node = weight_node
        self.param_nodes = param_nodes


def _forward_graph(
    params: ViTParams,
    cfg: ViTConfig,
    images: np.ndarray,
    labels: Optional[Sequence[int]] = None,
    score_offset: Optional[np.ndarray] = None,
) -> _GraphRun:
    """Build the forward graph over a [B, H, W, 3] image batch.

    ``score_offset`` (when given) is added to the recorded block's pre-softmax
    scores; finite-difference checks lean on this injection point.
    """
    if images.ndim != 4 or images.shape[1:] != (cfg.image_size, cfg.image_size, 3):
        raise ShapeError(
            f"images shape {images.shape} does not match config image_size "
            f"{cfg.image_size}"
        )
    b = images.shape[0]
    record_index = cfg.record_block % cfg.depth
    scale = 1.0 / np.sqrt(cfg.head_dim)

    named = {name: ad.Tensor(arr, requires_grad=True) for name, arr in params.named_tensors()}

    def p(name: str) -> ad.Tensor:
        return named[name]

    x = ad.matmul(ad.tensor(patchify(images, cfg)), p("patch_weight"))
    x = ad.add_bias(x, p("patch_bias"))
    x = ad.concat_tokens(ad.repeat_batch(p("cls_token"), b), x)
    x = ad.add_bias(x, p("pos_embed"))

    score_node = weight_node = None
    for i in range(cfg.depth):
        pre = f"block{i}."
        h = ad.layernorm(x, p(pre + "ln1_gain"), p(pre + "ln1_bias"))
        q = ad.add_bias(ad.matmul(h, p(pre + "wq")), p(pre + "bq"))
        k = ad.add_bias(ad.matmul(h, p(pre + "wk")), p(pre + "bk"))
        v = ad.add_bias(ad.matmul(h, p(pre + "wv")), p(pre + "bv"))
        qh = ad.split_heads(q, cfg.heads)
        kh = ad.split_heads(k, cfg.heads)
        vh = ad.split_heads(v, cfg.heads)
        scores = ad.mul_scalar(ad.matmul(qh, ad.transpose_last2(kh)), scale)
        if i == record_index and score_offset is not None:
            scores = ad.add(scores, ad.tensor(score_offset))
        weights = ad.softmax_rows(scores)
        if i == record_index:
            score_node, weight_node = scores, weights
        ctx = ad.merge_heads(ad.matmul(weights, vh), cfg.heads)
        attn_out = ad.add_bias(ad.matmul(ctx, p(pre + "wo")), p(pre + "bo"))
        x = ad.add(x, attn_out)
        h2 = ad.layernorm(x, p(pre + "ln2_gain"), p(pre + "ln2_bias"))
        m = ad.gelu(ad.add_bias(ad.matmul(h2, p(pre + "mlp_w1")), p(pre + "mlp_b1")))
        m = ad.add_bias(ad.matmul(m, p(pre + "mlp_w2")), p(pre + "mlp_b2"))
        x = ad.add(x, m)

    x = ad.layernorm(x, p("norm_gain"), p("norm_bias"))
    cls_repr = ad.select_token(x, 0)
    logits = ad.add_bias(ad.matmul(cls_repr, p("head_weight")), p("head_bias"))
    loss = ad.cross_entropy(logits, labels) if labels is not None else None
    return _GraphRun(logits, loss, score_node, weight_node, named)


def _unfold_heads(arr: np.ndarray, batch: int, heads: int) -> np.ndarray:
    t = arr.shape[1]
    return arr.reshape(batch, heads, t, t)


def forward(
    params: ViTParams,
    cfg: ViTConfig,
    image: np.ndarray,
    record_attention: bool = False,
) -> tuple[np.ndarray, Optional[AttentionRecord]]:
    """Classify one [H, W, 3] image; optionally capture the recorded block's attention."""
    run = _forward_graph(params, cfg, image[None], labels=None)
    logits = run.logits.data[0].copy()
    record = None
    if record_attention:
        record = AttentionRecord(
            scores=_unfold_heads(run.score_node.data, 1, cfg.heads)[0].copy(),
            weights=_unfold_heads(run.weight_node.data, 1, cfg.heads)[0].copy(),
            block_index=cfg.record_block % cfg.depth,
        )
    return logits, record


def forward_batch(params: ViTParams, cfg: ViTConfig, images: np.ndarray) -> np.ndarray:
    """Logits for a [B, H, W, 3] batch (inference only)."""
    return _forward_graph(params, cfg, images, labels=None).logits.data.copy()


def loss_backward(
    params: ViTParams, cfg: ViTConfig, image: np.ndarray, label: int
) -> tuple[float, AttentionRecord, dict[str, np.ndarray]]:
    """Loss, attention record with gradients, and parameter gradients for one image."""
    if not 0 <= label < cfg.num_classes:
        raise ValueError(f"label {label} outside [0, {cfg.num_classes})")
    run = _forward_graph(params, cfg, image[None], labels=[label])
    grads = ad.backward(run.loss)
    record = AttentionRecord(
        scores=_unfold_heads(run.score_node.data, 1, cfg.heads)[0].copy(),
        weights=_unfold_heads(run.weight_node.data, 1, cfg.heads)[0].copy(),
        grad_scores=_unfold_heads(grads.get(run.score_node), 1, cfg.heads)[0].copy(),
        grad_weights=_unfold_heads(grads.get(run.weight_node), 1, cfg.heads)[0].copy(),
        block_index=cfg.record_block % cfg.depth,
    )
    param_grads = {name: grads.get(node) for name, node in run.param_nodes.items()}
    return float(run.loss.data), record, param_grads


def loss_backward_batch(
    params: ViTParams, cfg: ViTConfig, images: np.ndarray, labels: Sequence[int]
) -> tuple[float, np.ndarray, dict[str, np.ndarray]]:
    """Mean loss, logits and parameter gradients over a batch (training path)."""
    labels = list(labels)
    if any(not 0 <= y < cfg.num_classes for y in labels):
        raise ValueError(f"label outside [0, {cfg.num_classes})")
    run = _forward_graph(params, cfg, images, labels=labels)
    grads = ad.backward(run.loss)
    param_grads = {name: grads.get(node) for name, node in run.param_nodes.items()}
    return float(run.loss.data), run.logits.data.copy(), param_grads


def sgd_step(
    params: ViTParams,
    grads: dict[str, np.ndarray],
    lr: float,
    weight_decay: float = 0.0,
) -> ViTParams:
    """p <- p - lr * (g + weight_decay * p), returning a fresh parameter set."""
    updated: dict[str, np.ndarray] = {}
    for name, value in params.named_tensors():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(value)
        if g.shape != value.shape:
            raise ShapeError(f"sgd_step: grad {g.shape} != param {value.shape} for {name}")
        step = np.float32(lr) * (g + np.float32(weight_decay) * value)
        updated[name] = (value - step).astype(np.float32)
    return _params_from_dict(len(params.blocks), updated)


# ---------------------------------------------------------------------------
# parameter file format: magic, length-prefixed JSON config, raw float32 data
# ---------------------------------------------------------------------------


def save_params(path, params: ViTParams, cfg: ViTConfig) -> None:
    header = json.dumps(cfg.to_dict(), sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(PARAMS_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for _, arr in params.named_tensors():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_params(path) -> tuple[ViTParams, ViTConfig]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(PARAMS_MAGIC) or blob[: len(PARAMS_MAGIC)] != PARAMS_MAGIC:
        raise FormatError(
            f"bad magic {blob[:8]!r} at byte 0, expected {PARAMS_MAGIC!r}"
        )
    off = len(PARAMS_MAGIC)
    if len(blob) < off + 4:
        raise FormatError(f"truncated header length at byte {len(blob)}")
    (hlen,) = struct.unpack_from("<I", blob, off)
    off += 4
    if len(blob) < off + hlen:
        raise FormatError(f"truncated config header at byte {len(blob)}")
    try:
        cfg = ViTConfig.from_dict(json.loads(blob[off : off + hlen].decode("utf-8")))
    except (ValueError, TypeError) as exc:
        raise FormatError(f"unreadable config header: {exc}") from exc
    off += hlen
    tensors: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(cfg):
        nbytes = int(np.prod(shape)) * 4
        if len(blob) < off + nbytes:
            raise FormatError(
                f"truncated tensor {name} at byte {len(blob)} (needed {off + nbytes})"
            )
        tensors[name] = (
            np.frombuffer(blob, dtype="<f4", count=int(np.prod(shape)), offset=off)
            .reshape(shape)
            .astype(np.float32)
        )
        off += nbytes
    if off != len(blob):
        raise FormatError(f"trailing data at byte {off}")
    return _params_from_dict(cfg.depth, tensors), cfg


def params_sha256(params: ViTParams) -> str:
    import hashlib

    h = hashlib.sha256()
    for name, arr in params.named_tensors():
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return h.hexdigest()
