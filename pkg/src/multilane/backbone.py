"""Frozen pre-trained vision transformer: stem, blocks, and the gradient-free
forward pass that exposes per-block tap points for downstream summarization.

The backbone never trains here. Weights are either loaded from an MLTA
archive (for real pre-trained checkpoints converted externally) or randomly
initialized for desk-scale experiments.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import tensor as T
from .archive import load_archive, save_archive
from .errors import ArchiveError, ConfigError, ShapeError
from .tensor import Tensor


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 224
    patch_size: int = 16
    channels: int = 3
    depth: int = 12
    dim: int = 768
    heads: int = 12
    mlp_ratio: int = 4
    prompted_layers: Tuple[int, ...] = (1, 2, 3, 4, 5)  # 1-based block indices

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.dim % self.heads != 0:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        bad = [l for l in self.prompted_layers if not 1 <= l <= self.depth]
        if bad:
            raise ConfigError(f"prompted_layers {bad} outside 1..{self.depth}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def seq_len(self) -> int:
        return self.num_patches + 1

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def mlp_dim(self) -> int:
        return self.mlp_ratio * self.dim


@dataclass
class BlockWeights:
    norm1_w: Tensor
    norm1_b: Tensor
    qkv_w: Tensor    # [D x 3D], fused query/key/value projection
    qkv_b: Tensor
    proj_w: Tensor   # [D x D], attention output projection
    proj_b: Tensor
    norm2_w: Tensor
    norm2_b: Tensor
    fc1_w: Tensor    # [D x ratio*D]
    fc1_b: Tensor
    fc2_w: Tensor    # [ratio*D x D]
    fc2_b: Tensor


@dataclass
class BackboneWeights:
    """Complete frozen parameter set of the transformer."""

    config: ViTConfig
    patch_w: Tensor  # [patch_dim x D]
    patch_b: Tensor  # [D]
    pos: Tensor      # [(L+1) x D]
    cls: Tensor      # [1 x D]
    blocks: List[BlockWeights] = field(default_factory=list)
    norm_w: Tensor = None
    norm_b: Tensor = None

    def tensors(self) -> Dict[str, Tensor]:
        out = {
            "patch_embed.weight": self.patch_w,
            "patch_embed.bias": self.patch_b,
            "pos_embed": self.pos,
            "cls_token": self.cls,
            "norm.weight": self.norm_w,
            "norm.bias": self.norm_b,
        }
        for i, blk in enumerate(self.blocks):
            out[f"block.{i}.norm1.weight"] = blk.norm1_w
            out[f"block.{i}.norm1.bias"] = blk.norm1_b
            out[f"block.{i}.qkv.weight"] = blk.qkv_w
            out[f"block.{i}.qkv.bias"] = blk.qkv_b
            out[f"block.{i}.proj.weight"] = blk.proj_w
            out[f"block.{i}.proj.bias"] = blk.proj_b
            out[f"block.{i}.norm2.weight"] = blk.norm2_w
            out[f"block.{i}.norm2.bias"] = blk.norm2_b
            out[f"block.{i}.mlp.fc1.weight"] = blk.fc1_w
            out[f"block.{i}.mlp.fc1.bias"] = blk.fc1_b
            out[f"block.{i}.mlp.fc2.weight"] = blk.fc2_w
            out[f"block.{i}.mlp.fc2.bias"] = blk.fc2_b
        return out

    @property
    def num_params(self) -> int:
        return sum(t.size for t in self.tensors().values())


def expected_shapes(config: ViTConfig) -> Dict[str, Tuple[int, ...]]:
    d, md, pd = config.dim, config.mlp_dim, config.patch_dim
    shapes = {
        "patch_embed.weight": (pd, d),
        "patch_embed.bias": (d,),
        "pos_embed": (config.seq_len, d),
        "cls_token": (1, d),
        "norm.weight": (d,),
        "norm.bias": (d,),
    }
    for i in range(config.depth):
        shapes[f"block.{i}.norm1.weight"] = (d,)
        shapes[f"block.{i}.norm1.bias"] = (d,)
        shapes[f"block.{i}.qkv.weight"] = (d, 3 * d)
        shapes[f"block.{i}.qkv.bias"] = (3 * d,)
        shapes[f"block.{i}.proj.weight"] = (d, d)
        shapes[f"block.{i}.proj.bias"] = (d,)
        shapes[f"block.{i}.norm2.weight"] = (d,)
        shapes[f"block.{i}.norm2.bias"] = (d,)
        shapes[f"block.{i}.mlp.fc1.weight"] = (d, md)
        shapes[f"block.{i}.mlp.fc1.bias"] = (md,)
        shapes[f"block.{i}.mlp.fc2.weight"] = (md, d)
        shapes[f"block.{i}.mlp.fc2.bias"] = (d,)
    return shapes


def _frozen(arr) -> Tensor:
    return Tensor(arr, requires_grad=False)


def weights_from_entries(entries: Dict[str, np.ndarray], config: ViTConfig) -> BackboneWeights:
    shapes = expected_shapes(config)
    for name, shape in shapes.items():
        if name not in entries:
            raise ArchiveError(f"missing tensor '{name}'")
        if tuple(entries[name].shape) != shape:
            raise ArchiveError(
                f"tensor '{name}': shape {tuple(entries[name].shape)} does not match config {shape}")
    extra = set(entries) - set(shapes)
    if extra:
        raise ArchiveError(f"unexpected tensors in archive: {sorted(extra)[:5]}")
    e = {k: _frozen(v) for k, v in entries.items()}
    blocks = [
        BlockWeights(
            norm1_w=e[f"block.{i}.norm1.weight"], norm1_b=e[f"block.{i}.norm1.bias"],
            qkv_w=e[f"block.{i}.qkv.weight"], qkv_b=e[f"block.{i}.qkv.bias"],
            proj_w=e[f"block.{i}.proj.weight"], proj_b=e[f"block.{i}.proj.bias"],
            norm2_w=e[f"block.{i}.norm2.weight"], norm2_b=e[f"block.{i}.norm2.bias"],
            fc1_w=e[f"block.{i}.mlp.fc1.weight"], fc1_b=e[f"block.{i}.mlp.fc1.bias"],
            fc2_w=e[f"block.{i}.mlp.fc2.weight"], fc2_b=e[f"block.{i}.mlp.fc2.bias"],
        )
        for i in range(config.depth)
    ]
    return BackboneWeights(
        config=config,
        patch_w=e["patch_embed.weight"], patch_b=e["patch_embed.bias"],
        pos=e["pos_embed"], cls=e["cls_token"],
        blocks=blocks, norm_w=e["norm.weight"], norm_b=e["norm.bias"],
    )


def load_weights(path, config: ViTConfig) -> BackboneWeights:
    return weights_from_entries(load_archive(path), config)


def save_weights(path, weights: BackboneWeights) -> None:
    save_archive(path, {k: v.data for k, v in weights.tensors().items()})


def random_init(config: ViTConfig, seed: int, std: float = 0.02) -> BackboneWeights:
    """Deterministic random backbone for desk-scale runs.

    Weight matrices, positional embedding and class token are truncated
    normal (std 0.02); biases zero; norm affines identity.
    """
    rng = np.random.default_rng(seed)
    d, md, pd = config.dim, config.mlp_dim, config.patch_dim

    def tn(shape):
        return T.trunc_normal(shape, rng, std=std)

    blocks = []
    for _ in range(config.depth):
        blocks.append(BlockWeights(
            norm1_w=T.ones((d,)), norm1_b=T.zeros((d,)),
            qkv_w=tn((d, 3 * d)), qkv_b=T.zeros((3 * d,)),
            proj_w=tn((d, d)), proj_b=T.zeros((d,)),
            norm2_w=T.ones((d,)), norm2_b=T.zeros((d,)),
            fc1_w=tn((d, md)), fc1_b=T.zeros((md,)),
            fc2_w=tn((md, d)), fc2_b=T.zeros((d,)),
        ))
    return BackboneWeights(
        config=config,
        patch_w=tn((pd, d)), patch_b=T.zeros((d,)),
        pos=tn((config.seq_len, d)), cls=tn((1, d)),
        blocks=blocks, norm_w=T.ones((d,)), norm_b=T.zeros((d,)),
    )


# ---------------------------------------------------------------------------
# forward machinery
# ---------------------------------------------------------------------------

def patch_embed(image: Tensor, weights: BackboneWeights) -> Tensor:
    """Patchify, project, prepend the pre-trained class token, add positions.

    image is [channels x H x W]; output is [(L+1) x D]. Patches are read in
    row-major grid order and flattened channel-first, matching the
    [patch_dim x D] projection layout.
    """
    cfg = weights.config
    c, h, w = image.data.shape if image.data.ndim == 3 else (None, None, None)
    if image.data.ndim != 3 or c != cfg.channels or h != cfg.image_size or w != cfg.image_size:
        raise ShapeError(
            f"patch_embed: image shape {tuple(image.data.shape)}, "
            f"expected ({cfg.channels}, {cfg.image_size}, {cfg.image_size})")
    g, p = cfg.grid, cfg.patch_size
    patches = (image.data
               .reshape(cfg.channels, g, p, g, p)
               .transpose(1, 3, 0, 2, 4)
               .reshape(cfg.num_patches, cfg.patch_dim))
    projected = patches @ weights.patch_w.data + weights.patch_b.data
    tokens = np.concatenate([weights.cls.data, projected], axis=0)
    return Tensor(tokens + weights.pos.data, requires_grad=False)


def msa(q: Tensor, k: Tensor, v: Tensor, heads: int,
        score_limit: Optional[Tuple[int, int]] = None) -> Tensor:
    """Multi-head scaled dot-product attention over already-projected q/k/v.

    Returns the concatenation of per-head outputs, [len(q) x D]; the output
    projection is applied by the caller. ``score_limit`` bounds the score
    matrix extents (queries, keys) and raises if exceeded -- the runtime
    guarantee that summarized task forwards never touch full-length attention.
    """
    d = q.data.shape[1]
    if k.data.shape[1] != d or v.data.shape[1] != d:
        raise ShapeError(f"msa: widths differ, q {q.data.shape} k {k.data.shape} v {v.data.shape}")
    if k.data.shape[0] != v.data.shape[0]:
        raise ShapeError(f"msa: key/value lengths differ, {k.data.shape[0]} vs {v.data.shape[0]}")
    if d % heads != 0:
        raise ConfigError(f"msa: width {d} not divisible by {heads} heads")
    if score_limit is not None:
        mq, mk = score_limit
        if q.data.shape[0] > mq or k.data.shape[0] > mk:
            from .errors import ScoreBoundError
            raise ScoreBoundError(
                f"attention score matrix {q.data.shape[0]}x{k.data.shape[0]} "
                f"exceeds bound {mq}x{mk}")
    hd = d // heads
    inv = 1.0 / np.sqrt(hd)
    outs = []
    for h in range(heads):
        lo, hi = h * hd, (h + 1) * hd
        qh = T.slice_axis(q, 1, lo, hi)
        kh = T.slice_axis(k, 1, lo, hi)
        vh = T.slice_axis(v, 1, lo, hi)
        scores = T.scale(T.matmul(qh, T.transpose(kh)), inv)
        outs.append(T.matmul(T.softmax(scores, axis=1), vh))
    return T.concat(outs, axis=1)


@dataclass
class FrozenTaps:
    """Per-block tap tensors from the frozen forward.

    ``taps[l]`` is the l-th block's first layer-norm output, [(L+1) x D] --
    exactly the tensor the frozen qkv projection consumes. ``final_cls`` is
    the class row after the final norm, used as the query in the query-key
    selection ablation.
    """

    taps: Tuple[Tensor, ...]
    final_cls: Tensor


def frozen_forward(image: Tensor, weights: BackboneWeights) -> FrozenTaps:
    """Standard pre-norm block stack, gradient-free, recording tap points."""
    cfg = weights.config
    with T.no_grad():
        x = patch_embed(image, weights)
        taps = []
        for blk in weights.blocks:
            h = T.layer_norm(x, blk.norm1_w, blk.norm1_b)
            taps.append(h.detach())
            qkv = T.bias_add(T.matmul(h, blk.qkv_w), blk.qkv_b)
            d = cfg.dim
            att = msa(T.slice_axis(qkv, 1, 0, d),
                      T.slice_axis(qkv, 1, d, 2 * d),
                      T.slice_axis(qkv, 1, 2 * d, 3 * d),
                      cfg.heads)
            x = T.add(x, T.bias_add(T.matmul(att, blk.proj_w), blk.proj_b))
            h2 = T.layer_norm(x, blk.norm2_w, blk.norm2_b)
            mlp = T.bias_add(T.matmul(T.gelu(T.bias_add(T.matmul(h2, blk.fc1_w), blk.fc1_b)),
                                      blk.fc2_w), blk.fc2_b)
            x = T.add(x, mlp)
        final = T.layer_norm(x, weights.norm_w, weights.norm_b)
        final_cls = T.slice_axis(final, 0, 0, 1).detach()
    return FrozenTaps(taps=tuple(taps), final_cls=final_cls)
