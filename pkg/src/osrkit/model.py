"""Compact vision transformer for closed-set classification.

Images are cut into non-overlapping patches, linearly embedded, prefixed
with a learnable class token, summed with learnable positional
embeddings, and pushed through a stack of pre-norm encoder blocks with a
final layer norm. The class-token row of the last layer is the image
feature; a single linear layer with softmax classifies it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor


@dataclass(frozen=True)
class ModelConfig:
    """Architectural scalars plus the shapes derived from them."""

    height: int
    width: int
    channels: int
    patch_size: int
    embed_dim: int
    depth: int
    heads: int
    num_classes: int
    mlp_ratio: int = 4

    def __post_init__(self):
        for name in ("height", "width", "channels", "patch_size", "embed_dim",
                     "depth", "heads", "num_classes", "mlp_ratio"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < (0 if name == "depth" else 1):
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.height % self.patch_size or self.width % self.patch_size:
            raise ConfigError(
                f"patch size {self.patch_size} does not divide image "
                f"{self.height}x{self.width}"
            )
        if self.embed_dim % self.heads:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by {self.heads} heads"
            )

    @property
    def n_patches(self) -> int:
        return (self.height // self.patch_size) * (self.width // self.patch_size)

    @property
    def seq_len(self) -> int:
        return self.n_patches + 1

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    def to_dict(self) -> dict:
        return {
            "height": self.height, "width": self.width, "channels": self.channels,
            "patch_size": self.patch_size, "embed_dim": self.embed_dim,
            "depth": self.depth, "heads": self.heads,
            "num_classes": self.num_classes, "mlp_ratio": self.mlp_ratio,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: int(v) for k, v in d.items()})


@dataclass
class PatchEmbeddingParams:
    proj: Tensor       # (patch_dim, embed_dim)
    pos: Tensor        # (seq_len, embed_dim)
    cls_token: Tensor  # (embed_dim,)


@dataclass
class EncoderLayerParams:
    attn_q: Tensor
    attn_k: Tensor
    attn_v: Tensor
    attn_out: Tensor
    norm1_gain: Tensor
    norm1_bias: Tensor
    norm2_gain: Tensor
    norm2_bias: Tensor
    mlp_in_w: Tensor
    mlp_in_b: Tensor
    mlp_out_w: Tensor
    mlp_out_b: Tensor


@dataclass
class ClassifierHeadParams:
    weight: Tensor  # (embed_dim, num_classes)
    bias: Tensor    # (num_classes,)


@dataclass
class VitParams:
    embedding: PatchEmbeddingParams
    layers: list[EncoderLayerParams]
    final_gain: Tensor
    final_bias: Tensor
    classifier: ClassifierHeadParams

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        """Every learnable tensor, in the fixed checkpoint order."""
        yield from self.backbone_parameters()
        yield from self.classifier_parameters()

    def backbone_parameters(self) -> Iterator[tuple[str, Tensor]]:
        emb = self.embedding
        yield "embed.proj", emb.proj
        yield "embed.pos", emb.pos
        yield "embed.cls", emb.cls_token
        for i, layer in enumerate(self.layers):
            for short, t in (("q", layer.attn_q), ("k", layer.attn_k),
                             ("v", layer.attn_v), ("out", layer.attn_out),
                             ("norm1.gain", layer.norm1_gain), ("norm1.bias", layer.norm1_bias),
                             ("norm2.gain", layer.norm2_gain), ("norm2.bias", layer.norm2_bias),
                             ("mlp.in.w", layer.mlp_in_w), ("mlp.in.b", layer.mlp_in_b),
                             ("mlp.out.w", layer.mlp_out_w), ("mlp.out.b", layer.mlp_out_b)):
                yield f"layer{i}.{short}", t
        yield "final.gain", self.final_gain
        yield "final.bias", self.final_bias

    def classifier_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield "cls_head.weight", self.classifier.weight
        yield "cls_head.bias", self.classifier.bias


def truncated_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal draws resampled until all fall inside two standard deviations."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out


def init_vit(config: ModelConfig, seed: int, dtype=np.float32) -> VitParams:
    """Fresh parameters: truncated normal (std 0.02) projections and embeddings,
    zeros for biases and the class token, ones for norm gains."""
    rng = np.random.default_rng(seed)
    d = config.embed_dim

    def tn(*shape):
        return Tensor(truncated_normal(rng, shape).astype(dtype), requires_grad=True)

    def zeros(*shape):
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

    def ones(*shape):
        return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)

    embedding = PatchEmbeddingParams(
        proj=tn(config.patch_dim, d),
        pos=tn(config.seq_len, d),
        cls_token=zeros(d),
    )
    hidden = config.mlp_ratio * d
    layers = [
        EncoderLayerParams(
            attn_q=tn(d, d), attn_k=tn(d, d), attn_v=tn(d, d), attn_out=tn(d, d),
            norm1_gain=ones(d), norm1_bias=zeros(d),
            norm2_gain=ones(d), norm2_bias=zeros(d),
            mlp_in_w=tn(d, hidden), mlp_in_b=zeros(hidden),
            mlp_out_w=tn(hidden, d), mlp_out_b=zeros(d),
        )
        for _ in range(config.depth)
    ]
    return VitParams(
        embedding=embedding,
        layers=layers,
        final_gain=ones(d),
        final_bias=zeros(d),
        classifier=ClassifierHeadParams(weight=tn(d, config.num_classes),
                                        bias=zeros(config.num_classes)),
    )


# -- forward pass -----------------------------------------------------------


def patchify(image: np.ndarray, config: ModelConfig) -> np.ndarray:
    """One image (H, W, C) to its patch sequence (N, P*P*C).

    Patches are ordered row-major over the patch grid; inside a patch the
    flattening order is (row, col, channel). This order is part of the
    checkpoint contract and must never change.
    """
    image = np.asarray(image)
    expected = (config.height, config.width, config.channels)
    if image.shape != expected:
        raise ConfigError(f"image shape {image.shape} does not match config {expected}")
    return patchify_batch(image[None], config)[0]


def patchify_batch(images: np.ndarray, config: ModelConfig) -> np.ndarray:
    images = np.asarray(images)
    expected = (config.height, config.width, config.channels)
    if images.ndim != 4 or images.shape[1:] != expected:
        raise ConfigError(f"batch shape {images.shape} does not match config {expected}")
    p = config.patch_size
    gh, gw = config.height // p, config.width // p
    b = images.shape[0]
    tiles = images.reshape(b, gh, p, gw, p, config.channels)
    tiles = tiles.transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(tiles.reshape(b, gh * gw, config.patch_dim))


def embed(patches, params: PatchEmbeddingParams) -> Tensor:
    """Patch sequence to encoder input: project, prepend class token, add positions."""
    if not isinstance(patches, Tensor):
        patches = T.constant(np.asarray(patches, dtype=params.proj.dtype))
    if patches.shape[-1] != params.proj.shape[0]:
        raise ShapeError(
            f"patch width {patches.shape[-1]} does not match projection {params.proj.shape}"
        )
    projected = T.matmul(patches, params.proj)
    dim = params.cls_token.shape[0]
    if projected.ndim == 2:
        cls_row = params.cls_token.reshape((1, dim))
        z = T.concat([cls_row, projected], axis=0)
        return T.add(z, params.pos)
    batch = projected.shape[0]
    cls_rows = params.cls_token.broadcast_to((batch, 1, dim))
    z = T.concat([cls_rows, projected], axis=1)
    return T.add(z, params.pos.broadcast_to((batch,) + params.pos.shape))


def msa(z: Tensor, layer: EncoderLayerParams, heads: int, return_weights: bool = False):
    """Multi-head scaled dot-product self-attention over a token sublist.

    Every token attends to every other; each attention row is a
    probability distribution. Positional information enters only through
    the embeddings upstream, so the op itself is permutation-equivariant.
    """
    single = z.ndim == 2
    if single:
        z = z.reshape((1,) + z.shape)
    b, s, d = z.shape
    hd = d // heads
    scale = 1.0 / np.sqrt(hd)

    def split_heads(t: Tensor) -> Tensor:
        return t.reshape((b, s, heads, hd)).transpose((0, 2, 1, 3))

    q = split_heads(T.matmul(z, layer.attn_q))
    k = split_heads(T.matmul(z, layer.attn_k))
    v = split_heads(T.matmul(z, layer.attn_v))
    scores = T.matmul(q, k.transpose((0, 1, 3, 2))) * scale
    weights = T.softmax(scores, axis=-1)
    context = T.matmul(weights, v).transpose((0, 2, 1, 3)).reshape((b, s, d))
    out = T.matmul(context, layer.attn_out)
    if single:
        out = out.reshape((s, d))
    if return_weights:
        return out, weights.data if not single else weights.data[0]
    return out


def encoder_block(z: Tensor, layer: EncoderLayerParams, heads: int) -> Tensor:
    attended = msa(T.layer_norm(z, layer.norm1_gain, layer.norm1_bias), layer, heads)
    z = T.add(z, attended)
    normed = T.layer_norm(z, layer.norm2_gain, layer.norm2_bias)
    hidden = T.gelu(T.add(T.matmul(normed, layer.mlp_in_w), layer.mlp_in_b))
    mlp_out = T.add(T.matmul(hidden, layer.mlp_out_w), layer.mlp_out_b)
    return T.add(z, mlp_out)


def encode(z0: Tensor, layers: list[EncoderLayerParams], final_gain: Tensor,
           final_bias: Tensor, heads: int) -> Tensor:
    """Pre-norm residual stack, then a final layer norm (empty stack allowed)."""
    z = z0
    for layer in layers:
        z = encoder_block(z, layer, heads)
    return T.layer_norm(z, final_gain, final_bias)


def extract_feature(z_last: Tensor) -> Tensor:
    """Class-token row of the final layer: the image feature."""
    return z_last.take(0, axis=-2)


def class_logits(feature: Tensor, head: ClassifierHeadParams) -> Tensor:
    return T.add(T.matmul(feature, head.weight), head.bias)


def classify(feature, head: ClassifierHeadParams):
    """Class probabilities and the argmax label (ties resolve to the lowest index)."""
    f = feature.data if isinstance(feature, Tensor) else np.asarray(feature)
    logits = f @ head.weight.data + head.bias.data
    shifted = logits - logits.max(axis=-1, keepdims=True)
    ex = np.exp(shifted)
    probs = ex / ex.sum(axis=-1, keepdims=True)
    return probs, np.argmax(logits, axis=-1)


def forward_features(images: np.ndarray, params: VitParams, config: ModelConfig) -> Tensor:
    """The full feature extractor: patchify, embed, encode, read the class token."""
    images = np.asarray(images)
    if images.ndim == 3:
        patches = patchify(images, config)
    else:
        patches = patchify_batch(images, config)
    patches = patches.astype(params.embedding.proj.dtype, copy=False)
    z0 = embed(patches, params.embedding)
    z_last = encode(z0, params.layers, params.final_gain, params.final_bias, config.heads)
    return extract_feature(z_last)


def forward_logits(images: np.ndarray, params: VitParams, config: ModelConfig) -> Tensor:
    return class_logits(forward_features(images, params, config), params.classifier)
