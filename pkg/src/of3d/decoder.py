"""Transformer query decoder: queries in, mask kernels out.

Instance queries are initialized from pooled segment features (rows of S);
during training a uniform random half is kept, at inference all M survive.
Semantic queries are learned embeddings in fixed catalog order. Six pre-norm
layers apply self-attention within each query group, cross-attention against
segment features, and a feed-forward update; two heads emit mask kernels for
every query and class logits for instance queries only.

Self-attention is evaluated per query group with shared weights, so the
instance stream never depends on semantic queries. That keeps joint and
instance-only training comparable parameter-for-parameter.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    Tensor,
    add,
    concat,
    matmul,
    layer_norm,
    relu,
    reshape,
    softmax,
    transpose,
)
from .errors import ContractError, ShapeError


@dataclass(frozen=True)
class DecoderConfig:
    feat_dim: int = 32
    num_layers: int = 6
    num_heads: int = 4
    num_thing_classes: int = 5
    num_semantic_classes: int = 8

    def __post_init__(self):
        if self.feat_dim % self.num_heads != 0:
            raise ContractError(
                f"feature width {self.feat_dim} not divisible by {self.num_heads} heads"
            )
        if self.num_layers < 1:
            raise ContractError("decoder needs at least one layer")


@dataclass
class QuerySet:
    """Decoder inputs: selected instance queries plus semantic embeddings."""

    instance: Tensor | None  # (K_ins, C)
    source_segments: np.ndarray | None  # (K_ins,) distinct segment indices
    semantic: Tensor | None  # (K_sem, C)

    def __post_init__(self):
        if (self.instance is None) != (self.source_segments is None):
            raise ContractError("instance queries and source segments go together")
        if self.source_segments is not None:
            src = np.asarray(self.source_segments, dtype=np.int64)
            if len(np.unique(src)) != len(src):
                raise ContractError("source segment indices must be distinct")
            self.source_segments = src
        if self.instance is None and self.semantic is None:
            raise ContractError("query set must contain at least one query group")

    @property
    def num_instance(self) -> int:
        return 0 if self.instance is None else self.instance.shape[0]

    @property
    def num_semantic(self) -> int:
        return 0 if self.semantic is None else self.semantic.shape[0]


@dataclass
class KernelSet:
    """Decoder outputs: one kernel per query, class logits for instances."""

    instance_kernels: Tensor | None  # (K_ins, C)
    semantic_kernels: Tensor | None  # (K_sem, C)
    class_logits: Tensor | None  # (K_ins, num_thing_classes + 1), last = no-object
    source_segments: np.ndarray | None


def select_queries(
    segment_features: Tensor,
    semantic_embeddings: Tensor | None,
    mode: str,
    seed: int,
) -> QuerySet:
    """Initialize instance queries from segment features.

    Train mode keeps a uniform random subset of size max(1, floor(M/2));
    inference keeps all M segments. The chosen source indices are recorded
    so matching can exploit the query/segment correspondence.
    """
    if mode not in ("train", "infer"):
        raise ContractError(f"unknown query selection mode {mode!r}")
    m = segment_features.shape[0]
    if m < 1:
        raise ContractError("need at least one segment")
    if mode == "train":
        keep = max(1, m // 2)
        rng = np.random.default_rng([seed, 0x5E7])
        chosen = np.sort(rng.choice(m, size=keep, replace=False))
    else:
        chosen = np.arange(m, dtype=np.int64)
    instance = segment_features[chosen]
    return QuerySet(
        instance=instance, source_segments=chosen, semantic=semantic_embeddings
    )


def decoder_param_shapes(config: DecoderConfig) -> dict[str, tuple[int, ...]]:
    c = config.feat_dim
    shapes: dict[str, tuple[int, ...]] = {}
    for layer in range(config.num_layers):
        for block in ("self", "cross"):
            for proj in ("q", "k", "v", "o"):
                shapes[f"dec.l{layer}.{block}.w{proj}"] = (c, c)
                shapes[f"dec.l{layer}.{block}.b{proj}"] = (c,)
        shapes[f"dec.l{layer}.ff1.w"] = (c, 2 * c)
        shapes[f"dec.l{layer}.ff1.b"] = (2 * c,)
        shapes[f"dec.l{layer}.ff2.w"] = (2 * c, c)
        shapes[f"dec.l{layer}.ff2.b"] = (c,)
        for ln in ("ln1", "ln2", "ln3"):
            shapes[f"dec.l{layer}.{ln}.g"] = (c,)
            shapes[f"dec.l{layer}.{ln}.b"] = (c,)
    shapes["dec.final_ln.g"] = (c,)
    shapes["dec.final_ln.b"] = (c,)
    shapes["dec.kernel.w"] = (c, c)
    shapes["dec.kernel.b"] = (c,)
    shapes["dec.cls.w"] = (c, config.num_thing_classes + 1)
    shapes["dec.cls.b"] = (config.num_thing_classes + 1,)
    return shapes


def semantic_query_shape(config: DecoderConfig) -> tuple[int, ...]:
    return (config.num_semantic_classes, config.feat_dim)


def _attention(query, keys, values, params, prefix: str, heads: int) -> Tensor:
    kq, c = query.shape
    kv = keys.shape[0]
    head_dim = c // heads
    scale = 1.0 / np.sqrt(head_dim)

    def split(x, rows):
        return transpose(reshape(x, (rows, heads, head_dim)), (1, 0, 2))

    q = split(add(matmul(query, params[f"{prefix}.wq"]), params[f"{prefix}.bq"]), kq)
    k = split(add(matmul(keys, params[f"{prefix}.wk"]), params[f"{prefix}.bk"]), kv)
    v = split(add(matmul(values, params[f"{prefix}.wv"]), params[f"{prefix}.bv"]), kv)
    scores = matmul(q, transpose(k, (0, 2, 1))) * scale  # (heads, kq, kv)
    weights = softmax(scores, axis=-1)
    mixed = reshape(transpose(matmul(weights, v), (1, 0, 2)), (kq, c))
    return add(matmul(mixed, params[f"{prefix}.wo"]), params[f"{prefix}.bo"])


def decode(
    queries: QuerySet,
    segment_features: Tensor,
    params: dict[str, Tensor],
    config: DecoderConfig,
) -> KernelSet:
    """Run the decoder stack and both heads. Deterministic."""
    if segment_features.shape[1] != config.feat_dim:
        raise ShapeError(
            f"segment features width {segment_features.shape[1]} != {config.feat_dim}"
        )
    groups = []
    if queries.instance is not None:
        groups.append(queries.instance)
    if queries.semantic is not None:
        groups.append(queries.semantic)
    sizes = [g.shape[0] for g in groups]
    x = concat(groups, axis=0) if len(groups) > 1 else groups[0]

    for layer in range(config.num_layers):
        pre = f"dec.l{layer}"
        normed = layer_norm(x, params[f"{pre}.ln1.g"], params[f"{pre}.ln1.b"])
        attended = _self_attention_by_group(normed, sizes, params, f"{pre}.self", config.num_heads)
        x = add(x, attended)
        normed = layer_norm(x, params[f"{pre}.ln2.g"], params[f"{pre}.ln2.b"])
        x = add(
            x,
            _attention(
                normed, segment_features, segment_features, params, f"{pre}.cross", config.num_heads
            ),
        )
        normed = layer_norm(x, params[f"{pre}.ln3.g"], params[f"{pre}.ln3.b"])
        hidden = relu(add(matmul(normed, params[f"{pre}.ff1.w"]), params[f"{pre}.ff1.b"]))
        x = add(x, add(matmul(hidden, params[f"{pre}.ff2.w"]), params[f"{pre}.ff2.b"]))

    x = layer_norm(x, params["dec.final_ln.g"], params["dec.final_ln.b"])
    kernels = add(matmul(x, params["dec.kernel.w"]), params["dec.kernel.b"])

    k_ins = queries.num_instance
    instance_kernels = kernels[np.arange(k_ins)] if k_ins else None
    semantic_kernels = (
        kernels[np.arange(k_ins, k_ins + queries.num_semantic)]
        if queries.semantic is not None
        else None
    )
    class_logits = None
    if k_ins:
        inst_out = x[np.arange(k_ins)]
        class_logits = add(matmul(inst_out, params["dec.cls.w"]), params["dec.cls.b"])
    return KernelSet(
        instance_kernels=instance_kernels,
        semantic_kernels=semantic_kernels,
        class_logits=class_logits,
        source_segments=queries.source_segments,
    )


def _self_attention_by_group(normed, sizes, params, prefix, heads) -> Tensor:
    if len(sizes) == 1:
        return _attention(normed, normed, normed, params, prefix, heads)
    outputs = []
    start = 0
    for size in sizes:
        rows = np.arange(start, start + size)
        group = normed[rows]
        outputs.append(_attention(group, group, group, params, prefix, heads))
        start += size
    return concat(outputs, axis=0)


def mask_logits(kernels: KernelSet, segment_features: Tensor):
    """Mask logits per query: column i is S @ kernel_i. No activation applied.

    Returns (instance_logits M x K_ins, semantic_logits M x K_sem); either is
    None when the kernel group is absent.
    """
    instance = None
    semantic = None
    if kernels.instance_kernels is not None:
        _check_width(kernels.instance_kernels, segment_features)
        instance = matmul(segment_features, kernels.instance_kernels.T)
    if kernels.semantic_kernels is not None:
        _check_width(kernels.semantic_kernels, segment_features)
        semantic = matmul(segment_features, kernels.semantic_kernels.T)
    return instance, semantic


def _check_width(kernels: Tensor, segment_features: Tensor) -> None:
    if kernels.shape[1] != segment_features.shape[1]:
        raise ShapeError(
            f"kernel width {kernels.shape[1]} != feature width {segment_features.shape[1]}"
        )
