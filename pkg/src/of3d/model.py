"""Model assembly: parameter initialization and the shared forward pipeline.

Parameters are seeded per name, not from one sequential stream, so adding or
removing a parameter group (e.g. semantic queries) never shifts the
initialization of the others. That keeps ablation variants comparable
weight-for-weight and makes checkpoints reproducible from (seed, config).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, sigmoid, softmax
from .config import RunConfig
from .decoder import (
    DecoderConfig,
    KernelSet,
    QuerySet,
    decode,
    decoder_param_shapes,
    mask_logits,
    select_queries,
    semantic_query_shape,
)
from .encoder import EncoderConfig, encode, encoder_param_shapes
from .errors import ContractError
from .inference import (
    PanopticLabeling,
    Prediction,
    decode_instances,
    decode_semantic,
    fuse_panoptic,
    matrix_nms,
)
from .partition import (
    Partition,
    SuperpointParams,
    build_superpoints,
    partition_from_labels,
    pool,
    voxelize,
)
from .scene import ClassCatalog, Scene


def encoder_config(config: RunConfig) -> EncoderConfig:
    return EncoderConfig(
        feat_dim=config.feat_dim,
        depth=config.encoder_depth,
        radius=config.encoder_radius,
    )


def decoder_config(config: RunConfig, catalog: ClassCatalog) -> DecoderConfig:
    return DecoderConfig(
        feat_dim=config.feat_dim,
        num_layers=config.decoder_layers,
        num_heads=config.attn_heads,
        num_thing_classes=len(catalog.thing_ids),
        num_semantic_classes=len(catalog),
    )


def _name_rng(seed: int, name: str) -> np.random.Generator:
    digest = hashlib.sha256(name.encode()).digest()
    words = [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]
    return np.random.default_rng([seed, *words])


def _init_tensor(name: str, shape, seed: int) -> Tensor:
    rng = _name_rng(seed, name)
    if name.endswith(".b") or name.endswith(("bq", "bk", "bv", "bo")):
        data = np.zeros(shape)
    elif name.endswith(".g"):
        data = np.ones(shape)
    elif name == "sem_queries":
        data = rng.normal(0.0, 1.0 / np.sqrt(shape[1]), shape)
    else:
        fan_in = shape[0] if len(shape) > 1 else shape[0]
        data = rng.normal(0.0, 1.0 / np.sqrt(fan_in), shape)
    return Tensor(data, requires_grad=True)


def param_shapes(config: RunConfig, catalog: ClassCatalog) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    shapes.update(encoder_param_shapes(encoder_config(config)))
    dec_cfg = decoder_config(config, catalog)
    dec_shapes = decoder_param_shapes(dec_cfg)
    if config.query_mode == "semantic_only":
        dec_shapes = {k: v for k, v in dec_shapes.items() if not k.startswith("dec.cls.")}
    shapes.update(dec_shapes)
    if config.query_mode != "instance_only":
        shapes["sem_queries"] = semantic_query_shape(dec_cfg)
    return shapes


def build_params(config: RunConfig, catalog: ClassCatalog) -> dict[str, Tensor]:
    if config.query_mode != "semantic_only" and not catalog.thing_ids:
        raise ContractError("instance training needs at least one thing class")
    return {
        name: _init_tensor(name, shape, config.seed)
        for name, shape in param_shapes(config, catalog).items()
    }


def build_partition(scene: Scene, config: RunConfig) -> Partition:
    if config.pooling == "voxel":
        return voxelize(scene, config.voxel_size)
    if scene.segment_id is not None:
        return partition_from_labels(scene.segment_id)
    return build_superpoints(
        scene,
        SuperpointParams(
            k_neighbors=config.sp_k_neighbors,
            angle_threshold_deg=config.sp_angle_deg,
            color_bound=config.sp_color_bound,
            min_segment_size=config.sp_min_size,
        ),
    )


@dataclass
class ForwardOutput:
    partition: Partition
    segment_features: Tensor
    queries: QuerySet
    kernels: KernelSet
    instance_logits: Tensor | None  # (M, K_ins)
    semantic_logits: Tensor | None  # (M, K_sem)


def forward(
    scene: Scene,
    params: dict[str, Tensor],
    config: RunConfig,
    catalog: ClassCatalog,
    mode: str,
    selection_seed: int = 0,
    partition: Partition | None = None,
) -> ForwardOutput:
    """Scene -> partition -> features -> segment features -> kernels.

    ``partition`` overrides the config-derived one; the trainer passes
    precomputed superpoints, which are per-scan structures independent of
    the flip/rotation augmentations.
    """
    part = partition if partition is not None else build_partition(scene, config)
    features = encode(scene, encoder_config(config), params)
    segment_features = pool(features, part)
    if config.query_mode == "semantic_only":
        queries = QuerySet(instance=None, source_segments=None, semantic=params["sem_queries"])
    else:
        semantic = params["sem_queries"] if config.query_mode == "joint" else None
        queries = select_queries(segment_features, semantic, mode, selection_seed)
    kernels = decode(queries, segment_features, params, decoder_config(config, catalog))
    inst_logits, sem_logits = mask_logits(kernels, segment_features)
    return ForwardOutput(
        partition=part,
        segment_features=segment_features,
        queries=queries,
        kernels=kernels,
        instance_logits=inst_logits,
        semantic_logits=sem_logits,
    )


def infer_scene(
    scene: Scene,
    params: dict[str, Tensor],
    config: RunConfig,
    catalog: ClassCatalog,
):
    """One inference pass: proposals, semantic labeling and panoptic fusion.

    Returns (Prediction, ForwardOutput). Sections absent for the current
    query mode are None in the prediction.
    """
    out = forward(scene, params, config, catalog, mode="infer")
    instances = None
    semantic_ids = None
    panoptic = None
    if config.query_mode != "semantic_only":
        proposals = decode_instances(
            out.kernels, out.segment_features, catalog, threshold=config.mask_threshold
        )
        instances = matrix_nms(proposals, sigma=config.nms_sigma, top_k=config.nms_top_k)
    if config.query_mode != "instance_only":
        semantic_ids, _ = decode_semantic(out.kernels, out.segment_features)
    if config.query_mode == "joint":
        panoptic = fuse_panoptic(semantic_ids, instances)
    pred = Prediction(semantic=semantic_ids, instances=instances, panoptic=panoptic)
    return pred, out


def class_probabilities(kernels: KernelSet) -> np.ndarray:
    """Detached softmax class probabilities for the matcher."""
    return softmax(kernels.class_logits.detach(), axis=-1).data


def mask_probabilities(logits: Tensor) -> np.ndarray:
    """Detached sigmoid mask probabilities for the matcher."""
    return sigmoid(logits.detach()).data
