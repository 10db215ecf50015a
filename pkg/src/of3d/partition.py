"""Point-to-segment partitions: voxel grids, region-grown superpoints,
feature pooling and ground-truth projection.

A partition maps every point of a scene to one of M non-empty segments.
Segment features are the per-segment means of point-wise features and act
as both decoder keys/values and the kernel-convolution operand.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, segment_mean
from .errors import ContractError, ShapeError
from .scene import Scene


@dataclass
class Partition:
    """Per-point segment assignment with a canonical segment numbering."""

    mode: str  # "voxel" | "superpoint"
    segment_of: np.ndarray  # (N,) int64 in [0, M)
    num_segments: int
    voxel_size: float | None = None
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        self.segment_of = np.asarray(self.segment_of, dtype=np.int64)
        self.validate()

    def validate(self) -> None:
        seg = self.segment_of
        n = seg.shape[0]
        if n < 1:
            raise ContractError("partition must cover at least one point")
        if self.num_segments < 1 or self.num_segments > n:
            raise ContractError(
                f"segment count {self.num_segments} out of range for {n} points"
            )
        if seg.min() < 0 or seg.max() >= self.num_segments:
            raise ContractError("segment indices out of range")
        counts = np.bincount(seg, minlength=self.num_segments)
        if np.any(counts == 0):
            raise ContractError("every segment must be non-empty")


def voxelize(scene: Scene, voxel_size: float) -> Partition:
    """Partition by occupied cells of a regular grid.

    Cells are ordered lexicographically by (ix, iy, iz), which makes the
    numbering canonical: reordering input points yields identical segment
    ids per point.
    """
    if voxel_size <= 0:
        raise ContractError("voxel size must be positive")
    keys = np.floor(scene.points[:, :3] / voxel_size).astype(np.int64)
    _, inverse = np.unique(keys, axis=0, return_inverse=True)
    return Partition(
        mode="voxel",
        segment_of=inverse.astype(np.int64),
        num_segments=int(inverse.max()) + 1,
        voxel_size=voxel_size,
    )


@dataclass(frozen=True)
class SuperpointParams:
    k_neighbors: int = 16
    angle_threshold_deg: float = 20.0
    color_bound: float = 0.2
    min_segment_size: int = 5


def build_superpoints(scene: Scene, params: SuperpointParams | None = None) -> Partition:
    """Region growing over a k-NN graph with normal-angle and color gates.

    Per-point normals come from a local plane fit; degenerate (collinear or
    coincident) neighborhoods fall back to the global up normal and are
    counted in ``diagnostics["degenerate_normals"]``. Segments smaller than
    the minimum size are merged into the segment of the nearest outside
    point. The result is deterministic for a given scene.
    """
    p = params or SuperpointParams()
    n = scene.n_points
    if n < p.k_neighbors:
        raise ContractError(f"need at least {p.k_neighbors} points, got {n}")
    coords = scene.points[:, :3]
    colors = scene.points[:, 3:6]

    neighbors = _knn(coords, p.k_neighbors)
    normals, degenerate = _fit_normals(coords, neighbors)

    cos_thr = np.cos(np.deg2rad(p.angle_threshold_deg))
    parent = np.arange(n, dtype=np.int64)

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    cos_all = np.abs(np.einsum("ij,ikj->ik", normals, normals[neighbors]))
    color_dist = np.linalg.norm(colors[:, None, :] - colors[neighbors], axis=2)
    joined = (cos_all > cos_thr) & (color_dist < p.color_bound)
    for i in range(n):
        for j in neighbors[i][joined[i]]:
            ri, rj = find(i), find(int(j))
            if ri != rj:
                # Smaller root wins: keeps the union deterministic.
                if ri < rj:
                    parent[rj] = ri
                else:
                    parent[ri] = rj

    labels = np.fromiter((find(i) for i in range(n)), dtype=np.int64, count=n)
    labels = _renumber(labels)
    labels = _merge_small(labels, coords, p.min_segment_size)
    return Partition(
        mode="superpoint",
        segment_of=labels,
        num_segments=int(labels.max()) + 1,
        diagnostics={"degenerate_normals": int(degenerate)},
    )


def partition_from_labels(labels: np.ndarray) -> Partition:
    """Wrap precomputed segment labels (the v1.1 scene side channel)."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.min() < 0:
        raise ContractError("segment labels must be >= 0")
    dense = _renumber(labels)
    return Partition(
        mode="superpoint", segment_of=dense, num_segments=int(dense.max()) + 1
    )


def _knn(coords: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k nearest neighbors per point (excluding itself)."""
    n = len(coords)
    out = np.empty((n, k), dtype=np.int64)
    chunk = max(1, int(2e7 // max(n, 1)))
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        d2 = ((coords[start:stop, None, :] - coords[None, :, :]) ** 2).sum(axis=2)
        d2[np.arange(stop - start), np.arange(start, stop)] = np.inf
        part = np.argpartition(d2, k - 1, axis=1)[:, :k]
        # Sort the k candidates by (distance, index) for determinism.
        rows = np.arange(stop - start)[:, None]
        order = np.lexsort((part, d2[rows, part]), axis=1)
        out[start:stop] = part[rows, order]
    return out


def _fit_normals(coords: np.ndarray, neighbors: np.ndarray):
    """Smallest-eigenvector plane normals over each point's neighborhood."""
    n = len(coords)
    groups = np.concatenate([np.arange(n)[:, None], neighbors], axis=1)
    pts = coords[groups]  # (n, k+1, 3)
    centered = pts - pts.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / groups.shape[1]
    w, v = np.linalg.eigh(cov)
    normals = v[:, :, 0].copy()
    scale = np.maximum(w[:, 2], 1e-30)
    degenerate = w[:, 1] / scale < 1e-6
    degenerate |= w[:, 2] < 1e-18
    normals[degenerate] = (0.0, 0.0, 1.0)
    # eigh sign is implementation-defined; canonicalize for determinism.
    flip = normals[:, 2] < 0
    flip |= (normals[:, 2] == 0) & (normals[:, 1] < 0)
    flip |= (normals[:, 2] == 0) & (normals[:, 1] == 0) & (normals[:, 0] < 0)
    normals[flip] *= -1.0
    return normals, int(degenerate.sum())


def _renumber(labels: np.ndarray) -> np.ndarray:
    """Dense relabeling ordered by each segment's first point index."""
    _, first, inverse = np.unique(labels, return_index=True, return_inverse=True)
    order = np.argsort(np.argsort(first, kind="stable"), kind="stable")
    return order[inverse].astype(np.int64)


def _merge_small(labels: np.ndarray, coords: np.ndarray, min_size: int) -> np.ndarray:
    labels = labels.copy()
    while True:
        m = int(labels.max()) + 1
        counts = np.bincount(labels, minlength=m)
        small = np.flatnonzero((counts > 0) & (counts < min_size))
        if small.size == 0 or m == 1:
            break
        sid = int(small[0])
        inside = labels == sid
        if inside.all():
            break
        outside = np.flatnonzero(~inside)
        d2 = ((coords[inside][:, None, :] - coords[outside][None, :, :]) ** 2).sum(axis=2)
        target = int(labels[outside[np.argmin(d2.min(axis=0))]])
        labels[inside] = target
        labels = _renumber(labels)
    return _renumber(labels)


# -- pooling and ground-truth projection ------------------------------------


def pool(features, partition: Partition) -> Tensor:
    """Segment features: the per-segment arithmetic mean of point features."""
    feats = features if isinstance(features, Tensor) else Tensor(features)
    if feats.ndim != 2 or feats.shape[0] != partition.segment_of.shape[0]:
        raise ShapeError(
            f"features {feats.shape} do not match {partition.segment_of.shape[0]} points"
        )
    return segment_mean(feats, partition.segment_of, partition.num_segments)


@dataclass
class SegmentGroundTruth:
    """Ground truth projected onto segments.

    Each segment carries at most one instance by construction (majority
    vote), so instance masks are disjoint over segments.
    """

    segment_instance: np.ndarray  # (M,) int64, -1 = none
    segment_semantic: np.ndarray  # (M,) int64, -1 = unlabeled
    instance_ids: np.ndarray  # (K_gt,) int64, ascending scene instance ids
    instance_classes: np.ndarray  # (K_gt,) int64 catalog ids
    instance_masks: np.ndarray  # (K_gt, M) bool
    category_masks: np.ndarray  # (K_sem, M) bool

    @property
    def num_instances(self) -> int:
        return len(self.instance_ids)

    def segment_gt_column(self) -> np.ndarray:
        """Per-segment ground-truth column index (-1 = background)."""
        column_of = {int(inst): k for k, inst in enumerate(self.instance_ids)}
        out = np.full(len(self.segment_instance), -1, dtype=np.int64)
        for m, inst in enumerate(self.segment_instance):
            if inst >= 0:
                out[m] = column_of[int(inst)]
        return out


def _majority(values: np.ndarray) -> int:
    """Majority vote; -1 wins only on strict majority, ties pick the smaller id."""
    ids, counts = np.unique(values, return_counts=True)
    if ids[0] == -1:
        if counts[0] * 2 > values.size or ids.size == 1:
            return -1
        ids, counts = ids[1:], counts[1:]
    # np.unique sorts ids ascending, argmax picks the first maximum.
    return int(ids[np.argmax(counts)])


def project_ground_truth(scene: Scene, partition: Partition) -> SegmentGroundTruth:
    """Majority-vote projection of point labels onto segments."""
    m = partition.num_segments
    seg_of = partition.segment_of
    seg_instance = np.empty(m, dtype=np.int64)
    seg_semantic = np.empty(m, dtype=np.int64)
    order = np.argsort(seg_of, kind="stable")
    bounds = np.searchsorted(seg_of[order], np.arange(m + 1))
    for s in range(m):
        members = order[bounds[s] : bounds[s + 1]]
        seg_instance[s] = _majority(scene.instance_id[members])
        seg_semantic[s] = _majority(scene.semantic_id[members])

    owned = scene.instance_id >= 0
    instance_ids = np.unique(scene.instance_id[owned]) if owned.any() else np.empty(0, np.int64)
    instance_classes = np.empty(len(instance_ids), dtype=np.int64)
    for k, inst in enumerate(instance_ids):
        instance_classes[k] = scene.semantic_id[scene.instance_id == inst][0]
    instance_masks = np.zeros((len(instance_ids), m), dtype=bool)
    for k, inst in enumerate(instance_ids):
        instance_masks[k] = seg_instance == inst
    k_sem = len(scene.catalog)
    category_masks = np.zeros((k_sem, m), dtype=bool)
    for c in range(k_sem):
        category_masks[c] = seg_semantic == c
    return SegmentGroundTruth(
        segment_instance=seg_instance,
        segment_semantic=seg_semantic,
        instance_ids=instance_ids,
        instance_classes=instance_classes,
        instance_masks=instance_masks,
        category_masks=category_masks,
    )


def unpool_masks(segment_masks: np.ndarray, partition: Partition) -> np.ndarray:
    """Lift per-segment masks to per-point masks (last axis indexes segments)."""
    masks = np.asarray(segment_masks)
    if masks.shape[-1] != partition.num_segments:
        raise ShapeError(
            f"mask length {masks.shape[-1]} does not match {partition.num_segments} segments"
        )
    return masks[..., partition.segment_of]
