"""From kernels to ranked instances, semantic labels and a panoptic overlay.

Instance masks come from thresholded sigmoid mask logits; each proposal is
scored by the product of its class probability and its mask score (the mean
probability over the binarized mask). Scores are then re-ranked by Gaussian
matrix NMS, and the panoptic labeling overlays instances onto the semantic
labeling in ascending score order so the strongest proposal owns contested
segments.

Prediction files are plain text:

    OF3D-PRED v1
    semantic
    <M space-separated semantic ids>
    instances <n>
    <class> <score>
    <M-character 0/1 mask>        (per instance)
    panoptic
    <M space-separated sem,inst pairs>

Sections appear only for the outputs a model variant produces.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, sigmoid, softmax
from .decoder import KernelSet
from .errors import ContractError, SceneFormatError, ShapeError
from .partition import Partition, unpool_masks
from .scene import ClassCatalog, Scene

PRED_HEADER = "OF3D-PRED v1"


@dataclass
class InstanceProposal:
    """One predicted instance over segments."""

    mask: np.ndarray  # (M,) bool, non-empty
    class_id: int  # catalog id (a thing class)
    class_score: float  # p
    mask_score: float  # q
    score: float  # ranking score s, p*q at decode time, decayed by NMS

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if not self.mask.any():
            raise ContractError("proposal mask must be non-empty")
        if not 0.0 <= self.mask_score <= 1.0:
            raise ContractError("mask score must lie in [0, 1]")


@dataclass
class PanopticLabeling:
    """Per-segment (semantic id, instance id); -1 marks no instance."""

    semantic: np.ndarray  # (M,) int64
    instance: np.ndarray  # (M,) int64


def decode_instances(
    kernels: KernelSet,
    segment_features: Tensor,
    catalog: ClassCatalog,
    threshold: float = 0.5,
) -> list[InstanceProposal]:
    """Instantiate proposals from instance kernels.

    Per query: probabilities sigmoid(S @ kernel), binary mask above the
    threshold, mask score = mean probability over the mask. Queries whose
    class argmax is no-object or whose mask is empty are dropped.
    """
    if kernels.instance_kernels is None:
        return []
    s = segment_features.data
    logits = s @ kernels.instance_kernels.data.T  # (M, K_ins)
    probs = 1.0 / (1.0 + np.exp(-logits))
    class_probs = softmax(kernels.class_logits.detach(), axis=-1).data
    thing_ids = catalog.thing_ids
    if class_probs.shape[1] != len(thing_ids) + 1:
        raise ShapeError(
            f"class head width {class_probs.shape[1]} != {len(thing_ids)} things + 1"
        )
    proposals = []
    for i in range(probs.shape[1]):
        best = int(np.argmax(class_probs[i]))
        if best == len(thing_ids):  # no-object
            continue
        mask = probs[:, i] > threshold
        if not mask.any():
            continue
        q = float(probs[mask, i].mean())
        p = float(class_probs[i, best])
        proposals.append(
            InstanceProposal(
                mask=mask,
                class_id=thing_ids[best],
                class_score=p,
                mask_score=q,
                score=p * q,
            )
        )
    return proposals


def _mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    inter = np.logical_and(a, b).sum()
    union = np.logical_or(a, b).sum()
    return float(inter) / float(union) if union else 0.0


def matrix_nms(
    proposals: list[InstanceProposal], sigma: float = 2.0, top_k: int = 100
) -> list[InstanceProposal]:
    """Gaussian-decay matrix NMS; rescores, never removes overlap by fiat.

    decay_j = min over same-class i with s_i > s_j of
    exp(-(iou_ij^2 - maxiou_i^2) / sigma), clamped to 1, where maxiou_i is
    i's best IoU against any higher-scored same-class proposal. Masks are
    unchanged; the top_k by decayed score survive.
    """
    if not proposals:
        return []
    order = sorted(range(len(proposals)), key=lambda i: (-proposals[i].score, i))
    ranked = [proposals[i] for i in order]
    n = len(ranked)
    iou = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            if ranked[i].class_id == ranked[j].class_id:
                iou[i, j] = iou[j, i] = _mask_iou(ranked[i].mask, ranked[j].mask)

    decayed = []
    for j in range(n):
        decay = 1.0
        maxiou = np.zeros(n)
        for i in range(n):
            if ranked[i].class_id != ranked[j].class_id:
                continue
            if ranked[i].score > ranked[j].score:
                higher = [
                    iou[i, t]
                    for t in range(n)
                    if ranked[t].class_id == ranked[i].class_id
                    and ranked[t].score > ranked[i].score
                ]
                maxiou[i] = max(higher) if higher else 0.0
                decay = min(decay, float(np.exp(-(iou[i, j] ** 2 - maxiou[i] ** 2) / sigma)))
        decay = min(decay, 1.0)
        pr = ranked[j]
        decayed.append(
            InstanceProposal(
                mask=pr.mask,
                class_id=pr.class_id,
                class_score=pr.class_score,
                mask_score=pr.mask_score,
                score=pr.score * decay,
            )
        )
    decayed.sort(key=lambda pr: -pr.score)
    return decayed[:top_k]


def decode_semantic(kernels: KernelSet, segment_features: Tensor):
    """Per-segment semantic argmax plus per-category binary masks."""
    if kernels.semantic_kernels is None:
        raise ContractError("model produced no semantic kernels")
    logits = segment_features.data @ kernels.semantic_kernels.data.T  # (M, K_sem)
    ids = np.argmax(logits, axis=1).astype(np.int64)
    masks = np.zeros((logits.shape[1], logits.shape[0]), dtype=bool)
    for c in range(logits.shape[1]):
        masks[c] = ids == c
    return ids, masks


def fuse_panoptic(
    semantic_ids: np.ndarray, proposals: list[InstanceProposal]
) -> PanopticLabeling:
    """Overlay instances onto the semantic labeling, weakest first.

    Starts from the given semantics with instance -1 everywhere, then paints
    each proposal's segments with (class, fresh id) in ascending score order,
    so later (stronger) proposals overwrite earlier ones.
    """
    semantic = np.asarray(semantic_ids, dtype=np.int64).copy()
    instance = np.full(semantic.shape, -1, dtype=np.int64)
    order = sorted(range(len(proposals)), key=lambda i: (proposals[i].score, i))
    for fresh, idx in enumerate(order):
        pr = proposals[idx]
        semantic[pr.mask] = pr.class_id
        instance[pr.mask] = fresh
    return PanopticLabeling(semantic=semantic, instance=instance)


def boxes_from_instances(
    proposals: list[InstanceProposal], partition: Partition, scene: Scene
) -> list[tuple[int, float, np.ndarray, np.ndarray]]:
    """Tight axis-aligned boxes around each proposal's member points.

    Returns (class_id, score, lo, hi) per proposal.
    """
    boxes = []
    for pr in proposals:
        point_mask = unpool_masks(pr.mask, partition)
        pts = scene.points[point_mask, :3]
        if len(pts) == 0:
            raise ContractError("proposal covers no points")
        boxes.append((pr.class_id, pr.score, pts.min(axis=0), pts.max(axis=0)))
    return boxes


# -- prediction file ---------------------------------------------------------


@dataclass
class Prediction:
    """Parsed contents of a prediction file; absent sections are None."""

    semantic: np.ndarray | None
    instances: list[InstanceProposal] | None
    panoptic: PanopticLabeling | None

    @property
    def num_segments(self) -> int:
        if self.semantic is not None:
            return len(self.semantic)
        if self.instances:
            return len(self.instances[0].mask)
        if self.panoptic is not None:
            return len(self.panoptic.semantic)
        raise ContractError("empty prediction")


def save_prediction(pred: Prediction, path) -> None:
    lines = [PRED_HEADER]
    if pred.semantic is not None:
        lines.append("semantic")
        lines.append(" ".join(str(int(v)) for v in pred.semantic))
    if pred.instances is not None:
        lines.append(f"instances {len(pred.instances)}")
        for pr in pred.instances:
            lines.append(f"{pr.class_id} {repr(float(pr.score))}")
            lines.append("".join("1" if v else "0" for v in pr.mask))
    if pred.panoptic is not None:
        lines.append("panoptic")
        lines.append(
            " ".join(
                f"{int(s)},{int(i)}"
                for s, i in zip(pred.panoptic.semantic, pred.panoptic.instance)
            )
        )
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("utf-8"))


def load_prediction(path) -> Prediction:
    with open(path, "rb") as fh:
        lines = fh.read().decode("utf-8").split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines or lines[0] != PRED_HEADER:
        raise SceneFormatError("bad prediction header", line=1)
    semantic = None
    instances = None
    panoptic = None
    i = 1
    while i < len(lines):
        tok = lines[i].split()
        if tok == ["semantic"]:
            i += 1
            if i >= len(lines):
                raise SceneFormatError("missing semantic ids", line=i + 1)
            semantic = np.array([int(v) for v in lines[i].split()], dtype=np.int64)
            i += 1
        elif tok and tok[0] == "instances":
            count = int(tok[1])
            i += 1
            instances = []
            for _ in range(count):
                if i + 1 >= len(lines):
                    raise SceneFormatError("truncated instance section", line=i + 1)
                cls_tok, score_tok = lines[i].split()
                mask = np.array([ch == "1" for ch in lines[i + 1]], dtype=bool)
                score = float(score_tok)
                instances.append(
                    InstanceProposal(
                        mask=mask,
                        class_id=int(cls_tok),
                        class_score=1.0,
                        mask_score=1.0,
                        score=score,
                    )
                )
                i += 2
        elif tok == ["panoptic"]:
            i += 1
            if i >= len(lines):
                raise SceneFormatError("missing panoptic ids", line=i + 1)
            pairs = [tokn.split(",") for tokn in lines[i].split()]
            panoptic = PanopticLabeling(
                semantic=np.array([int(a) for a, _ in pairs], dtype=np.int64),
                instance=np.array([int(b) for _, b in pairs], dtype=np.int64),
            )
            i += 1
        else:
            raise SceneFormatError(f"unexpected line {lines[i]!r}", line=i + 1)
    return Prediction(semantic=semantic, instances=instances, panoptic=panoptic)
