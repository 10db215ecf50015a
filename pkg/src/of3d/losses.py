"""Training objective over matched pairs plus the semantic term.

total = beta * cls + bce + dice + sem, with beta defaulting to 0.5.
Classification targets the matched ground-truth class for matched proposals
and the trailing no-object class otherwise. Mask terms average over matched
pairs; binary cross-entropies are means, so magnitudes stay scale-free in
the segment count.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, clamp, log, tmean, tsum
from .errors import ContractError, ShapeError
from .matching import PROB_EPS, Assignment


@dataclass(frozen=True)
class LossWeights:
    beta: float = 0.5  # classification weight
    lam: float = 0.5  # matching cost weight, shared with the cost matrix

    def __post_init__(self):
        if self.beta < 0 or self.lam < 0:
            raise ContractError("loss weights must be non-negative")


@dataclass
class LossParts:
    cls: Tensor
    bce: Tensor
    dice: Tensor
    sem: Tensor


def cls_loss(class_logits: Tensor, assignment: Assignment, gt_classes: np.ndarray) -> Tensor:
    """Softmax cross-entropy over all proposals, mean reduction.

    Matched proposals target their ground truth's class; unmatched ones the
    trailing no-object class.
    """
    from .autodiff import log_softmax

    k_ins, width = class_logits.shape
    targets = np.full(k_ins, width - 1, dtype=np.int64)
    for proposal, gt in assignment.pairs:
        targets[proposal] = gt_classes[gt]
    if targets.max() >= width:
        raise ContractError("class target out of range")
    logp = log_softmax(class_logits, axis=-1)
    picked = logp[(np.arange(k_ins), targets)]
    return -tmean(picked)


def mask_losses(mask_probs: Tensor, assignment: Assignment, gt_masks: np.ndarray):
    """(mean BCE, mean Dice complement) over matched pairs.

    ``mask_probs`` is M x K_ins of probabilities; ``gt_masks`` is K_gt x M
    binary. With no matched pairs both terms are exactly zero.
    """
    if mask_probs.shape[1] < len(assignment.pairs):
        raise ShapeError("more matched pairs than proposals")
    if not assignment.pairs:
        return Tensor(0.0), Tensor(0.0)
    proposals = np.array([p for p, _ in assignment.pairs], dtype=np.int64)
    gts = np.array([g for _, g in assignment.pairs], dtype=np.int64)
    g = np.asarray(gt_masks, dtype=np.float64)[gts]  # (P, M)
    probs = clamp(mask_probs[(slice(None), proposals)], PROB_EPS, 1.0 - PROB_EPS)
    g_t = Tensor(g.T)  # (M, P)
    bce_terms = -(g_t * log(probs) + (1.0 - g_t) * log(1.0 - probs))
    bce = tmean(tmean(bce_terms, axis=0))
    inter = tsum(probs * g_t, axis=0)
    denom = tsum(probs, axis=0) + Tensor(g.sum(axis=1)) + 1.0
    dice = tmean(1.0 - 2.0 * (inter + 1.0) / denom)
    return bce, dice


def semantic_loss(sem_mask_probs: Tensor, gt_category_masks: np.ndarray) -> Tensor:
    """Mean binary cross-entropy over every (segment, category) cell.

    Categories arrive in fixed catalog order, so no matching is involved.
    """
    g = np.asarray(gt_category_masks, dtype=np.float64)
    if sem_mask_probs.shape != (g.shape[1], g.shape[0]):
        raise ShapeError(
            f"semantic probs {sem_mask_probs.shape} do not match masks {g.shape}"
        )
    probs = clamp(sem_mask_probs, PROB_EPS, 1.0 - PROB_EPS)
    g_t = Tensor(g.T)
    terms = -(g_t * log(probs) + (1.0 - g_t) * log(1.0 - probs))
    return tmean(terms)


def total_loss(parts: LossParts, weights: LossWeights) -> Tensor:
    """The weighted sum exactly as stated: beta*cls + bce + dice + sem."""
    return weights.beta * parts.cls + parts.bce + parts.dice + parts.sem
