"""Joint end-to-end training: optimizer, schedule, step wiring, checkpoints.

Every run is a pure function of (dataset, config): per-step randomness is
derived from (seed, step, slot) rather than a shared stateful stream, so a
resumed run replays the exact trajectory of an uninterrupted one, and any
worker-thread count produces bit-identical results because per-scene
gradient tables are reduced in a fixed order.

The training log is text: a header line ``OF3D-LOG v1`` and one line per
step, ``step lr loss cls bce dice sem unmatched_gt matcher_ns``. The
``matcher_ns`` column stays 0 unless ``log_timings`` is enabled; wall-clock
values would break byte-reproducibility of logs.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor, sigmoid
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, thread_count
from .errors import ContractError
from .losses import LossParts, LossWeights, cls_loss, mask_losses, semantic_loss, total_loss
from .matching import constrain, cost_matrix, disentangled_match, hungarian, CostMatrix, Assignment
from .model import (
    build_params,
    class_probabilities,
    forward,
    mask_probabilities,
    param_shapes,
)
from .partition import project_ground_truth
from .scene import AugmentFlags, Scene, augment, load_scene


def lr_schedule(step: int, total: int, base_lr: float, power: float = 0.9) -> float:
    """Polynomial decay: base_lr * (1 - step/total) ** power."""
    if not 0 <= step <= total:
        raise ContractError(f"step {step} outside [0, {total}]")
    if total == 0:
        return base_lr
    return base_lr * (1.0 - step / total) ** power


@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step_count: int = 0


def optimizer_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    lr: float,
    weight_decay: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> bool:
    """Adaptive-moment update with decoupled weight decay.

    Returns False (and leaves everything untouched) when any gradient is
    non-finite; the caller records the skip.
    """
    for name in params:
        g = grads.get(name)
        if g is not None and not np.all(np.isfinite(g)):
            return False
    state.step_count += 1
    t = state.step_count
    bias1 = 1.0 - beta1**t
    bias2 = 1.0 - beta2**t
    for name in sorted(params):
        p = params[name]
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / bias1
        v_hat = v / bias2
        p.data = p.data - lr * (m_hat / (np.sqrt(v_hat) + eps) + weight_decay * p.data)
    return True


def _derived_seed(*entropy) -> int:
    return int(np.random.SeedSequence(entropy).generate_state(1)[0])


@dataclass
class StepResult:
    loss: float
    cls: float
    bce: float
    dice: float
    sem: float
    unmatched_gt: int
    matcher_ns: int
    applied: bool
    skipped_scenes: int = 0


def _match_constrained(constrained: CostMatrix, matcher: str):
    """Run the configured matcher on a constrained matrix.

    Ground truths whose columns carry no finite entry (all their segments
    were dropped by query selection) go unmatched this step; the Hungarian
    path solves the feasible column subset so both matchers see identical
    problems.
    """
    if matcher == "disentangled":
        return disentangled_match(constrained)
    k_ins, k_gt = constrained.shape
    feasible = sorted({k for _, k, _ in constrained.finite_entries})
    if not feasible:
        return Assignment(
            pairs=(),
            unmatched_proposals=tuple(range(k_ins)),
            unmatched_gts=tuple(range(k_gt)),
        )
    sub = constrained.values[:, feasible]
    result = hungarian(CostMatrix(values=sub, lam=constrained.lam, constrained=True))
    pairs = tuple((p, feasible[g]) for p, g in result.pairs)
    missing = tuple(k for k in range(k_gt) if k not in {g for _, g in pairs})
    return Assignment(
        pairs=pairs,
        unmatched_proposals=result.unmatched_proposals,
        unmatched_gts=missing,
    )


def _scene_objective(
    scene: Scene, params, config: RunConfig, catalog, step: int, slot: int, partition=None
):
    """Forward one scene and return (loss tensor, part tensors, diagnostics)."""
    flags = AugmentFlags(flip=config.aug_flip, z_rotate=config.aug_rotate, scale=config.aug_scale)
    if flags.flip or flags.z_rotate or flags.scale:
        scene = augment(scene, _derived_seed(config.seed, step, slot, 1), flags)
    out = forward(
        scene, params, config, catalog,
        mode="train",
        selection_seed=_derived_seed(config.seed, step, slot, 2),
        partition=partition,
    )
    if out.partition.num_segments < 1:
        return None
    gt = project_ground_truth(scene, out.partition)
    weights = LossWeights(beta=config.beta_cls, lam=config.lambda_cls)

    zero = Tensor(0.0)
    cls_part, bce_part, dice_part, sem_part = zero, zero, zero, zero
    unmatched = 0
    matcher_ns = 0
    if config.query_mode != "semantic_only":
        thing_pos = {cid: i for i, cid in enumerate(catalog.thing_ids)}
        gt_thing = np.array(
            [thing_pos[int(c)] for c in gt.instance_classes], dtype=np.int64
        )
        if gt.num_instances > 0:
            cost = cost_matrix(
                class_probabilities(out.kernels),
                mask_probabilities(out.instance_logits),
                gt.instance_masks,
                gt_thing,
                lam=config.lambda_cls,
            )
            constrained = constrain(cost, out.queries.source_segments, gt.segment_gt_column())
            start = time.perf_counter_ns()
            assignment = _match_constrained(constrained, config.matcher)
            matcher_ns = time.perf_counter_ns() - start
            unmatched = len(assignment.unmatched_gts)
        else:
            assignment = Assignment(
                pairs=(), unmatched_proposals=tuple(range(out.queries.num_instance))
            )
        cls_part = cls_loss(out.kernels.class_logits, assignment, gt_thing)
        bce_part, dice_part = mask_losses(
            sigmoid(out.instance_logits), assignment, gt.instance_masks
        )
    if config.query_mode != "instance_only":
        sem_raw = semantic_loss(sigmoid(out.semantic_logits), gt.category_masks)
        sem_part = config.sem_loss_weight * sem_raw

    parts = LossParts(cls=cls_part, bce=bce_part, dice=dice_part, sem=sem_part)
    return total_loss(parts, weights), parts, unmatched, matcher_ns


def train_step(
    scenes: list[Scene],
    params: dict[str, Tensor],
    opt_state: OptimizerState,
    config: RunConfig,
    catalog,
    step: int,
    lr: float,
    partitions: list | None = None,
) -> StepResult:
    """One batch: per-scene objectives, fixed-order gradient reduction,
    one optimizer step."""
    if partitions is None:
        partitions = [None] * len(scenes)
    workers = thread_count()
    if workers > 1 and len(scenes) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool_:
            results = list(
                pool_.map(
                    lambda job: _scene_objective(
                        job[1], params, config, catalog, step, job[0], job[2]
                    ),
                    zip(range(len(scenes)), scenes, partitions),
                )
            )
    else:
        results = [
            _scene_objective(scene, params, config, catalog, step, slot, part)
            for slot, (scene, part) in enumerate(zip(scenes, partitions))
        ]

    kept = [r for r in results if r is not None]
    skipped = len(results) - len(kept)
    if not kept:
        return StepResult(0.0, 0.0, 0.0, 0.0, 0.0, 0, 0, applied=False, skipped_scenes=skipped)

    name_of = {id(t): n for n, t in params.items()}
    batch = len(kept)
    grads: dict[str, np.ndarray] = {}
    part_sums = np.zeros(4)
    unmatched = 0
    matcher_ns = 0
    for loss, parts, miss, ns in kept:
        table = loss.gradients()
        for tensor, g in table.items():
            name = name_of.get(id(tensor))
            if name is None:
                continue
            contrib = g / batch
            if name in grads:
                grads[name] += contrib
            else:
                grads[name] = contrib
        part_sums += [parts.cls.item(), parts.bce.item(), parts.dice.item(), parts.sem.item()]
        unmatched += miss
        matcher_ns += ns

    if config.grad_clip > 0:
        norm = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        if norm > config.grad_clip:
            scale = config.grad_clip / norm
            for g in grads.values():
                g *= scale

    cls_m, bce_m, dice_m, sem_m = (part_sums / batch).tolist()
    loss_m = config.beta_cls * cls_m + bce_m + dice_m + sem_m
    applied = optimizer_step(params, grads, opt_state, lr, config.weight_decay)
    return StepResult(
        loss=loss_m, cls=cls_m, bce=bce_m, dice=dice_m, sem=sem_m,
        unmatched_gt=unmatched, matcher_ns=matcher_ns, applied=applied,
        skipped_scenes=skipped,
    )


@dataclass
class FitResult:
    checkpoint_path: Path
    log_path: Path
    steps_run: int
    final_loss: float


def load_dataset(data_dir) -> list[Scene]:
    paths = sorted(Path(data_dir).glob("*.of3d"))
    if not paths:
        raise ContractError(f"no .of3d scenes found in {data_dir}")
    scenes = [load_scene(p) for p in paths]
    first = scenes[0].catalog
    for scene in scenes[1:]:
        if scene.catalog != first:
            raise ContractError("all scenes must share one class catalog")
    return scenes


def fit(data_dir, config: RunConfig, out_dir) -> FitResult:
    """Full training loop with schedule, periodic checkpoints and a log."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scenes = load_dataset(data_dir)
    catalog = scenes[0].catalog

    params = build_params(config, catalog)
    opt_state = OptimizerState()
    start_step = 0
    if config.resume:
        start_step = _load_training_state(config.resume, params, opt_state, config, catalog)

    # Superpoints are per-scan structures, invariant to flip/rotation, so
    # they are computed once per scene; voxel grids depend on the augmented
    # coordinates and stay per-step.
    partitions = None
    if config.pooling == "superpoint":
        from .model import build_partition

        partitions = [build_partition(scene, config) for scene in scenes]

    log_lines = ["OF3D-LOG v1"]
    final_loss = float("nan")
    rng_tag = 0xBA7C
    for step in range(start_step, config.steps):
        lr = lr_schedule(step, config.steps, config.lr, config.sched_power)
        rng = np.random.default_rng([config.seed, step, rng_tag])
        batch_idx = rng.integers(0, len(scenes), size=config.batch_size)
        batch = [scenes[int(i)] for i in batch_idx]
        batch_parts = (
            [partitions[int(i)] for i in batch_idx] if partitions is not None else None
        )
        result = train_step(batch, params, opt_state, config, catalog, step, lr, batch_parts)
        final_loss = result.loss
        reported_ns = result.matcher_ns if config.log_timings else 0
        log_lines.append(
            f"{step} {repr(lr)} {repr(result.loss)} {repr(result.cls)} "
            f"{repr(result.bce)} {repr(result.dice)} {repr(result.sem)} "
            f"{result.unmatched_gt} {reported_ns}"
        )
        if config.checkpoint_every > 0 and (step + 1) % config.checkpoint_every == 0:
            _save_training_state(
                out / f"checkpoint_{step + 1}.of3dckpt", params, opt_state, step + 1
            )

    ckpt_path = out / "checkpoint.of3dckpt"
    _save_training_state(ckpt_path, params, opt_state, config.steps)
    log_path = out / "train.of3dlog"
    with open(log_path, "wb") as fh:
        fh.write(("\n".join(log_lines) + "\n").encode("utf-8"))
    return FitResult(
        checkpoint_path=ckpt_path,
        log_path=log_path,
        steps_run=config.steps - start_step,
        final_loss=final_loss,
    )


def _save_training_state(
    path, params: dict[str, Tensor], state: OptimizerState, steps_done: int
) -> None:
    blob: dict[str, np.ndarray] = {name: t.data for name, t in params.items()}
    for name in params:
        if name in state.m:
            blob[f"opt.m.{name}"] = state.m[name]
            blob[f"opt.v.{name}"] = state.v[name]
    blob["opt.step"] = np.array([float(steps_done)])
    blob["opt.adam_t"] = np.array([float(state.step_count)])
    save_checkpoint(path, blob)


def _load_training_state(path, params, state: OptimizerState, config, catalog) -> int:
    blob = load_checkpoint(path)
    expected = param_shapes(config, catalog)
    for name, shape in expected.items():
        if name not in blob:
            raise ContractError(f"checkpoint misses parameter {name}")
        if blob[name].shape != shape:
            raise ContractError(
                f"checkpoint parameter {name} has shape {blob[name].shape}, expected {shape}"
            )
        params[name].data = blob[name]
        if f"opt.m.{name}" in blob:
            state.m[name] = blob[f"opt.m.{name}"].copy()
            state.v[name] = blob[f"opt.v.{name}"].copy()
    state.step_count = int(blob.get("opt.adam_t", np.zeros(1))[0])
    return int(blob.get("opt.step", np.zeros(1))[0])


def load_model(path, config: RunConfig, catalog) -> dict[str, Tensor]:
    """Model parameters from a checkpoint, validated against the config."""
    params = build_params(config, catalog)
    state = OptimizerState()
    _load_training_state(path, params, state, config, catalog)
    return params
