"""Trainable point encoder: raw N x 6 points to N x C point-wise features.

A linear lift of normalized coordinates plus colors, followed by ``depth``
blocks of {radius-neighborhood mean aggregation, two-layer feed-forward with
residual, layer norm}. Permutation-equivariant over points and fully
differentiable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, add, gather_mean, layer_norm, matmul, relu
from .errors import ContractError, ShapeError
from .scene import Scene


@dataclass(frozen=True)
class EncoderConfig:
    feat_dim: int = 32
    depth: int = 3
    radius: float = 0.3

    def __post_init__(self):
        if self.feat_dim < 8:
            raise ContractError("feature width must be >= 8")
        if self.depth < 1:
            raise ContractError("encoder depth must be >= 1")
        if self.radius <= 0:
            raise ContractError("neighborhood radius must be positive")


def encoder_param_shapes(config: EncoderConfig) -> dict[str, tuple[int, ...]]:
    c = config.feat_dim
    shapes: dict[str, tuple[int, ...]] = {
        "enc.lift.w": (6, c),
        "enc.lift.b": (c,),
    }
    for d in range(config.depth):
        shapes[f"enc.b{d}.ff1.w"] = (c, 2 * c)
        shapes[f"enc.b{d}.ff1.b"] = (2 * c,)
        shapes[f"enc.b{d}.ff2.w"] = (2 * c, c)
        shapes[f"enc.b{d}.ff2.b"] = (c,)
        shapes[f"enc.b{d}.ln.g"] = (c,)
        shapes[f"enc.b{d}.ln.b"] = (c,)
    return shapes


def encode(scene: Scene, config: EncoderConfig, params: dict[str, Tensor]) -> Tensor:
    """Per-point features; every point aggregates itself plus its radius ball."""
    for name, shape in encoder_param_shapes(config).items():
        if name not in params:
            raise ContractError(f"missing encoder parameter {name}")
        if params[name].shape != shape:
            raise ShapeError(
                f"{name} has shape {params[name].shape}, expected {shape}"
            )
    coords = scene.points[:, :3]
    lo = coords.min(axis=0)
    extent = coords.max(axis=0) - lo
    extent[extent == 0] = 1.0
    inp = np.hstack([(coords - lo) / extent, scene.points[:, 3:6]])

    flat, offsets = _radius_neighbors(coords, config.radius)

    x = add(matmul(Tensor(inp), params["enc.lift.w"]), params["enc.lift.b"])
    for d in range(config.depth):
        agg = gather_mean(x, flat, offsets)
        hidden = relu(add(matmul(agg, params[f"enc.b{d}.ff1.w"]), params[f"enc.b{d}.ff1.b"]))
        update = add(matmul(hidden, params[f"enc.b{d}.ff2.w"]), params[f"enc.b{d}.ff2.b"])
        x = layer_norm(add(x, update), params[f"enc.b{d}.ln.g"], params[f"enc.b{d}.ln.b"])
    return x


def _radius_neighbors(coords: np.ndarray, radius: float):
    """Flat neighbor lists (self included) for radius balls around each point."""
    n = len(coords)
    r2 = radius * radius
    pieces = []
    counts = np.empty(n, dtype=np.int64)
    chunk = max(1, int(2e7 // max(n, 1)))
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        d2 = ((coords[start:stop, None, :] - coords[None, :, :]) ** 2).sum(axis=2)
        hits = d2 <= r2  # includes self at distance 0
        for i in range(stop - start):
            idx = np.flatnonzero(hits[i])
            pieces.append(idx)
            counts[start + i] = len(idx)
    offsets = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    return np.concatenate(pieces), offsets
