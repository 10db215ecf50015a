"""Annotated point-cloud scenes: data model, file format, synthetic rooms.

A scene is an N x 6 point matrix (x, y, z in meters, r, g, b in [0, 1]) with
per-point instance and semantic labels plus an ordered class catalog that
splits categories into countable *things* and amorphous *stuff*.

Scene files are plain text (UTF-8, LF):

    OF3D-SCENE v1          (or v1.1 when a per-point segment column is present)
    classes <K>
    <name> <thing|stuff>   x K
    points <N>
    x y z r g b instance_id semantic_id [segment_id]   x N

Floats are printed as shortest round-trip decimals, so save/load round-trips
bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ContractError, PlacementError, SceneFormatError

HEADER_V1 = "OF3D-SCENE v1"
HEADER_V11 = "OF3D-SCENE v1.1"


@dataclass(frozen=True)
class ClassCatalog:
    """Ordered category names with a thing/stuff flag each."""

    names: tuple[str, ...]
    is_thing: tuple[bool, ...]

    def __post_init__(self):
        if len(self.names) == 0:
            raise ContractError("class catalog must not be empty")
        if len(self.names) != len(self.is_thing):
            raise ContractError("names and thing flags differ in length")
        if len(set(self.names)) != len(self.names):
            raise ContractError("class names must be unique")
        for name in self.names:
            if not name or any(ch.isspace() for ch in name):
                raise ContractError(f"invalid class name {name!r}")

    def __len__(self) -> int:
        return len(self.names)

    @property
    def thing_ids(self) -> tuple[int, ...]:
        return tuple(i for i, t in enumerate(self.is_thing) if t)

    @property
    def stuff_ids(self) -> tuple[int, ...]:
        return tuple(i for i, t in enumerate(self.is_thing) if not t)


DEFAULT_CATALOG = ClassCatalog(
    names=("floor", "wall", "ceiling", "cabinet", "chair", "table", "sofa", "shelf"),
    is_thing=(False, False, False, True, True, True, True, True),
)


@dataclass
class Scene:
    """Points with colors, labels and an optional precomputed segment column."""

    points: np.ndarray  # (N, 6) float64
    instance_id: np.ndarray  # (N,) int64, -1 = no instance
    semantic_id: np.ndarray  # (N,) int64 in [-1, len(catalog))
    catalog: ClassCatalog
    segment_id: np.ndarray | None = None  # (N,) int64, v1.1 side channel

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.instance_id = np.asarray(self.instance_id, dtype=np.int64)
        self.semantic_id = np.asarray(self.semantic_id, dtype=np.int64)
        if self.segment_id is not None:
            self.segment_id = np.asarray(self.segment_id, dtype=np.int64)
        self.validate()

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    def validate(self) -> None:
        """Check every scene invariant; raise instead of repairing."""
        pts = self.points
        if pts.ndim != 2 or pts.shape[1] != 6 or pts.shape[0] < 1:
            raise ContractError(f"points must be (N>=1, 6), got {pts.shape}")
        n = pts.shape[0]
        if not np.all(np.isfinite(pts)):
            raise ContractError("points contain non-finite values")
        colors = pts[:, 3:6]
        if colors.min() < 0.0 or colors.max() > 1.0:
            raise ContractError("colors must lie in [0, 1]")
        if self.instance_id.shape != (n,) or self.semantic_id.shape != (n,):
            raise ContractError("label arrays must match the point count")
        k = len(self.catalog)
        if self.semantic_id.min() < -1 or self.semantic_id.max() >= k:
            raise ContractError(f"semantic ids must lie in [-1, {k})")
        if self.instance_id.min() < -1:
            raise ContractError("instance ids must be >= -1")
        owned = self.instance_id >= 0
        if owned.any():
            sem = self.semantic_id[owned]
            if sem.min() < 0:
                raise ContractError("instance points must carry a semantic label")
            thing = np.asarray(self.catalog.is_thing)
            if not thing[sem].all():
                raise ContractError("instance points must belong to thing classes")
            for inst in np.unique(self.instance_id[owned]):
                classes = np.unique(self.semantic_id[self.instance_id == inst])
                if classes.size != 1:
                    raise ContractError(
                        f"instance {inst} spans semantic classes {classes.tolist()}"
                    )
        if self.segment_id is not None:
            if self.segment_id.shape != (n,):
                raise ContractError("segment column must match the point count")
            if self.segment_id.min() < 0:
                raise ContractError("segment ids must be >= 0")


def _fmt(x: float) -> str:
    return repr(float(x))


def save_scene(scene: Scene, path) -> None:
    """Write the scene deterministically; bytes depend only on the payload."""
    scene.validate()
    lines = []
    lines.append(HEADER_V11 if scene.segment_id is not None else HEADER_V1)
    lines.append(f"classes {len(scene.catalog)}")
    for name, is_thing in zip(scene.catalog.names, scene.catalog.is_thing):
        lines.append(f"{name} {'thing' if is_thing else 'stuff'}")
    lines.append(f"points {scene.n_points}")
    seg = scene.segment_id
    for i in range(scene.n_points):
        row = " ".join(_fmt(v) for v in scene.points[i])
        row += f" {scene.instance_id[i]} {scene.semantic_id[i]}"
        if seg is not None:
            row += f" {seg[i]}"
        lines.append(row)
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("utf-8"))


def load_scene(path) -> Scene:
    """Parse and validate a scene file; errors carry the offending line."""
    with open(path, "rb") as fh:
        text = fh.read().decode("utf-8")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    cursor = _Cursor(lines)
    header = cursor.next("header")
    if header == HEADER_V1:
        has_segments = False
    elif header == HEADER_V11:
        has_segments = True
    else:
        raise SceneFormatError(f"unknown header {header!r}", line=1)
    tok = cursor.next("classes line").split()
    if len(tok) != 2 or tok[0] != "classes":
        raise SceneFormatError("expected 'classes <K>'", line=cursor.line)
    k = _int(tok[1], cursor.line)
    if k < 1:
        raise SceneFormatError("class count must be >= 1", line=cursor.line)
    names, flags = [], []
    for _ in range(k):
        tok = cursor.next("class entry").split()
        if len(tok) != 2 or tok[1] not in ("thing", "stuff"):
            raise SceneFormatError("expected '<name> <thing|stuff>'", line=cursor.line)
        names.append(tok[0])
        flags.append(tok[1] == "thing")
    tok = cursor.next("points line").split()
    if len(tok) != 2 or tok[0] != "points":
        raise SceneFormatError("expected 'points <N>'", line=cursor.line)
    n = _int(tok[1], cursor.line)
    if n < 1:
        raise SceneFormatError("point count must be >= 1", line=cursor.line)
    width = 9 if has_segments else 8
    points = np.empty((n, 6))
    instance = np.empty(n, dtype=np.int64)
    semantic = np.empty(n, dtype=np.int64)
    segments = np.empty(n, dtype=np.int64) if has_segments else None
    for i in range(n):
        tok = cursor.next("point row").split()
        if len(tok) != width:
            raise SceneFormatError(
                f"expected {width} columns, got {len(tok)}", line=cursor.line
            )
        try:
            points[i] = [float(v) for v in tok[:6]]
            instance[i] = int(tok[6])
            semantic[i] = int(tok[7])
            if segments is not None:
                segments[i] = int(tok[8])
        except ValueError as exc:
            raise SceneFormatError(str(exc), line=cursor.line)
    if cursor.remaining():
        raise SceneFormatError("trailing content after point rows", line=cursor.line + 1)
    try:
        catalog = ClassCatalog(tuple(names), tuple(flags))
        return Scene(points, instance, semantic, catalog, segments)
    except ContractError as exc:
        raise SceneFormatError(str(exc))


class _Cursor:
    def __init__(self, lines):
        self.lines = lines
        self.line = 0

    def next(self, what: str) -> str:
        if self.line >= len(self.lines):
            raise SceneFormatError(f"unexpected end of file, wanted {what}", line=self.line + 1)
        self.line += 1
        return self.lines[self.line - 1]

    def remaining(self) -> bool:
        return self.line < len(self.lines)


def _int(tok: str, line: int) -> int:
    try:
        return int(tok)
    except ValueError:
        raise SceneFormatError(f"expected an integer, got {tok!r}", line=line)


# -- synthetic room generator --------------------------------------------------


@dataclass(frozen=True)
class GeneratorParams:
    """Knobs for the synthetic room generator.

    Surfaces are sampled at a uniform areal density rather than a fixed
    per-surface count; equal density keeps normal estimation honest where
    sparse and dense surfaces meet.
    """

    room: tuple[float, float, float] = (5.0, 5.0, 2.7)
    n_things: int = 8
    points_per_sqm: float = 30.0
    noise_sigma: float = 0.005
    box_min: float = 0.6  # smallest box edge in x/y
    box_max: float = 1.1
    edge_inset: float = 0.08  # sampling gap along face borders, like occlusion shadows
    catalog: ClassCatalog = field(default_factory=lambda: DEFAULT_CATALOG)
    max_retries: int = 200


def generate_synthetic_scene(seed: int, params: GeneratorParams | None = None) -> Scene:
    """Axis-aligned room with box-shaped thing instances, fully labeled.

    Stuff surfaces are the floor, ceiling and four walls; things are
    non-overlapping boxes standing on the floor, their classes cycled from
    the thing catalog. Points are sampled uniformly per surface and jittered
    by a Gaussian clipped at 3 sigma, which keeps every point within an
    analytically known bound of its surface.
    """
    p = params or GeneratorParams()
    w, d, h = p.room
    if min(w, d, h) <= 0:
        raise ContractError("room dimensions must be positive")
    if p.n_things < 0:
        raise ContractError("n_things must be >= 0")
    catalog = p.catalog
    thing_ids = catalog.thing_ids
    stuff_ids = catalog.stuff_ids
    if p.n_things > 0 and not thing_ids:
        raise ContractError("catalog has no thing classes")
    if len(stuff_ids) < 1:
        raise ContractError("catalog has no stuff classes")
    rng = np.random.default_rng([seed, 0x0F3D])

    boxes = _place_boxes(rng, p)

    # Room surfaces: (lo, hi, fixed axis, fixed value, semantic id).
    floor_id = stuff_ids[0]
    wall_id = stuff_ids[min(1, len(stuff_ids) - 1)]
    ceiling_id = stuff_ids[min(2, len(stuff_ids) - 1)]
    surfaces = [
        ((0, 0), (w, d), 2, 0.0, floor_id, -1),
        ((0, 0), (w, d), 2, h, ceiling_id, -1),
        ((0, 0), (w, h), 1, 0.0, wall_id, -1),
        ((0, 0), (w, h), 1, d, wall_id, -1),
        ((0, 0), (d, h), 0, 0.0, wall_id, -1),
        ((0, 0), (d, h), 0, w, wall_id, -1),
    ]
    for idx, (lo, hi) in enumerate(boxes):
        sem = thing_ids[idx % len(thing_ids)]
        # All six faces: every axis extreme of the box is realized by one
        # face's fixed coordinate, which keeps ground-truth boxes analytic.
        surfaces.append(((lo[0], lo[1]), (hi[0], hi[1]), 2, hi[2], sem, idx))
        surfaces.append(((lo[0], lo[1]), (hi[0], hi[1]), 2, lo[2], sem, idx))
        surfaces.append(((lo[0], lo[2]), (hi[0], hi[2]), 1, lo[1], sem, idx))
        surfaces.append(((lo[0], lo[2]), (hi[0], hi[2]), 1, hi[1], sem, idx))
        surfaces.append(((lo[1], lo[2]), (hi[1], hi[2]), 0, lo[0], sem, idx))
        surfaces.append(((lo[1], lo[2]), (hi[1], hi[2]), 0, hi[0], sem, idx))

    palette = _class_palette(len(catalog))
    chunks, instances, semantics = [], [], []
    for (lo2, hi2, axis, value, sem, inst) in surfaces:
        lo2, hi2 = _inset_face(lo2, hi2, p.edge_inset)
        area = (hi2[0] - lo2[0]) * (hi2[1] - lo2[1])
        # The floor count keeps small faces self-supporting in the k-NN graph.
        count = max(12, int(round(area * p.points_per_sqm)))
        pts = _sample_surface(rng, lo2, hi2, axis, value, count)
        jitter = rng.normal(0.0, p.noise_sigma, pts.shape)
        if p.noise_sigma > 0:
            np.clip(jitter, -3 * p.noise_sigma, 3 * p.noise_sigma, out=jitter)
        pts = pts + jitter
        colors = palette[sem] + rng.normal(0.0, 0.02, pts.shape)
        np.clip(colors, 0.0, 1.0, out=colors)
        chunks.append(np.hstack([pts, colors]))
        instances.append(np.full(len(pts), inst, dtype=np.int64))
        semantics.append(np.full(len(pts), sem, dtype=np.int64))

    return Scene(
        points=np.vstack(chunks),
        instance_id=np.concatenate(instances),
        semantic_id=np.concatenate(semantics),
        catalog=catalog,
    )


def _place_boxes(rng, p: GeneratorParams):
    w, d, h = p.room
    margin = 0.3
    gap = 0.15
    for _layout in range(20):  # whole-layout restarts when one box gets cornered
        boxes = []
        for _ in range(p.n_things):
            placed = False
            for _attempt in range(p.max_retries):
                size = rng.uniform(
                    [p.box_min, p.box_min, 0.5], [p.box_max, p.box_max, min(1.2, h - 1.0)]
                )
                lo_xy = rng.uniform(
                    [margin, margin],
                    [max(margin + 1e-6, w - margin - size[0]),
                     max(margin + 1e-6, d - margin - size[1])],
                )
                # Boxes float a little (think tabletops): separating things
                # from the floor keeps plane-fit normals clean at contacts.
                lo = np.array([lo_xy[0], lo_xy[1], float(rng.uniform(0.15, 0.35))])
                hi = lo + size
                if all(
                    hi[0] + gap <= blo[0] or blo_hi[0] + gap <= lo[0]
                    or hi[1] + gap <= blo[1] or blo_hi[1] + gap <= lo[1]
                    for blo, blo_hi in boxes
                ):
                    boxes.append((lo, hi))
                    placed = True
                    break
            if not placed:
                break
        if len(boxes) == p.n_things:
            return boxes
    raise PlacementError(
        f"could not place {p.n_things} boxes after 20 layouts x {p.max_retries} retries"
    )


def _inset_face(lo2, hi2, inset):
    """Shrink the in-plane sampling window, capped at 30% of each extent."""
    out_lo, out_hi = [], []
    for lo, hi in zip(lo2, hi2):
        e = min(inset, 0.3 * (hi - lo))
        out_lo.append(lo + e)
        out_hi.append(hi - e)
    return tuple(out_lo), tuple(out_hi)


def _sample_surface(rng, lo2, hi2, axis, value, count):
    uv = rng.uniform(lo2, hi2, (count, 2))
    pts = np.empty((count, 3))
    free = [a for a in range(3) if a != axis]
    pts[:, free[0]] = uv[:, 0]
    pts[:, free[1]] = uv[:, 1]
    pts[:, axis] = value
    return pts


def _class_palette(k: int) -> np.ndarray:
    """Well-separated base colors, one per class, deterministic."""
    hues = (np.arange(k) / max(k, 1)) % 1.0
    palette = np.empty((k, 3))
    for i, hue in enumerate(hues):
        palette[i] = _hsv_to_rgb(hue, 0.65, 0.55 + 0.4 * ((i % 2)))
    return np.clip(palette, 0.05, 0.95)


def _hsv_to_rgb(h, s, v):
    i = int(h * 6.0) % 6
    f = h * 6.0 - int(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    return [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]


# -- augmentation -----------------------------------------------------------


@dataclass(frozen=True)
class AugmentFlags:
    flip: bool = True
    z_rotate: bool = True
    scale: bool = True


def augment(scene: Scene, seed: int, flags: AugmentFlags | None = None) -> Scene:
    """Random flip / z-rotation / isotropic scale; labels are untouched."""
    flags = flags or AugmentFlags()
    rng = np.random.default_rng([seed, 0xA46])
    flip = flags.flip and bool(rng.random() < 0.5)
    angle = float(rng.uniform(0.0, 2.0 * np.pi)) if flags.z_rotate else 0.0
    scale = float(rng.uniform(0.9, 1.1)) if flags.scale else 1.0
    return apply_transform(scene, flip=flip, angle=angle, scale=scale)


def apply_transform(scene: Scene, flip: bool, angle: float, scale: float) -> Scene:
    """Deterministic core of ``augment``; exposed so tests can force draws."""
    coords = scene.points[:, :3].copy()
    if flip:
        coords[:, 0] = -coords[:, 0]
    if angle != 0.0:
        c, s = np.cos(angle), np.sin(angle)
        x, y = coords[:, 0].copy(), coords[:, 1].copy()
        coords[:, 0] = c * x - s * y
        coords[:, 1] = s * x + c * y
    if scale != 1.0:
        coords *= scale
    points = scene.points.copy()
    points[:, :3] = coords
    return replace(scene, points=points)
