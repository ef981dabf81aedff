"""Deterministic synthetic videos of moving shapes with exact or perturbed dense maps.

The generator stands in for a trained network: it rasterizes disks and
rectangles frame by frame, derives ground-truth identity maps and tracks,
and renders the maps a perfect network would predict (one-hot semantics,
Gaussian center heatmap, exact offsets). :func:`perturb` then degrades them
with a configurable noise model. Randomness is always derived from
``(seed, frame_index)`` so frames can be produced in any order.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .core import FramePrediction, IdentityMap, OffsetField, ScalarMap, SemanticProbMap, foreground_from_probs
from .errors import SpecError
from .matching import FIRST_PLUS_3, ReferencePolicy, default_epsilon
from .parallel import SERIAL, Workers

SHAPE_KINDS = ("disk", "rectangle")
SPURIOUS_PEAK_VALUE = 0.3
DEFAULT_HEATMAP_SIGMA = 8.0


@dataclass(frozen=True)
class ShapeSpec:
    """One moving shape.

    ``size`` is ``(radius, radius)`` for a disk and ``(half_height, half_width)``
    for a rectangle. ``position`` is the shape center at ``birth_frame``; it
    moves by ``velocity`` pixels per frame and is visible up to and including
    ``death_frame``.
    """

    kind: str
    size: tuple[float, float]
    class_index: int
    position: tuple[float, float]
    velocity: tuple[float, float] = (0.0, 0.0)
    birth_frame: int = 0
    death_frame: int | None = None

    def __post_init__(self):
        if self.kind not in SHAPE_KINDS:
            raise SpecError(f"unknown shape kind {self.kind!r}")
        size = self.size
        if np.isscalar(size):
            size = (float(size), float(size))
        size = tuple(float(s) for s in size)
        if len(size) != 2 or min(size) <= 0:
            raise SpecError(f"shape size must be two positive numbers, got {self.size}")
        object.__setattr__(self, "size", size)
        object.__setattr__(self, "position", tuple(float(v) for v in self.position))
        object.__setattr__(self, "velocity", tuple(float(v) for v in self.velocity))
        if self.class_index < 1:
            raise SpecError("shape class must be a foreground class (>= 1)")

    def center_at(self, t: int) -> tuple[float, float]:
        dt = t - self.birth_frame
        return self.position[0] + self.velocity[0] * dt, self.position[1] + self.velocity[1] * dt

    def alive(self, t: int) -> bool:
        return self.birth_frame <= t <= self.death_frame


@dataclass(frozen=True)
class SceneSpec:
    height: int
    width: int
    num_frames: int
    shapes: tuple[ShapeSpec, ...]
    num_classes: int = 4
    heatmap_sigma: float = DEFAULT_HEATMAP_SIGMA
    seed: int = 0

    def __post_init__(self):
        if self.height < 1 or self.width < 1 or self.num_frames < 1:
            raise SpecError("scene needs positive height, width and frame count")
        if self.num_classes < 2:
            raise SpecError("scene needs at least one foreground class")
        if self.heatmap_sigma <= 0:
            raise SpecError("heatmap_sigma must be positive")
        shapes = []
        for s in self.shapes:
            if isinstance(s, dict):
                s = ShapeSpec(**s)
            if s.death_frame is None:
                s = ShapeSpec(**{**asdict(s), "death_frame": self.num_frames - 1})
            if not 0 <= s.birth_frame <= s.death_frame < self.num_frames:
                raise SpecError(f"shape life [{s.birth_frame}, {s.death_frame}] outside 0..{self.num_frames - 1}")
            if s.class_index >= self.num_classes:
                raise SpecError(f"shape class {s.class_index} >= num_classes {self.num_classes}")
            if not _inside(s, s.birth_frame, self.height, self.width):
                raise SpecError(f"shape {s} is not fully inside the image at its birth frame")
            shapes.append(s)
        object.__setattr__(self, "shapes", tuple(shapes))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["shapes"] = [
            {**s, "size": list(s["size"]), "position": list(s["position"]), "velocity": list(s["velocity"])}
            for s in d["shapes"]
        ]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        d["shapes"] = tuple(ShapeSpec(**s) for s in d.get("shapes", ()))
        return cls(**d)


@dataclass(frozen=True)
class NoiseSpec:
    """Prediction degradations applied by :func:`perturb`.

    ``offset_noise_fraction`` limits the Gaussian offset noise to a random
    subset of pixels. ``mask_erosion`` removes that many pixels from one
    randomly chosen side of every class mask.
    """

    offset_noise_sigma: float = 0.0
    offset_noise_fraction: float = 1.0
    heatmap_jitter: float = 0.0
    peak_dropout_prob: float = 0.0
    spurious_peak_rate: float = 0.0
    mask_erosion: int = 0
    semantic_flip_prob: float = 0.0

    def __post_init__(self):
        for name, v in asdict(self).items():
            if not np.isfinite(v) or v < 0:
                raise SpecError(f"{name} must be finite and non-negative, got {v}")
        for name in ("offset_noise_fraction", "peak_dropout_prob", "semantic_flip_prob"):
            if getattr(self, name) > 1:
                raise SpecError(f"{name} must not exceed 1")
        if int(self.mask_erosion) != self.mask_erosion:
            raise SpecError("mask_erosion must be a whole number of pixels")

    def is_noop(self) -> bool:
        return (
            (self.offset_noise_sigma == 0 or self.offset_noise_fraction == 0)
            and self.heatmap_jitter == 0
            and self.peak_dropout_prob == 0
            and self.spurious_peak_rate == 0
            and self.mask_erosion == 0
            and self.semantic_flip_prob == 0
        )

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SyntheticSequence:
    """Generator output.

    ``gt_tracks`` rows are ``(frame, gt_id, class_index)``; gt ids are the
    1-based shape indices. ``barycenters[t]`` maps gt id to the visible-mask
    barycenter in frame ``t``.
    """

    scene: SceneSpec
    policy: ReferencePolicy
    predictions: list[FramePrediction]
    gt_maps: list[IdentityMap]
    gt_tracks: list[tuple[int, int, int]]
    barycenters: list[dict[int, tuple[float, float]]]

    @property
    def class_of(self) -> dict[int, int]:
        return {i + 1: s.class_index for i, s in enumerate(self.scene.shapes)}


def _extent(shape: ShapeSpec) -> tuple[float, float]:
    return shape.size


def _inside(shape: ShapeSpec, t: int, height: int, width: int) -> bool:
    r, c = shape.center_at(t)
    a, b = _extent(shape)
    return r - a >= 0 and r + a <= height - 1 and c - b >= 0 and c + b <= width - 1


def _rasterize(shape: ShapeSpec, t: int, height: int, width: int):
    """Return ``(row_slice, col_slice, mask)`` of the shape clipped to the image, or None."""
    r, c = shape.center_at(t)
    a, b = _extent(shape)
    r0, r1 = max(0, int(np.ceil(r - a))), min(height - 1, int(np.floor(r + a)))
    c0, c1 = max(0, int(np.ceil(c - b))), min(width - 1, int(np.floor(c + b)))
    if r0 > r1 or c0 > c1:
        return None
    rr = np.arange(r0, r1 + 1, dtype=np.float64)[:, None]
    cc = np.arange(c0, c1 + 1, dtype=np.float64)[None, :]
    if shape.kind == "disk":
        mask = (rr - r) ** 2 + (cc - c) ** 2 <= a * a
    else:
        mask = (np.abs(rr - r) <= a) & (np.abs(cc - c) <= b)
    if not mask.any():
        return None
    return slice(r0, r1 + 1), slice(c0, c1 + 1), mask


def render_gt_frame(scene: SceneSpec, t: int) -> tuple[np.ndarray, dict[int, tuple[float, float]]]:
    """Ground-truth identity grid of frame ``t`` and the barycenter of every visible shape.

    Later shapes are drawn on top of earlier ones.
    """
    ids = np.zeros((scene.height, scene.width), dtype=np.uint32)
    for i, s in enumerate(scene.shapes):
        if not s.alive(t):
            continue
        raster = _rasterize(s, t, scene.height, scene.width)
        if raster is None:
            continue
        rs, cs, mask = raster
        ids[rs, cs][mask] = i + 1
    flat = ids.ravel()
    n = len(scene.shapes) + 1
    count = np.bincount(flat, minlength=n)
    rows, cols = np.divmod(np.arange(flat.size), scene.width)
    sum_r = np.bincount(flat, weights=rows, minlength=n)
    sum_c = np.bincount(flat, weights=cols, minlength=n)
    bary = {int(g): (sum_r[g] / count[g], sum_c[g] / count[g]) for g in range(1, n) if count[g] > 0}
    return ids, bary


def gaussian_heatmap(shape, peaks: Sequence[tuple[float, float]], sigma: float, amplitudes=None) -> np.ndarray:
    """Pixelwise maximum of isotropic Gaussians centred at real-valued peaks."""
    height, width = shape
    heat = np.zeros((height, width))
    rows = np.arange(height, dtype=np.float64)
    cols = np.arange(width, dtype=np.float64)
    for k, (pr, pc) in enumerate(peaks):
        amp = 1.0 if amplitudes is None else amplitudes[k]
        g = amp * np.outer(np.exp(-((rows - pr) ** 2) / (2 * sigma**2)), np.exp(-((cols - pc) ** 2) / (2 * sigma**2)))
        np.maximum(heat, g, out=heat)
    return heat


def _center_offsets(ids: np.ndarray, centers: dict[int, tuple[float, float]], size: int):
    lut_r = np.zeros(size)
    lut_c = np.zeros(size)
    for g, (br, bc) in centers.items():
        lut_r[g], lut_c[g] = br, bc
    rows = np.arange(ids.shape[0], dtype=np.float64)[:, None]
    cols = np.arange(ids.shape[1], dtype=np.float64)[None, :]
    fg = ids > 0
    return np.where(fg, lut_r[ids] - rows, 0.0), np.where(fg, lut_c[ids] - cols, 0.0)


def _build_prediction(scene, policy, t, gt_ids, barycenters) -> FramePrediction:
    ids = gt_ids[t]
    size = len(scene.shapes) + 1
    class_lut = np.zeros(size, dtype=np.int64)
    for i, s in enumerate(scene.shapes):
        class_lut[i + 1] = s.class_index
    semantic = SemanticProbMap.one_hot(class_lut[ids], scene.num_classes)
    bary = barycenters[t]
    heat = gaussian_heatmap(ids.shape, [bary[g] for g in sorted(bary)], scene.heatmap_sigma)
    intra_r, intra_c = _center_offsets(ids, bary, size)
    inter = []
    for r in policy.select(t):
        # shapes missing from the reference keep their intra offset, i.e. zero residual
        target_centers = {g: barycenters[r].get(g, bary[g]) for g in bary}
        inter_r, inter_c = _center_offsets(ids, target_centers, size)
        inter.append((r, OffsetField(inter_r, inter_c)))
    return FramePrediction(t, semantic, ScalarMap(heat), OffsetField(intra_r, intra_c), tuple(inter))


def generate_sequence(
    scene: SceneSpec,
    policy: ReferencePolicy = FIRST_PLUS_3,
    workers: Workers = SERIAL,
) -> SyntheticSequence:
    """Render exact predictions, ground-truth identity maps and track table for a scene.

    Inter-frame offsets are produced for exactly the references ``policy``
    selects for each frame.
    """
    frames = range(scene.num_frames)
    rendered = workers.map(lambda t: render_gt_frame(scene, t), frames)
    gt_ids = [r[0] for r in rendered]
    barycenters = [r[1] for r in rendered]
    preds = workers.map(lambda t: _build_prediction(scene, policy, t, gt_ids, barycenters), frames)
    tracks = [
        (t, g, scene.shapes[g - 1].class_index) for t in frames for g in sorted(barycenters[t])
    ]
    return SyntheticSequence(scene, policy, preds, [IdentityMap(m) for m in gt_ids], tracks, barycenters)


def peaks_from_offsets(pred: FramePrediction) -> list[tuple[float, float]]:
    """Recover instance centers from exact intra offsets (``pixel + offset`` per foreground pixel)."""
    fg = np.flatnonzero(foreground_from_probs(pred.semantic.probs))
    if fg.size == 0:
        return []
    rows, cols = np.divmod(fg, pred.shape[1])
    pts = np.stack([rows + pred.intra_offset.d_row.ravel()[fg], cols + pred.intra_offset.d_col.ravel()[fg]], axis=1)
    uniq = np.unique(np.round(pts, 6), axis=0)
    return [(float(r), float(c)) for r, c in uniq]


_DIRECTIONS = np.array([(-1, 0), (1, 0), (0, -1), (0, 1)])


def _erode_one_side(mask: np.ndarray, direction, depth: int) -> np.ndarray:
    """Keep pixels whose next ``depth`` neighbours along ``direction`` are all in the mask."""
    keep = mask.copy()
    height, width = mask.shape
    dr, dc = int(direction[0]), int(direction[1])
    for j in range(1, depth + 1):
        shifted = np.zeros_like(mask)
        sr, sc = dr * j, dc * j
        src = mask[max(0, sr):height + min(0, sr), max(0, sc):width + min(0, sc)]
        shifted[max(0, -sr):height + min(0, -sr), max(0, -sc):width + min(0, -sc)] = src
        keep &= shifted
    return keep


def perturb(
    pred: FramePrediction,
    noise: NoiseSpec,
    seed: int,
    peaks: Sequence[tuple[float, float]] | None = None,
    heatmap_sigma: float = DEFAULT_HEATMAP_SIGMA,
) -> FramePrediction:
    """Degrade one frame's maps; deterministic in ``(seed, pred.index)``.

    Heatmap changes (jitter, dropout, spurious peaks) re-render the Gaussians
    from ``peaks``; when those are not given they are recovered from the
    intra offsets, which requires exact input maps.
    """
    if noise.is_noop():
        return pred
    heat_rng, sem_rng, off_rng = (
        np.random.default_rng(s) for s in np.random.SeedSequence([int(seed), int(pred.index)]).spawn(3)
    )
    height, width = pred.shape

    heat = pred.heatmap.values
    if noise.heatmap_jitter > 0 or noise.peak_dropout_prob > 0 or noise.spurious_peak_rate > 0:
        if peaks is None:
            peaks = peaks_from_offsets(pred)
        kept, amps = [], []
        for pr, pc in peaks:
            u = heat_rng.random()
            shift = heat_rng.normal(0.0, 1.0, size=2) * noise.heatmap_jitter
            if u < noise.peak_dropout_prob:
                continue
            kept.append((pr + shift[0], pc + shift[1]))
            amps.append(1.0)
        n_spurious = heat_rng.poisson(noise.spurious_peak_rate) if noise.spurious_peak_rate > 0 else 0
        background = np.flatnonzero(~foreground_from_probs(pred.semantic.probs))
        if n_spurious and background.size:
            for loc in heat_rng.choice(background, size=n_spurious):
                kept.append(tuple(float(v) for v in divmod(int(loc), width)))
                amps.append(SPURIOUS_PEAK_VALUE)
        heat = gaussian_heatmap((height, width), kept, heatmap_sigma, amps)

    probs = pred.semantic.probs
    if noise.mask_erosion > 0 or noise.semantic_flip_prob > 0:
        probs = probs.copy()
        num_classes = probs.shape[0]
        if noise.mask_erosion > 0:
            labels = np.argmax(probs, axis=0)
            for k in range(1, num_classes):
                direction = _DIRECTIONS[sem_rng.integers(4)]
                mask = labels == k
                if not mask.any():
                    continue
                removed = mask & ~_erode_one_side(mask, direction, int(noise.mask_erosion))
                probs[0][removed] += probs[k][removed]
                probs[k][removed] = 0.0
        if noise.semantic_flip_prob > 0:
            flip = np.flatnonzero(sem_rng.random(height * width) < noise.semantic_flip_prob)
            other = sem_rng.integers(1, num_classes, size=flip.size)
            flat = probs.reshape(num_classes, -1)
            top = np.argmax(flat[:, flip], axis=0)
            swap = (top + other) % num_classes
            a = flat[top, flip].copy()
            flat[top, flip] = flat[swap, flip]
            flat[swap, flip] = a

    intra = pred.intra_offset
    inter = pred.inter_offsets
    if noise.offset_noise_sigma > 0 and noise.offset_noise_fraction > 0:

        def noisy(f: OffsetField) -> OffsetField:
            n = off_rng.normal(0.0, noise.offset_noise_sigma, size=(2, height, width))
            if noise.offset_noise_fraction < 1:
                n *= off_rng.random((height, width)) < noise.offset_noise_fraction
            return OffsetField(f.d_row + n[0], f.d_col + n[1])

        intra = noisy(intra)
        inter = tuple((r, noisy(f)) for r, f in inter)

    return FramePrediction(pred.index, SemanticProbMap(probs), ScalarMap(heat), intra, inter)


def synthesize(
    scene: SceneSpec,
    noise: NoiseSpec | None = None,
    policy: ReferencePolicy = FIRST_PLUS_3,
    workers: Workers = SERIAL,
) -> SyntheticSequence:
    """Generate a scene and, when ``noise`` is given, perturb every frame with seed ``scene.seed``."""
    seq = generate_sequence(scene, policy, workers)
    if noise is not None and not noise.is_noop():

        def degrade(t):
            bary = seq.barycenters[t]
            return perturb(seq.predictions[t], noise, scene.seed, [bary[g] for g in sorted(bary)], scene.heatmap_sigma)

        seq.predictions = workers.map(degrade, range(scene.num_frames))
    return seq


def _chebyshev(a, b) -> float:
    return max(abs(a[0] - b[0]), abs(a[1] - b[1]))


def random_scene(
    seed: int,
    height: int = 128,
    width: int = 128,
    num_frames: int = 12,
    max_shapes: int = 8,
    min_shapes: int = 2,
    num_classes: int = 4,
    size_range: tuple[float, float] = (4.0, 9.0),
    max_speed: float = 3.0,
    min_separation: float = 21.0,
    birth_clearance: float | None = None,
    crossing_prob: float = 0.4,
    partial_life_prob: float = 0.5,
    heatmap_sigma: float = DEFAULT_HEATMAP_SIGMA,
    policy: ReferencePolicy = FIRST_PLUS_3,
    kinds: Sequence[str] = SHAPE_KINDS,
    bar_length_range: tuple[float, float] | None = None,
    max_tries: int = 400,
) -> SceneSpec:
    """Sample a scene of well-separated moving shapes with births, deaths and crossing paths.

    Shapes stay fully inside the image while alive and their centers keep a
    Chebyshev distance above ``min_separation`` from every other live shape.
    A shape born after frame 0 starts farther than ``birth_clearance``
    (default: the matching threshold plus 3 px) from every other shape in the
    reference frames of its birth frame. Crossing shapes pass through a point
    another shape occupied at least four frames earlier or later.

    With ``bar_length_range`` rectangles become bars: one half-extent comes
    from ``size_range``, the other from ``bar_length_range``, in a random
    orientation.
    """
    for kind in kinds:
        if kind not in SHAPE_KINDS:
            raise SpecError(f"unknown shape kind {kind!r}")
    rng = np.random.default_rng(seed)
    if birth_clearance is None:
        birth_clearance = default_epsilon((height, width)) + 3.0
    target = int(rng.integers(min_shapes, max_shapes + 1))
    shapes: list[ShapeSpec] = []
    last = num_frames - 1
    for _ in range(max_tries):
        if len(shapes) >= target:
            break
        kind = kinds[int(rng.integers(len(kinds)))]
        a = float(rng.uniform(*size_range))
        if kind == "disk":
            size = (a, a)
        elif bar_length_range is None:
            size = (a, float(rng.uniform(*size_range)))
        else:
            b = float(rng.uniform(*bar_length_range))
            size = (a, b) if rng.random() < 0.5 else (b, a)
        cls = int(rng.integers(1, num_classes))
        if num_frames > 1 and rng.random() < partial_life_prob:
            birth = int(rng.integers(0, last))
            death = int(rng.integers(birth + 1, last + 1))
        else:
            birth, death = 0, last
        vel = tuple(float(v) for v in rng.uniform(-max_speed, max_speed, size=2))
        if shapes and rng.random() < crossing_prob:
            other = shapes[int(rng.integers(len(shapes)))]
            t_other = int(rng.integers(other.birth_frame, other.death_frame + 1))
            choices = [t for t in range(birth, death + 1) if abs(t - t_other) >= 4]
            if not choices:
                continue
            t_self = choices[int(rng.integers(len(choices)))]
            meet = other.center_at(t_other)
            pos = (meet[0] - vel[0] * (t_self - birth), meet[1] - vel[1] * (t_self - birth))
        else:
            pos = (float(rng.uniform(size[0], height - 1 - size[0])), float(rng.uniform(size[1], width - 1 - size[1])))
        cand = ShapeSpec(kind, size, cls, pos, vel, birth, death)
        if not all(_inside(cand, t, height, width) for t in range(birth, death + 1)):
            continue
        if any(
            _chebyshev(cand.center_at(t), s.center_at(t)) <= min_separation
            for s in shapes
            for t in range(max(birth, s.birth_frame), min(death, s.death_frame) + 1)
        ):
            continue
        if birth > 0 and any(
            np.hypot(*np.subtract(cand.center_at(birth), s.center_at(r))) <= birth_clearance
            for s in shapes
            for r in policy.select(birth)
            if s.alive(r)
        ):
            continue
        # existing shapes born later must also clear the new one in their reference frames
        if any(
            s.birth_frame > 0
            and np.hypot(*np.subtract(s.center_at(s.birth_frame), cand.center_at(r))) <= birth_clearance
            for s in shapes
            for r in policy.select(s.birth_frame)
            if cand.alive(r)
        ):
            continue
        shapes.append(cand)
    return SceneSpec(height, width, num_frames, tuple(shapes), num_classes, heatmap_sigma, seed)


def benchmark_scene(
    seed: int = 0,
    height: int = 720,
    width: int = 1280,
    num_instances: int = 8,
    num_frames: int = 8,
) -> SceneSpec:
    """Large frames with ``num_instances`` big shapes present in every frame, for timing runs."""
    scene = random_scene(
        seed,
        height=height,
        width=width,
        num_frames=num_frames,
        min_shapes=num_instances,
        max_shapes=num_instances,
        size_range=(40.0, 90.0),
        max_speed=10.0,
        min_separation=181.0,
        crossing_prob=0.0,
        partial_life_prob=0.0,
        max_tries=20000,
    )
    if len(scene.shapes) != num_instances:
        raise SpecError(f"could not place {num_instances} shapes in a {height}x{width} frame")
    return scene


def scene_from_config(config: dict, seed: int | None = None) -> SceneSpec:
    """Build a scene from a config mapping.

    The mapping holds either an explicit ``scene`` (or the scene fields at top
    level) or a ``random`` section of :func:`random_scene` keyword arguments.
    ``seed`` overrides any seed in the config.
    """
    if "random" in config:
        kwargs = dict(config["random"] or {})
        base = seed if seed is not None else int(kwargs.pop("seed", config.get("seed", 0)))
        kwargs.pop("seed", None)
        for key in ("size_range", "bar_length_range"):
            if kwargs.get(key) is not None:
                kwargs[key] = tuple(kwargs[key])
        if "policy" in kwargs:
            kwargs["policy"] = ReferencePolicy.parse(kwargs["policy"])
        try:
            return random_scene(base, **kwargs)
        except TypeError as exc:
            raise SpecError(f"bad random scene options: {exc}") from exc
    data = dict(config.get("scene", config))
    data.pop("noise", None)
    if seed is not None:
        data["seed"] = seed
    try:
        return SceneSpec.from_dict(data)
    except TypeError as exc:
        raise SpecError(f"bad scene description: {exc}") from exc


def noise_from_config(config: dict | None) -> NoiseSpec | None:
    if not config:
        return None
    try:
        return NoiseSpec(**config)
    except TypeError as exc:
        raise SpecError(f"bad noise description: {exc}") from exc
