"""Procedural occluded-scene generation with exact occlusion ground truth.

Scenes are stacks of flat shapes composited by painter's algorithm over a
stuff background. Because every shape's amodal mask is rendered alone, the
occlusion rate of each instance is exact pixel accounting rather than a
visual estimate, and the per-image level (bucket of the maximum rate) comes
with a machine-checkable oracle.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, QuotaError, ResampleSignal, ValidationError
from .occlevel import LEVELS, bucket, image_occlusion_level, occlusion_rate
from .pandata import (Category, OcclusionRecord, PanopticMap, Sample,
                      SegmentInfo, tight_bbox, write_dataset)

SHAPE_KINDS = ("rectangle", "ellipse", "triangle")

# 6 thing + 3 stuff categories; enough for PQ thing/stuff splits while staying
# learnable by a tiny model (colour correlates with category).
DEFAULT_CATEGORIES = [
    Category(1, "box", True),
    Category(2, "disc", True),
    Category(3, "wedge", True),
    Category(4, "slab", True),
    Category(5, "dome", True),
    Category(6, "prism", True),
    Category(7, "backdrop", False),
    Category(8, "floor", False),
    Category(9, "panel", False),
]

_PALETTE = {
    1: (214, 39, 40),
    2: (31, 119, 180),
    3: (44, 160, 44),
    4: (255, 127, 14),
    5: (148, 103, 189),
    6: (23, 190, 207),
    7: (160, 160, 170),
    8: (120, 96, 70),
    9: (70, 110, 90),
}

_KIND_FOR_CATEGORY = {1: "rectangle", 2: "ellipse", 3: "triangle",
                      4: "rectangle", 5: "ellipse", 6: "triangle"}

# COCO-OLAC training-split level counts 6668 / 11251 / 12081, renormalized.
DEFAULT_PROPORTIONS = {"low": 6668 / 30000, "mid": 11251 / 30000,
                       "high": 12081 / 30000}


@dataclass(frozen=True)
class ShapeSpec:
    shape_kind: str
    category_id: int
    center: tuple[float, float]          # (x, y) pixels
    size: tuple[float, float]            # (width, height) pixels
    rotation: float                      # radians
    depth_rank: int                      # smaller = nearer the camera
    fill_seed: int = 0


@dataclass
class SceneSpec:
    canvas: tuple[int, int]              # (height, width)
    shapes: list[ShapeSpec]
    background_category: int
    rng_seed: int

    def validate(self, categories=None) -> None:
        h, w = self.canvas
        if h < 16 or w < 16:
            raise ConfigurationError(f"canvas {self.canvas} below the 16x16 minimum")
        ranks = [s.depth_rank for s in self.shapes]
        if len(ranks) != len(set(ranks)):
            raise ValidationError("depth_rank values must be unique within a scene")
        thing_ids = {c.id for c in (categories or DEFAULT_CATEGORIES) if c.isthing}
        if not any(s.category_id in thing_ids for s in self.shapes):
            raise ValidationError("scene contains no thing-category shape")
        for s in self.shapes:
            if s.shape_kind not in SHAPE_KINDS:
                raise ValidationError(f"unknown shape kind {s.shape_kind!r}")
            if s.size[0] <= 0 or s.size[1] <= 0:
                raise ValidationError("shape size components must be positive")


@dataclass
class RenderedSample:
    image: np.ndarray                    # HxWx3 uint8
    panoptic: PanopticMap
    full_masks: dict[int, np.ndarray]    # segment id -> amodal mask
    visible_masks: dict[int, np.ndarray]
    occlusion_level: str
    max_occlusion_rate: float
    instance_rates: dict[int, float]

    def record(self, image_id: int) -> OcclusionRecord:
        return OcclusionRecord(image_id=image_id,
                               occlusion_level=self.occlusion_level,
                               max_occlusion_rate=self.max_occlusion_rate,
                               instance_rates=dict(self.instance_rates))


def shape_mask(shape: ShapeSpec, canvas: tuple[int, int]) -> np.ndarray:
    """Amodal mask of a shape rendered alone, clipped to the canvas."""
    h, w = canvas
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dx = xx - shape.center[0]
    dy = yy - shape.center[1]
    c, s = np.cos(shape.rotation), np.sin(shape.rotation)
    u = dx * c + dy * s
    v = -dx * s + dy * c
    hw, hh = shape.size[0] / 2.0, shape.size[1] / 2.0
    if shape.shape_kind == "rectangle":
        return (np.abs(u) <= hw) & (np.abs(v) <= hh)
    if shape.shape_kind == "ellipse":
        return (u / hw) ** 2 + (v / hh) ** 2 <= 1.0
    # triangle: apex up in the shape frame, clockwise vertex order
    verts = [(0.0, -hh), (-hw, hh), (hw, hh)]
    inside = np.ones((h, w), dtype=bool)
    for (ax, ay), (bx, by) in zip(verts, verts[1:] + verts[:1]):
        cross = (bx - ax) * (v - ay) - (by - ay) * (u - ax)
        inside &= cross <= 0.0
    return inside


def render_scene(spec: SceneSpec, min_visible_pixels: int = 10,
                 categories=None) -> RenderedSample:
    """Composite a scene and derive exact per-instance occlusion ground truth.

    Things whose visible area falls below `min_visible_pixels` (including
    fully occluded ones) are removed from the scene entirely; their pixels
    fall through to whatever lies beneath. Raises ResampleSignal when no
    thing instance survives.
    """
    categories = list(categories or DEFAULT_CATEGORIES)
    spec.validate(categories)
    h, w = spec.canvas
    cat_by_id = {c.id: c for c in categories}
    full = {i: shape_mask(s, spec.canvas) for i, s in enumerate(spec.shapes)}
    for i, s in enumerate(spec.shapes):
        if not full[i].any():
            raise ValidationError(f"shape {i} lies entirely outside the canvas")

    active = set(full)
    while True:
        owner = np.full((h, w), -1, dtype=np.int32)
        for i in sorted(active,
                        key=lambda i: -spec.shapes[i].depth_rank):
            owner[full[i]] = i
        visible = {i: owner == i for i in active}
        drops = {i for i in active
                 if cat_by_id[spec.shapes[i].category_id].isthing
                 and int(np.count_nonzero(visible[i])) < min_visible_pixels}
        if not drops:
            break
        active -= drops

    thing_idx = [i for i in sorted(active)
                 if cat_by_id[spec.shapes[i].category_id].isthing]
    if not thing_idx:
        raise ResampleSignal("every thing instance was occluded away")

    # segment ids: things first (scene order), then one segment per stuff
    # category present (merged), background included.
    id_raster = np.zeros((h, w), dtype=np.int32)
    segments: list[SegmentInfo] = []
    full_masks: dict[int, np.ndarray] = {}
    visible_masks: dict[int, np.ndarray] = {}
    rates: dict[int, float] = {}
    next_id = 1
    for i in thing_idx:
        seg_id = next_id
        next_id += 1
        id_raster[visible[i]] = seg_id
        segments.append(SegmentInfo(
            id=seg_id, category_id=spec.shapes[i].category_id,
            area=int(np.count_nonzero(visible[i])),
            bbox=tight_bbox(visible[i])))
        full_masks[seg_id] = full[i]
        visible_masks[seg_id] = visible[i]
        rates[seg_id] = occlusion_rate(full[i], visible[i])

    stuff_pixels: dict[int, np.ndarray] = {}
    for i in sorted(active):
        cat = spec.shapes[i].category_id
        if not cat_by_id[cat].isthing:
            stuff_pixels[cat] = stuff_pixels.get(
                cat, np.zeros((h, w), bool)) | visible[i]
    # pixels owned by nothing (incl. where dropped shapes fell through)
    background = id_raster == 0
    for cat in stuff_pixels:
        background &= ~stuff_pixels[cat]
    if background.any():
        stuff_pixels[spec.background_category] = \
            stuff_pixels.get(spec.background_category, np.zeros((h, w), bool)) | background
    for cat in sorted(stuff_pixels):
        mask = stuff_pixels[cat] & (id_raster == 0)
        if not mask.any():
            continue
        seg_id = next_id
        next_id += 1
        id_raster[mask] = seg_id
        segments.append(SegmentInfo(id=seg_id, category_id=cat,
                                    area=int(np.count_nonzero(mask)),
                                    bbox=tight_bbox(mask)))
        visible_masks[seg_id] = mask

    level, max_rate = image_occlusion_level([rates[s] for s in rates])

    image = _paint(spec, id_raster, segments, visible_masks)
    pan = PanopticMap(id_raster=id_raster, segments=segments)
    return RenderedSample(image=image, panoptic=pan, full_masks=full_masks,
                          visible_masks=visible_masks, occlusion_level=level,
                          max_occlusion_rate=max_rate, instance_rates=rates)


def _paint(spec: SceneSpec, id_raster, segments, visible_masks) -> np.ndarray:
    h, w = spec.canvas
    rng = np.random.default_rng(np.random.SeedSequence([spec.rng_seed, 0xC01]))
    image = np.zeros((h, w, 3), dtype=np.float64)
    image[:] = _PALETTE.get(spec.background_category, (128, 128, 128))
    for seg in segments:
        base = np.array(_PALETTE.get(seg.category_id, (128, 128, 128)), float)
        jitter = rng.integers(-25, 26, size=3)
        image[visible_masks[seg.id]] = np.clip(base + jitter, 0, 255)
    noise = rng.integers(-10, 11, size=(h, w, 3))
    return np.clip(image + noise, 0, 255).astype(np.uint8)


@dataclass
class GeneratorConfig:
    n_images: int = 30
    canvas: tuple[int, int] = (64, 64)
    proportions: dict[str, float] = field(
        default_factory=lambda: dict(DEFAULT_PROPORTIONS))
    min_visible_pixels: int = 10
    shapes_per_scene: tuple[int, int] = (2, 5)
    size_range: tuple[float, float] = (0.22, 0.55)   # fraction of min canvas side
    stuff_band_prob: float = 0.7
    things_only_occlusion: bool = True
    max_attempts: int | None = None                  # default 400 * n_images
    categories: list[Category] = field(
        default_factory=lambda: list(DEFAULT_CATEGORIES))

    def level_quotas(self) -> dict[str, int]:
        """Exact per-level counts from proportions by largest remainder."""
        total = sum(self.proportions.get(l, 0.0) for l in LEVELS)
        if total <= 0:
            raise ConfigurationError("level proportions must sum to a positive value")
        shares = {l: self.n_images * self.proportions.get(l, 0.0) / total
                  for l in LEVELS}
        counts = {l: int(np.floor(shares[l])) for l in LEVELS}
        remainder = self.n_images - sum(counts.values())
        for l in sorted(LEVELS, key=lambda l: (-(shares[l] - counts[l]), l)):
            if remainder == 0:
                break
            counts[l] += 1
            remainder -= 1
        return counts

    def to_json(self) -> dict:
        return {
            "n_images": self.n_images,
            "canvas": list(self.canvas),
            "proportions": {l: round(float(self.proportions.get(l, 0.0)), 6)
                            for l in LEVELS},
            "min_visible_pixels": self.min_visible_pixels,
            "shapes_per_scene": list(self.shapes_per_scene),
            "size_range": [round(float(v), 6) for v in self.size_range],
            "stuff_band_prob": round(float(self.stuff_band_prob), 6),
            "things_only_occlusion": self.things_only_occlusion,
            "categories": [c.to_json() for c in self.categories],
        }

    def hash(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def config_from_dict(obj: dict) -> GeneratorConfig:
    cfg = GeneratorConfig()
    if "n_images" in obj:
        cfg.n_images = int(obj["n_images"])
    if "canvas" in obj:
        cfg.canvas = tuple(int(v) for v in obj["canvas"])
    if "proportions" in obj:
        cfg.proportions = {str(k): float(v) for k, v in obj["proportions"].items()}
        unknown = set(cfg.proportions) - set(LEVELS)
        if unknown:
            raise ConfigurationError(f"unknown occlusion levels {sorted(unknown)}")
    for key in ("min_visible_pixels",):
        if key in obj:
            setattr(cfg, key, int(obj[key]))
    if "shapes_per_scene" in obj:
        cfg.shapes_per_scene = tuple(int(v) for v in obj["shapes_per_scene"])
    if "size_range" in obj:
        cfg.size_range = tuple(float(v) for v in obj["size_range"])
    if "stuff_band_prob" in obj:
        cfg.stuff_band_prob = float(obj["stuff_band_prob"])
    if "things_only_occlusion" in obj:
        cfg.things_only_occlusion = bool(obj["things_only_occlusion"])
    if "max_attempts" in obj and obj["max_attempts"] is not None:
        cfg.max_attempts = int(obj["max_attempts"])
    return cfg


def sample_scene(config: GeneratorConfig, seed_seq: np.random.SeedSequence,
                 level_hint: str) -> SceneSpec:
    """Draw a random scene biased toward the hinted occlusion level.

    The hint only steers placement; the true level always comes from pixel
    accounting in render_scene, so rejection sampling stays correct.
    """
    rng = np.random.default_rng(seed_seq)
    h, w = config.canvas
    side = min(h, w)
    thing_cats = [c.id for c in config.categories if c.isthing]
    stuff_cats = [c.id for c in config.categories if not c.isthing]
    background = int(rng.choice(stuff_cats))
    scene_seed = int(rng.integers(0, 2**31 - 1))

    n_things = int(rng.integers(config.shapes_per_scene[0],
                                config.shapes_per_scene[1] + 1))
    lo, hi = config.size_range
    shapes: list[ShapeSpec] = []
    centers: list[tuple[float, float]] = []
    for k in range(n_things):
        cat = int(rng.choice(thing_cats))
        sw = float(rng.uniform(lo, hi) * side)
        sh = float(rng.uniform(lo, hi) * side)
        rot = float(rng.uniform(0, np.pi))
        if level_hint == "low" or k == 0:
            # spread placements; resample a few times to avoid overlap
            for _ in range(25):
                cx = float(rng.uniform(0.12 * w, 0.88 * w))
                cy = float(rng.uniform(0.12 * h, 0.88 * h))
                r = max(sw, sh) / 2
                if all((cx - px) ** 2 + (cy - py) ** 2 > (r + pr) ** 2
                       for px, py, pr in centers) or level_hint != "low":
                    break
        elif level_hint == "mid":
            px, py, pr = centers[int(rng.integers(0, len(centers)))]
            ang = rng.uniform(0, 2 * np.pi)
            d = rng.uniform(0.7, 1.1) * (pr + max(sw, sh) / 2)
            cx = float(np.clip(px + d * np.cos(ang), 2, w - 3))
            cy = float(np.clip(py + d * np.sin(ang), 2, h - 3))
        else:  # high: sit almost on top of an earlier shape
            px, py, pr = centers[int(rng.integers(0, len(centers)))]
            cx = float(np.clip(px + rng.uniform(-0.25, 0.25) * pr, 2, w - 3))
            cy = float(np.clip(py + rng.uniform(-0.25, 0.25) * pr, 2, h - 3))
        centers.append((cx, cy, max(sw, sh) / 2))
        shapes.append(ShapeSpec(
            shape_kind=_KIND_FOR_CATEGORY[cat], category_id=cat,
            center=(cx, cy), size=(sw, sh), rotation=rot, depth_rank=0,
            fill_seed=int(rng.integers(0, 2**31 - 1))))

    # later-placed shapes sit nearer the camera so hints act as intended
    order = list(range(n_things))[::-1]
    shapes = [ShapeSpec(s.shape_kind, s.category_id, s.center, s.size,
                        s.rotation, depth_rank=order[i], fill_seed=s.fill_seed)
              for i, s in enumerate(shapes)]

    if rng.uniform() < config.stuff_band_prob:
        cat = int(rng.choice([c for c in stuff_cats if c != background]))
        band_h = float(rng.uniform(0.2, 0.4) * h)
        if config.things_only_occlusion:
            depth = n_things  # strictly behind every thing
        else:
            depth = int(rng.integers(0, n_things + 1))
            shapes = [ShapeSpec(s.shape_kind, s.category_id, s.center, s.size,
                                s.rotation,
                                depth_rank=s.depth_rank
                                if s.depth_rank < depth else s.depth_rank + 1,
                                fill_seed=s.fill_seed)
                      for s in shapes]
        shapes.append(ShapeSpec(
            shape_kind="rectangle", category_id=cat,
            center=(w / 2, h - band_h / 2), size=(w * 1.2, band_h),
            rotation=0.0, depth_rank=depth,
            fill_seed=int(rng.integers(0, 2**31 - 1))))

    return SceneSpec(canvas=config.canvas, shapes=shapes,
                     background_category=background, rng_seed=scene_seed)


def generate_dataset(config: GeneratorConfig, seed: int, out_root: str) -> dict:
    """Generate a dataset on disk, filling per-level quotas exactly.

    Rejection sampling: scenes are drawn (with a level hint cycling through
    the still-starved levels), rendered, and kept only if their true level's
    quota has room. Deterministic in (config, seed). Returns the manifest.
    """
    quotas = config.level_quotas()
    counts = {l: 0 for l in LEVELS}
    max_attempts = config.max_attempts or 400 * config.n_images
    samples: list[Sample] = []
    rendered: list[RenderedSample] = []
    attempt = 0
    while sum(counts.values()) < config.n_images:
        if attempt >= max_attempts:
            starved = max(LEVELS, key=lambda l: quotas[l] - counts[l])
            raise QuotaError(starved, attempt)
        needed = [l for l in LEVELS if counts[l] < quotas[l]]
        hint = needed[attempt % len(needed)]
        seq = np.random.SeedSequence([int(seed), attempt])
        attempt += 1
        spec = sample_scene(config, seq, hint)
        try:
            sample = render_scene(spec, config.min_visible_pixels,
                                  config.categories)
        except ResampleSignal:
            continue
        if counts[sample.occlusion_level] >= quotas[sample.occlusion_level]:
            continue
        counts[sample.occlusion_level] += 1
        image_id = len(rendered) + 1
        rendered.append(sample)
        samples.append(Sample(image_id=image_id, panoptic=sample.panoptic,
                              record=sample.record(image_id),
                              image=sample.image))
    manifest_extra = {
        "generator": {"seed": int(seed), "config_hash": config.hash(),
                      "config": config.to_json(), "attempts": attempt},
    }
    write_dataset(out_root, samples, config.categories,
                  extra_manifest=manifest_extra)
    manifest_extra["level_counts"] = counts
    return manifest_extra
