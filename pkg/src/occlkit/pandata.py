"""COCO-panoptic-format dataset IO plus the occlusion sidecar.

On-disk layout of a dataset root:

    root/
      images/<image_id:06d>.png      RGB images
      panoptic/<image_id:06d>.png    segment ids encoded as R + 256 G + 256^2 B
      panoptic.json                  {"annotations": [...], "categories": [...]}
      occlusion.json                 per-image occlusion sidecar
      manifest.json                  per-level counts and provenance

JSON is written with sorted keys and floats rounded to 6 decimals so that
write(read(root)) is byte-identical.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace

import numpy as np
from PIL import Image

from .errors import FormatError, ValidationError
from .occlevel import LEVELS, bucket

MAX_SEGMENT_ID = 256**3


@dataclass(frozen=True)
class Category:
    id: int
    name: str
    isthing: bool

    def to_json(self):
        return {"id": self.id, "name": self.name, "isthing": int(self.isthing)}

    @staticmethod
    def from_json(obj):
        return Category(id=int(obj["id"]), name=str(obj["name"]),
                        isthing=bool(obj["isthing"]))


@dataclass
class SegmentInfo:
    id: int
    category_id: int
    iscrowd: bool = False
    area: int = 0
    bbox: tuple[int, int, int, int] = (0, 0, 0, 0)
    score: float | None = None

    def to_json(self):
        obj = {
            "id": self.id,
            "category_id": self.category_id,
            "iscrowd": int(self.iscrowd),
            "area": int(self.area),
            "bbox": [int(v) for v in self.bbox],
        }
        if self.score is not None:
            obj["score"] = round(float(self.score), 6)
        return obj

    @staticmethod
    def from_json(obj):
        return SegmentInfo(
            id=int(obj["id"]),
            category_id=int(obj["category_id"]),
            iscrowd=bool(obj.get("iscrowd", 0)),
            area=int(obj["area"]),
            bbox=tuple(int(v) for v in obj["bbox"]),
            score=float(obj["score"]) if "score" in obj else None,
        )


@dataclass
class PanopticMap:
    """Per-pixel segment-id raster (0 = void) plus per-segment metadata."""

    id_raster: np.ndarray
    segments: list[SegmentInfo] = field(default_factory=list)

    @property
    def shape(self):
        return self.id_raster.shape

    def segment_by_id(self, seg_id: int) -> SegmentInfo:
        for seg in self.segments:
            if seg.id == seg_id:
                return seg
        raise KeyError(seg_id)

    def validate(self) -> None:
        raster_ids = set(np.unique(self.id_raster).tolist()) - {0}
        seg_ids = [s.id for s in self.segments]
        if len(seg_ids) != len(set(seg_ids)):
            raise ValidationError("duplicate segment ids in metadata")
        if raster_ids != set(seg_ids):
            raise ValidationError(
                f"raster/segment id mismatch: raster {sorted(raster_ids)} "
                f"vs segments {sorted(seg_ids)}"
            )
        for seg in self.segments:
            mask = self.id_raster == seg.id
            area = int(np.count_nonzero(mask))
            if area != seg.area:
                raise ValidationError(
                    f"segment {seg.id}: area field {seg.area} != raster area {area}"
                )
            if tight_bbox(mask) != tuple(seg.bbox):
                raise ValidationError(f"segment {seg.id}: bbox is not tight")
            if seg.score is not None and not 0.0 <= seg.score <= 1.0:
                raise ValidationError(f"segment {seg.id}: score outside [0, 1]")


@dataclass
class OcclusionRecord:
    """Sidecar annotation: per-image level and per-instance occlusion rates."""

    image_id: int
    occlusion_level: str
    max_occlusion_rate: float
    instance_rates: dict[int, float] = field(default_factory=dict)

    def validate(self) -> None:
        if self.occlusion_level not in LEVELS:
            raise ValidationError(
                f"image {self.image_id}: unknown level {self.occlusion_level!r}"
            )
        if bucket(self.max_occlusion_rate) != self.occlusion_level:
            raise ValidationError(
                f"image {self.image_id}: occlusion_level "
                f"{self.occlusion_level!r} contradicts max_occlusion_rate "
                f"{self.max_occlusion_rate}"
            )
        if self.instance_rates:
            stored_max = max(self.instance_rates.values())
            if abs(stored_max - self.max_occlusion_rate) > 1e-9:
                raise ValidationError(
                    f"image {self.image_id}: max_occlusion_rate "
                    f"{self.max_occlusion_rate} != max of instance_rates {stored_max}"
                )

    def to_json(self):
        return {
            "image_id": self.image_id,
            "occlusion_level": self.occlusion_level,
            "max_occlusion_rate": round(float(self.max_occlusion_rate), 6),
            "instance_rates": {
                str(k): round(float(v), 6)
                for k, v in sorted(self.instance_rates.items())
            },
        }

    @staticmethod
    def from_json(obj):
        return OcclusionRecord(
            image_id=int(obj["image_id"]),
            occlusion_level=str(obj["occlusion_level"]),
            max_occlusion_rate=float(obj["max_occlusion_rate"]),
            instance_rates={int(k): float(v)
                            for k, v in obj["instance_rates"].items()},
        )


@dataclass
class Sample:
    image_id: int
    panoptic: PanopticMap
    record: OcclusionRecord | None = None
    image: np.ndarray | None = None


def tight_bbox(mask: np.ndarray) -> tuple[int, int, int, int]:
    """Tight [x, y, w, h] box around the true pixels of a mask."""
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        return (0, 0, 0, 0)
    x0, x1 = int(xs.min()), int(xs.max())
    y0, y1 = int(ys.min()), int(ys.max())
    return (x0, y0, x1 - x0 + 1, y1 - y0 + 1)


def encode_id_map(pan: PanopticMap) -> np.ndarray:
    """Segment ids to RGB per the COCO panoptic convention: id = R + 256 G + 256^2 B."""
    ids = pan.id_raster.astype(np.int64)
    if ids.max(initial=0) >= MAX_SEGMENT_ID or ids.min(initial=0) < 0:
        raise FormatError("segment id outside the 24-bit encodable range")
    rgb = np.empty(ids.shape + (3,), dtype=np.uint8)
    rgb[..., 0] = ids % 256
    rgb[..., 1] = (ids // 256) % 256
    rgb[..., 2] = ids // (256 * 256)
    return rgb


def decode_id_map(rgb: np.ndarray, segments: list[SegmentInfo]) -> PanopticMap:
    """Inverse of encode_id_map; rejects ids absent from the segment table."""
    rgb = np.asarray(rgb, dtype=np.int64)
    ids = rgb[..., 0] + 256 * rgb[..., 1] + 256 * 256 * rgb[..., 2]
    known = {s.id for s in segments}
    present = set(np.unique(ids).tolist()) - {0}
    stray = present - known
    if stray:
        raise FormatError(f"raster contains ids absent from segments_info: {sorted(stray)}")
    return PanopticMap(id_raster=ids.astype(np.int32), segments=list(segments))


def _dump_json(path: str, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _file_name(image_id: int) -> str:
    return f"{image_id:06d}.png"


def write_dataset(root: str, samples, categories: list[Category],
                  extra_manifest: dict | None = None) -> None:
    """Write a full dataset (images, panoptic PNGs, JSONs, sidecar, manifest)."""
    os.makedirs(os.path.join(root, "panoptic"), exist_ok=True)
    annotations = []
    records = []
    level_counts = {lvl: 0 for lvl in LEVELS}
    wrote_images = False
    for sample in samples:
        name = _file_name(sample.image_id)
        if sample.image is not None:
            os.makedirs(os.path.join(root, "images"), exist_ok=True)
            Image.fromarray(sample.image).save(os.path.join(root, "images", name))
            wrote_images = True
        Image.fromarray(encode_id_map(sample.panoptic)).save(
            os.path.join(root, "panoptic", name))
        annotations.append({
            "image_id": sample.image_id,
            "file_name": name,
            "segments_info": [s.to_json() for s in sample.panoptic.segments],
        })
        if sample.record is not None:
            records.append(sample.record.to_json())
            level_counts[sample.record.occlusion_level] += 1
    _dump_json(os.path.join(root, "panoptic.json"), {
        "annotations": annotations,
        "categories": [c.to_json() for c in categories],
    })
    if records:
        _dump_json(os.path.join(root, "occlusion.json"), records)
    manifest = {
        "n_images": len(annotations),
        "level_counts": level_counts,
        "empty_levels": sorted(l for l, c in level_counts.items() if c == 0),
        "has_images": wrote_images,
    }
    manifest.update(extra_manifest or {})
    _dump_json(os.path.join(root, "manifest.json"), manifest)


class PanopticDataset:
    """Lazy reader over a dataset root; validates invariants on load."""

    def __init__(self, root: str, require_sidecar: bool = True,
                 validate: bool = True, image_ids=None):
        self.root = root
        self.validate = validate
        pan_path = os.path.join(root, "panoptic.json")
        if not os.path.isfile(pan_path):
            raise FormatError(f"missing panoptic JSON: {pan_path}")
        with open(pan_path) as fh:
            pan_json = json.load(fh)
        self.categories = [Category.from_json(c) for c in pan_json["categories"]]
        self._annotations = {int(a["image_id"]): a for a in pan_json["annotations"]}
        self.records: dict[int, OcclusionRecord] = {}
        side_path = os.path.join(root, "occlusion.json")
        if os.path.isfile(side_path):
            with open(side_path) as fh:
                for obj in json.load(fh):
                    rec = OcclusionRecord.from_json(obj)
                    self.records[rec.image_id] = rec
        if require_sidecar:
            missing = sorted(set(self._annotations) - set(self.records))
            if missing:
                raise FormatError(f"occlusion sidecar missing image_ids: {missing}")
        self.image_ids = sorted(self._annotations) if image_ids is None \
            else sorted(image_ids)

    def __len__(self):
        return len(self.image_ids)

    def __iter__(self):
        for image_id in self.image_ids:
            yield self.load(image_id)

    def load(self, image_id: int, with_image: bool = True) -> Sample:
        ann = self._annotations[image_id]
        segments = [SegmentInfo.from_json(s) for s in ann["segments_info"]]
        png = os.path.join(self.root, "panoptic", ann["file_name"])
        rgb = np.asarray(Image.open(png).convert("RGB"))
        pan = decode_id_map(rgb, segments)
        record = self.records.get(image_id)
        if self.validate:
            pan.validate()
            if record is not None:
                record.validate()
                stray = set(record.instance_rates) - {s.id for s in segments}
                if stray:
                    raise ValidationError(
                        f"image {image_id}: sidecar rates for unknown segments {sorted(stray)}")
        image = None
        img_path = os.path.join(self.root, "images", ann["file_name"])
        if with_image and os.path.isfile(img_path):
            image = np.asarray(Image.open(img_path).convert("RGB"))
        return Sample(image_id=image_id, panoptic=pan, record=record, image=image)

    def subset(self, image_ids) -> "PanopticDataset":
        view = object.__new__(PanopticDataset)
        view.__dict__.update(self.__dict__)
        view.image_ids = sorted(image_ids)
        return view

    def split_by_level(self) -> dict[str, "PanopticDataset"]:
        """Partition into {low, mid, high} sub-datasets by sidecar level."""
        missing = [i for i in self.image_ids if i not in self.records]
        if missing:
            raise FormatError(f"cannot split: no occlusion record for {missing}")
        buckets = {lvl: [] for lvl in LEVELS}
        for image_id in self.image_ids:
            buckets[self.records[image_id].occlusion_level].append(image_id)
        return {lvl: self.subset(ids) for lvl, ids in buckets.items()}

    def write(self, root: str, with_images: bool = True,
              extra_manifest: dict | None = None) -> None:
        write_dataset(root, (self.load(i, with_image=with_images)
                             for i in self.image_ids),
                      self.categories, extra_manifest=extra_manifest)
