"""Desk-scale training harness: a small convolutional panoptic model trained
on synthetic scenes with or without the contrastive objective.

The model predicts per-pixel category logits; thing regions are split into
instances by connected components at postprocessing time. The encoder's
final feature map feeds the contrastive embedding head, so gradients from
the contrastive loss flow through the shared encoder.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage
from torch import nn

from .errors import ConfigurationError, TrainingAbort, ValidationError
from .occlcon import EmbeddingBatch, MarginConfig, _margin_matrix, total_loss
from .occlevel import LEVELS
from .pandata import PanopticDataset, PanopticMap, SegmentInfo, tight_bbox

CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    dataset_root: str = ""
    epochs: int = 6
    batch_size: int = 8
    lr: float = 0.05
    seed: int = 0
    mode: str = "contrastive"            # baseline | contrastive
    margins: MarginConfig = field(default_factory=MarginConfig)
    crop: tuple[int, int] = (128, 128)
    min_segment_area: int = 10
    val_fraction: float = 0.15

    def __post_init__(self):
        if self.mode not in ("baseline", "contrastive"):
            raise ConfigurationError(f"unknown mode {self.mode!r}")
        if self.mode == "contrastive" and self.batch_size < 2:
            raise ConfigurationError(
                "contrastive mode needs batch_size >= 2")

    def to_json(self) -> dict:
        return {
            "dataset_root": self.dataset_root,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "lr": round(float(self.lr), 6),
            "seed": self.seed,
            "mode": self.mode,
            "tau_lh": round(self.margins.tau_lh, 6),
            "tau_m": round(self.margins.tau_m, 6),
            "lambda": round(self.margins.lambda_weight, 6),
            "crop": list(self.crop),
            "min_segment_area": self.min_segment_area,
            "val_fraction": round(float(self.val_fraction), 6),
        }

    def hash(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @staticmethod
    def from_dict(obj: dict) -> "TrainConfig":
        cfg = TrainConfig(
            dataset_root=str(obj.get("dataset_root", "")),
            epochs=int(obj.get("epochs", 6)),
            batch_size=int(obj.get("batch_size", 8)),
            lr=float(obj.get("lr", 0.05)),
            seed=int(obj.get("seed", 0)),
            mode=str(obj.get("mode", "contrastive")),
            margins=MarginConfig(
                tau_lh=float(obj.get("tau_lh", 0.4)),
                tau_m=float(obj.get("tau_m", 0.6)),
                lambda_weight=float(obj.get("lambda", 1.0))),
            crop=tuple(int(v) for v in obj.get("crop", (128, 128))),
            min_segment_area=int(obj.get("min_segment_area", 10)),
            val_fraction=float(obj.get("val_fraction", 0.15)),
        )
        return cfg


class ToyPanopticModel(nn.Module):
    """3-stage convolutional encoder + upsampling decoder.

    forward() returns (per-pixel category logits, final-stage features).
    """

    def __init__(self, n_categories: int, width: int = 24):
        super().__init__()
        w = width
        self.n_categories = n_categories
        self.enc = nn.Sequential(
            nn.Conv2d(3, w, 3, stride=2, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(w, 2 * w, 3, stride=2, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(2 * w, 4 * w, 3, stride=2, padding=1), nn.ReLU(inplace=True),
        )
        self.dec = nn.Sequential(
            nn.Conv2d(4 * w, 2 * w, 3, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(2 * w, n_categories, 1),
        )

    def forward(self, x):
        feats = self.enc(x)
        logits = self.dec(feats)
        logits = F.interpolate(logits, size=x.shape[-2:], mode="bilinear",
                               align_corners=False)
        return logits, feats


def torch_embed(features: torch.Tensor) -> torch.Tensor:
    pooled = features.mean(dim=(2, 3))
    return pooled / (pooled.norm(dim=1, keepdim=True) + 1e-12)


def torch_contrastive_loss(z: torch.Tensor, labels: np.ndarray,
                           cfg: MarginConfig) -> torch.Tensor:
    """Torch mirror of occlcon.contrastive_loss (checked against it)."""
    b = z.shape[0]
    if b < 2:
        return z.sum() * 0.0
    sim = z @ z.T
    labels = np.asarray(labels)
    same = torch.from_numpy(labels[:, None] == labels[None, :])
    tau = torch.from_numpy(_margin_matrix(labels, cfg)).to(z.dtype)
    pos = torch.where(same, 1.0 - sim, torch.zeros((), dtype=z.dtype))
    neg = torch.where(~same, torch.clamp(sim - tau, min=0.0),
                      torch.zeros((), dtype=z.dtype))
    return (pos.sum() + neg.sum()) / b**2


def panoptic_postprocess(logits: np.ndarray, categories,
                         min_segment_area: int = 10) -> PanopticMap:
    """Per-pixel argmax + connected-component instancing for things.

    `logits` is K x H x W over the category taxonomy in sorted-id order.
    Components (thing) / regions (stuff) below `min_segment_area` become
    void. Each segment's score is the mean softmax probability of its
    category over its pixels.
    """
    cats = sorted(categories, key=lambda c: c.id)
    if logits.shape[0] != len(cats):
        raise ValidationError(
            f"logit channels ({logits.shape[0]}) != categories ({len(cats)})")
    probs = np.exp(logits - logits.max(axis=0, keepdims=True))
    probs /= probs.sum(axis=0, keepdims=True)
    winner = logits.argmax(axis=0)
    id_raster = np.zeros(winner.shape, dtype=np.int32)
    segments: list[SegmentInfo] = []
    next_id = 1
    structure = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])  # 4-connectivity
    for k, cat in enumerate(cats):
        region = winner == k
        if not region.any():
            continue
        if cat.isthing:
            comp, n = ndimage.label(region, structure=structure)
            masks = [comp == c for c in range(1, n + 1)]
        else:
            masks = [region]
        for mask in masks:
            area = int(np.count_nonzero(mask))
            if area < min_segment_area:
                continue
            seg_id = next_id
            next_id += 1
            id_raster[mask] = seg_id
            segments.append(SegmentInfo(
                id=seg_id, category_id=cat.id, area=area,
                bbox=tight_bbox(mask),
                score=float(probs[k][mask].mean())))
    return PanopticMap(id_raster=id_raster, segments=segments)


class _InMemoryData:
    """Whole dataset in RAM: images, class-index targets, level labels."""

    def __init__(self, ds: PanopticDataset):
        cats = sorted(ds.categories, key=lambda c: c.id)
        self.cat_index = {c.id: k for k, c in enumerate(cats)}
        self.categories = cats
        self.images, self.targets, self.levels, self.image_ids = [], [], [], []
        for sample in ds:
            if sample.image is None:
                raise ValidationError(
                    f"image file missing for image_id {sample.image_id}")
            target = np.full(sample.panoptic.shape, -1, dtype=np.int64)
            for seg in sample.panoptic.segments:
                target[sample.panoptic.id_raster == seg.id] = \
                    self.cat_index[seg.category_id]
            self.images.append(sample.image.astype(np.float32) / 255.0)
            self.targets.append(target)
            self.levels.append(sample.record.occlusion_level)
            self.image_ids.append(sample.image_id)
        self.levels = np.array(self.levels)

    def __len__(self):
        return len(self.images)

    def batch(self, indices, crop, rng):
        imgs, tgts = [], []
        for i in indices:
            img, tgt = self.images[i], self.targets[i]
            h, w = tgt.shape
            ch, cw = min(crop[0], h), min(crop[1], w)
            y0 = int(rng.integers(0, h - ch + 1))
            x0 = int(rng.integers(0, w - cw + 1))
            imgs.append(img[y0:y0 + ch, x0:x0 + cw])
            tgts.append(tgt[y0:y0 + ch, x0:x0 + cw])
        x = torch.from_numpy(np.stack(imgs)).permute(0, 3, 1, 2)
        y = torch.from_numpy(np.stack(tgts))
        return x, y, self.levels[indices]


def stratified_batches(levels: np.ndarray, batch_size: int,
                       rng: np.random.Generator) -> list[np.ndarray]:
    """Deterministic batches with occlusion levels spread across batches.

    Each batch gets as many distinct levels as fit; with batch_size >= the
    number of levels present, every batch contains all of them (while
    samples remain).
    """
    pools = {lvl: list(rng.permutation(np.flatnonzero(levels == lvl)))
             for lvl in LEVELS if (levels == lvl).any()}
    order = [lvl for lvl in LEVELS if lvl in pools]
    n_batches = len(levels) // batch_size
    batches = [[] for _ in range(n_batches)]
    # round one: deal one sample of each level into every batch
    for batch in batches:
        for lvl in order:
            if len(batch) < batch_size and pools[lvl]:
                batch.append(pools[lvl].pop())
    rest = [i for lvl in order for i in pools[lvl]]
    rest = list(rng.permutation(np.array(rest, dtype=np.int64))) if rest else []
    for batch in batches:
        while len(batch) < batch_size and rest:
            batch.append(rest.pop())
    return [np.array(sorted(b), dtype=np.int64) for b in batches if len(b) == batch_size]


def train(config: TrainConfig, out_dir: str) -> dict:
    """Optimize the joint objective; write checkpoint.pt, log.jsonl, config.

    Baseline mode is exactly the contrastive path with lambda forced to 0
    (the contrastive term is still computed and logged), which makes the
    two modes step-identical by construction when lambda = 0.
    """
    os.makedirs(out_dir, exist_ok=True)
    ds = PanopticDataset(config.dataset_root)
    data = _InMemoryData(ds)
    present_levels = sorted(set(data.levels.tolist()))
    if config.mode == "contrastive" and config.margins.lambda_weight > 0 \
            and len(present_levels) < 2:
        raise ConfigurationError(
            "contrastive mode needs >= 2 occlusion levels in the dataset; "
            "use baseline mode instead")
    lam = 0.0 if config.mode == "baseline" else config.margins.lambda_weight

    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x7A]))
    torch.manual_seed(config.seed)
    model = ToyPanopticModel(len(data.categories))
    opt = torch.optim.SGD(model.parameters(), lr=config.lr)

    # held-out split for checkpoint selection
    perm = np.random.default_rng(
        np.random.SeedSequence([config.seed, 0x5E])).permutation(len(data))
    n_val = max(1, int(round(config.val_fraction * len(data))))
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    if len(train_idx) < config.batch_size:
        raise ConfigurationError("dataset too small for one batch")

    log_path = os.path.join(out_dir, "log.jsonl")
    best = {"pq": -1.0, "state": None, "epoch": -1}
    step = 0
    with open(log_path, "w") as log:
        for epoch in range(config.epochs):
            batches = stratified_batches(data.levels[train_idx],
                                         config.batch_size, rng)
            for rel in batches:
                idx = train_idx[rel]
                x, y, lv = data.batch(idx, config.crop, rng)
                logits, feats = model(x)
                l_seg = F.cross_entropy(logits, y, ignore_index=-1)
                z = torch_embed(feats)
                l_con = torch_contrastive_loss(z, lv, config.margins)
                l_fin = l_seg + lam * l_con
                if not torch.isfinite(l_fin):
                    raise TrainingAbort(
                        f"non-finite loss at step {step}: "
                        f"L_seg={l_seg.item()}, L_con={l_con.item()}")
                opt.zero_grad()
                l_fin.backward()
                opt.step()
                log.write(json.dumps({
                    "step": step, "epoch": epoch,
                    "L_seg": round(float(l_seg.item()), 6),
                    "L_con": round(float(l_con.item()), 6),
                    "L_fin": round(float(l_fin.item()), 6),
                }) + "\n")
                step += 1
            val_pq = _quick_pq(model, data, val_idx, config)
            if val_pq > best["pq"]:
                best = {"pq": val_pq,
                        "state": {k: v.detach().clone()
                                  for k, v in model.state_dict().items()},
                        "epoch": epoch}
    model.load_state_dict(best["state"])
    ckpt_path = os.path.join(out_dir, "checkpoint.pt")
    torch.save({
        "version": CHECKPOINT_VERSION,
        "state_dict": model.state_dict(),
        "config": config.to_json(),
        "config_hash": config.hash(),
        "categories": [c.to_json() for c in data.categories],
        "best_val_pq": best["pq"],
        "best_epoch": best["epoch"],
    }, ckpt_path)
    return {"checkpoint": ckpt_path, "log": log_path, "steps": step,
            "best_val_pq": best["pq"], "best_epoch": best["epoch"]}


def _quick_pq(model: ToyPanopticModel, data: _InMemoryData, indices,
              config: TrainConfig) -> float:
    from .paneval import PQStat
    stat = PQStat()
    model.eval()
    with torch.no_grad():
        for i in indices:
            pred = predict_map(model, data.images[i], data.categories,
                               config.min_segment_area)
            gt = _gt_map_from_target(data.targets[i], data.categories)
            stat.update(pred, gt)
    model.train()
    res = stat.results()
    return res["PQ"] if res["PQ"] is not None else 0.0


def _gt_map_from_target(target: np.ndarray, categories) -> PanopticMap:
    """Rebuild a category-level gt map (components as instances) from the
    class-index target; used only for the quick validation PQ."""
    one_hot = np.full((len(categories),) + target.shape, -1e9, dtype=np.float32)
    for k in range(len(categories)):
        one_hot[k][target == k] = 1e9
    return panoptic_postprocess(one_hot, categories, min_segment_area=1)


def predict_map(model: ToyPanopticModel, image: np.ndarray, categories,
                min_segment_area: int = 10) -> PanopticMap:
    x = torch.from_numpy(image.astype(np.float32)
                         if image.dtype != np.uint8
                         else image.astype(np.float32) / 255.0)
    x = x.permute(2, 0, 1)[None]
    model.eval()
    with torch.no_grad():
        logits, _ = model(x)
    return panoptic_postprocess(logits[0].numpy(), categories,
                                min_segment_area)


def load_checkpoint(path: str):
    """Load a checkpoint: (model in eval mode, config, categories)."""
    from .pandata import Category
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("version") != CHECKPOINT_VERSION:
        raise ValidationError(
            f"unsupported checkpoint version {blob.get('version')}")
    categories = [Category.from_json(c) for c in blob["categories"]]
    model = ToyPanopticModel(len(categories))
    try:
        model.load_state_dict(blob["state_dict"])
    except RuntimeError as exc:
        raise ValidationError(f"checkpoint does not fit the model: {exc}")
    model.eval()
    config = TrainConfig.from_dict(blob["config"])
    return model, config, categories


def predict_dataset(checkpoint_path: str, ds: PanopticDataset,
                    out_root: str) -> None:
    """Run a checkpoint over a dataset and write a prediction root."""
    from .pandata import Sample, write_dataset
    model, config, categories = load_checkpoint(checkpoint_path)
    samples = []
    for sample in ds:
        if sample.image is None:
            raise ValidationError(f"no image for image_id {sample.image_id}")
        pred = predict_map(model, sample.image, categories,
                           config.min_segment_area)
        samples.append(Sample(image_id=sample.image_id, panoptic=pred))
    write_dataset(out_root, samples, categories,
                  extra_manifest={"checkpoint": os.path.abspath(checkpoint_path)})


def extract_embeddings(checkpoint_path: str,
                       ds: PanopticDataset) -> EmbeddingBatch:
    """One unit-norm embedding row per image, labelled by occlusion level."""
    model, _, _ = load_checkpoint(checkpoint_path)
    rows, labels = [], []
    with torch.no_grad():
        for sample in ds:
            if sample.record is None:
                raise ValidationError(
                    f"no occlusion record for image_id {sample.image_id}")
            x = torch.from_numpy(sample.image.astype(np.float32) / 255.0)
            _, feats = model(x.permute(2, 0, 1)[None])
            rows.append(torch_embed(feats)[0].numpy())
            labels.append(sample.record.occlusion_level)
    batch = EmbeddingBatch(z=np.stack(rows), labels=np.array(labels))
    batch.validate()
    return batch


def separation_score(batch: EmbeddingBatch) -> float:
    """Mean within-level cosine similarity minus mean low-high similarity.

    Levels with fewer than two samples are excluded from the within-level
    mean. Requires at least two levels present.
    """
    batch.validate()
    labels = np.asarray(batch.labels)
    if len(set(labels.tolist())) < 2:
        raise ValidationError("separation_score needs >= 2 levels present")
    sim = batch.z @ batch.z.T
    within = []
    for lvl in LEVELS:
        idx = np.flatnonzero(labels == lvl)
        if len(idx) < 2:
            continue
        block = sim[np.ix_(idx, idx)]
        off = block[~np.eye(len(idx), dtype=bool)]
        within.append(off.mean())
    low = np.flatnonzero(labels == "low")
    high = np.flatnonzero(labels == "high")
    if not within or len(low) == 0 or len(high) == 0:
        raise ValidationError(
            "separation_score needs a within-level pair and both low and "
            "high samples")
    cross = sim[np.ix_(low, high)].mean()
    return float(np.mean(within) - cross)
