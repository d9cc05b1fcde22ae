import json

import numpy as np
import pytest
import torch

from occlkit.errors import ConfigurationError, ValidationError
from occlkit.occlcon import EmbeddingBatch, MarginConfig, contrastive_loss
from occlkit.pandata import Category, PanopticDataset
from occlkit.trainhar import (TrainConfig, ToyPanopticModel,
                              extract_embeddings, load_checkpoint,
                              panoptic_postprocess, predict_dataset,
                              separation_score, stratified_batches,
                              torch_contrastive_loss, torch_embed, train)

THINGS = [Category(1, "a", True), Category(2, "b", True)]
STUFF = [Category(7, "bg", False)]
TAXONOMY = THINGS + STUFF


def logits_from_labels(labels, categories=TAXONOMY):
    cats = sorted(categories, key=lambda c: c.id)
    index = {c.id: k for k, c in enumerate(cats)}
    out = np.full((len(cats),) + labels.shape, -10.0, dtype=np.float32)
    for cid, k in index.items():
        out[k][labels == cid] = 10.0
    return out


class TestPostprocess:
    def test_one_hot_recovers_labels(self):
        labels = np.full((12, 12), 7, dtype=np.int32)
        labels[2:6, 2:8] = 1
        pan = panoptic_postprocess(logits_from_labels(labels), TAXONOMY,
                                   min_segment_area=1)
        cat_raster = np.zeros_like(labels)
        for seg in pan.segments:
            cat_raster[pan.id_raster == seg.id] = seg.category_id
        assert np.array_equal(cat_raster, labels)
        pan.validate()

    def test_two_blobs_become_two_instances(self):
        labels = np.full((16, 16), 7, dtype=np.int32)
        labels[1:5, 1:5] = 1
        labels[10:14, 10:14] = 1
        pan = panoptic_postprocess(logits_from_labels(labels), TAXONOMY,
                                   min_segment_area=1)
        things = [s for s in pan.segments if s.category_id == 1]
        assert len(things) == 2
        assert {s.area for s in things} == {16}

    def test_diagonal_touch_is_two_components(self):
        # 4-connectivity: blobs that only touch at a corner stay separate
        labels = np.full((8, 8), 7, dtype=np.int32)
        labels[1:3, 1:3] = 1
        labels[3:5, 3:5] = 1
        pan = panoptic_postprocess(logits_from_labels(labels), TAXONOMY,
                                   min_segment_area=1)
        assert len([s for s in pan.segments if s.category_id == 1]) == 2

    def test_small_blob_voided(self):
        labels = np.full((10, 10), 7, dtype=np.int32)
        labels[4, 4] = 1
        labels[4, 5] = 1
        labels[5, 4] = 1
        pan = panoptic_postprocess(logits_from_labels(labels), TAXONOMY,
                                   min_segment_area=4)
        assert all(s.category_id != 1 for s in pan.segments)
        assert (pan.id_raster[labels == 1] == 0).all()

    def test_scores_are_probabilities(self):
        rng = np.random.default_rng(0)
        logits = rng.normal(size=(3, 9, 9)).astype(np.float32)
        pan = panoptic_postprocess(logits, TAXONOMY, min_segment_area=1)
        assert pan.segments
        for seg in pan.segments:
            assert 0.0 < seg.score <= 1.0

    def test_channel_mismatch_rejected(self):
        with pytest.raises(ValidationError):
            panoptic_postprocess(np.zeros((2, 4, 4)), TAXONOMY)


class TestTorchLossMirrors:
    def test_torch_loss_matches_numpy_loss(self):
        rng = np.random.default_rng(1)
        cfg = MarginConfig()
        for _ in range(20):
            b = int(rng.integers(2, 7))
            raw = rng.normal(size=(b, 8))
            z = raw / np.linalg.norm(raw, axis=1, keepdims=True)
            labels = rng.choice(["low", "mid", "high"], size=b)
            expected = contrastive_loss(
                EmbeddingBatch(z=z, labels=labels), cfg)
            got = torch_contrastive_loss(torch.from_numpy(z), labels, cfg)
            assert float(got) == pytest.approx(expected, abs=1e-9)

    def test_torch_embed_unit_norm(self):
        feats = torch.randn(3, 16, 4, 4)
        z = torch_embed(feats)
        norms = z.norm(dim=1)
        assert torch.allclose(norms, torch.ones(3), atol=1e-5)


class TestStratifiedBatches:
    def test_every_batch_has_all_present_levels(self):
        rng = np.random.default_rng(2)
        levels = np.array(["low"] * 10 + ["mid"] * 10 + ["high"] * 10)
        for batch in stratified_batches(levels, 6, rng):
            assert len(batch) == 6
            assert set(levels[batch]) == {"low", "mid", "high"}

    def test_no_index_repeats_within_epoch(self):
        rng = np.random.default_rng(3)
        levels = np.array(["low"] * 7 + ["mid"] * 9 + ["high"] * 8)
        batches = stratified_batches(levels, 4, rng)
        flat = np.concatenate(batches)
        assert len(flat) == len(set(flat.tolist()))

    def test_batch_count(self):
        rng = np.random.default_rng(4)
        levels = np.array(["low"] * 5 + ["high"] * 6)
        batches = stratified_batches(levels, 4, rng)
        assert len(batches) == 2


class TestTrainConfig:
    def test_roundtrip_through_dict(self):
        cfg = TrainConfig(dataset_root="d", epochs=3, batch_size=4, lr=0.1,
                          seed=7, mode="baseline", crop=(64, 64))
        again = TrainConfig.from_dict(cfg.to_json())
        assert again.to_json() == cfg.to_json()
        assert again.hash() == cfg.hash()

    def test_unknown_mode_rejected(self):
        with pytest.raises(ConfigurationError):
            TrainConfig(mode="magic")

    def test_contrastive_needs_pairs(self):
        with pytest.raises(ConfigurationError):
            TrainConfig(mode="contrastive", batch_size=1)


@pytest.fixture(scope="module")
def quick_runs(tiny_dataset, tmp_path_factory):
    """Two 2-epoch runs on the tiny dataset: lambda=0 contrastive vs
    baseline, same seed."""
    out = tmp_path_factory.mktemp("quick_runs")
    results = {}
    for mode in ("baseline", "contrastive"):
        cfg = TrainConfig(
            dataset_root=tiny_dataset["root"], epochs=2, batch_size=6,
            lr=0.05, seed=11, mode=mode,
            margins=MarginConfig(lambda_weight=0.0), crop=(64, 64))
        run_dir = str(out / mode)
        results[mode] = {"dir": run_dir, "result": train(cfg, run_dir)}
    return results


class TestTraining:
    def test_lambda_zero_equals_baseline_step_for_step(self, quick_runs):
        logs = {}
        for mode, run in quick_runs.items():
            with open(run["result"]["log"]) as fh:
                logs[mode] = [json.loads(line) for line in fh]
        assert logs["baseline"] == logs["contrastive"]
        assert all("L_con" in row for row in logs["baseline"])

    def test_checkpoint_roundtrip(self, quick_runs):
        path = quick_runs["baseline"]["result"]["checkpoint"]
        model, cfg, categories = load_checkpoint(path)
        assert isinstance(model, ToyPanopticModel)
        assert cfg.mode == "baseline"
        assert sorted(c.id for c in categories) == [c.id for c in categories]

    def test_corrupt_checkpoint_version_rejected(self, quick_runs, tmp_path):
        path = quick_runs["baseline"]["result"]["checkpoint"]
        blob = torch.load(path, map_location="cpu", weights_only=False)
        blob["version"] = 99
        bad = str(tmp_path / "bad.pt")
        torch.save(blob, bad)
        with pytest.raises(ValidationError):
            load_checkpoint(bad)

    def test_predict_dataset_writes_scored_maps(self, quick_runs,
                                                tiny_dataset, tmp_path):
        gt = PanopticDataset(tiny_dataset["root"])
        pred_root = str(tmp_path / "pred")
        predict_dataset(quick_runs["baseline"]["result"]["checkpoint"],
                        gt, pred_root)
        pred = PanopticDataset(pred_root, require_sidecar=False)
        assert pred.image_ids == gt.image_ids
        sample = pred.load(pred.image_ids[0], with_image=False)
        for seg in sample.panoptic.segments:
            assert seg.score is not None

    def test_training_deterministic(self, tiny_dataset, tmp_path):
        logs = []
        for name in ("a", "b"):
            cfg = TrainConfig(dataset_root=tiny_dataset["root"], epochs=1,
                              batch_size=6, lr=0.05, seed=3,
                              mode="contrastive", crop=(64, 64))
            out = train(cfg, str(tmp_path / name))
            with open(out["log"]) as fh:
                logs.append(fh.read())
        assert logs[0] == logs[1]

    def test_embeddings_labelled_by_level(self, quick_runs, tiny_dataset):
        ds = PanopticDataset(tiny_dataset["root"])
        batch = extract_embeddings(
            quick_runs["baseline"]["result"]["checkpoint"], ds)
        assert batch.z.shape[0] == len(ds)
        levels = [ds.records[i].occlusion_level for i in ds.image_ids]
        assert batch.labels.tolist() == levels


class TestSeparationScore:
    def batch(self, z, labels):
        return EmbeddingBatch(z=np.asarray(z, float), labels=np.asarray(labels))

    def test_identical_embeddings_zero(self):
        z = np.tile([1.0, 0.0], (6, 1))
        labels = ["low", "low", "mid", "mid", "high", "high"]
        assert separation_score(self.batch(z, labels)) == pytest.approx(0.0)

    def test_orthogonal_clusters_score_one(self):
        z = np.array([[1, 0], [1, 0], [0, 1], [0, 1]], dtype=float)
        labels = ["low", "low", "high", "high"]
        assert separation_score(self.batch(z, labels)) == pytest.approx(1.0)

    def test_random_embeddings_near_zero(self):
        rng = np.random.default_rng(5)
        raw = rng.normal(size=(300, 32))
        z = raw / np.linalg.norm(raw, axis=1, keepdims=True)
        labels = rng.choice(["low", "mid", "high"], size=300)
        assert abs(separation_score(self.batch(z, labels))) < 0.1

    def test_single_level_rejected(self):
        z = np.eye(3)
        with pytest.raises(ValidationError):
            separation_score(self.batch(z, ["low", "low", "low"]))

    def test_singleton_level_excluded_from_within(self):
        # "mid" has one sample: it must not contribute a within-level term
        z = np.array([[1, 0], [1, 0], [0, 1], [0, 1],
                      [np.sqrt(0.5), np.sqrt(0.5)]], dtype=float)
        labels = ["low", "low", "high", "high", "mid"]
        assert separation_score(self.batch(z, labels)) == pytest.approx(1.0)
