"""occlkit: desk-scale occlusion benchmarking for panoptic segmentation."""

from .occlcon import (EmbeddingBatch, MarginConfig, contrastive_loss,
                      contrastive_loss_grad, embed, pair_margin, total_loss)
from .occlevel import LEVELS, bucket, image_occlusion_level, occlusion_rate
from .pandata import (Category, OcclusionRecord, PanopticDataset, PanopticMap,
                      Sample, SegmentInfo, decode_id_map, encode_id_map,
                      write_dataset)
from .paneval import (MatchResult, PQStat, StratifiedReport, ap_pan,
                      match_segments, miou_pan, pq, stratified_report)
from .scenegen import (GeneratorConfig, RenderedSample, SceneSpec, ShapeSpec,
                       generate_dataset, render_scene)
from .trainhar import (ToyPanopticModel, TrainConfig, extract_embeddings,
                       panoptic_postprocess, predict_dataset,
                       separation_score, train)

__version__ = "0.1.0"
