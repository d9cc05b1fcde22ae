import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from occlkit import scenegen


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Small generated dataset shared by IO / evaluator / trainer tests."""
    root = tmp_path_factory.mktemp("tiny_ds")
    cfg = scenegen.GeneratorConfig(n_images=24, canvas=(64, 64))
    manifest = scenegen.generate_dataset(cfg, seed=42, out_root=str(root))
    return {"root": str(root), "config": cfg, "manifest": manifest}
