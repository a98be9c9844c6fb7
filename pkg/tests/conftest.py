import sys

import numpy as np
import pytest

from segdistill.masks import MaskDataset, write_label_map


def three_record_maps():
    """m1 = {0}, m2 = {0, 1}, m3 = {1, 2} on 8x8 grids."""
    m1 = np.zeros((8, 8), dtype=np.int64)
    m2 = np.zeros((8, 8), dtype=np.int64)
    m2[:, 4:] = 1
    m3 = np.ones((8, 8), dtype=np.int64)
    m3[4:, :] = 2
    m3[0, 0] = 255
    return {"m1": m1, "m2": m2, "m3": m3}


@pytest.fixture
def fixture_maps():
    return three_record_maps()


@pytest.fixture
def fixture_dataset():
    return MaskDataset.from_arrays(three_record_maps(), num_classes=3)


@pytest.fixture
def fixture_dir(tmp_path):
    root = tmp_path / "labels"
    root.mkdir()
    for rid, m in three_record_maps().items():
        write_label_map(root / f"{rid}.png", m)
    return root


def toy_config_dict(root, **overrides):
    cfg = {
        "dataset": {"path": str(root), "num_classes": 3},
        "selection": {"strategy": "greedy", "budget": 2, "temperature": 0.5},
        "sampler": {"steps": 10, "inversion_steps": 10, "cfg_scale": 2.0},
        "models": {"latent_channels": 2, "latent_size": [8, 8], "extractor_channels": [4, 6],
                   "extractor_factors": [2, 4]},
        "guidance": {"lambda_seg": 0.05, "lambda_feat": 0.2},
        "seed": 7,
    }
    for section, values in overrides.items():
        if isinstance(values, dict):
            cfg.setdefault(section, {}).update(values)
        else:
            cfg[section] = values
    return cfg


def pytest_terminal_summary(terminalreporter):
    results = sys.modules.get("test_acceptance")
    if results is None or not results.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results.RESULTS):
        terminalreporter.write_line(results.RESULTS[n])
