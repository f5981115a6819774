"""
conftest.py for the command-line suite.

A tiny synthetic dataset is generated once per session; every test gets a
fresh output directory, a toy-sized run config and a CliRunner bound to both.
"""

from __future__ import annotations

import copy
import logging
from pathlib import Path
from typing import Any, Dict, Generator

import pytest
import yaml

from scene_fusion.config import RunConfig
from scene_fusion.datakit import gen_synthetic
from tests.cli.utils.cli_runner import CliRunner

# =============================================================================
# Toy run config
# =============================================================================

TOY_CONFIG: Dict[str, Any] = {
    "seed": 7,
    "data": {
        "height": 8,
        "width": 8,
        "min_extent": 2,
        "max_extent": 5,
        "num_train": 12,
        "num_test": 6,
    },
    "gnn": {"hidden_dim": 8},
    "vit": {"patch_size": 4, "embed_dim": 8, "depth": 1, "num_heads": 2, "mlp_ratio": 2},
    "fusion": {"f_dim": 8},
    "train": {"epochs": 2, "batch_size": 4, "learning_rate": 0.01},
}


def write_config(path: Path, **sections: Any) -> Path:
    document = copy.deepcopy(TOY_CONFIG)
    for name, values in sections.items():
        if isinstance(values, dict):
            document.setdefault(name, {}).update(values)
        else:
            document[name] = values
    path.write_text(yaml.safe_dump(document, sort_keys=True), encoding="utf-8")
    return path


# =============================================================================
# Fixtures
# =============================================================================


@pytest.fixture(autouse=True)
def _restore_library_logger() -> Generator[None, None, None]:
    """`main` installs its own stderr handler; undo it after each test."""
    logger = logging.getLogger("scene_fusion")
    handlers, level, propagate = list(logger.handlers), logger.level, logger.propagate
    yield
    logger.handlers[:] = handlers
    logger.setLevel(level)
    logger.propagate = propagate


@pytest.fixture(scope="session")
def dataset_dir(tmp_path_factory) -> Path:
    """Generated once: 12 train / 6 test 8x8 scenes on disk."""
    root = tmp_path_factory.mktemp("data")
    spec = RunConfig.from_dict(TOY_CONFIG).data
    gen_synthetic(spec, root)
    return root


@pytest.fixture
def manifest(dataset_dir: Path) -> Path:
    return dataset_dir / "manifest.json"


@pytest.fixture
def toy_config(tmp_path: Path) -> Path:
    return write_config(tmp_path / "run.yaml")


@pytest.fixture
def out_dir(tmp_path: Path) -> Path:
    return tmp_path / "runs"


@pytest.fixture
def cli(capsys, toy_config: Path, manifest: Path) -> CliRunner:
    return CliRunner(capsys, toy_config, manifest)


@pytest.fixture
def sample_files(dataset_dir: Path) -> Dict[str, Path]:
    """Label map and image of the first generated sample."""
    return {
        "label_map": dataset_dir / "maps" / "s00000.png",
        "image": dataset_dir / "images" / "s00000.png",
    }
