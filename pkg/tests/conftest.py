"""Shared fixtures: small configs and the on-disk artifact cache for the
expensive trained-pipeline tests."""

import dataclasses
import os

import pytest

from kcciol.config import parse_config
from kcciol.metalearner import PhaseConfig

CONFIG_DIR = os.path.join(os.path.dirname(__file__), "..", "configs")


def artifact_dir() -> str:
    """Trained checkpoints cache. Results are keyed by a hash of everything
    that determines them, so stale entries are never reused silently."""
    path = os.environ.get("KCCIOL_TEST_ARTIFACTS", os.path.join(os.path.dirname(__file__), "_artifacts"))
    os.makedirs(path, exist_ok=True)
    return path


@pytest.fixture(scope="session")
def sine_desk_config():
    return parse_config(os.path.join(CONFIG_DIR, "sine_desk.cfg"))


@pytest.fixture(scope="session")
def class_desk_config():
    return parse_config(os.path.join(CONFIG_DIR, "class_desk.cfg"))


@pytest.fixture(scope="session")
def tiny_class_config(class_desk_config):
    """Cut-down classification pipeline used where training must be fast."""
    cfg = class_desk_config
    return dataclasses.replace(
        cfg,
        phases=(
            dataclasses.replace(cfg.phases[0], steps=250),
            dataclasses.replace(cfg.phases[1], steps=60),
            dataclasses.replace(cfg.phases[2], steps=60),
        ),
        eval_runs=20,
    )
