"""Shared fixtures: benchmark-dataset discovery with loud skips.

Real citation datasets are not bundled and this sandbox has no network
access. Tests that need one look for a canonical export under
LINKLEAK_DATA (or ./data at the repo root) and skip with instructions
when it is absent.
"""

import os
from pathlib import Path

import pytest

from linkleak.graphs import load_canonical

REPO_ROOT = Path(__file__).resolve().parent.parent


def dataset_dir(name: str) -> Path:
    root = Path(os.environ.get("LINKLEAK_DATA", REPO_ROOT / "data"))
    return root / name


def load_dataset_or_skip(name: str):
    path = dataset_dir(name)
    if not (path / "meta.json").is_file():
        pytest.skip(
            f"benchmark dataset '{name}' is not on disk at {path} and this "
            f"environment cannot download it; export it with the ingest "
            f"tool (see ingest/) or point LINKLEAK_DATA at a directory "
            f"containing it")
    return load_canonical(path)


@pytest.fixture(scope="session")
def cora():
    return load_dataset_or_skip("cora")


@pytest.fixture(scope="session")
def citeseer():
    return load_dataset_or_skip("citeseer")
