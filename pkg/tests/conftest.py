"""Shared fixtures: the deterministic generation stub and synthetic worlds."""

from __future__ import annotations

import os

import pytest
import yaml

from covr_forge import toyworld
from covr_forge.mtg_stub import StubServer


@pytest.fixture(scope="session")
def stub_server():
    with StubServer() as server:
        yield server


def write_pipeline_config(
    paths: dict,
    config_path,
    out_dir: str,
    seed: int = 0,
    mtg_mode: str = "rule",
    mtg_url: str = "http://127.0.0.1:1",
    n_val: int = 8,
    n_annotate: int = 8,
    epochs: int = 60,
) -> None:
    cfg = {
        "seed": seed,
        "out_dir": out_dir,
        "corpus": {"train": str(paths["train"]), "heldout": str(paths["heldout"])},
        "lexicon": {"dictionary": str(paths["dictionary"]), "zipf": str(paths["zipf"])},
        "embeddings": {
            "dim": toyworld.EMBED_DIM,
            "text": "toy",
            "frames": str(paths["frames"]),
            "frames_manifest": str(paths["frames_manifest"]),
        },
        "mtg": {"mode": mtg_mode, "url": mtg_url},
        "train": {"epochs": epochs, "batch_size": 32, "learning_rate": 0.1},
        "eval": {"n_val": n_val, "n_annotate": n_annotate},
    }
    with open(config_path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(cfg, fh)


@pytest.fixture(scope="session")
def tiny_world_dir(tmp_path_factory):
    """A small world for pipeline-behavior tests (rule-based texts, fast)."""
    root = tmp_path_factory.mktemp("tiny_world")
    world = toyworld.build_world(seed=1, n_train_captions=60, n_train_videos=70, n_heldout=40)
    paths = toyworld.write_world(world, root / "data")
    write_pipeline_config(paths, root / "config.yaml", out_dir=str(root / "out"), seed=1, n_val=6, n_annotate=6, epochs=3)
    return root


@pytest.fixture(scope="session")
def toy_world_dir(tmp_path_factory):
    """The full bundled synthetic corpus (500 captions / 600 videos)."""
    root = tmp_path_factory.mktemp("toy_world")
    world = toyworld.build_world(seed=0)
    paths = toyworld.write_world(world, root / "data")
    return root, paths


@pytest.fixture(scope="session")
def no_mtg_env():
    """Tests that must not inherit a stub URL from the environment."""
    old = os.environ.pop("COVR_FORGE_MTG_URL", None)
    yield
    if old is not None:
        os.environ["COVR_FORGE_MTG_URL"] = old
