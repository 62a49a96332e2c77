"""The bundled full-precision model trained on the toy task."""

from __future__ import annotations

from pathlib import Path

from .checkpoint import load_checkpoint, save_checkpoint
from .data import toy_datasets
from .model import ModelConfig, ViTModel
from .train import train_toy_fp

FIXTURE_PATH = Path(__file__).parent / "assets" / "toy_vit_fp.ckpt"
FIXTURE_SEED = 0
DATA_SEED = 0


def build_fixture(path: Path = FIXTURE_PATH, seed: int = FIXTURE_SEED) -> ViTModel:
    train, _ = toy_datasets(DATA_SEED)
    model = train_toy_fp(train, ModelConfig(), seed=seed)
    save_checkpoint(model, path)
    return model


def load_fixture() -> ViTModel:
    return load_checkpoint(FIXTURE_PATH)
