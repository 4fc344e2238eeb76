# src/checkpoint.py
import json
import logging
import os
from dataclasses import asdict
from typing import Optional

import numpy as np
import torch

from .config import ModelConfig, TrainConfig, build_section
from .errors import DataError

logger = logging.getLogger(__name__)

FORMAT_VERSION = "nowcast-ckpt/1"
META_KEY = "__meta__"


def save_checkpoint(path: str, model, train_config: Optional[TrainConfig] = None) -> str:
    """Single .npz archive: JSON metadata plus one little-endian float32 array per state_dict entry."""
    if not path.endswith(".npz"):
        path += ".npz"
    meta = {
        "format": FORMAT_VERSION,
        "model": asdict(model.config),
        "train": asdict(train_config) if train_config is not None else None,
    }
    arrays = {name: t.detach().cpu().numpy().astype("<f4") for name, t in model.state_dict().items()}
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    np.savez(path, **{META_KEY: np.array(json.dumps(meta, sort_keys=True))}, **arrays)
    logger.info("Saved checkpoint %s (%d arrays, variant=%s)", path, len(arrays), model.config.variant)
    return path


def load_checkpoint(path: str):
    """Returns (model, ModelConfig, TrainConfig or None); the model is in eval mode."""
    from .phydnet import PhyDNet

    if not os.path.exists(path):
        raise DataError(f"Checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as archive:
        if META_KEY not in archive.files:
            raise DataError(f"{path} is not a checkpoint archive (missing {META_KEY})")
        meta = json.loads(str(archive[META_KEY]))
        if meta.get("format") != FORMAT_VERSION:
            raise DataError(f"Unsupported checkpoint format {meta.get('format')!r} in {path}")
        state = {name: torch.from_numpy(archive[name].copy()) for name in archive.files if name != META_KEY}

    model_config = build_section(ModelConfig, meta["model"])
    train_config = build_section(TrainConfig, meta["train"]) if meta.get("train") else None
    model = PhyDNet(model_config)
    missing, unexpected = model.load_state_dict(state, strict=False)
    if missing or unexpected:
        raise DataError(f"Checkpoint {path} does not match the model: missing={missing}, unexpected={unexpected}")
    model.eval()
    return model, model_config, train_config

