"""Model checkpoints: parameter blob plus a JSON architecture descriptor."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .. import diffcore as dc
from ..dataset import StandardizationStats
from .baselines import LatentOdeBaseline, LatentOdeConfig, SsNodeConfig, SsNodeModel
from .bnode import BNodeConfig, BNodeModel

__all__ = ["build_model", "save_model", "load_model"]

_KINDS = {
    "bnode": (BNodeModel, BNodeConfig),
    "ssnode": (SsNodeModel, SsNodeConfig),
    "latentode": (LatentOdeBaseline, LatentOdeConfig),
}

DESCRIPTOR = "model.json"


def build_model(kind: str, config: dict, seed: int = 0, stats=None):
    if kind not in _KINDS:
        raise ValueError(f"unknown model kind {kind!r}; choose from {sorted(_KINDS)}")
    cls, cfg_cls = _KINDS[kind]
    return cls(cfg_cls.from_json(config), seed, stats)


def save_model(model, directory: str | Path, extra: dict | None = None) -> Path:
    directory = Path(directory)
    dc.save_params(directory, model.named_parameters())
    desc = model.descriptor()
    if model.stats is not None:
        desc["stats"] = model.stats.to_json()
    if extra:
        desc["extra"] = extra
    (directory / DESCRIPTOR).write_text(json.dumps(desc, indent=2, sort_keys=True))
    return directory


def load_model(directory: str | Path):
    directory = Path(directory)
    desc = json.loads((directory / DESCRIPTOR).read_text())
    stats = StandardizationStats.from_json(desc["stats"]) if "stats" in desc else None
    model = build_model(desc["kind"], desc["config"], 0, stats)
    model.load_state(dc.load_params(directory))
    if "masks" in desc:
        model = model.masked({k: np.asarray(v) for k, v in desc["masks"].items()})
    return model
