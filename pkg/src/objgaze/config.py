"""JSON run configuration mirroring the model, training, loss and synthesis settings."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

from .data import SynthConfig
from .detector import DetectorConfig
from .got import GotConfig
from .losses import LossWeights
from .model import ModelConfig
from .trainer import TrainConfig

_TUPLES = {"stage_channels", "objects", "heads"}


def _build(cls, d: dict, where: str):
    known = {f.name for f in fields(cls)}
    extra = sorted(set(d) - known)
    if extra:
        raise ValueError(f"unknown keys in {where}: {', '.join(extra)}")
    kw = {k: tuple(v) if k in _TUPLES and isinstance(v, list) else v for k, v in d.items()}
    return cls(**kw)


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    synth: SynthConfig = field(default_factory=SynthConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    def check(self) -> None:
        self.model.detector.check()
        self.model.got.check()
        self.train.check()
        self.loss.check()
        self.synth.check()
        if self.model.got.dim != self.model.detector.dim:
            raise ValueError("model.got.dim must equal model.detector.dim")


def config_from_dict(d: dict) -> RunConfig:
    extra = sorted(set(d) - {"model", "train", "loss", "synth"})
    if extra:
        raise ValueError(f"unknown config sections: {', '.join(extra)}")
    m = dict(d.get("model", {}))
    det = _build(DetectorConfig, m.pop("detector", {}), "model.detector")
    got = _build(GotConfig, m.pop("got", {}), "model.got")
    model = _build(ModelConfig, m, "model")
    model.detector, model.got = det, got
    cfg = RunConfig(
        model=model,
        train=_build(TrainConfig, d.get("train", {}), "train"),
        loss=_build(LossWeights, d.get("loss", {}), "loss"),
        synth=_build(SynthConfig, d.get("synth", {}), "synth"),
    )
    cfg.check()
    return cfg


def load_config(path: Optional[str] = None) -> RunConfig:
    """Defaults when ``path`` is None; otherwise the file's values over the defaults."""
    if path is None:
        return RunConfig()
    return config_from_dict(json.loads(Path(path).read_text()))
