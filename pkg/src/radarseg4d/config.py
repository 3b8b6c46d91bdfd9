"""JSON run configuration covering FoV, dataset compilation, synthesis, network and training."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

from .dataset import DatasetConfig
from .network import NetworkConfig
from .synthetic import SynthConfig
from .trainer import Hyperparams
from .views import FovConfig

PRESETS = {
    "reference": NetworkConfig.reference,
    "tiny": NetworkConfig.tiny,
    "gradcheck": NetworkConfig.gradcheck,
}


def resolve_network(value: str | Mapping | None) -> NetworkConfig:
    """A preset name, or a dict with optional ``preset`` plus field overrides."""
    if value is None:
        return NetworkConfig.reference()
    if isinstance(value, str):
        if value not in PRESETS:
            raise ValueError(f"unknown network preset {value!r}; choose from {sorted(PRESETS)}")
        return PRESETS[value]()
    overrides = dict(value)
    base = resolve_network(overrides.pop("preset", "reference")).to_dict()
    base.update(overrides)
    return NetworkConfig.from_dict(base)


@dataclass
class RunConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig.reference)
    hyperparams: Hyperparams = field(default_factory=Hyperparams)

    @classmethod
    def from_dict(cls, d: Mapping) -> "RunConfig":
        unknown = set(d) - {"fov", "dataset", "synth", "network", "hyperparams"}
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        ds = dict(d.get("dataset", {}))
        if "fov" in d:
            ds["fov"] = d["fov"]
        return cls(
            dataset=DatasetConfig.from_dict(ds),
            synth=SynthConfig.from_dict(d.get("synth", {})),
            network=resolve_network(d.get("network")),
            hyperparams=Hyperparams.from_dict(d.get("hyperparams", {})),
        )

    @classmethod
    def load(cls, path: str | Path | None) -> "RunConfig":
        if path is None:
            return cls()
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: invalid JSON ({exc})") from None

    def to_dict(self) -> dict:
        ds = self.dataset.to_dict()
        return {
            "fov": ds.pop("fov"),
            "dataset": {k: v for k, v in ds.items() if k != "synth"},
            "synth": self.synth.to_dict(),
            "network": self.network.to_dict(),
            "hyperparams": self.hyperparams.to_dict(),
        }

    @property
    def fov(self) -> FovConfig:
        return self.dataset.fov
