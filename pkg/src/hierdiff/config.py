"""JSON experiment configuration with strict keys and desk-scale defaults."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .guidance import GuidanceConfig
from .network import NetworkConfig
from .schedule import NoiseSchedule
from .synthdata import SynthSpec
from .token_space import StateSpaceConfig
from .training import TrainConfig

SECTIONS = {
    "state_space": StateSpaceConfig,
    "schedule": NoiseSchedule,
    "network": NetworkConfig,
    "train": TrainConfig,
    "guidance": GuidanceConfig,
    "synth": SynthSpec,
}

# shared shape fields: section -> {its field: state_space field}
_SHAPE_LINKS = {
    "synth": {"levels": "levels", "frames": "frames", "vocab": "vocab", "split": "split",
              "emotion_downsample": "emotion_downsample"},
    "network": {"levels": "levels", "vocab": "vocab", "split": "split",
                "emotion_downsample": "emotion_downsample"},
}

# network condition widths that follow from the synthetic generator
_SYNTH_LINKS = {"lip_dim": "phonemes", "face_dim": "speakers", "id_dim": "id_dim",
                "emo_classes": "emotions"}

DESK_STATE_SPACE = {"levels": 4, "frames": 8, "vocab": 8, "split": 1, "emotion_downsample": 4}


class ConfigError(ValueError):
    pass


def _fields(cls) -> set[str]:
    return {f.name for f in dataclasses.fields(cls)}


@dataclass(frozen=True)
class ExperimentConfig:
    state_space: StateSpaceConfig = field(default_factory=lambda: StateSpaceConfig(**DESK_STATE_SPACE))
    schedule: NoiseSchedule = field(default_factory=NoiseSchedule)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    synth: SynthSpec = field(default_factory=SynthSpec)

    @classmethod
    def from_dict(cls, doc: dict | None) -> ExperimentConfig:
        doc = {} if doc is None else doc
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(doc) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        for name, section in doc.items():
            if not isinstance(section, dict):
                raise ConfigError(f"section {name!r} must be an object")
            bad = set(section) - _fields(SECTIONS[name])
            if bad:
                raise ConfigError(f"unknown keys in {name!r}: {sorted(bad)}")

        ss = {**DESK_STATE_SPACE, **doc.get("state_space", {})}
        synth = dict(doc.get("synth", {}))
        net = dict(doc.get("network", {}))
        for sec_name, sec in (("synth", synth), ("network", net)):
            for key, ss_key in _SHAPE_LINKS[sec_name].items():
                if key in sec and sec[key] != ss[ss_key]:
                    raise ConfigError(f"{sec_name}.{key}={sec[key]} conflicts with state_space.{ss_key}={ss[ss_key]}")
                sec[key] = ss[ss_key]
        try:
            synth_cfg = SynthSpec(**synth)
            for key, skey in _SYNTH_LINKS.items():
                net.setdefault(key, getattr(synth_cfg, skey))
            return cls(
                state_space=StateSpaceConfig(**ss),
                schedule=NoiseSchedule(**doc.get("schedule", {})),
                network=NetworkConfig(**net),
                train=TrainConfig(**doc.get("train", {})),
                guidance=GuidanceConfig(**doc.get("guidance", {})),
                synth=synth_cfg,
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> ExperimentConfig:
        if path is None:
            return cls.from_dict({})
        with open(path) as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from exc
        return cls.from_dict(doc)

    def replace(self, section: str, **changes) -> ExperimentConfig:
        return dataclasses.replace(self, **{section: dataclasses.replace(getattr(self, section), **changes)})

    def to_dict(self) -> dict:
        return {name: dataclasses.asdict(getattr(self, name)) for name in SECTIONS}
