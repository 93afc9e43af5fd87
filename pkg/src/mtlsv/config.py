"""Flat ``key = value`` run configuration shared by every CLI stage."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional

from .data import SynthConfig
from .layers import PoolingMode
from .network import PRESETS, ConfigError, NetworkConfig
from .trainer import Schedule

NETWORK_KEYS = {
    f.name for f in dataclasses.fields(NetworkConfig) if f.name not in ("num_speakers", "num_phonemes")
}
SYNTH_KEYS = {f.name for f in dataclasses.fields(SynthConfig) if f.name != "seed"}
SCHEDULE_KEYS = {f.name for f in dataclasses.fields(Schedule) if f.name != "seed"}
OTHER_KEYS = {"seed", "preset", "backend", "plda_iterations", "plda_classes"}
TOGGLE_KEYS = {"pooling_mode", "use_se", "use_frame_phonetic", "use_segment_adversarial"}
KNOWN_KEYS = NETWORK_KEYS | SYNTH_KEYS | SCHEDULE_KEYS | OTHER_KEYS


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """``key = value`` lines; ``#`` starts a comment. Unknown keys are rejected."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        if key not in KNOWN_KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        out[key] = value
    return out


def read_config(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return parse_config_text(fh.read(), str(path))


def _typed(cls, items: dict, keys) -> dict:
    types = {f.name: f.type for f in dataclasses.fields(cls)}
    out = {}
    for k in keys:
        if k in items:
            out[k] = _convert(types[k], items[k], k)
    return out


def _convert(type_name, value, key):
    if not isinstance(value, str):
        return value
    try:
        if type_name == "int":
            return int(value)
        if type_name == "float":
            return float(value)
    except ValueError:
        raise ConfigError(f"{key}: expected a number, got {value!r}") from None
    if type_name == "bool":
        low = value.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    return value


@dataclass
class RunConfig:
    items: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path: Optional[str] = None, **overrides) -> "RunConfig":
        items = read_config(path) if path else {}
        for k, v in overrides.items():
            if v is not None:
                if k not in KNOWN_KEYS:
                    raise ConfigError(f"unknown key {k!r}")
                items[k] = v
        return cls(items)

    @property
    def seed(self) -> int:
        return int(self.items.get("seed", 0))

    @property
    def preset(self) -> Optional[str]:
        p = self.items.get("preset")
        return p.upper() if p else None

    @property
    def backend(self) -> str:
        kind = self.items.get("backend", "plda")
        if kind not in ("cosine", "plda"):
            raise ConfigError(f"backend must be cosine or plda, got {kind!r}")
        return kind

    @property
    def plda_classes(self) -> str:
        """PLDA class labels: speakers, or speaker-phrase pairs."""
        kind = self.items.get("plda_classes", "speaker")
        if kind not in ("speaker", "speaker_phrase"):
            raise ConfigError(f"plda_classes must be speaker or speaker_phrase, got {kind!r}")
        return kind

    @property
    def plda_iterations(self) -> int:
        return int(self.items.get("plda_iterations", 10))

    def synth(self) -> SynthConfig:
        return SynthConfig(seed=self.seed, **_typed(SynthConfig, self.items, SYNTH_KEYS))

    def schedule(self) -> Schedule:
        return Schedule(seed=self.seed, **_typed(Schedule, self.items, SCHEDULE_KEYS))

    def network(self, num_phonemes: int, num_speakers: int, input_dim: Optional[int] = None) -> NetworkConfig:
        """Network configuration, with a preset's toggles applied exactly.

        A phoneme-aware preset may still choose between the literal and
        weighted pooling readings through ``pooling_mode``.
        """
        kwargs = _typed(NetworkConfig, self.items, NETWORK_KEYS)
        if input_dim is not None:
            kwargs.setdefault("input_dim", input_dim)
        preset = self.preset
        if preset:
            if preset not in PRESETS:
                raise ConfigError(f"unknown preset {preset!r}; choose from {', '.join(PRESETS)}")
            toggles = dict(PRESETS[preset])
            if "pooling_mode" in kwargs:
                mode = PoolingMode.parse(kwargs["pooling_mode"])
                if mode.phoneme_aware != toggles["pooling_mode"].phoneme_aware:
                    raise ConfigError(f"preset {preset} does not allow pooling_mode {mode.value}")
                toggles["pooling_mode"] = mode
            for k in TOGGLE_KEYS - {"pooling_mode"}:
                if k in kwargs and kwargs[k] != toggles[k]:
                    raise ConfigError(f"preset {preset} fixes {k} = {toggles[k]}")
            kwargs.update(toggles)
        return NetworkConfig(num_phonemes=num_phonemes, num_speakers=num_speakers, **kwargs)
