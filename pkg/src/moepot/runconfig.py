"""Sectioned key=value run configuration.

Syntax:

    model {
      d_z = 32
      ...
    }
    train { ... }
    data {
      entry = path/to/set.mpot 1.0
    }
    eval {
      horizons = 1,5,10,20
      blocks = all
    }

Unknown sections or keys are rejected. `serialize(parse(text))` is canonical:
every field appears explicitly, so parse -> serialize -> parse is a fixed
point. A `preset` key in the model section expands to that preset's fields
before explicit keys override them.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from .errors import ConfigError
from .model import ModelConfig
from .training import TrainConfig

# named model sizes; `desk` is the acceptance-suite configuration
PRESETS: dict[str, dict] = {
    "tiny": dict(d_z=512, d_mlp=512, n_blocks=4, heads=4, patch=8, n_routed=16,
                 n_shared=2, top_k=4, channels=4, grid_h=128, grid_w=128),
    "small": dict(d_z=1024, d_mlp=1024, n_blocks=6, heads=8, patch=8, n_routed=16,
                  n_shared=2, top_k=4, channels=4, grid_h=128, grid_w=128),
    "medium": dict(d_z=1024, d_mlp=2048, n_blocks=8, heads=8, patch=8, n_routed=16,
                   n_shared=2, top_k=4, channels=4, grid_h=128, grid_w=128),
    "desk": dict(d_z=32, d_mlp=32, n_blocks=2, heads=2, patch=4, n_routed=8,
                 n_shared=1, top_k=2, channels=1, grid_h=32, grid_w=32),
}


@dataclass
class EvalConfig:
    horizons: list[int] = field(default_factory=lambda: [1, 5, 10, 20])
    blocks: str = "all"
    dump_frames: int = 0
    split_seed: int = 0

    def validate(self) -> None:
        if not self.horizons or any(h < 1 for h in self.horizons):
            raise ConfigError("horizons must be positive rollout depths")
        if self.dump_frames < 0:
            raise ConfigError("dump_frames must be >= 0")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    mixture: list[tuple[str, float]] = field(default_factory=list)
    eval: EvalConfig = field(default_factory=EvalConfig)


_BOOLS = {"true": True, "false": False}


def _parse_scalar(text: str, kind):
    text = text.strip()
    if kind is bool:
        if text.lower() not in _BOOLS:
            raise ConfigError(f"expected true/false, got {text!r}")
        return _BOOLS[text.lower()]
    if kind is int:
        return int(text)
    if kind is float:
        return float(text)
    return text


def _format_scalar(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if value is None:
        return "none"
    return str(value)


_FIELD_KINDS = {
    "model": {
        "d_z": int, "d_mlp": int, "n_blocks": int, "heads": int, "patch": int,
        "n_routed": int, "n_shared": int, "top_k": int, "w_bal": float,
        "channels": int, "t_window": int, "grid_h": int, "grid_w": int,
        "activation": str, "router_kernel": int, "expert_kernel": int,
        "mode_cap": int,
    },
    "train": {
        "peak_lr": float, "epochs": int, "warmup_fraction": float,
        "batch_size": int, "beta1": float, "beta2": float,
        "weight_decay": float, "eps_coef": float, "seed": int,
        "steps_per_epoch": int, "phase": str, "clip_norm": float,
    },
    "eval": {
        "horizons": list, "blocks": str, "dump_frames": int, "split_seed": int,
    },
}


def parse_config(text: str) -> RunConfig:
    sections: dict[str, list[tuple[str, str]]] = {}
    current: str | None = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.endswith("{"):
            name = line[:-1].strip()
            if name not in ("model", "train", "data", "eval"):
                raise ConfigError(f"line {lineno}: unknown section {name!r}")
            if current is not None:
                raise ConfigError(f"line {lineno}: nested section {name!r}")
            if name in sections:
                raise ConfigError(f"line {lineno}: duplicate section {name!r}")
            sections[name] = []
            current = name
            continue
        if line == "}":
            if current is None:
                raise ConfigError(f"line {lineno}: unmatched closing brace")
            current = None
            continue
        if current is None:
            raise ConfigError(f"line {lineno}: key outside any section")
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = line.split("=", 1)
        sections[current].append((key.strip(), value.strip()))
    if current is not None:
        raise ConfigError("unterminated section at end of file")

    cfg = RunConfig()

    model_kv = dict()
    for key, value in sections.get("model", []):
        if key == "preset":
            if value not in PRESETS:
                raise ConfigError(f"unknown preset {value!r}; have {sorted(PRESETS)}")
            for pk, pv in PRESETS[value].items():
                model_kv.setdefault(pk, pv)
            continue
        if key not in _FIELD_KINDS["model"]:
            raise ConfigError(f"unknown model key {key!r}")
        if key == "mode_cap" and value.lower() == "none":
            model_kv[key] = None
        else:
            model_kv[key] = _parse_scalar(value, _FIELD_KINDS["model"][key])
    for key, value in model_kv.items():
        setattr(cfg.model, key, value)

    for key, value in sections.get("train", []):
        if key not in _FIELD_KINDS["train"]:
            raise ConfigError(f"unknown train key {key!r}")
        setattr(cfg.train, key, _parse_scalar(value, _FIELD_KINDS["train"][key]))

    for key, value in sections.get("data", []):
        if key != "entry":
            raise ConfigError(f"unknown data key {key!r} (expected 'entry')")
        parts = value.rsplit(None, 1)
        if len(parts) == 1:
            cfg.mixture.append((parts[0], 1.0))
        else:
            try:
                weight = float(parts[1])
            except ValueError:
                cfg.mixture.append((value, 1.0))
            else:
                cfg.mixture.append((parts[0], weight))

    for key, value in sections.get("eval", []):
        if key not in _FIELD_KINDS["eval"]:
            raise ConfigError(f"unknown eval key {key!r}")
        if key == "horizons":
            cfg.eval.horizons = [int(v) for v in value.split(",") if v.strip()]
        else:
            setattr(cfg.eval, key, _parse_scalar(value, _FIELD_KINDS["eval"][key]))

    cfg.model.validate()
    cfg.train.validate()
    cfg.eval.validate()
    return cfg


def serialize_config(cfg: RunConfig) -> str:
    lines = ["model {"]
    for key in _FIELD_KINDS["model"]:
        lines.append(f"  {key} = {_format_scalar(getattr(cfg.model, key))}")
    lines.append("}")
    lines.append("train {")
    for key in _FIELD_KINDS["train"]:
        lines.append(f"  {key} = {_format_scalar(getattr(cfg.train, key))}")
    lines.append("}")
    lines.append("data {")
    for path, weight in cfg.mixture:
        lines.append(f"  entry = {path} {_format_scalar(float(weight))}")
    lines.append("}")
    lines.append("eval {")
    lines.append(f"  horizons = {','.join(str(h) for h in cfg.eval.horizons)}")
    lines.append(f"  blocks = {cfg.eval.blocks}")
    lines.append(f"  dump_frames = {cfg.eval.dump_frames}")
    lines.append(f"  split_seed = {cfg.eval.split_seed}")
    lines.append("}")
    return "\n".join(lines) + "\n"
