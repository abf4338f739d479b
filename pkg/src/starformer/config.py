"""Run configuration tree: defaults, YAML files and dotted ``key=value`` overrides.

Precedence is command line > file > defaults. Every command writes the fully
resolved tree next to its outputs so a run can be repeated from it alone.
"""

from __future__ import annotations

import copy
import re
from pathlib import Path
from typing import Any, Iterable, Mapping

import yaml

from starformer.envs import EnvConfig, EnvKind, make_env
from starformer.model import ConfigError, ModelConfig, variant_config
from starformer.training import TrainConfig

SNAPSHOT_NAME = "config.yaml"

# frame stack / skip per environment when left unset
ENV_DEFAULTS = {
    EnvKind.CATCH: {"frame_stack": 4, "frame_skip": 1},
    EnvKind.REACH: {"frame_stack": 3, "frame_skip": 2},
}

_MODEL_SKIP = {"step_embed_mode", "seq_state_mode", "connectivity", "action_kind", "action_dim", "frame_stack"}


class _Loader(yaml.SafeLoader):
    """Safe loader that also reads ``1e-3`` (no dot) as a float."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(
        r"""^(?:[-+]?(?:[0-9][0-9_]*)\.[0-9_]*(?:[eE][-+]?[0-9]+)?
        |[-+]?(?:[0-9][0-9_]*)(?:[eE][-+]?[0-9]+)
        |\.[0-9_]+(?:[eE][-+]?[0-9]+)?
        |[-+]?\.(?:inf|Inf|INF)
        |\.(?:nan|NaN|NAN))$""",
        re.X,
    ),
    list("-+0123456789."),
)


def _load_yaml(text: str) -> Any:
    return yaml.load(text, Loader=_Loader)


def default_tree() -> dict[str, Any]:
    model = {k: v for k, v in ModelConfig().to_dict().items() if k not in _MODEL_SKIP}
    return {
        "env": {"kind": "catch", "frame_stack": None, "frame_skip": None, "max_steps": 50},
        "data": {"path": None, "episodes": 500, "epsilon": 0.9, "seed": 0},
        "model": {"variant": "P+C", **model},
        "train": TrainConfig().to_dict(),
        "eval": {"episodes": 10, "seeds": [0, 1, 2], "target_rtg": None},
        "ablate": {
            "variants": ["P+C", "C+C"],
            "reward_modes": ["stepwise"],
            "seq_lens": [10],
            "seeds": [0],
            "include_dt": False,
        },
        "viz": {"episodes": 1, "timesteps": 5, "layers": [0], "heads": [0, 1]},
    }


def merge(base: dict[str, Any], update: Mapping[str, Any], path: str = "") -> dict[str, Any]:
    """Recursive merge that refuses keys the base tree does not know."""
    out = copy.deepcopy(base)
    for key, value in update.items():
        where = f"{path}{key}"
        if key not in out:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(out[key], dict):
            if not isinstance(value, Mapping):
                raise ConfigError(f"config key {where!r} expects a mapping")
            out[key] = merge(out[key], value, where + ".")
        else:
            out[key] = value
    return out


def parse_override(text: str) -> dict[str, Any]:
    """``"train.lr=1e-3"`` -> ``{"train": {"lr": 0.001}}`` (values parsed as YAML scalars)."""
    key, sep, raw = text.partition("=")
    if not sep or not key.strip():
        raise ConfigError(f"override {text!r} is not of the form key=value")
    value = _load_yaml(raw) if raw.strip() else None
    node: dict[str, Any] = {}
    cursor = node
    parts = key.strip().split(".")
    for part in parts[:-1]:
        cursor[part] = {}
        cursor = cursor[part]
    cursor[parts[-1]] = value
    return node


def load_config(path: str | Path | None = None, overrides: Iterable[str] = ()) -> dict[str, Any]:
    tree = default_tree()
    if path is not None:
        with open(path) as f:
            loaded = _load_yaml(f.read()) or {}
        if not isinstance(loaded, Mapping):
            raise ConfigError(f"{path}: top level must be a mapping")
        tree = merge(tree, loaded)
    for item in overrides:
        tree = merge(tree, parse_override(item))
    return tree


def write_snapshot(tree: Mapping[str, Any], out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / SNAPSHOT_NAME
    with open(path, "w") as f:
        yaml.safe_dump(dict(tree), f, sort_keys=False)
    return path


def env_config(tree: Mapping[str, Any]) -> EnvConfig:
    section = dict(tree["env"])
    try:
        kind = EnvKind(section["kind"])
    except ValueError:
        raise ConfigError(f"unknown env kind {section['kind']!r}; expected catch or reach") from None
    for key, value in ENV_DEFAULTS[kind].items():
        if section.get(key) is None:
            section[key] = value
    section["kind"] = kind
    try:
        return EnvConfig(**section)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def model_config(tree: Mapping[str, Any], env: EnvConfig) -> ModelConfig:
    """Model config for ``env``; action space and frame stack come from the environment."""
    section = dict(tree["model"])
    variant = section.pop("variant")
    space = make_env(env).action_space
    try:
        base = ModelConfig(
            action_kind=space.kind, action_dim=space.dim, frame_stack=env.frame_stack, **section
        )
    except TypeError as exc:
        raise ConfigError(f"model section: {exc}") from None
    return variant_config(variant, base)


def train_config(tree: Mapping[str, Any]) -> TrainConfig:
    try:
        return TrainConfig.from_dict(tree["train"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"train section: {exc}") from None


def with_model(tree: Mapping[str, Any], **values: Any) -> dict[str, Any]:
    out = copy.deepcopy(dict(tree))
    out["model"].update(values)
    return out

