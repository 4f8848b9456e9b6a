"""Flat ``key = value`` run configuration.

One pair per line, ``#`` starts a comment. Keys are namespaced by module:
``backbone.*``, ``agent.*``, ``reward.*``, ``ppo.*`` and ``eval.*``; any key not
listed in ``KEYS`` is rejected. Missing keys take the defaults below.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from ..backbone import BackboneConfig
from ..ppo import PPOConfig
from ..reward import RewardConfig


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass
class RunConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    d_prime: int = 64
    d_critic: int = 256
    head_bias: float = -3.0
    head_std: float = 0.5
    reward: RewardConfig = field(default_factory=RewardConfig)
    ppo: PPOConfig = field(default_factory=PPOConfig)
    include_cls_in_reduction: bool = True
    proportional_attention: bool = False


def _section_keys(prefix, cls):
    types = {int: int, float: float, bool: _bool, str: str}
    return {f"{prefix}.{f.name}": types[type(f.default)] for f in dataclasses.fields(cls)
            if not (prefix == "backbone" and f.name == "channels")}


KEYS: dict[str, callable] = {
    **_section_keys("backbone", BackboneConfig),
    "agent.d_prime": int,
    "agent.d_critic": int,
    "agent.head_bias": float,
    "agent.head_std": float,
    **_section_keys("reward", RewardConfig),
    **_section_keys("ppo", PPOConfig),
    "eval.include_cls_in_reduction": _bool,
    "eval.proportional_attention": _bool,
}


def parse_config(text: str) -> RunConfig:
    values: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        try:
            values[key] = KEYS[key](val)
        except ValueError as err:
            raise ConfigError(f"line {lineno}: bad value for {key}: {err}") from err

    def section(prefix):
        return {k.split(".", 1)[1]: v for k, v in values.items() if k.startswith(prefix + ".")}

    try:
        return RunConfig(
            backbone=BackboneConfig(**section("backbone")),
            d_prime=values.get("agent.d_prime", 64),
            d_critic=values.get("agent.d_critic", 256),
            head_bias=values.get("agent.head_bias", RunConfig.head_bias),
            head_std=values.get("agent.head_std", RunConfig.head_std),
            reward=RewardConfig(**section("reward")),
            ppo=PPOConfig(**section("ppo")),
            include_cls_in_reduction=values.get("eval.include_cls_in_reduction", True),
            proportional_attention=values.get("eval.proportional_attention", False),
        )
    except ValueError as err:
        raise ConfigError(str(err)) from err


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for f in dataclasses.fields(cfg.backbone):
        if f.name != "channels":
            lines.append(f"backbone.{f.name} = {getattr(cfg.backbone, f.name)}")
    lines += [f"agent.d_prime = {cfg.d_prime}", f"agent.d_critic = {cfg.d_critic}",
              f"agent.head_bias = {cfg.head_bias}", f"agent.head_std = {cfg.head_std}"]
    lines += [f"reward.{f.name} = {getattr(cfg.reward, f.name)}" for f in dataclasses.fields(cfg.reward)]
    lines += [f"ppo.{f.name} = {getattr(cfg.ppo, f.name)}" for f in dataclasses.fields(cfg.ppo)]
    lines += [f"eval.include_cls_in_reduction = {cfg.include_cls_in_reduction}",
              f"eval.proportional_attention = {cfg.proportional_attention}"]
    return "\n".join(lines) + "\n"
