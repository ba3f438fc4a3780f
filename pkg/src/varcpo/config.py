"""Flat ``section.key = value`` training configuration files.

Lines starting with ``#`` are comments. ``env.*`` keys other than
``env.name`` are passed to the selected environment's config dataclass.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

from .envs import BatteryConfig, IcyLakeConfig


class ConfigError(ValueError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


def _key(name, default, **kw):
    return field(default=default, metadata={"key": name}, **kw)


@dataclass
class TrainConfig:
    env: str = _key("env.name", "icylake")
    env_params: dict = field(default_factory=dict)
    algorithm: str = _key("algo.name", "varcpo")
    objective: str = _key("algo.objective", "reward")
    rho: float = _key("constraint.rho", 15.0)
    epsilon: float = _key("constraint.epsilon", 0.05)
    cost_limit: float | None = _key("constraint.limit", None)
    cost_signal: str = _key("constraint.cost_signal", "raw")
    batch_steps: int = _key("train.batch_steps", 4000)
    total_steps: int = _key("train.total_steps", 1_000_000)
    seed: int = _key("train.seed", 0)
    workers: int = _key("train.workers", 1)
    checkpoint_every: int = _key("train.checkpoint_every", 25)
    init_policy: str | None = _key("train.init_policy", None)
    output_dir: str = _key("train.output_dir", "runs/default")
    lam: float = _key("gae.lam", 0.95)
    delta: float = _key("solver.delta", 0.01)
    cg_iters: int = _key("solver.cg_iters", 20)
    cg_tol: float = _key("solver.cg_tol", 1e-8)
    damping: float = _key("solver.damping", 0.1)
    backtrack_factor: float = _key("solver.backtrack_factor", 0.8)
    max_backtracks: int = _key("solver.max_backtracks", 10)
    critic_lr: float = _key("critic.lr", 1e-3)
    critic_epochs: int = _key("critic.epochs", 40)
    critic_optimizer: str = _key("critic.optimizer", "adam")
    hidden: tuple = _key("net.hidden", (64, 64))

    def problems(self) -> list[str]:
        out = []
        if self.env not in ("icylake", "battery"):
            out.append(f"env.name: unknown environment {self.env!r}")
        if self.algorithm not in ("varcpo", "cpo", "unconstrained"):
            out.append(f"algo.name: unknown algorithm {self.algorithm!r}")
        if self.objective not in ("reward", "cost"):
            out.append(f"algo.objective: must be 'reward' or 'cost', got {self.objective!r}")
        if self.cost_signal not in ("raw", "exceedance"):
            out.append(f"constraint.cost_signal: must be 'raw' or 'exceedance', got {self.cost_signal!r}")
        if self.rho <= 0:
            out.append("constraint.rho: must be positive")
        if not 0 < self.epsilon < 1:
            out.append("constraint.epsilon: must lie in (0, 1)")
        if self.batch_steps < 1:
            out.append("train.batch_steps: must be >= 1")
        if self.total_steps < self.batch_steps:
            out.append("train.total_steps: must be >= train.batch_steps")
        if self.workers < 1 or self.batch_steps < self.workers:
            out.append("train.workers: must be in [1, train.batch_steps]")
        if not 0 <= self.lam <= 1:
            out.append("gae.lam: must lie in [0, 1]")
        if self.delta <= 0:
            out.append("solver.delta: must be positive")
        if self.critic_optimizer not in ("adam", "sgd"):
            out.append("critic.optimizer: must be 'adam' or 'sgd'")
        env_cls = {"icylake": IcyLakeConfig, "battery": BatteryConfig}.get(self.env)
        if env_cls is not None:
            names = {f.name for f in dataclasses.fields(env_cls)}
            out += [f"env.{k}: unknown parameter for {self.env}" for k in self.env_params if k not in names]
        return out

    def validate(self) -> "TrainConfig":
        problems = self.problems()
        if problems:
            raise ConfigError(problems)
        return self

    def dumps(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            if f.name == "env_params":
                continue
            lines.append(f"{f.metadata['key']} = {_format(getattr(self, f.name))}")
            if f.name == "env":
                lines += [f"env.{k} = {_format(v)}" for k, v in sorted(self.env_params.items())]
        return "\n".join(lines) + "\n"

    def hash(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()[:16]


def _format(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, tuple):
        sep = "/" if all(isinstance(x, str) for x in v) else ","
        return sep.join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _convert(text: str, annotation: str):
    text = text.strip()
    ann = annotation.replace(" ", "")
    if "None" in ann and text.lower() == "none":
        return None
    if ann.startswith("bool"):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if ann.startswith("int"):
        return int(text)
    if ann.startswith("float"):
        return float(text)
    if ann.startswith("tuple[str"):
        return tuple(text.split("/"))
    if ann == "tuple":
        return tuple(int(x) for x in text.split(","))
    return text


def parse_config(text: str, source: str = "<config>") -> TrainConfig:
    by_key = {f.metadata["key"]: f for f in dataclasses.fields(TrainConfig) if "key" in f.metadata}
    values, env_raw, problems = {}, {}, []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            problems.append(f"{source}:{lineno}: expected 'key = value'")
            continue
        key, _, val = (s.strip() for s in line.partition("="))
        if key in by_key:
            f = by_key[key]
            try:
                values[f.name] = _convert(val, str(f.type))
            except ValueError as exc:
                problems.append(f"{key}: {exc}")
        elif key.startswith("env."):
            env_raw[key[4:]] = val
        else:
            problems.append(f"{key}: unknown key")
    config = TrainConfig(**values)
    env_cls = {"icylake": IcyLakeConfig, "battery": BatteryConfig}.get(config.env)
    if env_cls is not None:
        types = {f.name: str(f.type) for f in dataclasses.fields(env_cls)}
        for k, v in env_raw.items():
            if k not in types:
                problems.append(f"env.{k}: unknown parameter for {config.env}")
                continue
            try:
                config.env_params[k] = _convert(v, types[k])
            except ValueError as exc:
                problems.append(f"env.{k}: {exc}")
    problems += [p for p in config.problems() if p not in problems]
    if problems:
        raise ConfigError(problems)
    return config


def load_config(path) -> TrainConfig:
    return parse_config(Path(path).read_text(), str(path))
