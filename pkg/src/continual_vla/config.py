"""Experiment configuration: schema, defaults, presets and JSON round-trip.

Configs are single JSON files. Every field has a default, so a file only
needs the values it changes. Unknown keys are rejected. The output root can
be redirected with the ``CONTINUAL_VLA_OUTPUT`` environment variable; no
other setting is read from the environment.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

STRATEGIES = ("multitask", "sequential", "er", "ewc", "infovla")
OUTPUT_ENV = "CONTINUAL_VLA_OUTPUT"


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


@dataclass
class BenchmarkConfig:
    """Bi-kNm layout: ``base_count`` joint base tasks, then ``steps`` stages of ``per_step`` tasks."""

    n_tasks: int = 5
    base_count: int = 1
    steps: int = 4
    per_step: int = 1
    suite_seed: int = 0
    demos_per_task: int = 100

    @property
    def name(self) -> str:
        return f"B{self.base_count}-{self.steps}N{self.per_step}"

    def stage_groups(self) -> list[list[int]]:
        groups = [list(range(self.base_count))] if self.base_count > 0 else []
        start = self.base_count
        for _ in range(self.steps):
            groups.append(list(range(start, start + self.per_step)))
            start += self.per_step
        return groups

    def stage_labels(self) -> list[str]:
        if self.base_count > 0:
            return ["Base"] + [f"Task{j + 1}" for j in range(self.steps)]
        return [f"Task{j + 1}" for j in range(self.steps)]


@dataclass
class ExperimentConfig:
    benchmark: BenchmarkConfig = field(default_factory=BenchmarkConfig)
    strategy: str = "infovla"
    seeds: list = field(default_factory=lambda: [0])
    # objective knobs
    rac_weight: float = 0.1
    cmi_weight: float = 0.1
    temperature: float = 0.07
    negatives: str = "anchor"
    mi_mode: str = "batch"
    ewc_strength: float = 1000.0
    fisher_samples: int = 64
    replay_fraction: float = 0.5
    # optimisation
    base_iterations: int = 2000
    incremental_iterations: int = 1000
    batch_size: int = 128
    lr: float = 5e-3
    lr_schedule: str = "cosine"
    # evaluation
    eval_episodes: int = 20
    probe_size: int = 32
    parallel_eval: bool = False
    # policy dims
    latent_dim: int = 32
    hidden: int = 64
    euler_steps: int = 10
    mi_bins: int = 8
    mi_hidden: int = 32
    # outputs
    output_dir: str = "runs"
    save_checkpoints: bool = True

    def validate(self) -> ExperimentConfig:
        b = self.benchmark
        for name in ("n_tasks", "steps", "per_step", "demos_per_task"):
            _check(getattr(b, name) >= 1, f"benchmark.{name}", "must be >= 1")
        _check(b.base_count >= 0, "benchmark.base_count", "must be >= 0")
        _check(
            b.base_count + b.steps * b.per_step == b.n_tasks,
            "benchmark",
            f"base_count + steps * per_step must equal n_tasks ({b.base_count} + {b.steps}*{b.per_step} != {b.n_tasks})",
        )
        _check(b.n_tasks <= 12, "benchmark.n_tasks", "the synthetic suite has at most 12 tasks")
        _check(self.strategy in STRATEGIES, "strategy", f"must be one of {', '.join(STRATEGIES)}")
        _check(
            isinstance(self.seeds, list) and len(self.seeds) > 0 and all(isinstance(s, int) and s >= 0 for s in self.seeds),
            "seeds",
            "must be a non-empty list of non-negative integers",
        )
        _check(len(set(self.seeds)) == len(self.seeds), "seeds", "must be distinct")
        _check(self.rac_weight >= 0, "rac_weight", "must be >= 0")
        _check(self.cmi_weight >= 0, "cmi_weight", "must be >= 0")
        _check(self.temperature > 0, "temperature", "must be > 0")
        _check(self.negatives in ("anchor", "student"), "negatives", "must be 'anchor' or 'student'")
        _check(self.mi_mode in ("batch", "independent"), "mi_mode", "must be 'batch' or 'independent'")
        _check(self.ewc_strength >= 0, "ewc_strength", "must be >= 0")
        _check(self.fisher_samples >= 1, "fisher_samples", "must be >= 1")
        _check(0.0 < self.replay_fraction < 1.0, "replay_fraction", "must lie in (0, 1)")
        _check(self.base_iterations >= 1, "base_iterations", "must be >= 1")
        _check(self.incremental_iterations >= 1, "incremental_iterations", "must be >= 1")
        _check(self.batch_size >= 2, "batch_size", "must be >= 2")
        _check(0 < self.lr < 1, "lr", "must lie in (0, 1)")
        _check(self.lr_schedule in ("cosine", "constant"), "lr_schedule", "must be 'cosine' or 'constant'")
        _check(self.eval_episodes >= 1, "eval_episodes", "must be >= 1")
        _check(self.probe_size >= 2, "probe_size", "must be >= 2")
        for name in ("latent_dim", "hidden", "euler_steps", "mi_bins", "mi_hidden"):
            _check(getattr(self, name) >= 1, name, "must be >= 1")
        return self

    # ------------------------------------------------------------ serialise

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> ExperimentConfig:
        if not isinstance(data, dict):
            raise ConfigError("config: top level must be a JSON object")
        data = dict(data)
        bench = data.pop("benchmark", {})
        if not isinstance(bench, dict):
            raise ConfigError("benchmark: must be an object")
        cfg = cls(benchmark=_build(BenchmarkConfig, bench, "benchmark."))
        _apply(cfg, data, "")
        return cfg.validate()

    @classmethod
    def from_json(cls, text: str) -> ExperimentConfig:
        try:
            data = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config: not valid JSON ({e})") from None
        return cls.from_dict(data)

    @classmethod
    def load(cls, path: str | Path) -> ExperimentConfig:
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise ConfigError(f"config: cannot read {path}: {e.strerror}") from None
        return cls.from_json(text)

    def with_overrides(self, **overrides: Any) -> ExperimentConfig:
        """Copy with top-level or ``benchmark.<field>`` overrides applied and validated."""
        data = self.to_dict()
        for key, value in overrides.items():
            if value is None:
                continue
            if key.startswith("benchmark."):
                data["benchmark"][key.split(".", 1)[1]] = value
            else:
                data[key] = value
        return ExperimentConfig.from_dict(data)

    def output_root(self) -> Path:
        return Path(os.environ.get(OUTPUT_ENV) or self.output_dir)


def _check(ok: bool, name: str, msg: str) -> None:
    if not ok:
        raise ConfigError(f"{name}: {msg}")


def _coerce(name: str, value, default):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{name}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{name}: expected a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{name}: expected a list, got {value!r}")
        return list(value)
    return value


def _apply(obj, data: dict, prefix: str) -> None:
    names = {f.name for f in dataclasses.fields(obj)}
    for key, value in data.items():
        if key not in names or key == "benchmark":
            raise ConfigError(f"{prefix}{key}: unknown field")
        setattr(obj, key, _coerce(prefix + key, value, getattr(obj, key)))


def _build(cls, data: dict, prefix: str):
    obj = cls()
    _apply(obj, data, prefix)
    return obj


# ----------------------------------------------------------------- presets


def ci_preset() -> ExperimentConfig:
    """Five tasks, one per stage; sized so a full strategy comparison runs in minutes."""
    return ExperimentConfig().validate()


def paper_schedule_preset() -> ExperimentConfig:
    """Ten tasks, one per stage, long base stage and shorter incremental stages."""
    return ExperimentConfig(
        benchmark=BenchmarkConfig(n_tasks=10, base_count=1, steps=9, per_step=1),
        base_iterations=3000,
        incremental_iterations=600,
    ).validate()


PRESETS = {"ci": ci_preset, "paper-schedule": paper_schedule_preset}
