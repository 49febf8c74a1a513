"""Experiment arguments.

One dataclass per config section, each with ``update_from_dict``; values
arriving as text are coerced by the type of the field's default.
"""
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Dict, Tuple

from common.errors import ConfigError
from common.synthdata import CORRUPTIONS, TASKS

STRATEGIES = ("fixed-avg", "weighted", "selective", "baseline")
ALGORITHMS = ("ddpg", "reinforce")
SEG_LOSSES = ("bce", "dice")


def parse_value(default, text: str, key: str):
    text = text.strip()
    try:
        if isinstance(default, bool):
            lowered = text.lower()
            if lowered in ("true", "yes", "on", "1"):
                return True
            if lowered in ("false", "no", "off", "0"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(float(part) for part in text.split(",") if part.strip())
    except ValueError:
        raise ConfigError(f"cannot parse {text!r} for {key}", key=key) from None
    return text


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(repr(float(v)) for v in value)
    return str(value)


class ArgsSection:
    section = ""

    def update_from_dict(self, new_values: Dict[str, Any]):
        if not isinstance(new_values, dict):
            raise TypeError(f"{new_values} is not a Python dict.")
        known = {f.name: f for f in fields(self)}
        for key, value in new_values.items():
            name = f"{self.section}.{key}"
            if key not in known:
                raise ConfigError(f"unknown key {name}", key=name)
            default = getattr(self, key)
            if isinstance(value, str) and not isinstance(default, str):
                value = parse_value(default, value, name)
            elif isinstance(default, tuple):
                value = tuple(float(v) for v in value)
            elif isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
                value = float(value)
            setattr(self, key, value)

    def items(self):
        return sorted(asdict(self).items())

    def _require(self, ok: bool, key: str, message: str):
        if not ok:
            name = f"{self.section}.{key}"
            raise ConfigError(f"{name}: {message}", key=name)


@dataclass
class DataArgs(ArgsSection):
    section = "data"

    task: str = "classification"
    n: int = 2000
    rho: float = 0.3
    corruption: str = "auto"
    groups: int = 30
    image_size: int = 16
    artefact_fraction: float = 0.1
    split: Tuple[float, ...] = (0.7, 0.15, 0.15)
    seed: int = 7
    path: str = ""

    @property
    def corruption_kind(self) -> str:
        if self.corruption == "auto":
            return CORRUPTIONS[self.task][0]
        return self.corruption

    def validate(self):
        self._require(self.task in TASKS, "task", f"must be one of {TASKS}")
        self._require(self.n > 0, "n", "must be positive")
        self._require(0.0 <= self.rho < 1.0, "rho", "must lie in [0, 1)")
        self._require(self.corruption == "auto" or self.corruption in CORRUPTIONS[self.task], "corruption",
                      f"must be auto or one of {CORRUPTIONS[self.task]}")
        self._require(3 < self.groups <= self.n, "groups", "must exceed 3 and not exceed n")
        self._require(self.image_size >= 8 and self.image_size % 4 == 0, "image_size", "must be a multiple of 4, >= 8")
        self._require(0.0 <= self.artefact_fraction < 1.0, "artefact_fraction", "must lie in [0, 1)")
        self._require(len(self.split) == 3 and all(0 <= f <= 1 for f in self.split)
                      and abs(sum(self.split) - 1.0) < 1e-9, "split", "must be three fractions summing to 1")
        self._require(self.seed >= 0, "seed", "must be >= 0")


@dataclass
class EnvArgs(ArgsSection):
    section = "env"

    strategy: str = "fixed-avg"
    s_rej: float = 0.05
    selective_keep: str = "highest"
    batch_size: int = 64
    floor: float = 0.1
    alpha_r: float = 0.9
    val_subsample: int = 0
    predictor_optimizer: str = "adam"
    predictor_lr: float = 1e-3
    seg_loss: str = "bce"

    def validate(self):
        self._require(self.strategy in STRATEGIES, "strategy", f"must be one of {STRATEGIES}")
        self._require(0.0 <= self.s_rej < 1.0, "s_rej", "must lie in [0, 1)")
        self._require(self.selective_keep in ("highest", "lowest"), "selective_keep", "must be highest or lowest")
        self._require(self.batch_size >= 1, "batch_size", "must be >= 1")
        self._require(0.0 <= self.floor <= 0.5, "floor", "must lie in [0, 0.5]")
        self._require(0.0 <= self.alpha_r <= 1.0, "alpha_r", "must lie in [0, 1]")
        self._require(self.val_subsample >= 0, "val_subsample", "must be >= 0")
        self._require(self.predictor_optimizer in ("sgd", "adam"), "predictor_optimizer", "must be sgd or adam")
        self._require(self.predictor_lr >= 0, "predictor_lr", "must be >= 0")
        self._require(self.seg_loss in SEG_LOSSES, "seg_loss", f"must be one of {SEG_LOSSES}")


@dataclass
class DDPGConfig(ArgsSection):
    """Controller optimisation settings (the ``[rl]`` section)."""

    section = "rl"

    algorithm: str = "ddpg"
    gamma: float = 0.95
    tau: float = 0.001
    actor_lr: float = 1e-4
    critic_lr: float = 1e-3
    replay_capacity: int = 10000
    critic_batch: int = 128
    critic_samples_per_transition: int = 8
    episodes_per_update: int = 1
    steps_per_episode: int = 32
    updates_per_iteration: int = 8
    max_iterations: int = 60
    patience: int = 20
    tol: float = 1e-3
    ou_sigma: float = 0.2
    ou_kappa: float = 0.15
    init_seed: int = 0
    seed: int = 0
    baseline_steps: int = 0

    def validate(self):
        self._require(self.algorithm in ALGORITHMS, "algorithm", f"must be one of {ALGORITHMS}")
        self._require(0.0 <= self.gamma <= 1.0, "gamma", "must lie in [0, 1]")
        self._require(0.0 < self.tau <= 1.0, "tau", "must lie in (0, 1]")
        self._require(self.actor_lr >= 0, "actor_lr", "must be >= 0")
        self._require(self.critic_lr >= 0, "critic_lr", "must be >= 0")
        for key in ("replay_capacity", "critic_batch", "critic_samples_per_transition",
                    "episodes_per_update", "steps_per_episode", "patience"):
            self._require(getattr(self, key) >= 1, key, "must be >= 1")
        for key in ("updates_per_iteration", "max_iterations", "baseline_steps", "init_seed", "seed"):
            self._require(getattr(self, key) >= 0, key, "must be >= 0")
        self._require(self.tol >= 0, "tol", "must be >= 0")
        self._require(self.ou_sigma >= 0, "ou_sigma", "must be >= 0")
        self._require(0.0 <= self.ou_kappa <= 1.0, "ou_kappa", "must lie in [0, 1]")


@dataclass
class EvalArgs(ArgsSection):
    section = "eval"

    ratios: Tuple[float, ...] = (0.0, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3)
    contingency_fraction: float = 0.0
    repeats: int = 1
    output_dir: str = "runs"
    tensorboard: bool = True
    silent: bool = False
    diagnostic_samples: int = 512

    def fraction_for(self, task: str) -> float:
        """0 means the per-task default: 5 % classification, 15 % segmentation."""
        if self.contingency_fraction > 0:
            return self.contingency_fraction
        return 0.05 if task == "classification" else 0.15

    def validate(self):
        self._require(len(self.ratios) > 0 and all(0.0 <= r < 1.0 for r in self.ratios), "ratios",
                      "must be values in [0, 1)")
        self._require(0.0 <= self.contingency_fraction < 1.0, "contingency_fraction", "must lie in [0, 1)")
        self._require(self.repeats >= 1, "repeats", "must be >= 1")
        self._require(self.diagnostic_samples >= 0, "diagnostic_samples", "must be >= 0")


SECTION_ORDER = ("data", "env", "rl", "eval")


@dataclass
class ExperimentConfig:
    data: DataArgs = field(default_factory=DataArgs)
    env: EnvArgs = field(default_factory=EnvArgs)
    rl: DDPGConfig = field(default_factory=DDPGConfig)
    eval: EvalArgs = field(default_factory=EvalArgs)

    def sections(self):
        return [(name, getattr(self, name)) for name in SECTION_ORDER]

    def update_from_dict(self, new_values: Dict[str, Any]):
        """Accepts ``{"rl": {"gamma": 0.9}}`` or dotted ``{"rl.gamma": 0.9}``."""
        for key, value in new_values.items():
            if isinstance(value, dict):
                self._section(key).update_from_dict(value)
            else:
                section, _, name = key.partition(".")
                if not name:
                    raise ConfigError(f"key {key} needs a section", key=key)
                self._section(section).update_from_dict({name: value})
        return self

    def _section(self, name) -> ArgsSection:
        if name not in SECTION_ORDER:
            raise ConfigError(f"unknown section [{name}]", key=name)
        return getattr(self, name)

    def validate(self) -> "ExperimentConfig":
        for _, section in self.sections():
            section.validate()
        return self

    def to_dict(self) -> Dict[str, Dict[str, Any]]:
        return {name: dict(section.items()) for name, section in self.sections()}
