"""Experiment configuration files.

A config is flat ``key = value`` text, one entry per line, ``#`` starting a
comment. ``version`` must be present. Every key below is optional except
``version``; omitted keys take the defaults of :class:`ExperimentConfig`.

Model keys: n_blocks, d_model, n_heads, d_ffn, vocab_size, max_seq_len,
n_classes, rank, mode (lora|elora|aflora), pm_trainable_sites (ffn, attention,
attention+ffn, none).

Training keys: epochs, batch_size, seed, lr, clf_lr, adam_beta1, adam_beta2,
adam_eps, weight_decay, warmup_fraction, t_i_epochs, t_f_epochs (default
0.7 x epochs), score_beta1, score_beta2, score_variant, pairing.

Task keys: task (parity|majority|copy-detect|csv), n_train, n_eval, seq_len,
task_seed, train_csv, eval_csv (for task = csv).

Run keys: output_dir, seeds (comma list, defaults to seed), compare (comma list
of mode:rank arms, e.g. ``lora:8, elora:64, aflora:4``).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields
from pathlib import Path

from .adapters import AdapterMode
from .errors import ConfigError
from .model import ModelConfig
from .tasks import TASK_KINDS, SyntheticTask
from .trainer import TrainConfig

CONFIG_VERSION = 1

_MODEL_KEYS = [f.name for f in fields(ModelConfig)]
_TRAIN_KEYS = [f.name for f in fields(TrainConfig)]
_TASK_KEYS = ["task", "n_train", "n_eval", "seq_len", "task_seed", "train_csv", "eval_csv"]
_RUN_KEYS = ["output_dir", "seeds", "compare"]
KNOWN_KEYS = ["version", *_MODEL_KEYS, *_TRAIN_KEYS, *_TASK_KEYS, *_RUN_KEYS]


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    task: str = "parity"
    n_train: int = 2000
    n_eval: int = 500
    seq_len: int = 4
    task_seed: int = 0
    train_csv: str = ""
    eval_csv: str = ""
    output_dir: str = "runs/default"
    seeds: tuple[int, ...] = ()
    compare: tuple[tuple[str, int], ...] = ()
    version: int = CONFIG_VERSION

    def __post_init__(self):
        if self.task not in (*TASK_KINDS, "csv"):
            raise ConfigError(f"unknown task {self.task!r}")
        if self.task == "csv" and not self.train_csv:
            raise ConfigError("task = csv needs train_csv")
        if self.seq_len > self.model.max_seq_len:
            raise ConfigError(f"seq_len={self.seq_len} exceeds max_seq_len={self.model.max_seq_len}")
        if not self.seeds:
            self.seeds = (self.train.seed,)
        self.seeds = tuple(int(s) for s in self.seeds)
        self.compare = tuple((AdapterMode.parse(m).value, int(r)) for m, r in self.compare)

    def synthetic_task(self) -> SyntheticTask:
        return SyntheticTask(self.task, self.n_train, self.n_eval, self.seq_len, self.model.vocab_size, self.task_seed)

    def values(self) -> dict[str, object]:
        out: dict[str, object] = {"version": self.version}
        out.update(self.model.to_dict())
        out.update(self.train.to_dict())
        for key in ("task", "n_train", "n_eval", "seq_len", "task_seed", "train_csv", "eval_csv", "output_dir"):
            out[key] = getattr(self, key)
        out["seeds"] = list(self.seeds)
        out["compare"] = [f"{m}:{r}" for m, r in self.compare]
        return out

    def config_hash(self) -> str:
        return hashlib.sha256(serialize(self).encode("utf-8")).hexdigest()[:16]


def _format(value) -> str:
    if isinstance(value, (list, tuple)):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    if value is None:
        return ""
    return str(value)


def serialize(config: ExperimentConfig) -> str:
    lines = [f"{key} = {_format(value)}" for key, value in config.values().items()]
    return "\n".join(lines) + "\n"


def _coerce(key: str, raw: str, default):
    if key in ("seeds",):
        return tuple(int(v) for v in raw.split(",") if v.strip())
    if key == "compare":
        arms = []
        for item in raw.split(","):
            if not item.strip():
                continue
            mode, sep, rank = item.partition(":")
            if not sep:
                raise ValueError(f"compare arm {item.strip()!r} must look like mode:rank")
            arms.append((mode.strip(), int(rank)))
        return tuple(arms)
    if key == "pm_trainable_sites":
        return raw
    if key == "t_f_epochs":
        return float(raw) if raw else None
    if isinstance(default, bool):
        return raw.lower() in ("1", "true", "yes")
    if isinstance(default, int) and not isinstance(default, bool) and not hasattr(default, "value"):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def parse(text: str) -> ExperimentConfig:
    """Parse config text; errors carry the offending line number."""
    raw: dict[str, tuple[str, int]] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        key, sep, value = stripped.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"expected 'key = value', got {line.strip()!r}", line=lineno)
        if key not in KNOWN_KEYS:
            raise ConfigError(f"unknown key {key!r}", line=lineno)
        if key in raw:
            raise ConfigError(f"duplicate key {key!r} (first set on line {raw[key][1]})", line=lineno)
        raw[key] = (value.strip(), lineno)

    if "version" not in raw:
        raise ConfigError("missing required key 'version'", line=1)
    try:
        version = int(raw["version"][0])
    except ValueError:
        raise ConfigError(f"version must be an integer, got {raw['version'][0]!r}", line=raw["version"][1]) from None
    if version != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {version}", line=raw["version"][1])

    defaults = {**ModelConfig().to_dict(), **TrainConfig().to_dict(), **ExperimentConfig().values()}
    values: dict[str, object] = {}
    for key, (value, lineno) in raw.items():
        if key == "version":
            continue
        try:
            values[key] = _coerce(key, value, defaults.get(key))
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {exc}", line=lineno) from None

    def section(keys, cls):
        kwargs = {k: values[k] for k in keys if k in values}
        try:
            return cls(**kwargs)
        except ConfigError as exc:
            lines = [raw[k][1] for k in kwargs]
            raise ConfigError(str(exc), line=min(lines) if lines else None) from None

    model = section(_MODEL_KEYS, ModelConfig)
    train = section(_TRAIN_KEYS, TrainConfig)
    rest = {k: values[k] for k in (*_TASK_KEYS, *_RUN_KEYS) if k in values}
    try:
        return ExperimentConfig(model=model, train=train, version=version, **rest)
    except ConfigError as exc:
        lines = [raw[k][1] for k in rest]
        raise ConfigError(str(exc), line=min(lines) if lines else None) from None


def load(path: str | Path) -> ExperimentConfig:
    return parse(Path(path).read_text(encoding="utf-8"))
