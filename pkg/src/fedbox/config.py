"""Run configuration: dataclass defaults, flat key=value files, CLI overrides.

Precedence is CLI > config file > defaults. The file format is one ``key = value``
per line; ``#`` starts a comment. Tuple-valued fields take comma-separated ints.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    """An invalid configuration value or combination."""


@dataclass
class RunConfig:
    # seeds
    seed: int = 0
    # task data
    n_samples: int = 4000
    dim: int = 32
    num_classes: int = 4
    separation: float = 4.0
    csv_path: str = ""  # when set, loads the client task from CSV instead
    # source task for the black box
    source_classes: int = 6
    source_samples: int = 3000
    bb_hidden: tuple[int, ...] = (48, 32)
    bb_epochs: int = 200
    bb_lr: float = 0.01
    # clients
    n_clients: int = 20
    alpha: float = 0.5
    train_frac: float = 0.2
    participants: int = 0  # 0 means full participation
    # adapter
    d1: int = 24
    d2: int = 8
    ae_hidden: int = 64
    # optimization
    rho: float = 5e-3
    lr_pretrain: float = 1e-4
    gamma1: float = 0.05
    gamma2: float = 0.05
    lr_remap: float = 0.05
    optimizer: str = "adam"  # "adam" | "sgd"
    t_pretrain: int = 30
    t_main: int = 50
    local_epochs: int = 1
    order: int = 1
    estimator: str = "cge"
    coord_subset: int = 0  # 0 means full sweep (or d1+d2 directions for rge)
    # ablation flags
    skip_step1: bool = False
    skip_step2: bool = False
    skip_step3: bool = False
    no_client_embedding: bool = False
    # execution
    parallel_clients: bool = False
    keep_payloads: bool = False

    def validate(self) -> "RunConfig":
        if self.skip_step2 and self.skip_step3:
            raise ConfigError("skip_step2 and skip_step3 together leave nothing to train")
        if self.rho <= 0:
            raise ConfigError("rho must be positive")
        if self.alpha <= 0:
            raise ConfigError("alpha must be positive")
        if not 0 < self.train_frac < 1:
            raise ConfigError("train_frac must be in (0, 1)")
        if self.d1 < 1 or self.d2 < 1:
            raise ConfigError("d1 and d2 must be at least 1")
        if self.order not in (1, 2, 3):
            raise ConfigError("order must be 1, 2, or 3")
        if self.estimator not in ("cge", "rge"):
            raise ConfigError("estimator must be cge or rge")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError("optimizer must be adam or sgd")
        if self.coord_subset < 0 or self.coord_subset > self.d1 + self.d2:
            raise ConfigError("coord_subset must lie in [0, d1+d2]")
        if self.participants < 0 or self.participants > self.n_clients:
            raise ConfigError("participants must lie in [0, n_clients]")
        if self.n_clients < 1:
            raise ConfigError("need at least one client")
        if min(self.t_pretrain, self.t_main, self.local_epochs, self.bb_epochs) < 0:
            raise ConfigError("round and epoch counts must be nonnegative")
        if min(self.lr_pretrain, self.gamma1, self.gamma2, self.lr_remap, self.bb_lr) < 0:
            raise ConfigError("learning rates must be nonnegative")
        if not self.csv_path:
            if self.num_classes < 2 or self.source_classes < 2:
                raise ConfigError("task and source class counts must be at least 2")
            if self.separation < 0:
                raise ConfigError("separation must be nonnegative")
        return self

    def normalized(self) -> "RunConfig":
        """Resolve derived fields: skipping phase 1 zeroes its round count."""
        cfg = dataclasses.replace(self)
        if cfg.skip_step1:
            cfg.t_pretrain = 0
        if cfg.participants == 0:
            cfg = dataclasses.replace(cfg, participants=cfg.n_clients)
        return cfg.validate()

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["bb_hidden"] = list(self.bb_hidden)
        return out


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _coerce(name: str, raw: Any) -> Any:
    if name not in _FIELDS:
        raise ConfigError(f"unknown config key: {name!r}")
    target = _FIELDS[name].type
    if isinstance(raw, str):
        raw = raw.strip()
    try:
        if target == "bool":
            if isinstance(raw, bool):
                return raw
            if str(raw).lower() in ("1", "true", "yes", "on"):
                return True
            if str(raw).lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if target == "int":
            return int(raw)
        if target == "float":
            return float(raw)
        if target == "tuple[int, ...]":
            if isinstance(raw, (tuple, list)):
                return tuple(int(v) for v in raw)
            return tuple(int(v) for v in str(raw).split(",") if v.strip())
        return str(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"bad value for {name!r}: {raw!r}") from None


def load_config_file(path: str | Path) -> dict[str, Any]:
    """Parse a flat ``key = value`` file into typed override values."""
    overrides: dict[str, Any] = {}
    for line_no, line in enumerate(Path(path).read_text().splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{line_no}: expected 'key = value'")
        key, value = stripped.split("=", 1)
        key = key.strip()
        overrides[key] = _coerce(key, value)
    return overrides


def make_config(
    file: str | Path | None = None, overrides: dict[str, Any] | None = None
) -> RunConfig:
    """Build a validated config with precedence CLI overrides > file > defaults."""
    values: dict[str, Any] = {}
    if file is not None:
        values.update(load_config_file(file))
    for key, value in (overrides or {}).items():
        values[key] = _coerce(key, value)
    return RunConfig(**values).validate()
