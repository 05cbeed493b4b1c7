"""
Layered run configuration.

Precedence, lowest first: built-in defaults, a YAML file, environment
variables ``PSGMAE_<SECTION>_<FIELD>``, then command-line flags. The merged
result is snapshotted as YAML into every run directory; passing that
snapshot back with ``--config`` reproduces the run.
"""

import logging
import os
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterator, Mapping, Optional, Union

import yaml

from src.epochs import NormConfig
from src.errors import InvalidConfig, IoFailure
from src.losses import IcclConfig
from src.model import ModelConfig
from src.synthetic import SynthConfig
from src.training import HeadConfig, TrainConfig

logger = logging.getLogger(__name__)

ENV_PREFIX = "PSGMAE_"
SNAPSHOT_NAME = "config_snapshot.yaml"
LOCK_NAME = ".lock"

SECTIONS = {
    "synth": SynthConfig,
    "norm": NormConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "iccl": IcclConfig,
    "head": HeadConfig,
}


@dataclass
class AppConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    norm: NormConfig = field(default_factory=NormConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    iccl: IcclConfig = field(default_factory=IcclConfig)
    head: HeadConfig = field(default_factory=HeadConfig)

    def to_dict(self) -> Dict[str, Dict[str, Any]]:
        return {name: getattr(self, name).to_dict() for name in SECTIONS}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "AppConfig":
        unknown = set(data) - set(SECTIONS)
        if unknown:
            raise InvalidConfig(f"Unknown config sections: {sorted(unknown)}")
        return cls(**{name: SECTIONS[name].from_dict(data.get(name) or {}) for name in SECTIONS})


def _merge(base: Dict[str, Dict[str, Any]], updates: Mapping[str, Mapping[str, Any]]) -> None:
    for section, values in updates.items():
        if section not in SECTIONS:
            raise InvalidConfig(f"Unknown config section {section!r}")
        if values is None:
            continue
        if not isinstance(values, Mapping):
            raise InvalidConfig(f"Section {section!r} must be a mapping")
        base.setdefault(section, {}).update(values)


def read_yaml(path: Union[str, Path]) -> Dict[str, Dict[str, Any]]:
    path = Path(path)
    if not path.exists():
        raise IoFailure(f"Config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as exc:
        raise InvalidConfig(f"Cannot parse {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise InvalidConfig(f"{path} must hold a mapping of sections")
    return data


def env_overrides(environ: Optional[Mapping[str, str]] = None) -> Dict[str, Dict[str, Any]]:
    """
    Collect ``PSGMAE_<SECTION>_<FIELD>`` variables.

    Values are parsed as YAML scalars or lists, e.g.
    ``PSGMAE_TRAIN_LEARNING_RATE=0.0005`` or ``PSGMAE_MODEL_HEAD_BRANCH_KERNELS=[3,5]``.
    """
    environ = os.environ if environ is None else environ
    out: Dict[str, Dict[str, Any]] = {}
    for key, raw in environ.items():
        if not key.startswith(ENV_PREFIX):
            continue
        section, _, name = key[len(ENV_PREFIX):].lower().partition("_")
        if section not in SECTIONS or not name:
            raise InvalidConfig(f"Unrecognized environment override {key}")
        if name not in SECTIONS[section].field_types():
            raise InvalidConfig(f"Unknown field {name!r} in environment override {key}")
        try:
            out.setdefault(section, {})[name] = yaml.safe_load(raw)
        except yaml.YAMLError as exc:
            raise InvalidConfig(f"Cannot parse {key}={raw!r}") from exc
    return out


def load_config(path: Optional[Union[str, Path]] = None,
                overrides: Optional[Mapping[str, Mapping[str, Any]]] = None,
                environ: Optional[Mapping[str, str]] = None) -> AppConfig:
    """
    Merge defaults, the YAML file, environment overrides and flag overrides.

    Args:
        path: Optional YAML file with sections synth/norm/model/train/iccl/head.
        overrides: Section -> field -> value from command-line flags; None
            values are ignored.
        environ: Environment mapping, ``os.environ`` by default.

    Raises:
        InvalidConfig: unknown sections or fields, or out-of-range values.
    """
    merged: Dict[str, Dict[str, Any]] = AppConfig().to_dict()
    if path is not None:
        _merge(merged, read_yaml(path))
    _merge(merged, env_overrides(environ))
    if overrides:
        _merge(merged, {s: {k: v for k, v in values.items() if v is not None} for s, values in overrides.items()})
    return AppConfig.from_dict(merged)


def write_snapshot(cfg: AppConfig, run_dir: Union[str, Path]) -> Path:
    path = Path(run_dir) / SNAPSHOT_NAME
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False), encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"Cannot write {path}: {exc}") from exc
    return path


def _lock_holder_alive(lock: Path) -> bool:
    """Whether the PID recorded in ``lock`` names a running process."""
    try:
        text = lock.read_text(encoding="ascii").strip()
    except (FileNotFoundError, UnicodeDecodeError):
        return False
    except OSError:
        return True
    if not text:
        # created but its PID not yet written
        return True
    try:
        pid = int(text)
    except ValueError:
        return False
    if pid <= 0:
        return False
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    return True


def _acquire(lock: Path) -> int:
    return os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)


@contextmanager
def run_lock(run_dir: Union[str, Path]) -> Iterator[Path]:
    """
    Hold an exclusive lock file in ``run_dir`` for the duration of a command.

    The lock file holds the owner's PID. A lock naming a process that no
    longer runs, or holding garbage, is left over from a crashed run and is
    taken over.

    Raises:
        InvalidConfig: another running invocation already holds the directory.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    lock = run_dir / LOCK_NAME
    try:
        fd = _acquire(lock)
    except FileExistsError as exc:
        if _lock_holder_alive(lock):
            raise InvalidConfig(f"Output directory {run_dir} is in use by another invocation ({lock})") from exc
        logger.warning("Removing stale lock %s", lock)
        lock.unlink(missing_ok=True)
        try:
            fd = _acquire(lock)
        except FileExistsError as retry_exc:
            raise InvalidConfig(f"Output directory {run_dir} is in use by another invocation ({lock})") \
                from retry_exc
    try:
        os.write(fd, str(os.getpid()).encode("ascii"))
        os.close(fd)
        yield run_dir
    finally:
        lock.unlink(missing_ok=True)
