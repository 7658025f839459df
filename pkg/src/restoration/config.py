"""Run configuration: one file with a section per module"""

import json
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from pydantic import BaseModel, ConfigDict, ValidationError, model_validator

from .curation import DataConfig
from .degrade import DegradeConfig
from .evaluate import EvalConfig
from .model import ModelConfig
from .train import TrainConfig
from .types import ConfigError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class PathsConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    data_root: Path = Path("data")
    output_root: Path = Path("runs")
    checkpoint: Optional[Path] = None


class GeometryConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    face_side: int = 128


class IdentityConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    embedder: str = "toy"
    command: Optional[str] = None
    dim: int = 128
    timeout: float = 120.0

    def backend_kwargs(self) -> Dict[str, Any]:
        if self.embedder == "external":
            return {"command": self.command or "", "dim": self.dim, "timeout": self.timeout}
        return {"dim": self.dim}


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    seed: int = 0
    log_level: str = "INFO"
    paths: PathsConfig = PathsConfig()
    geometry: GeometryConfig = GeometryConfig()
    degrade: DegradeConfig = DegradeConfig()
    identity: IdentityConfig = IdentityConfig()
    model: ModelConfig = ModelConfig()
    data: DataConfig = DataConfig()
    train: TrainConfig = TrainConfig()
    eval: EvalConfig = EvalConfig()

    @model_validator(mode="after")
    def _check_consistency(self) -> "RunConfig":
        if self.data.size % (8 * self.degrade.downscale_factor):
            raise ValueError(
                f"data.size {self.data.size} must be divisible by "
                f"8 x downscale_factor ({8 * self.degrade.downscale_factor})"
            )
        if self.eval.face_side != self.geometry.face_side:
            self.eval = self.eval.model_copy(update={"face_side": self.geometry.face_side})
        if self.data.face_side != self.geometry.face_side:
            self.data = self.data.model_copy(update={"face_side": self.geometry.face_side})
        return self

    def with_seed(self, seed: Optional[int]) -> "RunConfig":
        """Apply a --seed override; the training seed follows the global one"""
        seed = self.seed if seed is None else seed
        return self.model_copy(
            update={"seed": seed, "train": self.train.model_copy(update={"seed": seed})}
        )


def _read_file(path: Path) -> Dict[str, Any]:
    try:
        if path.suffix.lower() == ".json":
            return json.loads(path.read_text(encoding="utf-8"))
        with open(path, "rb") as f:
            return tomllib.load(f)
    except OSError as e:
        raise ConfigError(f"Cannot read config {path}: {e}") from e
    except (ValueError, tomllib.TOMLDecodeError) as e:
        raise ConfigError(f"Cannot parse config {path}: {e}") from e


def load_config(path: Optional[Union[str, Path]] = None, seed: Optional[int] = None) -> RunConfig:
    """Defaults, overlaid with a TOML or JSON file, then the seed override"""
    data: Dict[str, Any] = {}
    if path is not None:
        data = _read_file(Path(path))
    try:
        cfg = RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"Invalid configuration: {e}") from e
    if seed is not None or "seed" not in data.get("train", {}):
        cfg = cfg.with_seed(seed)
    return cfg


def _describe(model: BaseModel, prefix: str) -> List[str]:
    lines: List[str] = []
    scalars = []
    nested = []
    for name in type(model).model_fields:
        value = getattr(model, name)
        if isinstance(value, BaseModel):
            nested.append((name, value))
        else:
            scalars.append((name, value))
    if prefix:
        lines.append(f"[{prefix}]")
    for name, value in scalars:
        if value is None:
            lines.append(f"# {name} = (unset)")
        else:
            lines.append(f"{name} = {_toml_value(value)}")
    for name, value in nested:
        lines.append("")
        lines += _describe(value, f"{prefix}.{name}" if prefix else name)
    return lines


def _toml_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, Path):
        return json.dumps(str(value))
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    return json.dumps(str(value))


def config_reference() -> str:
    """Every key with its default, as a TOML document"""
    return "\n".join(_describe(RunConfig(), "")) + "\n"
