"""Run configuration.

A config file is UTF-8 text with one ``section.key = value`` pair per line;
``#`` starts a comment. ``--set section.key=value`` flags override the file and
the fully resolved configuration is written back in the same format.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Optional
from typing_extensions import Annotated

from tarina.lang import lang
import torch

from .exception import ValidateFailed
from .fields import POSITIVE_INT, RATIO
from .model import EncoderConfig
from .pretrain import PretrainConfig
from .rltrain import RLConfig
from .schema import Schema, schema_of
from .segmentation import KTSConfig


@dataclass(frozen=True)
class RunSection:
    seed: int = 0
    """fans out into every random stream of the run"""
    precision: Annotated[int, lambda x: x in (32, 64), "32 | 64"] = 32
    workers: Annotated[Optional[int], lambda x: x is None or x > 0, "int > 0 | auto"] = None
    output: Path = Path("runs")


@dataclass(frozen=True)
class InferenceConfig:
    budget_ratio: Annotated[float, RATIO] = 0.15
    sequential_only: bool = False
    batch_size: Annotated[int, POSITIVE_INT] = 64


SECTIONS: dict[str, type] = {
    "run": RunSection,
    "model": EncoderConfig,
    "kts": KTSConfig,
    "pretrain": PretrainConfig,
    "rl": RLConfig,
    "inference": InferenceConfig,
}


@dataclass(frozen=True)
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    model: EncoderConfig = field(default_factory=EncoderConfig)
    kts: KTSConfig = field(default_factory=KTSConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    rl: RLConfig = field(default_factory=RLConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)

    @property
    def dtype(self) -> torch.dtype:
        return torch.float64 if self.run.precision == 64 else torch.float32

    def items(self) -> Iterable[tuple[str, Any]]:
        for section in SECTIONS:
            value = getattr(self, section)
            for f in dataclasses.fields(value):
                yield f"{section}.{f.name}", getattr(value, f.name)

    def to_text(self) -> str:
        return "".join(f"{key} = {format_value(value)}\n" for key, value in self.items())


def format_value(value: Any) -> str:
    if value is None:
        return "auto"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, Enum):
        return str(value.value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def run_schema() -> Schema:
    schema = Schema("recsum")
    for section, cls in SECTIONS.items():
        schema_of(cls, section, schema)
    return schema


def parse_pairs(lines: Iterable[str], source: str = "<args>") -> dict[str, str]:
    raw: dict[str, str] = {}
    for number, line in enumerate(lines, 1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        key, sep, value = text.partition("=")
        key = key.strip()
        if not sep or "." not in key:
            raise ValidateFailed(lang.require("recsum", "error.config_line").format(line=number, path=source))
        raw[key] = value.strip()
    return raw


def read_config_file(path: str | Path) -> dict[str, str]:
    path = Path(path)
    with path.open("r", encoding="utf-8") as f:
        return parse_pairs(f, str(path))


def build_config(raw: dict[str, Any]) -> RunConfig:
    """Typed config from raw ``section.key`` values; section seeds default to ``run.seed``."""
    resolved = run_schema().resolve(raw)
    grouped: dict[str, dict[str, Any]] = {s: {} for s in SECTIONS}
    for key, value in resolved.items():
        section, name = key.split(".", 1)
        grouped[section][name] = value
    run = RunSection(**grouped["run"])
    for section in ("pretrain", "rl"):
        grouped[section].setdefault("seed", run.seed)
    return RunConfig(run=run, **{s: SECTIONS[s](**grouped[s]) for s in SECTIONS if s != "run"})


def load_config(path: str | Path | None = None, overrides: Iterable[str] = ()) -> RunConfig:
    raw = read_config_file(path) if path is not None else {}
    raw.update(parse_pairs(overrides))
    return build_config(raw)


def write_snapshot(directory: str | Path, config: RunConfig, name: str = "config.resolved.txt") -> Path:
    path = Path(directory) / name
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(config.to_text(), encoding="utf-8")
    return path


__all__ = [
    "InferenceConfig",
    "RunConfig",
    "RunSection",
    "build_config",
    "format_value",
    "load_config",
    "parse_pairs",
    "read_config_file",
    "run_schema",
    "write_snapshot",
]
