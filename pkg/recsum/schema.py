from __future__ import annotations

from collections import UserDict
import dataclasses
from enum import Enum
import inspect
from pathlib import Path
from typing import Any, Literal, Mapping, Union, final, get_type_hints
from typing_extensions import Annotated, get_args, get_origin

from tarina.lang import lang

from .core import Field
from .exception import ValidateFailed
from .fields import BOOLEAN, FLOAT, INTEGER, PATH, STRING, ChoiceField, OptionalField, combine
from .util import CUnionType

_BUILTIN_FIELDS: dict[Any, Field] = {
    int: INTEGER,
    float: FLOAT,
    bool: BOOLEAN,
    str: STRING,
    Path: PATH,
}


def _annotated_field(item: Any) -> Field:
    org, *meta = get_args(item)
    if given := next((i for i in meta if isinstance(i, Field)), None):
        return given
    base = field_for(org)
    validators = [i for i in meta if callable(i) and not isinstance(i, Field)]
    return combine(
        base,
        alias=al[-1] if (al := [i for i in meta if isinstance(i, str)]) else base.alias,
        validator=(lambda x: all(i(x) for i in validators)) if validators else None,
    )


def field_for(item: Any) -> Field:
    """将类型注解转为 Field"""
    if isinstance(item, Field):
        return item
    if item in _BUILTIN_FIELDS:
        return _BUILTIN_FIELDS[item]
    origin = get_origin(item)
    if origin is Annotated:
        return _annotated_field(item)
    if origin is Literal:
        return ChoiceField({a: a for a in get_args(item)})
    if origin is Union or origin is CUnionType:
        args = [a for a in get_args(item) if a is not type(None)]
        if len(args) == 1 and len(get_args(item)) == 2:
            return OptionalField(field_for(args[0]))
        raise TypeError(f"unsupported union {item}")
    if inspect.isclass(item) and issubclass(item, Enum):
        return ChoiceField.of_enum(item)
    raise TypeError(f"no field for annotation {item!r}")


@final
class Schema(UserDict):
    """dotted config key -> Field"""

    def __init__(self, name: str):
        self.name = name
        super().__init__()

    def set(self, key: str, target: Field, cover: bool = True):
        if key not in self.data or cover:
            self.data[key] = target

    def merge(self, other: Mapping[str, Field]):
        for k in other:
            self.set(k, other[k])

    def convert(self, key: str, raw: Any) -> Any:
        if key not in self.data:
            raise ValidateFailed(
                lang.require("recsum", "error.unknown_key").format(
                    key=key, known=", ".join(sorted(self.data))
                )
            )
        return self.data[key].match(raw)

    def resolve(self, raw: Mapping[str, Any]) -> dict[str, Any]:
        """convert every raw value, failing on the first unknown key or bad value"""
        return {key: self.convert(key, value) for key, value in raw.items()}


def schema_of(cls: type, section: str, schema: Schema | None = None) -> Schema:
    """build (or extend) a schema from a config dataclass's annotated fields"""
    schema = schema if schema is not None else Schema(section)
    hints = get_type_hints(cls, include_extras=True)
    for f in dataclasses.fields(cls):
        if not f.init:
            continue
        schema.set(f"{section}.{f.name}", field_for(hints[f.name]))
    return schema


__all__ = ["Schema", "field_for", "schema_of"]
