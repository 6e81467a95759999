from __future__ import annotations

from enum import Enum
import math
import os
from pathlib import Path
from types import MethodType
from typing import Any, Callable, Final, TypeVar, Union, cast

from .core import Field

_T = TypeVar("_T")
_TCase = TypeVar("_TCase")
_E = TypeVar("_E", bound=Enum)


def _not_bool(x: Any) -> bool:
    return x is not True and x is not False


def _to_str(_, x: str | bytes | bytearray) -> str:
    if isinstance(x, (bytes, bytearray)):
        return x.decode()
    return x.value if isinstance(x, Enum) else x


STRING: Final = Field(str, alias="str").accept(Union[str, bytes, bytearray]).convert(_to_str)


def _to_int(_, x: Any) -> int | None:
    if isinstance(x, int):
        return x
    if isinstance(x, float):
        return int(x) if x.is_integer() else None
    try:
        return int(str(x).strip().replace("_", ""))
    except ValueError:
        return None


INTEGER: Final = Field(int, alias="int").accept(...).pre_validate(_not_bool).convert(_to_int)
"""整数字段, 只接受整数样式的量"""


def _to_float(_, x: Any) -> float | None:
    try:
        return float(x)
    except (TypeError, ValueError):
        return None


FLOAT: Final = Field(float, alias="float").accept(...).pre_validate(_not_bool).convert(_to_float)

BOOL_TRUE = {1, "1", "on", "t", "true", "y", "yes"}
BOOL_FALSE = {0, "0", "off", "f", "false", "n", "no"}


def _to_bool(_, x: Any) -> bool | None:
    if x is True or x is False:
        return x
    if isinstance(x, bytes):  # pragma: no cover
        x = x.decode()
    if isinstance(x, str):
        x = x.strip().lower()
    if x in BOOL_TRUE:
        return True
    if x in BOOL_FALSE:
        return False
    return None


BOOLEAN: Final = (
    Field(bool, alias="bool")
    .accept(Union[bool, int, str, bytes])
    .pre_validate(lambda x: not isinstance(x, float))
    .convert(_to_bool)
)
"""宽松布尔字段, 接受 yes/no, on/off, 1/0 与 true/false"""

PATH: Final = (
    Field(Path, alias="path")
    .accept(Union[str, os.PathLike])
    .pre_validate(lambda x: not isinstance(x, str) or bool(x.strip()))
    .convert(lambda _, x: Path(x))
)


class ChoiceField(Field[_TCase]):
    """匹配多种情况的字段"""

    def __init__(self, data: dict[Any, _TCase], alias: str | None = None):
        self.switch = data
        super().__init__(type(next(iter(data.values()))), alias or "|".join(str(k) for k in data))
        self.accept(...).pre_validate(self._known).convert(lambda self, x: self.switch[self._key(x)])

    @staticmethod
    def _key(x: Any) -> Any:
        return x.strip().lower() if isinstance(x, str) else x

    def _known(self, x: Any) -> bool:
        try:
            return self._key(x) in self.switch
        except TypeError:
            return False

    @classmethod
    def of_enum(cls, enum: type[_E]) -> ChoiceField[_E]:
        data: dict[Any, _E] = {}
        for member in enum:
            data[member.value] = member
            data[member] = member
        return cls(data, alias="|".join(str(m.value) for m in enum))  # type: ignore

    def __eq__(self, other):  # pragma: no cover
        return isinstance(other, ChoiceField) and self.switch == other.switch


class OptionalField(Field[Any]):
    """None, 空串与 "none" 视为缺省, 其余交给内部字段"""

    NONE_SPELLINGS = {"", "none", "null", "auto"}

    def __init__(self, base: Field[_T]):
        self.base = base
        super().__init__(alias=f"{base}?")

    def match(self, input_: Any):
        if input_ is None:
            return None
        if isinstance(input_, str) and input_.strip().lower() in self.NONE_SPELLINGS:
            return None
        return self.base.match(input_)

    def __eq__(self, other):  # pragma: no cover
        return isinstance(other, OptionalField) and self.base == other.base


def combine(
    current: Field[_T],
    previous: Field[Any] | None = None,
    alias: str | None = None,
    validator: Callable[[_T], bool] | None = None,
) -> Field[_T]:
    """复制 ``current``, 可选地先经过 ``previous``, 并追加后验证"""
    _new = current.copy()
    if previous:
        _match = cast(MethodType, _new.match).__func__

        def match(self, input_):
            return _match(self, previous.match(input_))

        _new.match = match.__get__(_new)
    if alias:
        _new.alias = alias
    if validator and type(_new).match is not Field.match:
        _match = cast(MethodType, _new.match).__func__

        def match(self, input_):
            res = _match(self, input_)
            if not validator(res):
                raise self._fail(input_)
            return res

        _new.match = match.__get__(_new)
    elif validator:
        if _new._converter is None:
            _new.convert(lambda _, x: x)
        before = _new._post_validator
        _new.post_validate(validator if before is None else (lambda x: before(x) and validator(x)))
    return _new


POSITIVE_INT: Final = combine(INTEGER, alias="int > 0", validator=lambda x: x > 0)
NON_NEGATIVE_INT: Final = combine(INTEGER, alias="int >= 0", validator=lambda x: x >= 0)
FINITE_FLOAT: Final = combine(FLOAT, alias="finite float", validator=math.isfinite)
NON_NEGATIVE_FLOAT: Final = combine(
    FLOAT, alias="float >= 0", validator=lambda x: math.isfinite(x) and x >= 0
)
POSITIVE_FLOAT: Final = combine(FLOAT, alias="float > 0", validator=lambda x: math.isfinite(x) and x > 0)
OPEN_RATIO: Final = combine(FLOAT, alias="ratio in (0, 1)", validator=lambda x: 0 < x < 1)
"""开区间 (0, 1) 比例"""
RATIO: Final = combine(FLOAT, alias="ratio in (0, 1]", validator=lambda x: 0 < x <= 1)
"""左开右闭 (0, 1] 比例"""
