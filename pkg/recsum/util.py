from __future__ import annotations

import hashlib
import sys
from typing import Union

from .i18n import lang as lang  # noqa: F401

if sys.version_info >= (3, 10):  # pragma: no cover
    from types import UnionType as CUnionType  # noqa: F401
else:  # pragma: no cover
    CUnionType: type = type(Union[int, str])  # noqa

_SEED_MASK = (1 << 63) - 1


def derive_seed(base_seed: int, *labels: object) -> int:
    """Fan a run seed out into an independent stream seed.

    The stream seed is the first 8 bytes (little-endian) of
    ``sha256("<base_seed>/<label>/<label>...")`` masked to 63 bits, so every
    ``(base_seed, labels)`` pair maps to the same value on every platform.
    """
    key = "/".join(str(i) for i in (base_seed, *labels)).encode("utf-8")
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "little") & _SEED_MASK
