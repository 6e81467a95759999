from __future__ import annotations

from dataclasses import dataclass, replace
import json
import math
from pathlib import Path
from typing import Any, Optional, Sequence
from typing_extensions import Annotated

import numpy as np
from tarina.lang import lang

from .dataio import FrameEmbeddingSequence
from .exception import IndexOutOfRange
from .fields import NON_NEGATIVE_FLOAT

PAD = -1
"""source index / shot label of a padding position"""


@dataclass(frozen=True)
class KTSConfig:
    max_change_points: Annotated[Optional[int], lambda x: x is None or x >= 0, "int >= 0 | auto"] = None
    """``None`` means ``floor(T / 20)``"""
    penalty_weight: Annotated[float, NON_NEGATIVE_FLOAT] = 1.0
    normalize: bool = True


@dataclass(frozen=True)
class ShotTable:
    boundaries: tuple[int, ...]
    """shot start indices, ``boundaries[0] == 0``"""
    T: int

    def __post_init__(self):
        b = tuple(int(i) for i in self.boundaries)
        if not b or b[0] != 0 or any(x >= y for x, y in zip(b, b[1:])) or b[-1] >= self.T:
            raise ValueError(f"invalid shot boundaries {b} for T={self.T}")
        object.__setattr__(self, "boundaries", b)

    @property
    def lengths(self) -> tuple[int, ...]:
        ends = (*self.boundaries[1:], self.T)
        return tuple(e - s for s, e in zip(self.boundaries, ends))

    @property
    def spans(self) -> list[tuple[int, int]]:
        ends = (*self.boundaries[1:], self.T)
        return list(zip(self.boundaries, ends))

    @property
    def labels(self) -> np.ndarray:
        return np.repeat(np.arange(len(self.boundaries)), self.lengths)

    def __len__(self) -> int:
        return len(self.boundaries)

    def to_dict(self, video_id: str) -> dict[str, Any]:
        return {"video_id": video_id, "T": self.T, "boundaries": list(self.boundaries)}

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> ShotTable:
        return cls(tuple(doc["boundaries"]), int(doc["T"]))


def write_shots(path: str | Path, shots: dict[str, ShotTable]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as f:
        json.dump([s.to_dict(k) for k, s in sorted(shots.items())], f, indent=2)


def read_shots(path: str | Path) -> dict[str, ShotTable]:
    with Path(path).open("r", encoding="utf-8") as f:
        return {doc["video_id"]: ShotTable.from_dict(doc) for doc in json.load(f)}


# ---------------------------------------------------------------- kernel temporal segmentation


def calc_scatters(K: np.ndarray) -> np.ndarray:
    """scatters[i, j] = within-segment kernel variance of frames ``i..j`` (inclusive)"""
    n = K.shape[0]
    K1 = np.concatenate(([0.0], np.cumsum(np.diag(K))))
    K2 = np.zeros((n + 1, n + 1))
    K2[1:, 1:] = np.cumsum(np.cumsum(K, 0), 1)

    diagK2 = np.diag(K2)
    i = np.arange(n).reshape((-1, 1))
    j = np.arange(n).reshape((1, -1))

    lengths = (j - i + 1).astype(np.float64)
    lengths[lengths < 1] = 1.0
    block = diagK2[1:].reshape((1, -1)) + diagK2[:-1].reshape((-1, 1)) - K2[1:, :-1].T - K2[:-1, 1:]
    scatters = K1[1:].reshape((1, -1)) - K1[:-1].reshape((-1, 1)) - block / lengths
    scatters[j < i] = 0
    return scatters


def _change_point_dp(J: np.ndarray, m: int) -> tuple[np.ndarray, np.ndarray]:
    """cost[k] = minimal total scatter with exactly k change points; back[k, l] = last change before l"""
    n = J.shape[0]
    cost = np.full((m + 1, n + 1), np.inf)
    cost[0, 1:] = J[0, :]
    back = np.zeros((m + 1, n + 1), dtype=np.int64)
    for k in range(1, m + 1):
        for end in range(k + 1, n + 1):
            # last segment is [t, end), t in [k, end - 1]
            c = cost[k - 1, k:end] + J[k:end, end - 1]
            best = int(np.argmin(c))
            cost[k, end] = c[best]
            back[k, end] = best + k
    return cost[:, n], back


def _backtrack(back: np.ndarray, n: int, k: int) -> list[int]:
    cps = []
    cur = n
    for kk in range(k, 0, -1):
        cur = int(back[kk, cur])
        cps.append(cur)
    return sorted(cps)


def penalty(T: int, m: int) -> float:
    """``m * (log(T / m) + 1)``, zero for ``m = 0``"""
    return 0.0 if m == 0 else m * (math.log(T / m) + 1.0)


def kts_segment(
    E: FrameEmbeddingSequence | np.ndarray,
    max_change_points: int | None = None,
    penalty_weight: float = 1.0,
    normalize: bool = True,
) -> ShotTable:
    """Kernel temporal segmentation with penalized selection of the number of change points.

    The kernel is the Gram matrix of the (optionally L2-normalized) embeddings.
    The number of change points ``m`` minimizes
    ``scatter(m) + penalty_weight * m * (log(T / m) + 1)``; ties go to the smaller ``m``.
    """
    X = np.asarray(E.data if isinstance(E, FrameEmbeddingSequence) else E, dtype=np.float64)
    T = X.shape[0]
    if max_change_points is None:
        max_change_points = T // 20
    if not 0 <= max_change_points < T:
        raise ValueError(f"max_change_points must lie in [0, {T}), got {max_change_points}")
    if normalize:
        norms = np.linalg.norm(X, axis=1, keepdims=True)
        X = X / np.where(norms < 1e-12, 1.0, norms)
    J = calc_scatters(X @ X.T)
    scatter, back = _change_point_dp(J, max_change_points)
    total = np.array([scatter[m] + penalty_weight * penalty(T, m) for m in range(max_change_points + 1)])
    tolerance = 1e-9 * max(1.0, float(np.abs(total).max()))
    m = int(np.flatnonzero(total <= total.min() + tolerance)[0])
    return ShotTable((0, *_backtrack(back, T, m)), T)


def segmentation_cost(X: np.ndarray, boundaries: Sequence[int], penalty_weight: float = 0.0) -> float:
    """Objective of a given segmentation on an already normalized embedding matrix."""
    T = X.shape[0]
    ends = (*boundaries[1:], T)
    total = 0.0
    for s, e in zip(boundaries, ends):
        seg = X[s:e]
        K = seg @ seg.T
        total += float(np.trace(K) - K.sum() / (e - s))
    return total + penalty_weight * penalty(T, len(boundaries) - 1)


# ---------------------------------------------------------------- sub-sequences


@dataclass(frozen=True)
class SubSequence:
    """A length-L window of embeddings with provenance back to its video."""

    source_video_id: str
    frames: np.ndarray
    source_indices: np.ndarray
    shot_labels: np.ndarray

    @property
    def L(self) -> int:
        return int(self.source_indices.shape[0])

    @property
    def valid_mask(self) -> np.ndarray:
        return self.source_indices != PAD

    @property
    def valid_count(self) -> int:
        return int(self.valid_mask.sum())

    @property
    def real_indices(self) -> np.ndarray:
        return self.source_indices[self.valid_mask]


def _gather(E: FrameEmbeddingSequence, indices: np.ndarray) -> SubSequence:
    valid = indices != PAD
    frames = np.zeros((indices.shape[0], E.d), dtype=np.float32)
    frames[valid] = E.data[indices[valid]]
    return SubSequence(E.video_id, frames, indices, np.full(indices.shape[0], PAD, dtype=np.int64))


def sequential_split(E: FrameEmbeddingSequence, L: int, delta: int = 0) -> list[SubSequence]:
    """Consecutive L-frame windows whose grid is shifted by ``delta`` frames."""
    if L < 2:
        raise ValueError(f"L must be >= 2, got {L}")
    if abs(delta) > L // 2:
        raise ValueError(f"delta must lie in [-{L // 2}, {L // 2}], got {delta}")
    start = delta % L - L if delta % L else 0
    subs = []
    while start < E.T:
        indices = np.arange(start, start + L, dtype=np.int64)
        indices[(indices < 0) | (indices >= E.T)] = PAD
        subs.append(_gather(E, indices))
        start += L
    return subs


def dilated_split(E: FrameEmbeddingSequence, L: int) -> list[SubSequence]:
    """Sub-sequence i holds frames ``i, i+n, i+2n, ...`` with ``n = ceil(T / L)``."""
    if L < 2:
        raise ValueError(f"L must be >= 2, got {L}")
    n = math.ceil(E.T / L)
    subs = []
    for i in range(n):
        indices = np.arange(i, n * L, n, dtype=np.int64)
        indices[indices >= E.T] = PAD
        subs.append(_gather(E, indices))
    return subs


def attach_shot_labels(sub: SubSequence, shots: ShotTable) -> SubSequence:
    valid = sub.valid_mask
    if valid.any():
        bad = sub.source_indices[valid & (sub.source_indices >= shots.T)]
        if bad.size:
            raise IndexOutOfRange(
                lang.require("recsum", "error.index_out_of_range").format(index=int(bad[0]), length=shots.T)
            )
    labels = np.full(sub.L, PAD, dtype=np.int64)
    labels[valid] = np.searchsorted(np.asarray(shots.boundaries), sub.source_indices[valid], side="right") - 1
    return replace(sub, shot_labels=labels)


def decompose(
    E: FrameEmbeddingSequence,
    L: int,
    shots: ShotTable | None = None,
    delta: int = 0,
    dilated: bool = True,
) -> list[SubSequence]:
    """sequential (shifted by delta) plus optional dilated sub-sequences, labelled when shots are given"""
    subs = sequential_split(E, L, delta)
    if dilated:
        subs += dilated_split(E, L)
    if shots is not None:
        subs = [attach_shot_labels(s, shots) for s in subs]
    return subs


def sample_shift(L: int, rng: np.random.Generator) -> int:
    """uniform integer in ``[-floor(L/2), floor(L/2)]``"""
    return int(rng.integers(-(L // 2), L // 2 + 1))


__all__ = [
    "PAD",
    "KTSConfig",
    "ShotTable",
    "SubSequence",
    "attach_shot_labels",
    "calc_scatters",
    "decompose",
    "dilated_split",
    "kts_segment",
    "read_shots",
    "sample_shift",
    "segmentation_cost",
    "sequential_split",
    "write_shots",
]
