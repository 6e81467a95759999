"""Frame score aggregation and keyshot selection.

Score export (CSV)::

    frame_index,score,contributions,shot_index,selected

Summary export (JSON)::

    {"video_id": "v1", "budget": 38, "selected_shots": [0, 4], "A": "1100...0"}
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from fractions import Fraction
import json
import math
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np
from tarina.lang import lang
import torch

from .dataio import FrameEmbeddingSequence
from .exception import LengthMismatch, MissingScores
from .model import SummarizerModel, forward_summarizer
from .segmentation import ShotTable, SubSequence, decompose

BUDGET_RATIO = 0.15
_TIE = 1e-12


@dataclass(frozen=True)
class FrameScores:
    video_id: str
    O: np.ndarray
    """per-frame mean of every sub-sequence score the frame received"""
    contributions: np.ndarray

    @property
    def T(self) -> int:
        return int(self.O.shape[0])


@dataclass(frozen=True)
class SummarySelection:
    video_id: str
    selected_shots: tuple[int, ...]
    A: np.ndarray
    budget: int

    def to_dict(self) -> dict[str, Any]:
        return {
            "video_id": self.video_id,
            "budget": self.budget,
            "selected_shots": list(self.selected_shots),
            "A": "".join("1" if a else "0" for a in self.A),
        }

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> SummarySelection:
        return cls(
            doc["video_id"],
            tuple(int(i) for i in doc["selected_shots"]),
            np.array([int(c) for c in doc["A"]], dtype=np.int8),
            int(doc["budget"]),
        )


def aggregate_scores(
    video_id: str, T: int, subs: Sequence[SubSequence], scores: Iterable[np.ndarray]
) -> FrameScores:
    """Average every frame's scores over the sub-sequences that contain it."""
    total = np.zeros(T, dtype=np.float64)
    count = np.zeros(T, dtype=np.int64)
    for sub, p in zip(subs, scores):
        valid = sub.valid_mask
        np.add.at(total, sub.source_indices[valid], np.asarray(p, dtype=np.float64)[valid])
        np.add.at(count, sub.source_indices[valid], 1)
    return FrameScores(video_id, total / np.maximum(count, 1), count)


def score_video(
    summarizer: SummarizerModel,
    E: FrameEmbeddingSequence,
    L: int | None = None,
    sequential_only: bool = False,
    batch_size: int = 64,
) -> FrameScores:
    """Frame score generation: sequential split (no shift) plus dilated split, one forward each."""
    L = L or summarizer.config.L
    subs = decompose(E, L, None, 0, dilated=not sequential_only)
    dtype = summarizer.score_weight.dtype
    scores: list[np.ndarray] = []
    summarizer.eval()
    with torch.no_grad():
        for i in range(0, len(subs), batch_size):
            chunk = subs[i : i + batch_size]
            S = torch.from_numpy(np.stack([s.frames for s in chunk])).to(dtype)
            valid = torch.from_numpy(np.stack([s.valid_mask for s in chunk]))
            scores.extend(forward_summarizer(summarizer, S, valid).to(torch.float64).numpy())
    return aggregate_scores(E.video_id, E.T, subs, scores)


def shot_scores(O: np.ndarray, shots: ShotTable) -> np.ndarray:
    O = np.asarray(O, dtype=np.float64)
    if O.shape[0] != shots.T:
        raise LengthMismatch(
            lang.require("recsum", "error.length_mismatch").format(left=O.shape[0], right=shots.T)
        )
    return np.array([O[s:e].mean() for s, e in shots.spans])


def summary_budget(T: int, ratio: float = BUDGET_RATIO) -> int:
    """``floor(ratio * T)`` in exact rational arithmetic"""
    return math.floor(Fraction(repr(ratio)) * T)


def knapsack_select(values: Sequence[float], lengths: Sequence[int], capacity: int) -> list[int]:
    """Exact 0/1 knapsack.

    Among optimal sets, the one that takes the earliest item at every decision is returned,
    which is the lexicographically smallest index set.
    """
    n = len(values)
    capacity = max(int(capacity), 0)
    # best[i, c]: optimum over items i.. with capacity c
    best = np.zeros((n + 1, capacity + 1))
    for i in range(n - 1, -1, -1):
        best[i] = best[i + 1]
        w = int(lengths[i])
        if w <= capacity:
            take = best[i + 1, : capacity + 1 - w] + float(values[i])
            best[i, w:] = np.maximum(best[i + 1, w:], take)
    selected = []
    c = capacity
    for i in range(n):
        w = int(lengths[i])
        if w <= c and float(values[i]) + best[i + 1, c - w] >= best[i, c] - _TIE:
            selected.append(i)
            c -= w
    return selected


def emit_summary(
    selection: Sequence[int],
    shots: ShotTable,
    T: int | None = None,
    video_id: str = "",
    budget: int | None = None,
) -> SummarySelection:
    T = shots.T if T is None else T
    A = np.zeros(T, dtype=np.int8)
    spans = shots.spans
    for i in sorted(selection):
        s, e = spans[i]
        A[s:e] = 1
    budget = summary_budget(T) if budget is None else budget
    return SummarySelection(video_id, tuple(sorted(selection)), A, budget)


def summarize_video(
    scores: FrameScores, shots: ShotTable, budget_ratio: float = BUDGET_RATIO
) -> SummarySelection:
    budget = summary_budget(scores.T, budget_ratio)
    chosen = knapsack_select(shot_scores(scores.O, shots), shots.lengths, budget)
    return emit_summary(chosen, shots, scores.T, scores.video_id, budget)


# ---------------------------------------------------------------- exports


def write_scores(
    path: str | Path, scores: FrameScores, shots: ShotTable, selection: SummarySelection | None = None
) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    labels = shots.labels
    selected = selection.A if selection is not None else np.zeros(scores.T, dtype=np.int8)
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["frame_index", "score", "contributions", "shot_index", "selected"])
        for t in range(scores.T):
            writer.writerow(
                [t, repr(float(scores.O[t])), int(scores.contributions[t]), int(labels[t]), int(selected[t])]
            )


@dataclass(frozen=True)
class ScoreTable:
    scores: FrameScores
    shot_labels: np.ndarray
    selected: np.ndarray

    @property
    def shots(self) -> ShotTable:
        starts = np.flatnonzero(np.diff(self.shot_labels, prepend=-1))
        return ShotTable(tuple(int(s) for s in starts), self.scores.T)


def read_scores(path: str | Path, video_id: str) -> ScoreTable:
    path = Path(path)
    if not path.is_file():
        raise MissingScores(
            lang.require("recsum", "error.missing_scores").format(video_id=video_id, path=path)
        )
    with path.open("r", newline="", encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    O = np.array([float(r["score"]) for r in rows])
    contributions = np.array([int(r["contributions"]) for r in rows], dtype=np.int64)
    labels = np.array([int(r["shot_index"]) for r in rows], dtype=np.int64)
    selected = np.array([int(r["selected"]) for r in rows], dtype=np.int8)
    return ScoreTable(FrameScores(video_id, O, contributions), labels, selected)


def write_summary(path: str | Path, selection: SummarySelection) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as f:
        json.dump(selection.to_dict(), f, indent=2)


def read_summary(path: str | Path) -> SummarySelection:
    with Path(path).open("r", encoding="utf-8") as f:
        return SummarySelection.from_dict(json.load(f))


__all__ = [
    "BUDGET_RATIO",
    "FrameScores",
    "ScoreTable",
    "SummarySelection",
    "aggregate_scores",
    "emit_summary",
    "knapsack_select",
    "read_scores",
    "read_summary",
    "score_video",
    "shot_scores",
    "summarize_video",
    "summary_budget",
    "write_scores",
    "write_summary",
]
