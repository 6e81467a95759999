from __future__ import annotations

import csv
from dataclasses import dataclass
import logging
from pathlib import Path
from typing import Optional

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .segmentation import ShotTable  # noqa: E402

logger = logging.getLogger(__name__)

SELECTED_COLOR = "#2ca02c"
PLAIN_COLOR = "#9e9e9e"
TOP_FRAME_COLOR = "#d62728"
HUMAN_COLOR = "#1f77b4"


def normalize(values: np.ndarray) -> np.ndarray:
    """min-max to [0, 1]; a constant trace maps to all zeros"""
    values = np.asarray(values, dtype=np.float64)
    span = float(values.max() - values.min()) if values.size else 0.0
    if span <= 0.0:
        return np.zeros_like(values)
    return (values - values.min()) / span


def top_frames(values: np.ndarray, shots: ShotTable, selected: np.ndarray) -> list[int]:
    """highest-scoring frame inside every selected shot"""
    out = []
    for s, e in shots.spans:
        if selected[s:e].any():
            out.append(s + int(np.argmax(values[s:e])))
    return out


@dataclass(frozen=True)
class ScoreTrace:
    video_id: str
    normalized: np.ndarray
    shots: ShotTable
    selected: np.ndarray
    human: Optional[np.ndarray] = None
    """normalized mean user importance"""
    human_summary: Optional[np.ndarray] = None

    @property
    def T(self) -> int:
        return int(self.normalized.shape[0])

    @property
    def markers(self) -> list[int]:
        return top_frames(self.normalized, self.shots, self.selected)


def build_trace(
    video_id: str,
    scores: np.ndarray,
    shots: ShotTable,
    selected: np.ndarray,
    importances: Optional[np.ndarray] = None,
    human_summary: Optional[np.ndarray] = None,
) -> ScoreTrace:
    human = None
    if importances is not None and len(importances):
        human = normalize(np.asarray(importances, dtype=np.float64).mean(axis=0))
    return ScoreTrace(video_id, normalize(scores), shots, np.asarray(selected) > 0, human, human_summary)


def _panel(ax, values: np.ndarray, shots: ShotTable, selected: np.ndarray, markers: list[int], label: str):
    T = values.shape[0]
    for i, (s, e) in enumerate(shots.spans):
        if i % 2:
            ax.axvspan(s - 0.5, e - 0.5, color="#f0f0f0", zorder=0, linewidth=0)
    colors = np.where(selected, SELECTED_COLOR, PLAIN_COLOR)
    ax.bar(np.arange(T), values, width=1.0, color=colors, linewidth=0)
    if markers:
        ax.scatter(markers, values[markers], color=TOP_FRAME_COLOR, marker="v", s=18, zorder=3)
    ax.set_xlim(-0.5, T - 0.5)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel(label)


def render_trace(path: str | Path, trace: ScoreTrace) -> Path:
    """Write the trace as SVG: a machine panel and, when annotated, a human panel."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = 2 if trace.human is not None else 1
    fig, axes = plt.subplots(rows, 1, figsize=(10, 2.2 * rows), sharex=True, squeeze=False)
    _panel(axes[0][0], trace.normalized, trace.shots, trace.selected, trace.markers, "machine")
    axes[0][0].set_title(trace.video_id)
    if trace.human is not None:
        chosen = trace.human_summary > 0 if trace.human_summary is not None else np.zeros(trace.T, dtype=bool)
        markers = top_frames(trace.human, trace.shots, chosen)
        _panel(axes[1][0], trace.human, trace.shots, chosen, markers, "human")
        axes[1][0].set_xlabel("frame")
    else:
        axes[0][0].set_xlabel("frame")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    logger.debug("wrote %s", path)
    return path


def write_trace_csv(path: str | Path, trace: ScoreTrace) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    labels = trace.shots.labels
    markers = set(trace.markers)
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["frame_index", "normalized", "shot_index", "selected", "top_frame", "human"])
        for t in range(trace.T):
            writer.writerow(
                [
                    t,
                    repr(float(trace.normalized[t])),
                    int(labels[t]),
                    int(trace.selected[t]),
                    int(t in markers),
                    "" if trace.human is None else repr(float(trace.human[t])),
                ]
            )
    return path


__all__ = ["ScoreTrace", "build_trace", "normalize", "render_trace", "top_frames", "write_trace_csv"]
