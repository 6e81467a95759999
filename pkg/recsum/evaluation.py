from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
import json
import logging
import math
from pathlib import Path
from typing import Any, Mapping, NamedTuple, Optional, Sequence

import numpy as np
from scipy import stats
from tarina.lang import lang

from .dataio import Annotation, Dataset, FoldSpec, Reduction
from .exception import DegenerateRanking, EmptyAnnotationSet, LengthMismatch, MissingOutput
from .summarize import FrameScores, SummarySelection

logger = logging.getLogger(__name__)


class FScore(NamedTuple):
    precision: float
    recall: float
    f: float
    """0 to 100"""


def _binary(x: Sequence[int] | np.ndarray) -> np.ndarray:
    return np.asarray(x) > 0


def f_score(A: Sequence[int] | np.ndarray, U: Sequence[int] | np.ndarray) -> FScore:
    a, u = _binary(A), _binary(U)
    if a.shape != u.shape:
        raise LengthMismatch(
            lang.require("recsum", "error.length_mismatch").format(left=a.shape[0], right=u.shape[0])
        )
    na, nu = int(a.sum()), int(u.sum())
    if na == 0 or nu == 0:
        return FScore(0.0, 0.0, 0.0)
    overlap = int((a & u).sum())
    p, r = overlap / na, overlap / nu
    if p + r == 0:
        return FScore(p, r, 0.0)
    return FScore(p, r, 200.0 * p * r / (p + r))


def _empty(video_id: str) -> EmptyAnnotationSet:
    return EmptyAnnotationSet(lang.require("recsum", "error.empty_annotation").format(video_id=video_id))


def reduce_user_scores(values: Sequence[float], reduction: Reduction, video_id: str = "") -> float:
    if len(values) == 0:
        raise _empty(video_id)
    return float(np.max(values)) if Reduction(reduction) is Reduction.MAXIMUM else float(np.mean(values))


def _check_ranking(x: Sequence[float], y: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise LengthMismatch(
            lang.require("recsum", "error.length_mismatch").format(left=x.shape[0], right=y.shape[0])
        )
    if not (np.isfinite(x).all() and np.isfinite(y).all()):
        raise DegenerateRanking(lang.require("recsum", "error.degenerate_ranking"))
    if x.shape[0] < 2 or np.ptp(x) == 0 or np.ptp(y) == 0:
        raise DegenerateRanking(lang.require("recsum", "error.degenerate_ranking"))
    return x, y


def kendall_tau(x: Sequence[float], y: Sequence[float]) -> float:
    """tie-corrected τ-b"""
    x, y = _check_ranking(x, y)
    tau = float(stats.kendalltau(x, y, variant="b")[0])
    if math.isnan(tau):
        raise DegenerateRanking(lang.require("recsum", "error.degenerate_ranking"))
    return tau


def spearman_rho(x: Sequence[float], y: Sequence[float]) -> float:
    """Pearson correlation of average ranks"""
    x, y = _check_ranking(x, y)
    rho = float(stats.spearmanr(x, y)[0])
    if math.isnan(rho):
        raise DegenerateRanking(lang.require("recsum", "error.degenerate_ranking"))
    return rho


def _mean_rank_metric(metric, O: np.ndarray, importances: np.ndarray) -> Optional[float]:
    values = []
    for row in importances:
        try:
            values.append(metric(O, row))
        except DegenerateRanking:
            continue
    return float(np.mean(values)) if values else None


def best_user_summary(annotation: Annotation) -> tuple[int, np.ndarray]:
    """The user summary with the highest mean F-score against the other users (lowest index on ties)."""
    summaries = annotation.user_summaries
    if summaries.shape[0] == 0:
        raise _empty(annotation.video_id)
    if summaries.shape[0] == 1:
        return 0, summaries[0]
    means = [
        np.mean([f_score(summaries[i], summaries[j]).f for j in range(summaries.shape[0]) if j != i])
        for i in range(summaries.shape[0])
    ]
    best = int(np.argmax(means))
    return best, summaries[best]


@dataclass(frozen=True)
class VideoEval:
    video_id: str
    fold: int
    precision: float
    recall: float
    f: float
    tau: Optional[float] = None
    rho: Optional[float] = None
    user_f: tuple[float, ...] = ()


@dataclass(frozen=True)
class FoldEval:
    fold: int
    n_videos: int
    f: float
    tau: Optional[float] = None
    rho: Optional[float] = None


def _mean_or_none(values: Sequence[Optional[float]]) -> Optional[float]:
    present = [v for v in values if v is not None]
    return float(np.mean(present)) if present else None


@dataclass
class EvalReport:
    dataset: str
    reduction: Reduction
    videos: list[VideoEval] = field(default_factory=list)
    folds: list[FoldEval] = field(default_factory=list)

    @property
    def f(self) -> float:
        return float(np.mean([fold.f for fold in self.folds])) if self.folds else 0.0

    @property
    def tau(self) -> Optional[float]:
        return _mean_or_none([fold.tau for fold in self.folds])

    @property
    def rho(self) -> Optional[float]:
        return _mean_or_none([fold.rho for fold in self.folds])

    def to_dict(self) -> dict[str, Any]:
        return {
            "dataset": self.dataset,
            "reduction": self.reduction.value,
            "f": self.f,
            "tau": self.tau,
            "rho": self.rho,
            "folds": [asdict(f) for f in self.folds],
            "videos": [{**asdict(v), "user_f": list(v.user_f)} for v in self.videos],
        }

    def write_json(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2)

    def write_csv(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        columns = ["fold", "video_id", "precision", "recall", "f", "tau", "rho"]
        with path.open("w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(columns)
            for v in self.videos:
                writer.writerow(
                    [v.fold, v.video_id, v.precision, v.recall, v.f, _blank(v.tau), _blank(v.rho)]
                )
            for fold in self.folds:
                writer.writerow([fold.fold, "*", "", "", fold.f, _blank(fold.tau), _blank(fold.rho)])
            writer.writerow(["*", "*", "", "", self.f, _blank(self.tau), _blank(self.rho)])


def _blank(value: Optional[float]) -> Any:
    return "" if value is None else value


def evaluate_video(
    selection: SummarySelection,
    annotation: Annotation,
    reduction: Reduction,
    scores: FrameScores | None = None,
    fold: int = 0,
) -> VideoEval:
    reduction = Reduction(reduction)
    per_user = [f_score(selection.A, u) for u in annotation.user_summaries]
    if not per_user:
        raise _empty(annotation.video_id)
    fs = [s.f for s in per_user]
    f = reduce_user_scores(fs, reduction, annotation.video_id)
    if reduction is Reduction.MAXIMUM:
        best = per_user[int(np.argmax(fs))]
        precision, recall = best.precision, best.recall
    else:
        precision = float(np.mean([s.precision for s in per_user]))
        recall = float(np.mean([s.recall for s in per_user]))
    tau = rho = None
    if scores is not None and annotation.has_importances:
        tau = _mean_rank_metric(kendall_tau, scores.O, annotation.frame_importances)
        rho = _mean_rank_metric(spearman_rho, scores.O, annotation.frame_importances)
    return VideoEval(annotation.video_id, fold, precision, recall, f, tau, rho, tuple(fs))


def effective_reduction(dataset: Dataset, requested: Reduction | None) -> Reduction:
    """The manifest's reduction, warning when a different one was requested."""
    if requested is not None and Reduction(requested) is not dataset.reduction:
        logger.warning(
            lang.require("recsum", "log.reduction_conflict").format(
                requested=Reduction(requested).value, name=dataset.name, configured=dataset.reduction.value
            )
        )
    return dataset.reduction


def evaluate_dataset(
    outputs: Mapping[str, tuple[SummarySelection, Optional[FrameScores]]],
    dataset: Dataset,
    folds: FoldSpec,
    reduction: Reduction | None = None,
) -> EvalReport:
    """Per-fold test-set means and their mean over folds."""
    reduction = effective_reduction(dataset, reduction)
    report = EvalReport(dataset.name, reduction)
    for index, fold in enumerate(folds):
        rows = []
        for video_id in fold.test_ids:
            if video_id not in outputs:
                raise MissingOutput(lang.require("recsum", "error.missing_output").format(video_id=video_id))
            annotation = dataset[video_id].annotation
            if annotation is None:
                raise _empty(video_id)
            selection, scores = outputs[video_id]
            rows.append(evaluate_video(selection, annotation, reduction, scores, index))
        report.videos.extend(rows)
        fold_eval = FoldEval(
            index,
            len(rows),
            float(np.mean([r.f for r in rows])) if rows else 0.0,
            _mean_or_none([r.tau for r in rows]),
            _mean_or_none([r.rho for r in rows]),
        )
        report.folds.append(fold_eval)
        logger.info("fold %d: F=%.3f over %d videos", index, fold_eval.f, fold_eval.n_videos)
    return report


__all__ = [
    "EvalReport",
    "FScore",
    "FoldEval",
    "VideoEval",
    "best_user_summary",
    "effective_reduction",
    "evaluate_dataset",
    "evaluate_video",
    "f_score",
    "kendall_tau",
    "reduce_user_scores",
    "spearman_rho",
]
