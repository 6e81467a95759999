"""Synthetic dataset with planted structure.

Every video is a run of shots. Anchor shots repeat one of a few prototype
vectors shared by all videos (plus a little jitter) and make up about
``anchor_ratio`` of the frames; every other shot is per-frame noise around a
shot-specific centre. Users rate anchor frames high and build their keyshot
summaries from those ratings.
"""

from __future__ import annotations

from dataclasses import dataclass
import logging
from pathlib import Path

import numpy as np

from .dataio import (
    Annotation,
    DatasetManifest,
    Fold,
    FoldSpec,
    FrameEmbeddingSequence,
    ManifestEntry,
    Reduction,
    write_annotation,
    write_embeddings,
    write_folds,
    write_manifest,
)
from .segmentation import ShotTable
from .summarize import knapsack_select, summary_budget
from .util import derive_seed

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SyntheticVideo:
    embeddings: FrameEmbeddingSequence
    annotation: Annotation
    shots: ShotTable
    anchors: np.ndarray
    """boolean per frame"""


def _shot_lengths(T: int, rng: np.random.Generator, low: int, high: int) -> list[int]:
    lengths = []
    while sum(lengths) < T:
        lengths.append(int(rng.integers(low, high + 1)))
    lengths[-1] -= sum(lengths) - T
    if lengths[-1] < low and len(lengths) > 1:
        tail = lengths.pop()
        lengths[-1] += tail
    return lengths


def make_video(
    video_id: str,
    prototypes: np.ndarray,
    T: int = 256,
    anchor_ratio: float = 0.2,
    n_users: int = 3,
    seed: int = 0,
) -> SyntheticVideo:
    rng = np.random.default_rng(derive_seed(seed, "synth", video_id))
    d = prototypes.shape[1]
    shots = ShotTable(tuple(np.cumsum([0, *_shot_lengths(T, rng, 8, 32)])[:-1].tolist()), T)
    lengths = shots.lengths

    anchor_shots: set[int] = set()
    covered = 0
    for i in rng.permutation(len(shots)):
        if covered >= anchor_ratio * T:
            break
        anchor_shots.add(int(i))
        covered += lengths[i]

    X = np.empty((T, d), dtype=np.float32)
    anchors = np.zeros(T, dtype=bool)
    for i, (s, e) in enumerate(shots.spans):
        if i in anchor_shots:
            proto = prototypes[int(rng.integers(len(prototypes)))]
            X[s:e] = proto + 0.05 * rng.standard_normal((e - s, d))
            anchors[s:e] = True
        else:
            centre = rng.standard_normal(d)
            X[s:e] = centre + rng.standard_normal((e - s, d))

    importances = np.clip(np.where(anchors, 0.8, 0.2) + 0.1 * rng.standard_normal((n_users, T)), 0.0, 1.0)
    budget = summary_budget(T)
    summaries = np.zeros((n_users, T), dtype=np.int64)
    for u in range(n_users):
        values = [importances[u, s:e].mean() for s, e in shots.spans]
        for i in knapsack_select(values, lengths, budget):
            s, e = shots.spans[i]
            summaries[u, s:e] = 1
    return SyntheticVideo(
        FrameEmbeddingSequence(video_id, X), Annotation(video_id, summaries, importances), shots, anchors
    )


def make_folds(video_ids: list[str], n_folds: int, seed: int) -> FoldSpec:
    rng = np.random.default_rng(derive_seed(seed, "folds"))
    order = [video_ids[i] for i in rng.permutation(len(video_ids))]
    folds = []
    for k in range(n_folds):
        test = tuple(sorted(order[k::n_folds]))
        folds.append(Fold(tuple(sorted(set(video_ids) - set(test))), test))
    return FoldSpec(tuple(folds))


def write_synthetic_dataset(
    root: str | Path,
    n_videos: int = 8,
    T: int = 256,
    d: int = 16,
    anchor_ratio: float = 0.2,
    n_prototypes: int = 4,
    n_users: int = 3,
    n_folds: int = 5,
    seed: int = 0,
) -> tuple[Path, list[SyntheticVideo]]:
    """Write embeddings, annotations, folds and a manifest under ``root``; returns the manifest path."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(derive_seed(seed, "prototypes"))
    prototypes = rng.standard_normal((n_prototypes, d)) * 2.0
    videos = [
        make_video(f"video_{i:02d}", prototypes, T, anchor_ratio, n_users, seed) for i in range(n_videos)
    ]
    entries = []
    for v in videos:
        vid = v.embeddings.video_id
        write_embeddings(root / f"{vid}.kfe", v.embeddings)
        write_annotation(root / f"{vid}.json", v.annotation)
        entries.append(ManifestEntry(vid, root / f"{vid}.kfe", root / f"{vid}.json"))
    ids = [v.embeddings.video_id for v in videos]
    write_folds(root / "folds.json", make_folds(ids, min(n_folds, n_videos), seed))
    manifest = root / "manifest.json"
    write_manifest(
        manifest, DatasetManifest("synthetic", Reduction.AVERAGE, tuple(entries), root / "folds.json", root)
    )
    logger.info("wrote synthetic dataset with %d videos to %s", n_videos, root)
    return manifest, videos


__all__ = ["SyntheticVideo", "make_folds", "make_video", "write_synthetic_dataset"]
