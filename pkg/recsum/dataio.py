"""On-disk dataset format.

Embeddings (``*.kfe``)::

    b"KFE1" | T: u64 LE | d: u64 LE | T*d float32 LE, row-major

Manifest (UTF-8 JSON)::

    {"name": "tvsum", "reduction": "average" | "maximum", "folds": "folds.json",
     "videos": [{"video_id": "v1", "embeddings": "v1.kfe", "annotation": "v1.json"}]}

Annotation (UTF-8 JSON)::

    {"video_id": "v1", "user_summaries": [[0, 1, ...], ...],
     "frame_importances": [[0.2, 0.9, ...], ...]}      # optional

Folds (UTF-8 JSON)::

    {"folds": [{"train": ["v1", ...], "test": ["v9", ...]}, ...]}

Relative paths resolve against the directory of the manifest.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from enum import Enum
import json
import logging
from pathlib import Path
import struct
from typing import Any, Iterable, Iterator, Mapping, Optional, Sequence

import numpy as np
from tarina.lang import lang

from .exception import (
    CorruptDocument,
    CorruptEmbedding,
    DimensionMismatch,
    DuplicateVideoId,
    IncompleteFold,
    MissingFile,
    OverlappingFold,
    UnknownVideoId,
    ValidateFailed,
)

logger = logging.getLogger(__name__)

EMBEDDING_MAGIC = b"KFE1"
_HEADER = struct.Struct("<4sQQ")
_FLOAT = np.dtype("<f4")


class Reduction(str, Enum):
    AVERAGE = "average"
    MAXIMUM = "maximum"


def _readonly(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class FrameEmbeddingSequence:
    """A video as a ``T x d`` matrix of frame embeddings (row t is frame t)."""

    video_id: str
    data: np.ndarray

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float32, order="C", copy=True)
        if data.ndim != 2 or data.shape[0] < 1 or data.shape[1] < 1:
            raise DimensionMismatch(
                lang.require("recsum", "error.dimension_mismatch").format(
                    what="embedding matrix",
                    video_id=self.video_id,
                    got=data.shape,
                    expected="(T >= 1, d >= 1)",
                )
            )
        object.__setattr__(self, "data", _readonly(data))

    @property
    def T(self) -> int:
        return int(self.data.shape[0])

    @property
    def d(self) -> int:
        return int(self.data.shape[1])

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.data).all())


@dataclass(frozen=True)
class Annotation:
    video_id: str
    user_summaries: np.ndarray
    """``U x T`` integer matrix, one row per user"""
    frame_importances: Optional[np.ndarray] = None
    """``U' x T`` user frame-level scores"""

    def __post_init__(self):
        raw = np.asarray(self.user_summaries)
        if raw.dtype.kind not in "biu" and (bad := _non_integral(raw)) is not None:
            raise ValidateFailed(
                lang.require("recsum", "error.content").format(
                    target=f"user summary value {bad}", expected="integer"
                )
            )
        summaries = raw.astype(np.int64)
        if summaries.ndim == 1:
            summaries = summaries[None, :]
        object.__setattr__(self, "user_summaries", _readonly(summaries.copy()))
        if self.frame_importances is not None:
            importances = np.asarray(self.frame_importances, dtype=np.float64)
            if importances.ndim == 1:
                importances = importances[None, :]
            object.__setattr__(self, "frame_importances", _readonly(importances.copy()))

    @property
    def n_users(self) -> int:
        return int(self.user_summaries.shape[0])

    @property
    def has_importances(self) -> bool:
        return self.frame_importances is not None and self.frame_importances.shape[0] > 0


@dataclass(frozen=True)
class Video:
    embeddings: FrameEmbeddingSequence
    annotation: Optional[Annotation] = None

    @property
    def video_id(self) -> str:
        return self.embeddings.video_id

    @property
    def T(self) -> int:
        return self.embeddings.T


def embeddings_of(video: Video | FrameEmbeddingSequence) -> FrameEmbeddingSequence:
    return video.embeddings if isinstance(video, Video) else video


@dataclass(frozen=True)
class ManifestEntry:
    video_id: str
    embeddings: Path
    annotation: Optional[Path]


@dataclass(frozen=True)
class DatasetManifest:
    name: str
    reduction: Reduction
    videos: tuple[ManifestEntry, ...]
    folds: Optional[Path] = None
    root: Path = Path(".")


@dataclass(frozen=True)
class Fold:
    train_ids: tuple[str, ...]
    test_ids: tuple[str, ...]


@dataclass(frozen=True)
class FoldSpec:
    folds: tuple[Fold, ...]

    def __iter__(self) -> Iterator[Fold]:
        return iter(self.folds)

    def __len__(self) -> int:
        return len(self.folds)


@dataclass(frozen=True)
class Dataset:
    manifest: DatasetManifest
    videos: Mapping[str, Video]

    @property
    def name(self) -> str:
        return self.manifest.name

    @property
    def reduction(self) -> Reduction:
        return self.manifest.reduction

    @property
    def ids(self) -> list[str]:
        return list(self.videos)

    def __getitem__(self, video_id: str) -> Video:
        return self.videos[video_id]

    def __len__(self) -> int:
        return len(self.videos)

    def select(self, ids: Iterable[str]) -> list[Video]:
        return [self.videos[i] for i in ids]


# ---------------------------------------------------------------- embeddings


def write_embeddings(path: str | Path, seq: FrameEmbeddingSequence) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as f:
        f.write(_HEADER.pack(EMBEDDING_MAGIC, seq.T, seq.d))
        f.write(seq.data.astype(_FLOAT, copy=False).tobytes(order="C"))


def _corrupt(path: Path, reason: str) -> CorruptEmbedding:
    return CorruptEmbedding(
        lang.require("recsum", "error.corrupt_embedding").format(path=path, reason=reason)
    )


def read_embeddings(
    path: str | Path, video_id: str | None = None, check_finite: bool = True
) -> FrameEmbeddingSequence:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(lang.require("recsum", "error.missing_file").format(path=path))
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise _corrupt(path, "truncated header")
    magic, T, d = _HEADER.unpack_from(raw)
    if magic != EMBEDDING_MAGIC:
        raise _corrupt(path, f"bad magic {magic!r}")
    if T < 1 or d < 1:
        raise _corrupt(path, f"empty shape ({T}, {d})")
    expected = _HEADER.size + T * d * _FLOAT.itemsize
    if len(raw) != expected:
        raise _corrupt(path, f"size {len(raw)} bytes, expected {expected}")
    data = np.frombuffer(raw, dtype=_FLOAT, offset=_HEADER.size).reshape(T, d)
    if check_finite and not np.isfinite(data).all():
        raise _corrupt(path, "non-finite values")
    return FrameEmbeddingSequence(video_id or path.stem, data)


# ---------------------------------------------------------------- json documents


def _malformed(path: Path, reason: object) -> CorruptDocument:
    return CorruptDocument(lang.require("recsum", "error.corrupt_document").format(path=path, reason=reason))


@contextmanager
def _parsing(path: Path):
    try:
        yield
    except KeyError as e:
        raise _malformed(path, f"missing key {e}") from e
    except (TypeError, ValueError, AttributeError) as e:
        raise _malformed(path, e) from e


def _non_integral(values: np.ndarray) -> float | None:
    """first value that is not a finite integer, if any"""
    values = np.asarray(values, dtype=np.float64)
    bad = values[~np.isfinite(values) | (values != np.round(values))]
    return float(bad[0]) if bad.size else None


def _read_json(path: Path) -> Any:
    if not path.is_file():
        raise MissingFile(lang.require("recsum", "error.missing_file").format(path=path))
    with _parsing(path), path.open("r", encoding="utf-8") as f:
        return json.load(f)


def _write_json(path: Path, data: Any) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as f:
        json.dump(data, f, ensure_ascii=False, indent=2)
        f.write("\n")


def read_annotation(path: str | Path, video_id: str, T: int) -> Annotation:
    path = Path(path)
    doc = _read_json(path)
    with _parsing(path):
        return _parse_annotation(path, doc, video_id, T)


def _parse_annotation(path: Path, doc: Any, video_id: str, T: int) -> Annotation:
    summaries = doc.get("user_summaries", [])
    for i, row in enumerate(summaries):
        if len(row) != T:
            raise DimensionMismatch(
                lang.require("recsum", "error.dimension_mismatch").format(
                    what=f"user summary {i}", video_id=video_id, got=len(row), expected=T
                )
            )
    importances = doc.get("frame_importances")
    if importances is not None:
        for i, row in enumerate(importances):
            if len(row) != T:
                raise DimensionMismatch(
                    lang.require("recsum", "error.dimension_mismatch").format(
                        what=f"frame importance {i}", video_id=video_id, got=len(row), expected=T
                    )
                )
    raw = np.asarray(summaries, dtype=np.float64).reshape(len(summaries), T)
    if (bad := _non_integral(raw)) is not None:
        raise _malformed(path, f"user summary value {bad} is not an integer")
    return Annotation(
        video_id,
        raw.astype(np.int64),
        (
            None
            if importances is None
            else np.asarray(importances, dtype=np.float64).reshape(len(importances), T)
        ),
    )


def write_annotation(path: str | Path, annotation: Annotation) -> None:
    doc: dict[str, Any] = {
        "video_id": annotation.video_id,
        "user_summaries": annotation.user_summaries.tolist(),
    }
    if annotation.frame_importances is not None:
        doc["frame_importances"] = annotation.frame_importances.tolist()
    _write_json(Path(path), doc)


def read_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    doc = _read_json(path)
    with _parsing(path):
        return _parse_manifest(path, doc)


def _parse_manifest(path: Path, doc: Any) -> DatasetManifest:
    root = path.parent
    seen: set[str] = set()
    entries = []
    for item in doc["videos"]:
        video_id = str(item["video_id"])
        if video_id in seen:
            raise DuplicateVideoId(lang.require("recsum", "error.duplicate_video").format(video_id=video_id))
        seen.add(video_id)
        annotation = item.get("annotation")
        entries.append(
            ManifestEntry(
                video_id, root / item["embeddings"], None if annotation is None else root / annotation
            )
        )
    folds = doc.get("folds")
    return DatasetManifest(
        name=str(doc.get("name", path.stem)),
        reduction=Reduction(doc.get("reduction", Reduction.AVERAGE.value)),
        videos=tuple(entries),
        folds=None if folds is None else root / folds,
        root=root,
    )


def write_manifest(path: str | Path, manifest: DatasetManifest) -> None:
    path = Path(path)
    root = path.parent

    def rel(p: Path) -> str:
        try:
            return p.relative_to(root).as_posix()
        except ValueError:
            return str(p)

    doc: dict[str, Any] = {
        "name": manifest.name,
        "reduction": manifest.reduction.value,
        "videos": [
            {
                "video_id": e.video_id,
                "embeddings": rel(e.embeddings),
                **({"annotation": rel(e.annotation)} if e.annotation is not None else {}),
            }
            for e in manifest.videos
        ],
    }
    if manifest.folds is not None:
        doc["folds"] = rel(manifest.folds)
    _write_json(path, doc)


# ---------------------------------------------------------------- loading


def _load_entry(entry: ManifestEntry) -> Video:
    embeddings = read_embeddings(entry.embeddings, entry.video_id)
    annotation = None
    if entry.annotation is not None:
        annotation = read_annotation(entry.annotation, entry.video_id, embeddings.T)
    return Video(embeddings, annotation)


def load_dataset(manifest_path: str | Path, workers: int | None = None) -> Dataset:
    """Load a manifest and every video it references; files are read in parallel."""
    manifest = read_manifest(manifest_path)
    for entry in manifest.videos:
        for p in (entry.embeddings, entry.annotation):
            if p is not None and not p.is_file():
                raise MissingFile(lang.require("recsum", "error.missing_file").format(path=p))
    with ThreadPoolExecutor(max_workers=workers) as executor:
        loaded = list(executor.map(_load_entry, manifest.videos))
    videos = {v.video_id: v for v in sorted(loaded, key=lambda v: v.video_id)}
    logger.info("loaded dataset %s: %d videos", manifest.name, len(videos))
    return Dataset(manifest, videos)


def load_folds(path: str | Path, video_ids: Iterable[str]) -> FoldSpec:
    path = Path(path)
    known = set(video_ids)
    doc = _read_json(path)
    folds = []
    with _parsing(path):
        splits = [
            (tuple(str(i) for i in item["train"]), tuple(str(i) for i in item["test"]))
            for item in doc["folds"]
        ]
    for k, (train, test) in enumerate(splits):
        for video_id in (*train, *test):
            if video_id not in known:
                raise UnknownVideoId(
                    lang.require("recsum", "error.unknown_video").format(fold=k, video_id=video_id)
                )
        if overlap := sorted(set(train) & set(test)):
            raise OverlappingFold(
                lang.require("recsum", "error.overlapping_fold").format(fold=k, video_id=overlap[0])
            )
        if missing := sorted(known - set(train) - set(test)):
            raise IncompleteFold(
                lang.require("recsum", "error.incomplete_fold").format(fold=k, video_ids=", ".join(missing))
            )
        folds.append(Fold(train, test))
    if len(folds) != 5:
        logger.warning(lang.require("recsum", "log.fold_count").format(path=path, count=len(folds)))
    return FoldSpec(tuple(folds))


def write_folds(path: str | Path, spec: FoldSpec) -> None:
    _write_json(
        Path(path), {"folds": [{"train": list(f.train_ids), "test": list(f.test_ids)} for f in spec.folds]}
    )


# ---------------------------------------------------------------- validation


@dataclass(frozen=True)
class VideoStats:
    video_id: str
    T: int
    d: int
    n_annotations: int
    rank_metrics_available: bool


@dataclass(frozen=True)
class Violation:
    video_id: str
    message: str


@dataclass
class ValidationReport:
    dataset: str
    entries: list[VideoStats] = field(default_factory=list)
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def to_dict(self) -> dict[str, Any]:
        return {
            "dataset": self.dataset,
            "videos": [vars(e) for e in self.entries],
            "violations": [vars(v) for v in self.violations],
        }


def _video_violations(video: Video) -> Iterator[str]:
    if not video.embeddings.is_finite():
        yield lang.require("recsum", "validate.embedding_finite")
    annotation = video.annotation
    if annotation is None:
        yield lang.require("recsum", "validate.no_annotation")
        return
    for user, row in enumerate(annotation.user_summaries):
        if len(row) != video.T:
            yield lang.require("recsum", "validate.summary_length").format(
                user=user, got=len(row), expected=video.T
            )
        bad = row[(row != 0) & (row != 1)]
        if bad.size:
            yield lang.require("recsum", "validate.non_binary").format(user=user, value=int(bad[0]))
    if annotation.frame_importances is not None:
        for user, row in enumerate(annotation.frame_importances):
            if len(row) != video.T:
                yield lang.require("recsum", "validate.importance_length").format(
                    user=user, got=len(row), expected=video.T
                )
            if not np.isfinite(row).all():
                yield lang.require("recsum", "validate.importance_finite").format(user=user)


def validate_dataset(dataset: Dataset | Sequence[Video], name: str | None = None) -> ValidationReport:
    """Collect per-video stats and every invariant violation without raising."""
    videos = list(dataset.videos.values()) if isinstance(dataset, Dataset) else list(dataset)
    report = ValidationReport(name or (dataset.name if isinstance(dataset, Dataset) else "dataset"))
    for video in videos:
        annotation = video.annotation
        report.entries.append(
            VideoStats(
                video_id=video.video_id,
                T=video.T,
                d=video.embeddings.d,
                n_annotations=0 if annotation is None else annotation.n_users,
                rank_metrics_available=annotation is not None and annotation.has_importances,
            )
        )
        report.violations.extend(Violation(video.video_id, msg) for msg in _video_violations(video))
    return report
