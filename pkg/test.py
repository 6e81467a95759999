import itertools
import json
import math
import os
from pathlib import Path
import struct
from typing import Optional

from hypothesis import assume, given, settings, strategies as st
import numpy as np
import pytest
from scipy import stats
import torch

from recsum.cli import main
from recsum.config import RunConfig, build_config, load_config, parse_pairs, write_snapshot
from recsum.core import Field
from recsum.dataio import (
    Annotation,
    Dataset,
    DatasetManifest,
    Fold,
    FoldSpec,
    FrameEmbeddingSequence,
    ManifestEntry,
    Reduction,
    Video,
    load_dataset,
    load_folds,
    read_annotation,
    read_embeddings,
    read_manifest,
    validate_dataset,
    write_annotation,
    write_embeddings,
    write_folds,
    write_manifest,
)
from recsum.evaluation import (
    best_user_summary,
    evaluate_dataset,
    evaluate_video,
    f_score,
    kendall_tau,
    reduce_user_scores,
    spearman_rho,
)
from recsum.exception import (
    ConfigMismatch,
    CorruptDocument,
    CorruptEmbedding,
    CorruptFile,
    DegenerateRanking,
    DimensionMismatch,
    DivergenceDetected,
    DuplicateVideoId,
    EmptyAnnotationSet,
    EmptyTrainSet,
    FrozenModelViolation,
    IncompleteFold,
    IndexOutOfRange,
    InsufficientMaskableFrames,
    LengthMismatch,
    MissingCheckpoint,
    MissingFile,
    MissingOutput,
    MissingScores,
    OverlappingFold,
    PlanMismatch,
    ShapeMismatch,
    UnknownVideoId,
    ValidateFailed,
    VersionMismatch,
    ZeroNormVector,
)
from recsum.fields import (
    BOOLEAN,
    FLOAT,
    INTEGER,
    OPEN_RATIO,
    PATH,
    POSITIVE_INT,
    RATIO,
    STRING,
    ChoiceField,
    OptionalField,
    combine,
)
from recsum.masking import (
    CandidateWindow,
    Disposition,
    MaskingMethod,
    MaskPlan,
    MaskToken,
    apply_mask,
    mask_fraction,
    plan_masking,
)
from recsum.model import (
    PAD_SCORE,
    EncoderConfig,
    Role,
    build_generator,
    build_summarizer,
    forward_generator,
    forward_summarizer,
    gradients,
    init_summarizer_from_generator,
    load_checkpoint,
    make_checkpoint,
    parameter_hash,
    restore_model,
    restore_optimizer,
    save_checkpoint,
)
from recsum.pretrain import LossVariant, PretrainConfig, lr_at, pretrain, reconstruction_loss
from recsum.report import build_trace, normalize, render_trace, write_trace_csv
from recsum.rltrain import (
    Baseline,
    RLConfig,
    build_summary_input,
    compute_reward,
    policy_update,
    regularization_loss,
    reinforce_loss,
    sample_actions,
    train_summarizer,
)
from recsum.schema import field_for
from recsum.segmentation import (
    PAD,
    ShotTable,
    SubSequence,
    attach_shot_labels,
    decompose,
    dilated_split,
    kts_segment,
    penalty,
    segmentation_cost,
    sequential_split,
)
from recsum.summarize import (
    FrameScores,
    SummarySelection,
    aggregate_scores,
    emit_summary,
    knapsack_select,
    read_scores,
    score_video,
    shot_scores,
    summarize_video,
    summary_budget,
    write_scores,
)
from recsum.synth import make_video, write_synthetic_dataset

acceptance = pytest.mark.skipif(
    os.environ.get("RECSUM_ACCEPTANCE") != "1", reason="long run; set RECSUM_ACCEPTANCE=1"
)

TINY = EncoderConfig(l=1, h=2, d=8, L=16)


def _randn(*shape, seed=0, dtype=torch.float32):
    return torch.randn(*shape, generator=torch.Generator().manual_seed(seed), dtype=dtype)


def _sequence(T: int, d: int = 8, seed: int = 0, video_id: str = "v") -> FrameEmbeddingSequence:
    return FrameEmbeddingSequence(video_id, np.random.default_rng(seed).standard_normal((T, d)))


def _sub(shot_lengths, d: int = 4, pad: int = 0) -> SubSequence:
    labels = np.repeat(np.arange(len(shot_lengths)), shot_lengths)
    T = labels.shape[0]
    frames = np.random.default_rng(0).standard_normal((T + pad, d)).astype(np.float32)
    indices = np.concatenate([np.arange(T), np.full(pad, PAD)])
    labels = np.concatenate([labels, np.full(pad, PAD)])
    frames[T:] = 0
    return SubSequence("v", frames, indices.astype(np.int64), labels.astype(np.int64))


# ---------------------------------------------------------------- fields & config


def test_fields():
    assert INTEGER.execute("1_000").value() == 1000
    assert INTEGER.execute(3.0).value() == 3
    assert INTEGER.execute(1.5).failed
    assert INTEGER.execute(True).failed
    assert FLOAT.execute("1e-3").value() == 1e-3
    assert FLOAT.execute("abc").failed
    assert BOOLEAN.execute("yes").value() is True
    assert BOOLEAN.execute("Off").value() is False
    assert BOOLEAN.execute("maybe").failed
    assert RATIO.execute("1").value() == 1.0
    assert RATIO.execute(0).failed
    assert OPEN_RATIO.execute(1).failed
    assert OPEN_RATIO.execute("0.25").value() == 0.25
    assert OptionalField(INTEGER).execute("auto").value() is None
    assert OptionalField(INTEGER).execute("7").value() == 7
    assert ChoiceField.of_enum(LossVariant).execute(" L1+CE ").value() is LossVariant.L1_CE
    assert ChoiceField.of_enum(MaskingMethod).execute("window").failed
    even = combine(INTEGER, alias="even int", validator=lambda x: x % 2 == 0)
    assert even.execute("4").value() == 4
    assert even.execute("5").failed
    assert str(even) == "even int"


def test_field_pipeline():
    assert STRING.execute(b"abc").value() == "abc"
    assert STRING.execute(3).failed
    assert PATH.execute("runs/out").value() == Path("runs/out")
    assert PATH.execute(Path("a")).value() == Path("a")
    assert PATH.execute("  ").failed
    assert PATH.execute(3).failed
    assert BOOLEAN.execute(1.0).failed
    res = POSITIVE_INT.execute("-3")
    assert res.failed
    assert "int > 0" in str(res.error())
    assert POSITIVE_INT.execute("3").value() == 3
    odd = combine(POSITIVE_INT, alias="odd int > 0", validator=lambda x: x % 2 == 1)
    assert odd.execute("3").value() == 3
    assert odd.execute("4").failed
    assert odd.execute("-1").failed
    maybe = combine(OptionalField(INTEGER), alias="int? > 0", validator=lambda x: x is None or x > 0)
    assert maybe.execute("none").value() is None
    assert maybe.execute("2").value() == 2
    assert maybe.execute("0").failed
    choice = ChoiceField({"a": 1, "b": 2})
    assert choice.execute(" A ").value() == 1
    assert choice.execute(["a"]).failed


def test_field_result():
    pat = Field(str).accept(int).convert(lambda _, x: str(x))
    assert pat.execute(13).value() == "13"
    assert pat.execute("13").failed
    res = Field(int).execute("abc")
    assert res.failed
    assert isinstance(res.error(), ValidateFailed)
    with pytest.raises(RuntimeError):
        res.value()


def test_field_for():
    assert isinstance(field_for(Optional[int]), OptionalField)
    assert field_for(int) is INTEGER
    with pytest.raises(TypeError):
        field_for(dict)


def test_config_defaults_and_overrides():
    config = load_config(overrides=["run.seed = 7", "pretrain.epochs=3", "model.d=16", "model.h=2"])
    assert config.run.seed == 7
    assert config.pretrain.seed == 7
    assert config.rl.seed == 7
    assert config.pretrain.epochs == 3
    assert config.model == EncoderConfig(l=3, h=2, d=16, L=128)
    assert config.model.ffn == 64
    assert config.pretrain.d_r == 0.5
    assert config.pretrain.m_r == 0.25
    assert config.rl.episodes == 5
    assert config.inference.budget_ratio == 0.15
    assert config.dtype is torch.float32
    assert build_config({"run.precision": "64"}).dtype is torch.float64
    assert build_config({"rl.seed": "3"}).rl.seed == 3
    assert build_config({"pretrain.loss_variant": "MSE+CE"}).pretrain.loss_variant is LossVariant.MSE_CE


def test_config_errors():
    with pytest.raises(ValidateFailed):
        build_config({"pretrain.nope": "1"})
    with pytest.raises(ValidateFailed):
        build_config({"pretrain.m_r": "1.5"})
    with pytest.raises(ValidateFailed):
        build_config({"run.precision": "16"})
    with pytest.raises(ValidateFailed):
        build_config({"model.d": "10", "model.h": "4"})
    with pytest.raises(ValidateFailed):
        build_config({"pretrain.warmup_epochs": "20", "pretrain.cosine_horizon_epochs": "10"})
    with pytest.raises(ValidateFailed):
        parse_pairs(["# comment", "", "no equals sign"])


def test_config_snapshot(tmp_path: Path):
    config = load_config(overrides=["run.seed=11", "kts.penalty_weight=0.5", "pretrain.masked_only=yes"])
    path = write_snapshot(tmp_path, config)
    assert path.name == "config.resolved.txt"
    text = path.read_text(encoding="utf-8")
    assert "pretrain.masked_only = true" in text
    assert "kts.max_change_points = auto" in text
    assert load_config(path) == config
    assert RunConfig() == load_config()


# ---------------------------------------------------------------- dataio


def _entry(root: Path, video_id: str, T: int, d: int, summaries, importances=None) -> ManifestEntry:
    write_embeddings(root / f"{video_id}.kfe", _sequence(T, d, video_id=video_id))
    write_annotation(root / f"{video_id}.json", Annotation(video_id, summaries, importances))
    return ManifestEntry(video_id, root / f"{video_id}.kfe", root / f"{video_id}.json")


def test_load_minimal_dataset(tmp_path: Path):
    entry = _entry(tmp_path, "v1", 4, 2, [[1, 0, 0, 1]])
    write_manifest(tmp_path / "manifest.json", DatasetManifest("toy", Reduction.MAXIMUM, (entry,)))
    dataset = load_dataset(tmp_path / "manifest.json")
    assert dataset.ids == ["v1"]
    assert dataset.reduction is Reduction.MAXIMUM
    video = dataset["v1"]
    assert (video.T, video.embeddings.d) == (4, 2)
    assert video.annotation.user_summaries.tolist() == [[1, 0, 0, 1]]
    assert validate_dataset(dataset).ok


def test_dataset_errors(tmp_path: Path):
    entry = _entry(tmp_path, "v1", 4, 2, [[1, 0, 1]])
    write_manifest(tmp_path / "short.json", DatasetManifest("toy", Reduction.AVERAGE, (entry,)))
    with pytest.raises(DimensionMismatch):
        load_dataset(tmp_path / "short.json")

    (tmp_path / "dup.json").write_text(
        json.dumps({"videos": [{"video_id": "a", "embeddings": "a.kfe"}, {"video_id": "a", "embeddings": "b.kfe"}]})
    )
    with pytest.raises(DuplicateVideoId):
        load_dataset(tmp_path / "dup.json")

    (tmp_path / "gone.json").write_text(json.dumps({"videos": [{"video_id": "x", "embeddings": "x.kfe"}]}))
    with pytest.raises(MissingFile):
        load_dataset(tmp_path / "gone.json")

    for name, text in [
        ("novideos", json.dumps({"name": "x"})),
        ("noid", json.dumps({"videos": [{"embeddings": "v1.kfe"}]})),
        ("noemb", json.dumps({"videos": [{"video_id": "v1"}]})),
        ("reduction", json.dumps({"reduction": "median", "videos": []})),
        ("entry", json.dumps({"videos": ["v1.kfe"]})),
        ("broken", '{"videos": ['),
    ]:
        (tmp_path / f"{name}.json").write_text(text)
        with pytest.raises(CorruptDocument, match=f"{name}.json"):
            read_manifest(tmp_path / f"{name}.json")


def test_annotation_values(tmp_path: Path):
    entry = _entry(tmp_path, "v1", 4, 2, [[1, 0, 0, 1]])
    (tmp_path / "v1.json").write_text(json.dumps({"video_id": "v1", "user_summaries": [[1.0, 0.0, 0.0, 1.0]]}))
    write_manifest(tmp_path / "manifest.json", DatasetManifest("toy", Reduction.AVERAGE, (entry,)))
    assert load_dataset(tmp_path / "manifest.json")["v1"].annotation.user_summaries.tolist() == [[1, 0, 0, 1]]

    for row in ([0.7, 1, 0, 0], [1, 0, 2.9, 0]):
        (tmp_path / "v1.json").write_text(json.dumps({"video_id": "v1", "user_summaries": [row]}))
        with pytest.raises(CorruptDocument):
            load_dataset(tmp_path / "manifest.json")
    (tmp_path / "v1.json").write_text(json.dumps({"video_id": "v1", "user_summaries": [[1, 0, "x", 0]]}))
    with pytest.raises(CorruptDocument):
        read_annotation(tmp_path / "v1.json", "v1", 4)
    (tmp_path / "v1.json").write_text(json.dumps([[1, 0, 0, 1]]))
    with pytest.raises(CorruptDocument):
        read_annotation(tmp_path / "v1.json", "v1", 4)

    with pytest.raises(ValidateFailed):
        Annotation("v1", [[0.7, 1.0, 0.0, 0.0]])
    with pytest.raises(ValidateFailed):
        Annotation("v1", [[np.nan, 1.0, 0.0, 0.0]])
    assert Annotation("v1", np.array([[1.0, 0.0]])).user_summaries.dtype == np.int64


def test_load_is_order_independent(tmp_path: Path):
    entries = [
        _entry(tmp_path, vid, T, 3, np.eye(2, T, dtype=np.int64), np.full((1, T), 0.5))
        for vid, T in (("c", 5), ("a", 7), ("b", 6), ("d", 4))
    ]
    for k, order in enumerate(([0, 1, 2, 3], [3, 2, 1, 0], [1, 3, 0, 2])):
        write_manifest(
            tmp_path / f"m{k}.json",
            DatasetManifest("toy", Reduction.AVERAGE, tuple(entries[i] for i in order)),
        )
    first, *rest = (load_dataset(tmp_path / f"m{k}.json", workers=k + 1) for k in range(3))
    assert first.ids == ["a", "b", "c", "d"]
    for other in rest:
        assert other.ids == first.ids
        for vid in first.ids:
            a, b = first[vid], other[vid]
            assert np.array_equal(a.embeddings.data, b.embeddings.data)
            assert np.array_equal(a.annotation.user_summaries, b.annotation.user_summaries)
            assert np.array_equal(a.annotation.frame_importances, b.annotation.frame_importances)


def test_embedding_codec(tmp_path: Path):
    seq = _sequence(5, 3)
    write_embeddings(tmp_path / "a.kfe", seq)
    back = read_embeddings(tmp_path / "a.kfe")
    assert back.video_id == "a"
    assert np.array_equal(back.data, seq.data)

    raw = (tmp_path / "a.kfe").read_bytes()
    (tmp_path / "magic.kfe").write_bytes(b"XXXX" + raw[4:])
    (tmp_path / "short.kfe").write_bytes(raw[:-4])
    bad = np.array(seq.data)
    bad[2, 1] = np.nan
    (tmp_path / "nan.kfe").write_bytes(raw[:20] + bad.astype("<f4").tobytes())
    for name in ("magic", "short", "nan"):
        with pytest.raises(CorruptEmbedding):
            read_embeddings(tmp_path / f"{name}.kfe")
    with pytest.raises(MissingFile):
        read_embeddings(tmp_path / "missing.kfe")
    with pytest.raises(DimensionMismatch):
        FrameEmbeddingSequence("v", np.zeros(4))


def test_folds(tmp_path: Path, caplog):
    ids = [f"v{i:02d}" for i in range(25)]
    spec = FoldSpec(tuple(Fold(tuple(i for i in ids if i not in ids[k::5]), tuple(ids[k::5])) for k in range(5)))
    write_folds(tmp_path / "folds.json", spec)
    folds = load_folds(tmp_path / "folds.json", ids)
    assert len(folds) == 5
    assert all(len(f.test_ids) == 5 and len(f.train_ids) == 20 for f in folds)

    def write(train, test):
        write_folds(tmp_path / "bad.json", FoldSpec((Fold(tuple(train), tuple(test)),)))
        return tmp_path / "bad.json"

    with pytest.raises(UnknownVideoId):
        load_folds(write(ids[:20], [*ids[20:24], "vid99"]), ids)
    with pytest.raises(OverlappingFold):
        load_folds(write(ids[:21], ids[20:]), ids)
    with pytest.raises(IncompleteFold):
        load_folds(write(ids[:10], ids[20:]), ids)
    (tmp_path / "notest.json").write_text(json.dumps({"folds": [{"train": ids}]}))
    with pytest.raises(CorruptDocument):
        load_folds(tmp_path / "notest.json", ids)

    caplog.clear()
    load_folds(write(ids[:20], ids[20:]), ids)
    assert any(r.levelname == "WARNING" and r.name == "recsum.dataio" for r in caplog.records)


def test_validate_dataset():
    a = Video(_sequence(4, 2, video_id="a"), Annotation("a", [[1, 0, 0, 1]], [[0.1, 0.2, 0.3, 0.4]]))
    b = Video(_sequence(4, 2, video_id="b"), Annotation("b", [[0, 1, 1, 0]]))
    report = validate_dataset([a, b])
    assert report.ok
    assert len(report.entries) == 2
    assert [e.rank_metrics_available for e in report.entries] == [True, False]

    c = Video(_sequence(4, 2, video_id="c"), Annotation("c", [[0, 2, 1, 0]]))
    report = validate_dataset([a, c])
    assert len(report.violations) == 1
    assert report.violations[0].video_id == "c"
    assert report.to_dict()["violations"][0]["video_id"] == "c"

    assert not validate_dataset([Video(_sequence(4, 2, video_id="d"))]).ok


# ---------------------------------------------------------------- segmentation


def test_kts_examples():
    assert kts_segment(np.ones((40, 4)), penalty_weight=1.0).boundaries == (0,)

    u, v = np.eye(2)
    X = np.array([u] * 4 + [v] * 4)
    assert kts_segment(X, max_change_points=3, penalty_weight=1.0).boundaries == (0, 4)

    X = np.repeat(np.eye(3), 2, axis=0)
    assert kts_segment(X, max_change_points=3, penalty_weight=0.0).boundaries == (0, 2, 4)

    assert penalty(10, 0) == 0.0
    with pytest.raises(ValueError):
        kts_segment(np.ones((4, 2)), max_change_points=4)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 8), st.integers(0, 2**32 - 1), st.floats(0.0, 2.0))
def test_kts_matches_exhaustive_search(T, seed, weight):
    X = np.random.default_rng(seed).standard_normal((T, 3))
    shots = kts_segment(X, max_change_points=T - 1, penalty_weight=weight)
    Xn = X / np.linalg.norm(X, axis=1, keepdims=True)
    best = min(
        segmentation_cost(Xn, (0, *cps), weight)
        for k in range(T)
        for cps in itertools.combinations(range(1, T), k)
    )
    assert segmentation_cost(Xn, shots.boundaries, weight) == pytest.approx(best, abs=1e-7)


def test_shot_table():
    shots = ShotTable((0, 3, 5), 9)
    assert shots.lengths == (3, 2, 4)
    assert shots.spans == [(0, 3), (3, 5), (5, 9)]
    assert shots.labels.tolist() == [0, 0, 0, 1, 1, 2, 2, 2, 2]
    assert ShotTable.from_dict(shots.to_dict("v")) == shots
    with pytest.raises(ValueError):
        ShotTable((1, 3), 9)
    with pytest.raises(ValueError):
        ShotTable((0, 9), 9)


def test_sequential_split():
    subs = sequential_split(_sequence(256), 128)
    assert len(subs) == 2
    assert [s.valid_count for s in subs] == [128, 128]
    assert subs[1].source_indices.tolist() == list(range(128, 256))

    subs = sequential_split(_sequence(300), 128)
    assert len(subs) == 3
    assert subs[2].valid_count == 44
    assert (subs[2].source_indices[44:] == PAD).all()
    assert not subs[2].frames[44:].any()

    E = _sequence(256)
    subs = sequential_split(E, 128, delta=-10)
    assert len(subs) == 3
    assert (subs[0].source_indices[:10] == PAD).all()
    assert subs[0].source_indices[10:].tolist() == list(range(118))
    assert np.array_equal(subs[0].frames[10:], E.data[:118])

    with pytest.raises(ValueError):
        sequential_split(E, 128, delta=65)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 200), st.integers(2, 40), st.data())
def test_shifted_split_covers_every_frame_once(T, L, data):
    delta = data.draw(st.integers(-(L // 2), L // 2))
    E = _sequence(T, d=3)
    subs = sequential_split(E, L, delta)
    flat = np.concatenate([s.source_indices for s in subs])
    offset = int(np.argmax(flat != PAD))
    assert 0 <= offset < L
    assert (offset + delta) % L == 0
    assert flat[offset : offset + T].tolist() == list(range(T))
    assert (flat[:offset] == PAD).all()
    assert (flat[offset + T :] == PAD).all()
    assert len(flat) - offset - T < L
    for s in subs:
        assert np.array_equal(s.frames[s.valid_mask], E.data[s.source_indices[s.valid_mask]])


def test_dilated_split():
    subs = dilated_split(_sequence(300), 128)
    assert len(subs) == 3
    assert subs[0].source_indices[:4].tolist() == [0, 3, 6, 9]
    assert sum(s.valid_count for s in subs) == 300

    E = _sequence(128)
    (only,) = dilated_split(E, 128)
    assert only.source_indices.tolist() == list(range(128))
    assert np.array_equal(only.frames, E.data)

    sub0, sub1 = dilated_split(_sequence(5), 4)
    assert sub0.source_indices.tolist() == [0, 2, 4, PAD]
    assert sub1.source_indices.tolist() == [1, 3, PAD, PAD]


def test_shot_labels():
    E = _sequence(8)
    shots = ShotTable((0, 4), 8)
    (sub,) = sequential_split(E, 8)
    assert attach_shot_labels(sub, shots).shot_labels.tolist() == [0, 0, 0, 0, 1, 1, 1, 1]
    (one,) = sequential_split(_sequence(8), 8)
    assert set(attach_shot_labels(one, ShotTable((0,), 8)).shot_labels.tolist()) == {0}

    dilated = decompose(E, 4, shots, dilated=True)
    assert dilated[-2].shot_labels.tolist() == [0, 0, 1, 1]

    padded = decompose(_sequence(6), 4, ShotTable((0, 3), 6))
    assert padded[1].shot_labels.tolist() == [1, 1, PAD, PAD]

    with pytest.raises(IndexOutOfRange):
        attach_shot_labels(sub, ShotTable((0,), 5))


# ---------------------------------------------------------------- masking


def _check_plan(sub: SubSequence, plan: MaskPlan):
    taken = np.zeros(sub.L, dtype=bool)
    for w in plan.candidate_windows:
        assert w.length >= 1
        assert not taken[w.start : w.stop].any()
        taken[w.start : w.stop] = True
        assert sub.valid_mask[w.start : w.stop].all()
        assert len(set(sub.shot_labels[w.start : w.stop].tolist())) == 1
    for w in plan.candidate_windows:
        if w.disposition is Disposition.REPLACE:
            assert sub.valid_mask[w.source : w.source + w.length].all()
            assert not taken[w.source : w.source + w.length].any()


def test_masking_single_shot():
    sub = _sub([128])
    plan = plan_masking(sub, 0.5, 0.25, 0)
    assert len(plan.candidate_windows) == 1
    assert plan.candidate_windows[0].length == 64
    assert mask_fraction(plan) == 0.5
    _check_plan(sub, plan)

    plan = plan_masking(sub, 1.0, 0.25, 1)
    assert [(w.start, w.length) for w in plan.candidate_windows] == [(0, 128)]


def test_masking_four_shots():
    sub = _sub([32, 32, 32, 32])
    for seed in range(20):
        plan = plan_masking(sub, 0.5, 0.25, seed)
        assert [w.length for w in plan.candidate_windows] == [16, 16]
        assert mask_fraction(plan) == 0.25
        _check_plan(sub, plan)


def test_masking_methods():
    sub = _sub([40, 40, 48])
    plan = plan_masking(sub, 0.5, 0.25, 3, MaskingMethod.FIXED, window_size=7)
    assert all(w.length == 7 for w in plan.candidate_windows)
    _check_plan(sub, plan)

    plan = plan_masking(sub, 0.5, 0.25, 3, MaskingMethod.RANDOM)
    assert all(w.length == 1 and w.disposition is Disposition.MASK for w in plan.candidate_windows)
    assert 0 < len(plan.candidate_windows) < sub.L

    padded = _sub([20, 30], pad=14)
    for seed in range(10):
        plan = plan_masking(padded, 0.5, 0.25, seed)
        assert not plan.candidate_mask()[padded.valid_count :].any()
        _check_plan(padded, plan)


def test_masking_determinism_and_errors():
    sub = _sub([16] * 8)
    assert plan_masking(sub, 0.5, 0.25, 42) == plan_masking(sub, 0.5, 0.25, 42)
    rng = np.random.default_rng(5)
    assert plan_masking(sub, 0.5, 0.25, rng).rng_seed == plan_masking(sub, 0.5, 0.25, np.random.default_rng(5)).rng_seed

    empty = SubSequence("v", np.zeros((4, 2), np.float32), np.full(4, PAD), np.full(4, PAD))
    with pytest.raises(InsufficientMaskableFrames):
        plan_masking(empty, 0.5, 0.25, 0)


def test_masking_statistics():
    counts = np.zeros(3)
    for seed in range(2000):
        sub = _sub([16] * 8 if seed % 2 else [32, 24, 40, 32])
        plan = plan_masking(sub, 0.5, 0.25, seed)
        threshold = 0.25 * sub.valid_count
        total = sum(w.length for w in plan.candidate_windows)
        assert threshold <= total < threshold + max(w.length for w in plan.candidate_windows)
        for w in plan.candidate_windows:
            counts[int(w.disposition)] += 1
    freq = counts / counts.sum()
    assert freq[Disposition.MASK] == pytest.approx(0.8, abs=0.02)
    assert freq[Disposition.REPLACE] == pytest.approx(0.1, abs=0.02)
    assert freq[Disposition.KEEP] == pytest.approx(0.1, abs=0.02)


def test_apply_mask():
    sub = _sub([32])
    token = MaskToken.sample(4, seed=0)
    assert np.array_equal(apply_mask(sub, MaskPlan(32, 32, (), 0), token), sub.frames)

    plan = MaskPlan(32, 32, (CandidateWindow(10, 4, Disposition.MASK),), 0)
    out = apply_mask(sub, plan, token)
    assert np.array_equal(out[10:14], np.tile(token.m, (4, 1)))
    assert np.array_equal(out[:10], sub.frames[:10])
    assert np.array_equal(out[14:], sub.frames[14:])

    plan = MaskPlan(32, 32, (CandidateWindow(0, 4, Disposition.REPLACE, 8), CandidateWindow(20, 3, Disposition.KEEP)), 0)
    out = apply_mask(sub, plan, token)
    assert np.array_equal(out[0:4], sub.frames[8:12])
    assert np.array_equal(out[4:], sub.frames[4:])
    assert plan.dispositions[1] == (Disposition.REPLACE, 9)
    assert plan.dispositions[21] is Disposition.KEEP
    assert plan.altered_mask().sum() == 4
    assert plan.candidate_mask().sum() == 7
    assert mask_fraction(MaskPlan(32, 32, (), 0)) == 0.0

    with pytest.raises(PlanMismatch):
        apply_mask(_sub([16]), plan, token)


# ---------------------------------------------------------------- model


def test_generator_forward():
    model = build_generator(TINY, seed=0)
    x = _randn(16, 8)
    valid = torch.ones(16, dtype=torch.bool)
    out = forward_generator(model, x, valid)
    assert out.shape == (16, 8)
    assert torch.isfinite(out).all()
    assert torch.equal(out, forward_generator(model, x, valid))
    assert torch.equal(out, forward_generator(build_generator(TINY, seed=0), x, valid))
    assert not torch.equal(model.mask_token, build_generator(TINY, seed=1).mask_token)
    assert forward_generator(model, _randn(3, 10, 8), torch.ones(3, 10, dtype=torch.bool)).shape == (3, 10, 8)

    with pytest.raises(ShapeMismatch):
        forward_generator(model, _randn(16, 6), valid)
    with pytest.raises(ShapeMismatch):
        forward_generator(model, _randn(17, 8), torch.ones(17, dtype=torch.bool))


def test_padding_is_ignored():
    model = build_generator(TINY, seed=0)
    x = _randn(16, 8)
    valid = torch.arange(16) < 10
    swapped = x.clone()
    swapped[[12, 14]] = x[[14, 12]]
    swapped[15] = 100.0
    a = forward_generator(model, x, valid)
    b = forward_generator(model, swapped, valid)
    assert torch.allclose(a[:10], b[:10], atol=1e-6)


def test_summarizer_scores():
    model = build_summarizer(TINY, seed=0)
    valid = torch.arange(16) < 12
    with torch.no_grad():
        model.score_weight.zero_()
        p = forward_summarizer(model, _randn(16, 8), valid)
    assert torch.allclose(p[:12], torch.full((12,), 0.5))
    assert (p[12:] == PAD_SCORE).all()

    with torch.no_grad():
        p = forward_summarizer(model, _randn(16, 8), torch.zeros(16, dtype=torch.bool))
    assert (p == PAD_SCORE).all()


def test_summarizer_init_from_generator():
    gen = build_generator(TINY, seed=0)
    a = init_summarizer_from_generator(gen, seed=1)
    b = init_summarizer_from_generator(gen, TINY, seed=2)
    x, valid = _randn(1, 16, 8), torch.ones(1, 16, dtype=torch.bool)
    with torch.no_grad():
        assert torch.equal(a.hidden(x, valid), gen(x, valid))
        assert torch.equal(b.hidden(x, valid), gen(x, valid))
    assert not torch.equal(a.score_weight, b.score_weight)
    assert torch.equal(a.encoder.position, gen.encoder.position)
    with pytest.raises(ConfigMismatch):
        init_summarizer_from_generator(gen, EncoderConfig(l=2, h=2, d=8, L=16))


def test_gradients_of_quadratic():
    model = build_generator(TINY, seed=0)
    loss = sum((p**2).sum() for p in model.parameters()) / 2
    grads = gradients(model, loss)
    for name, param in model.named_parameters():
        assert torch.allclose(grads[name], param)


def test_generator_gradient_check():
    config = EncoderConfig(l=1, h=2, d=8, L=4)
    model = build_generator(config, seed=3, dtype=torch.float64)
    S = _randn(4, 8, dtype=torch.float64)
    M = S.clone()
    M[1] = model.mask_token
    valid = torch.ones(4, dtype=torch.bool)

    def loss_fn():
        return reconstruction_loss(S, forward_generator(model, M, valid), valid).rec

    analytic = gradients(model, loss_fn())
    worst = 0.0
    with torch.no_grad():
        for name, param in model.named_parameters():
            flat = param.view(-1)
            for i in range(0, flat.numel(), max(1, flat.numel() // 6)):
                origin = float(flat[i])
                flat[i] = origin + 1e-5
                up = float(loss_fn())
                flat[i] = origin - 1e-5
                down = float(loss_fn())
                flat[i] = origin
                numeric = (up - down) / 2e-5
                exact = float(analytic[name].view(-1)[i])
                worst = max(worst, abs(numeric - exact) / max(abs(numeric), abs(exact), 1e-4))
    assert worst < 1e-4


def test_checkpoint_roundtrip(tmp_path: Path):
    model = build_generator(TINY, seed=0)
    optimizer = torch.optim.AdamW(model.parameters(), lr=1e-3)
    loss = forward_generator(model, _randn(16, 8), torch.ones(16, dtype=torch.bool)).pow(2).mean()
    loss.backward()
    optimizer.step()
    ckpt = make_checkpoint(model, optimizer, epoch=3, best_loss=0.25, rng=torch.Generator().manual_seed(1))
    save_checkpoint(tmp_path / "a.ckpt", ckpt)
    loaded = load_checkpoint(tmp_path / "a.ckpt")
    save_checkpoint(tmp_path / "b.ckpt", loaded)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    assert loaded.role is Role.GENERATOR
    assert loaded.config == TINY
    assert (loaded.epoch, loaded.best_loss) == (3, 0.25)
    assert np.array_equal(loaded.mask_token, model.mask_token.numpy())
    restored = restore_model(loaded)
    assert parameter_hash(restored) == parameter_hash(model)

    fresh = torch.optim.AdamW(restored.parameters(), lr=1e-3)
    restore_optimizer(loaded, fresh)
    assert torch.equal(fresh.state_dict()["state"][0]["exp_avg"], optimizer.state_dict()["state"][0]["exp_avg"])

    summarizer = init_summarizer_from_generator(model, seed=0)
    save_checkpoint(tmp_path / "s.ckpt", make_checkpoint(summarizer))
    assert restore_model(load_checkpoint(tmp_path / "s.ckpt")).role is Role.SUMMARIZER


def test_checkpoint_errors(tmp_path: Path):
    save_checkpoint(tmp_path / "a.ckpt", make_checkpoint(build_generator(TINY, seed=0)))
    raw = (tmp_path / "a.ckpt").read_bytes()

    (tmp_path / "magic.ckpt").write_bytes(b"XXXX" + raw[4:])
    (tmp_path / "short.ckpt").write_bytes(raw[:-10])
    (tmp_path / "long.ckpt").write_bytes(raw + b"\0")
    for name in ("magic", "short", "long"):
        with pytest.raises(CorruptFile):
            load_checkpoint(tmp_path / f"{name}.ckpt")

    (tmp_path / "v1.ckpt").write_bytes(raw[:4] + struct.pack("<I", 1) + raw[8:])
    with pytest.raises(VersionMismatch):
        load_checkpoint(tmp_path / "v1.ckpt")
    with pytest.raises(MissingCheckpoint):
        load_checkpoint(tmp_path / "missing.ckpt")


# ---------------------------------------------------------------- pretraining


def test_reconstruction_loss_examples():
    valid = torch.ones(1, dtype=torch.bool)
    e = torch.tensor([[1.0, 0.0]])
    loss = reconstruction_loss(e, torch.tensor([[0.0, 1.0]]), valid)
    assert float(loss.ce) == pytest.approx(1.0)
    assert float(loss.l1) == pytest.approx(2.0)
    assert float(loss.rec) == pytest.approx(3.0)
    assert float(loss.mse) == pytest.approx(1.0)
    assert float(reconstruction_loss(e, -e, valid).ce) == pytest.approx(2.0)

    S = _randn(5, 4)
    same = reconstruction_loss(S, S.clone(), torch.ones(5, dtype=torch.bool))
    assert float(same.rec) == pytest.approx(0.0, abs=1e-6)

    only_ce = reconstruction_loss(e, torch.tensor([[0.0, 1.0]]), valid, LossVariant.CE)
    assert float(only_ce.rec) == pytest.approx(1.0)
    mse_ce = reconstruction_loss(e, torch.tensor([[0.0, 1.0]]), valid, LossVariant.MSE_CE)
    assert float(mse_ce.rec) == pytest.approx(2.0)


def test_reconstruction_loss_padding_and_zero_norm():
    S = torch.tensor([[1.0, 0.0], [5.0, 5.0]])
    S_hat = torch.tensor([[1.0, 0.0], [-5.0, 0.0]])
    loss = reconstruction_loss(S, S_hat, torch.tensor([True, False]))
    assert float(loss.rec) == pytest.approx(0.0)

    zero = torch.zeros(1, 2)
    assert float(reconstruction_loss(zero, torch.tensor([[1.0, 0.0]]), torch.ones(1, dtype=torch.bool)).ce) == 1.0
    with pytest.raises(ZeroNormVector):
        reconstruction_loss(zero, torch.tensor([[1.0, 0.0]]), torch.ones(1, dtype=torch.bool), strict=True)
    with pytest.raises(ShapeMismatch):
        reconstruction_loss(S, S_hat[:1], torch.ones(2, dtype=torch.bool))


def test_learning_rate_schedule():
    config = PretrainConfig()
    assert lr_at(0, config) == 0.0
    assert lr_at(50, config) == pytest.approx(0.005)
    assert lr_at(100, config) == pytest.approx(0.01)
    assert lr_at(550, config) == pytest.approx(0.005)
    assert lr_at(1000, config) == 0.0
    assert lr_at(1500, config) == 0.0
    assert lr_at(150, config, steps_per_epoch=3) == pytest.approx(0.005)


def test_pretrain_edges():
    E = _sequence(40)
    shots = {"v": ShotTable((0, 20), 40)}
    result = pretrain([E], PretrainConfig(epochs=0), TINY, shots)
    assert result.history == []
    assert parameter_hash(result.model) == parameter_hash(build_generator(TINY, seed=0))

    with pytest.raises(EmptyTrainSet):
        pretrain([], PretrainConfig(epochs=1), TINY)
    with pytest.raises(ShapeMismatch):
        pretrain([_sequence(40, d=6)], PretrainConfig(epochs=1), TINY, {"v": ShotTable((0,), 40)})

    data = np.array(E.data)
    data[7, 3] = np.nan
    with pytest.raises(DivergenceDetected):
        pretrain([FrameEmbeddingSequence("v", data)], PretrainConfig(epochs=1), TINY, shots)


def test_pretrain_reduces_loss():
    prototypes = np.random.default_rng(0).standard_normal((4, 8)) * 2.0
    video = make_video("v", prototypes, T=64, seed=0)
    config = PretrainConfig(epochs=30, batch_size=4, peak_lr=1e-3, warmup_epochs=0, cosine_horizon_epochs=1000)
    seen = []
    result = pretrain([video.embeddings], config, TINY, {"v": video.shots}, on_epoch=seen.append)
    assert len(result.history) == 30
    assert seen == result.history
    assert result.history[-1].rec < result.history[0].rec
    assert result.best is not None
    best = min(result.history, key=lambda h: h.end_rec)
    assert result.checkpoint.best_loss == best.end_rec
    assert result.checkpoint.epoch == best.epoch
    assert all(math.isfinite(h.end_rec) for h in result.history)


def test_pretrain_best_checkpoint_matches_its_loss():
    E = _sequence(48)
    shots = {"v": ShotTable((0, 16, 30), 48)}
    config = PretrainConfig(epochs=1, batch_size=2, peak_lr=0.05, warmup_epochs=0, cosine_horizon_epochs=10)
    result = pretrain([E], config, TINY, shots, dtype=torch.float64)
    (record,) = result.history
    assert record.end_rec != record.rec
    assert result.checkpoint.best_loss == record.end_rec
    assert parameter_hash(restore_model(result.checkpoint)) == parameter_hash(result.model)


def test_pretrain_determinism():
    E = _sequence(48)
    shots = {"v": ShotTable((0, 16, 30), 48)}
    config = PretrainConfig(epochs=2, batch_size=4, warmup_epochs=1, cosine_horizon_epochs=10, masked_only=True)
    a = pretrain([E], config, TINY, shots, dtype=torch.float64)
    b = pretrain([E], config, TINY, shots, dtype=torch.float64, workers=1)
    assert [h.rec for h in a.history] == [h.rec for h in b.history]
    assert parameter_hash(a.model) == parameter_hash(b.model)


# ---------------------------------------------------------------- reinforcement learning


def test_reward_and_regularizer():
    assert compute_reward(0.0) == 0.5
    assert compute_reward(math.log(3)) == pytest.approx(0.25)
    grid = [compute_reward(x) for x in np.linspace(0, 50, 26)]
    assert all(a > b for a, b in zip(grid, grid[1:]))
    assert float(compute_reward(torch.tensor([0.0]))[0]) == 0.5

    assert float(regularization_loss(torch.full((4,), 0.5))) == 0.0
    assert float(regularization_loss(torch.full((4,), 0.9), delta=0.5)) == pytest.approx(0.4)
    assert float(regularization_loss(torch.tensor([0.2, 0.8]))) == pytest.approx(0.0)
    padded = torch.tensor([0.9, 0.9, PAD_SCORE])
    assert float(regularization_loss(padded)) == pytest.approx(0.4)

    baseline = Baseline()
    assert baseline.update(1.0) == pytest.approx(0.55)


def test_build_summary_input():
    S = _randn(4, 3)
    token = torch.full((3,), 7.0)
    assert torch.equal(build_summary_input(S, torch.ones(4), token), S)
    assert (build_summary_input(S, torch.zeros(4), token) == 7.0).all()
    M = build_summary_input(S, torch.tensor([1.0, 0.0, 1.0, 0.0]), token)
    assert torch.equal(M[[0, 2]], S[[0, 2]])
    assert (M[[1, 3]] == 7.0).all()
    with pytest.raises(ShapeMismatch):
        build_summary_input(S, torch.ones(5), token)


def test_sample_actions():
    half = sample_actions(torch.full((10000, 8), 0.5), torch.Generator().manual_seed(0))
    assert float(half.mean()) == pytest.approx(0.5, abs=0.02)
    high = sample_actions(torch.full((10000, 8), 0.99), torch.Generator().manual_seed(1))
    assert float(high.mean()) == pytest.approx(0.99, abs=0.01)

    p = torch.tensor([0.3, 0.7, PAD_SCORE, PAD_SCORE])
    a = sample_actions(p.expand(100, 4), torch.Generator().manual_seed(2))
    assert (a[:, 2:] == 0).all()
    assert torch.equal(
        sample_actions(p, torch.Generator().manual_seed(3)), sample_actions(p, torch.Generator().manual_seed(3))
    )


def _reinforce_gradients(episodes: int, seed: int):
    p = torch.tensor([0.5, 0.6, 0.7, 0.8], dtype=torch.float64, requires_grad=True)
    cost = torch.tensor([1.0, 1.5, 2.0, 2.5], dtype=torch.float64)

    def reward(a):
        return compute_reward((cost * (1 - a)).sum(-1))

    combos = torch.tensor(list(itertools.product([0.0, 1.0], repeat=4)), dtype=torch.float64)
    prob = (p**combos * (1 - p) ** (1 - combos)).prod(-1)
    expected = (prob * reward(combos)).sum()
    (exact,) = torch.autograd.grad(expected, p)

    actions = sample_actions(p.detach().expand(episodes, 1, 4), torch.Generator().manual_seed(seed))
    loss = reinforce_loss(p[None], actions, reward(actions), float(expected.detach()))
    (estimate,) = torch.autograd.grad(-loss, p)
    return exact, estimate


def test_reinforce_is_unbiased():
    """A single seed at 100k episodes sits near 1.5 standard errors from the exact gradient for the
    p=0.8 component, so the quick run doubles the episodes and loosens the bound to 5%. The 2% bound
    is held by the acceptance run below at 1M episodes."""
    exact, estimate = _reinforce_gradients(200_000, seed=0)
    assert ((estimate - exact).abs() / exact.abs()).max() < 0.05


@acceptance
def test_reinforce_is_unbiased_long():
    exact, estimate = _reinforce_gradients(1_000_000, seed=1)
    assert ((estimate - exact).abs() / exact.abs()).max() < 0.02


def test_zero_advantage_gives_zero_policy_gradient():
    p = torch.tensor([0.3, 0.6, 0.9, 0.5], requires_grad=True)
    actions = torch.tensor([[1.0, 0.0, 1.0, 1.0]])
    reinforce_loss(p, actions, torch.tensor([0.4]), 0.4).backward()
    assert (p.grad == 0).all()


def _rl_pair(L: int = 8, seed: int = 0):
    config = EncoderConfig(l=1, h=2, d=8, L=L)
    generator = build_generator(config, seed=seed, dtype=torch.float64)
    return generator, init_summarizer_from_generator(generator, seed=seed)


def test_baseline_stays_within_reward_range():
    rng = np.random.default_rng(0)
    for decay in (0.0, 0.5, 0.9, 0.99):
        baseline = Baseline(0.5, decay)
        rewards = compute_reward(torch.from_numpy(rng.exponential(2.0, 500))).tolist()
        for r in rewards:
            value = baseline.update(r)
            assert min(0.5, min(rewards)) - 1e-12 <= value <= max(0.5, max(rewards)) + 1e-12
            assert 0.0 < value < 1.0
    baseline = Baseline(0.5, 0.9)
    for _ in range(200):
        baseline.update(0.2)
    assert baseline.value == pytest.approx(0.2)


def test_policy_update_regularizer_dominates():
    generator, summarizer = _rl_pair()
    S = _randn(2, 8, 8, dtype=torch.float64)
    valid = torch.ones(2, 8, dtype=torch.bool)
    config = RLConfig(delta=0.2, beta=1e6, episodes=1)
    optimizer = torch.optim.Adam(summarizer.parameters(), lr=3e-3)
    actions = torch.Generator().manual_seed(0)
    baseline = Baseline()
    for _ in range(400):
        policy_update(summarizer, generator, (S, valid), config, baseline, optimizer, actions)
    with torch.no_grad():
        assert float(summarizer(S, valid).mean()) == pytest.approx(0.2, abs=0.05)


def test_policy_update_step():
    generator, summarizer = _rl_pair()
    subs = decompose(_sequence(20), 8)
    optimizer = torch.optim.AdamW(summarizer.parameters(), lr=1e-4)
    baseline = Baseline(0.5, 0.9)
    config = RLConfig(episodes=3)
    step = policy_update(
        summarizer, generator, subs, config, baseline, optimizer, torch.Generator().manual_seed(0), True, True
    )
    assert len(step.traces) == 3 * len(subs)
    assert all(t.baseline == 0.5 for t in step.traces)
    assert 0.0 < step.mean_reward < 0.5
    assert baseline.value == pytest.approx(0.9 * 0.5 + 0.1 * step.mean_reward)
    for trace in step.traces:
        assert trace.actions.shape == (8,)


def test_policy_update_detects_generator_changes():
    generator, summarizer = _rl_pair()

    class Tamper(torch.optim.SGD):
        def step(self, closure=None):
            with torch.no_grad():
                generator.mask_token.add_(1.0)
            return super().step(closure)

    S = _randn(1, 8, 8, dtype=torch.float64)
    with pytest.raises(FrozenModelViolation):
        policy_update(
            summarizer,
            generator,
            (S, torch.ones(1, 8, dtype=torch.bool)),
            RLConfig(episodes=1),
            Baseline(),
            Tamper(summarizer.parameters(), lr=0.0),
            check_frozen=True,
        )


def test_train_summarizer():
    videos = [_sequence(20, seed=1, video_id="a"), _sequence(13, seed=2, video_id="b")]
    generator, _ = _rl_pair()
    frozen = parameter_hash(generator)
    result = train_summarizer(videos, generator, RLConfig(epochs=0))
    assert result.history == []
    assert torch.equal(result.model.score_weight, init_summarizer_from_generator(generator, seed=0).score_weight)

    config = RLConfig(epochs=2, batch_size=4, episodes=2, lr=1e-3)
    a = train_summarizer(videos, generator, config)
    b = train_summarizer(videos, generator, config)
    assert len(a.history) == 2
    assert a.best is not None
    assert a.checkpoint.role is Role.SUMMARIZER
    assert "rng.torch" in a.checkpoint.tensors
    assert torch.equal(a.model.score_weight, b.model.score_weight)
    assert a.history == b.history
    assert parameter_hash(generator) == frozen
    assert a.best_model().config == generator.config

    with pytest.raises(EmptyTrainSet):
        train_summarizer([], generator, config)


# ---------------------------------------------------------------- summarization


def test_score_video_coverage():
    model = build_summarizer(TINY, seed=0)
    E = _sequence(16)
    scores = score_video(model, E)
    assert (scores.contributions == 2).all()
    with torch.no_grad():
        direct = forward_summarizer(model, torch.from_numpy(np.array(E.data)), torch.ones(16, dtype=torch.bool))
    assert np.allclose(scores.O, direct.numpy(), atol=1e-5)

    scores = score_video(model, _sequence(32))
    assert (scores.contributions == 2).all()
    assert ((scores.O > 0) & (scores.O < 1)).all()
    assert (score_video(model, _sequence(32), sequential_only=True).contributions == 1).all()
    assert (score_video(model, _sequence(37)).contributions == 2).all()

    with torch.no_grad():
        model.score_weight.zero_()
    flat = FrameEmbeddingSequence("c", np.ones((40, 8)))
    assert np.allclose(score_video(model, flat).O, 0.5)

    with pytest.raises(ShapeMismatch):
        score_video(model, _sequence(64), L=32)
    with pytest.raises(ShapeMismatch):
        score_video(model, _sequence(20, d=6))


def test_aggregate_scores_is_linear():
    subs = decompose(_sequence(30), 8)
    raw = [np.random.default_rng(i).random(8) for i in range(len(subs))]
    once = aggregate_scores("v", 30, subs, raw)
    twice = aggregate_scores("v", 30, subs, [3.0 * r for r in raw])
    assert np.allclose(twice.O, 3.0 * once.O)


def test_shot_scores():
    O = np.array([0.2, 0.2, 0.8, 0.8])
    assert shot_scores(O, ShotTable((0, 2), 4)).tolist() == pytest.approx([0.2, 0.8])
    assert shot_scores(O, ShotTable((0,), 4)).tolist() == pytest.approx([0.5])
    assert shot_scores(O, ShotTable((0, 1, 2), 4)).tolist()[:2] == pytest.approx([0.2, 0.2])
    with pytest.raises(LengthMismatch):
        shot_scores(O, ShotTable((0,), 5))


def test_knapsack_examples():
    assert knapsack_select([0.9, 0.8, 0.1], [5, 5, 5], 10) == [0, 1]
    assert knapsack_select([0.9, 0.8, 0.1], [5, 5, 5], 0) == []
    assert knapsack_select([0.9, 0.5, 0.4], [20, 5, 5], 10) == [1, 2]
    assert knapsack_select([0.5, 0.5], [3, 3], 3) == [0]
    assert knapsack_select([], [], 10) == []


def _best_subset_value(values, lengths, capacity):
    best = 0.0
    for k in range(len(values) + 1):
        for subset in itertools.combinations(range(len(values)), k):
            if sum(lengths[i] for i in subset) <= capacity:
                best = max(best, sum(values[i] for i in subset))
    return best


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(0.0, 1.0), st.integers(1, 12)), max_size=9), st.integers(0, 40))
def test_knapsack_matches_exhaustive_search(items, capacity):
    values = [v for v, _ in items]
    lengths = [w for _, w in items]
    chosen = knapsack_select(values, lengths, capacity)
    assert chosen == sorted(set(chosen))
    assert sum(lengths[i] for i in chosen) <= capacity
    assert sum(values[i] for i in chosen) == pytest.approx(_best_subset_value(values, lengths, capacity), abs=1e-9)


def test_emit_summary_and_budget():
    shots = ShotTable((0, 2), 4)
    assert emit_summary([1], shots).A.tolist() == [0, 0, 1, 1]
    assert emit_summary([], shots).A.tolist() == [0, 0, 0, 0]
    assert emit_summary([1, 0], shots).A.tolist() == [1, 1, 1, 1]
    assert emit_summary([1, 0], shots).selected_shots == (0, 1)

    assert summary_budget(100) == 15
    assert summary_budget(99) == 14
    assert summary_budget(20) == 3
    assert summary_budget(6) == 0

    O = np.random.default_rng(0).random(200)
    shots = ShotTable((0, 10, 40, 45, 90, 130, 170), 200)
    selection = summarize_video(FrameScores("v", O, np.full(200, 2)), shots)
    assert selection.budget == 30
    assert 0 < selection.A.sum() <= 30
    back = SummarySelection.from_dict(selection.to_dict())
    assert (back.video_id, back.selected_shots, back.budget) == ("v", selection.selected_shots, 30)
    assert np.array_equal(back.A, selection.A)


def test_score_table(tmp_path: Path):
    shots = ShotTable((0, 3, 7), 10)
    scores = FrameScores("v", np.linspace(0, 1, 10), np.full(10, 2))
    selection = summarize_video(scores, shots, budget_ratio=0.5)
    write_scores(tmp_path / "v.csv", scores, shots, selection)
    table = read_scores(tmp_path / "v.csv", "v")
    assert table.shots == shots
    assert np.array_equal(table.selected, selection.A)
    assert np.array_equal(table.scores.O, scores.O)
    with pytest.raises(MissingScores):
        read_scores(tmp_path / "w.csv", "w")


# ---------------------------------------------------------------- evaluation


def test_f_score():
    assert f_score([1, 1, 0, 0], [1, 1, 0, 0]) == (1.0, 1.0, 100.0)
    assert f_score([1, 1, 0, 0], [0, 0, 1, 1]).f == 0.0
    assert f_score([0, 0, 0, 0], [0, 0, 1, 1]).f == 0.0
    p, r, f = f_score([1, 1, 1, 1, 0, 0, 0], [0, 1, 1, 1, 1, 1, 1])
    assert (p, r) == (0.75, 0.5)
    assert f == pytest.approx(60.0, abs=1e-12)
    with pytest.raises(LengthMismatch):
        f_score([1, 0], [1, 0, 0])


@given(st.lists(st.tuples(st.booleans(), st.booleans()), min_size=1, max_size=40))
def test_f_score_symmetry(pairs):
    A = [int(a) for a, _ in pairs]
    U = [int(u) for _, u in pairs]
    forward, backward = f_score(A, U), f_score(U, A)
    assert forward.precision == backward.recall
    assert forward.f == pytest.approx(backward.f)
    assert 0.0 <= forward.f <= 100.0


def test_reduce_user_scores():
    assert reduce_user_scores([40, 60], Reduction.AVERAGE) == 50
    assert reduce_user_scores([40, 60], Reduction.MAXIMUM) == 60
    assert reduce_user_scores([42], Reduction.AVERAGE) == reduce_user_scores([42], Reduction.MAXIMUM) == 42
    with pytest.raises(EmptyAnnotationSet):
        reduce_user_scores([], Reduction.AVERAGE)


def test_rank_correlations():
    assert kendall_tau([1, 2, 3, 4], [1, 2, 3, 4]) == pytest.approx(1.0)
    assert kendall_tau([1, 2, 3, 4], [4, 3, 2, 1]) == pytest.approx(-1.0)
    assert kendall_tau([1, 2, 3, 4], [1, 3, 2, 4]) == pytest.approx(2 / 3, abs=1e-12)
    assert spearman_rho([1, 2, 3], [1, 2, 3]) == pytest.approx(1.0)
    assert spearman_rho([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)
    assert spearman_rho([1, 2, 3], [2, 1, 3]) == pytest.approx(0.5, abs=1e-12)
    for metric in (kendall_tau, spearman_rho):
        with pytest.raises(DegenerateRanking):
            metric([1, 1, 1], [1, 2, 3])
        with pytest.raises(DegenerateRanking):
            metric([1], [1])
        with pytest.raises(LengthMismatch):
            metric([1, 2], [1, 2, 3])


def _tau_by_pairs(x, y):
    concordance, tx, ty = 0, 0, 0
    for i, j in itertools.combinations(range(len(x)), 2):
        sx, sy = np.sign(x[i] - x[j]), np.sign(y[i] - y[j])
        concordance += sx * sy
        tx += sx != 0
        ty += sy != 0
    return concordance / math.sqrt(tx * ty)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 4), st.integers(0, 4)), min_size=2, max_size=50))
def test_kendall_tau_matches_pair_counting(pairs):
    x = [a for a, _ in pairs]
    y = [b for _, b in pairs]
    assume(len(set(x)) > 1 and len(set(y)) > 1)
    tau = kendall_tau(x, y)
    assert tau == pytest.approx(_tau_by_pairs(x, y), abs=1e-12)
    assert -1.0 <= tau <= 1.0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_rank_correlations_are_monotone_invariant(seed):
    rng = np.random.default_rng(seed)
    x, y = rng.random(20), rng.random(20)
    assert kendall_tau(np.exp(3 * x), y) == pytest.approx(kendall_tau(x, y), abs=1e-12)
    assert spearman_rho(x, y**3 + 2 * y) == pytest.approx(spearman_rho(x, y), abs=1e-12)


# one test video per fold; (selection, user summary) pairs with known F
_F40 = ([1, 1, 1, 1, 1, 0, 0, 0, 0, 0], [0, 0, 0, 1, 1, 1, 1, 1, 0, 0])
_F50 = ([1, 0, 1, 0, 0, 0, 0, 0, 0, 0], [1, 1, 0, 0, 0, 0, 0, 0, 0, 0])
_F60 = ([1, 1, 1, 1, 0, 0, 0, 0, 0, 0], [0, 1, 1, 1, 1, 1, 1, 0, 0, 0])


def _toy_dataset(cases, importances: bool = True, reduction: Reduction = Reduction.AVERAGE):
    videos, outputs = {}, {}
    for k, (A, U) in enumerate(cases):
        vid = f"v{k}"
        human = [np.arange(10.0), np.arange(10.0)[::-1]] if importances else None
        videos[vid] = Video(FrameEmbeddingSequence(vid, np.zeros((10, 2))), Annotation(vid, [U], human))
        scores = FrameScores(vid, np.arange(10.0), np.full(10, 2))
        outputs[vid] = (SummarySelection(vid, (), np.array(A, dtype=np.int8), 1), scores)
    ids = list(videos)
    folds = FoldSpec(tuple(Fold(tuple(i for i in ids if i != vid), (vid,)) for vid in ids))
    return Dataset(DatasetManifest("toy", reduction, ()), videos), folds, outputs


def test_evaluate_dataset():
    dataset, folds, outputs = _toy_dataset([_F50] * 5)
    assert evaluate_dataset(outputs, dataset, folds).f == pytest.approx(50.0)

    dataset, folds, outputs = _toy_dataset([_F40, _F50, _F60, _F50, _F50])
    report = evaluate_dataset(outputs, dataset, folds)
    assert [f.f for f in report.folds] == pytest.approx([40, 50, 60, 50, 50])
    assert report.f == pytest.approx(50.0)
    assert report.tau == pytest.approx(0.0)
    assert report.rho == pytest.approx(0.0)
    assert report.videos[2].precision == 0.75

    dataset, folds, outputs = _toy_dataset([_F50] * 3, importances=False, reduction=Reduction.MAXIMUM)
    report = evaluate_dataset(outputs, dataset, folds)
    assert report.tau is None and report.rho is None
    assert report.to_dict()["tau"] is None

    del outputs["v1"]
    with pytest.raises(MissingOutput):
        evaluate_dataset(outputs, dataset, folds)


def test_evaluate_reduction_conflict(caplog):
    dataset, folds, outputs = _toy_dataset([_F50] * 2)
    report = evaluate_dataset(outputs, dataset, folds, Reduction.MAXIMUM)
    assert report.reduction is Reduction.AVERAGE
    assert any(r.levelname == "WARNING" and r.name == "recsum.evaluation" for r in caplog.records)


def test_evaluate_video_reductions(tmp_path: Path):
    selection = SummarySelection("v", (), np.array([1, 1, 0, 0], dtype=np.int8), 1)
    annotation = Annotation("v", [[1, 1, 0, 0], [0, 0, 1, 1], [1, 0, 0, 0]])
    best = evaluate_video(selection, annotation, Reduction.MAXIMUM)
    assert (best.precision, best.recall, best.f) == (1.0, 1.0, 100.0)
    mean = evaluate_video(selection, annotation, Reduction.AVERAGE)
    assert mean.f == pytest.approx((100.0 + 0.0 + 200 * 0.5 / 1.5) / 3)
    assert mean.precision == pytest.approx(0.5)
    assert mean.user_f[1] == 0.0

    index, summary = best_user_summary(annotation)
    assert index == 0
    assert summary.tolist() == [1, 1, 0, 0]

    dataset, folds, outputs = _toy_dataset([_F50] * 2)
    report = evaluate_dataset(outputs, dataset, folds)
    report.write_json(tmp_path / "eval.json")
    report.write_csv(tmp_path / "eval.csv")
    assert json.loads((tmp_path / "eval.json").read_text())["f"] == pytest.approx(50.0)
    assert len((tmp_path / "eval.csv").read_text().splitlines()) == 1 + 2 + 2 + 1


# ---------------------------------------------------------------- report


def test_score_trace(tmp_path: Path):
    assert normalize(np.full(5, 0.3)).tolist() == [0.0] * 5
    assert normalize(np.array([1.0, 3.0, 2.0])).tolist() == [0.0, 1.0, 0.5]

    shots = ShotTable((0, 4, 9), 12)
    selected = np.array([0] * 4 + [1] * 5 + [0] * 3)
    trace = build_trace("v", np.linspace(0.2, 0.9, 12), shots, selected)
    assert trace.markers == [8]
    svg = render_trace(tmp_path / "v.svg", trace).read_text()
    assert "<svg" in svg

    human = build_trace("v", np.linspace(0.2, 0.9, 12), shots, selected, np.random.default_rng(0).random((3, 12)))
    assert human.human is not None
    render_trace(tmp_path / "h.svg", human)
    write_trace_csv(tmp_path / "h.csv", human)
    assert len((tmp_path / "h.csv").read_text().splitlines()) == 13


# ---------------------------------------------------------------- command line

_TINY_RUN = [
    "model.l=1",
    "model.h=2",
    "model.d=8",
    "model.L=16",
    "pretrain.epochs=2",
    "pretrain.batch_size=8",
    "pretrain.warmup_epochs=0",
    "rl.epochs=1",
    "rl.batch_size=8",
    "rl.episodes=2",
    "run.precision=64",
]
_SETS = [arg for item in _TINY_RUN for arg in ("--set", item)]


@pytest.fixture
def synthetic(tmp_path: Path) -> Path:
    code = main(["synth", "--out", str(tmp_path / "data"), "--videos", "4", "--frames", "64", "--dim", "8"])
    assert code == 0
    return tmp_path / "data" / "manifest.json"


def test_cli_dataset(tmp_path: Path, synthetic: Path):
    assert main(["dataset", "validate", str(synthetic), "--out", str(tmp_path / "check")]) == 0
    assert (tmp_path / "check" / "validation.json").is_file()
    assert (tmp_path / "check" / "config.resolved.txt").is_file()
    assert main(["dataset", "inspect", str(synthetic)]) == 0
    assert main(["dataset", "validate", str(tmp_path / "nope.json")]) == 2
    with pytest.raises(SystemExit):
        main(["dataset", "frobnicate", str(synthetic)])

    root = tmp_path / "bad"
    entry = _entry(root, "x", 4, 2, [[0, 2, 1, 0]])
    write_manifest(root / "manifest.json", DatasetManifest("bad", Reduction.AVERAGE, (entry,)))
    assert main(["dataset", "validate", str(root / "manifest.json"), "--out", str(root / "out")]) == 1

    (root / "novideos.json").write_text(json.dumps({"name": "x"}))
    (root / "broken.json").write_text("{")
    (root / "x.json").write_text(json.dumps({"video_id": "x", "user_summaries": [[0, 0.7, 1, 0]]}))
    for name in ("novideos.json", "broken.json", "manifest.json"):
        assert main(["dataset", "validate", str(root / name), "--out", str(root / "out")]) == 1


def test_cli_pipeline(tmp_path: Path, synthetic: Path):
    manifest = str(synthetic)
    gen, rl, out = tmp_path / "gen", tmp_path / "rl", tmp_path / "out"
    assert main(["pretrain", manifest, "--out", str(gen), *_SETS]) == 0
    assert (gen / "generator.ckpt").is_file()
    assert (gen / "pretrain_log.csv").is_file()
    assert (gen / "shots.json").is_file()

    assert main(["train", manifest, "--generator", str(gen / "generator.ckpt"), "--out", str(rl), *_SETS]) == 0
    assert (rl / "summarizer.ckpt").is_file()
    assert main(["train", manifest, "--generator", str(tmp_path / "missing.ckpt"), "--out", str(rl)]) == 1
    assert main(["train", manifest, "--generator", str(rl / "summarizer.ckpt"), "--out", str(rl)]) == 2

    summarizer = str(rl / "summarizer.ckpt")
    assert main(["score", manifest, "--summarizer", summarizer, "--out", str(out), *_SETS]) == 0
    scores = sorted((out / "scores").glob("*.csv"))
    assert len(scores) == 4
    assert len(list((out / "summaries").glob("*.json"))) == 4

    assert main(["summarize", manifest, "--outputs", str(out), "--out", str(tmp_path / "resel")]) == 0
    assert (tmp_path / "resel" / "scores" / scores[0].name).read_text() == scores[0].read_text()

    evaluation = tmp_path / "eval"
    assert main(["evaluate", manifest, "--outputs", str(out), "--out", str(evaluation), "--reduction", "maximum"]) == 0
    report = json.loads((evaluation / "evaluation.json").read_text())
    assert report["reduction"] == "average"
    assert 0.0 <= report["f"] <= 100.0
    assert report["tau"] is not None

    assert main(["report", manifest, "--outputs", str(out), "--out", str(tmp_path / "plots")]) == 0
    assert len(list((tmp_path / "plots").glob("*.svg"))) == 4


def test_cli_reproducible(tmp_path: Path, synthetic: Path):
    manifest = str(synthetic)
    for name in ("a", "b"):
        root = tmp_path / name
        assert main(["pretrain", manifest, "--out", str(root / "gen"), *_SETS]) == 0
        generator = str(root / "gen" / "generator.ckpt")
        assert main(["train", manifest, "--generator", generator, "--out", str(root / "rl"), *_SETS]) == 0
        summarizer = str(root / "rl" / "summarizer.ckpt")
        assert main(["score", manifest, "--summarizer", summarizer, "--out", str(root / "out"), *_SETS]) == 0

    a, b = tmp_path / "a", tmp_path / "b"
    for rel in ("gen/generator.ckpt", "rl/summarizer.ckpt"):
        assert (a / rel).read_bytes() == (b / rel).read_bytes()
    for rel in ("gen/pretrain_log.csv", "rl/rl_log.csv", "gen/config.resolved.txt", "out/shots.json"):
        assert (a / rel).read_text() == (b / rel).read_text()
    scores = sorted(p.name for p in (a / "out" / "scores").glob("*.csv"))
    assert len(scores) == 4
    for name in scores:
        assert (a / "out" / "scores" / name).read_text() == (b / "out" / "scores" / name).read_text()
    for name in sorted(p.name for p in (a / "out" / "summaries").glob("*.json")):
        assert (a / "out" / "summaries" / name).read_text() == (b / "out" / "summaries" / name).read_text()


# ---------------------------------------------------------------- long runs


@acceptance
def test_masking_statistics_long():
    counts = np.zeros(3)
    rng = np.random.default_rng(0)
    for seed in range(10000):
        lengths = []
        while sum(lengths) < 128:
            lengths.append(int(rng.integers(8, 40)))
        lengths[-1] -= sum(lengths) - 128
        sub = _sub([n for n in lengths if n > 0])
        plan = plan_masking(sub, 0.5, 0.25, seed)
        _check_plan(sub, plan)
        total = sum(w.length for w in plan.candidate_windows)
        assert 32 <= total < 32 + max(w.length for w in plan.candidate_windows)
        for w in plan.candidate_windows:
            counts[int(w.disposition)] += 1
    freq = counts / counts.sum()
    assert freq.tolist() == pytest.approx([0.1, 0.8, 0.1], abs=0.02)


@acceptance
def test_kts_oracle_long():
    rng = np.random.default_rng(0)
    for _ in range(100):
        T = int(rng.integers(2, 13))
        X = rng.standard_normal((T, 4))
        weight = float(rng.uniform(0, 2))
        shots = kts_segment(X, max_change_points=T - 1, penalty_weight=weight)
        Xn = X / np.linalg.norm(X, axis=1, keepdims=True)
        best = min(
            segmentation_cost(Xn, (0, *cps), weight)
            for k in range(T)
            for cps in itertools.combinations(range(1, T), k)
        )
        assert segmentation_cost(Xn, shots.boundaries, weight) == pytest.approx(best, abs=1e-7)


@acceptance
def test_knapsack_oracle_long():
    rng = np.random.default_rng(0)
    for _ in range(500):
        n = int(rng.integers(0, 16))
        values = rng.random(n).tolist()
        lengths = rng.integers(1, 30, n).tolist()
        capacity = int(rng.integers(0, 120))
        chosen = knapsack_select(values, lengths, capacity)
        assert sum(lengths[i] for i in chosen) <= capacity
        assert sum(values[i] for i in chosen) == pytest.approx(_best_subset_value(values, lengths, capacity), abs=1e-9)


@acceptance
def test_pretrain_overfits_one_video():
    prototypes = np.random.default_rng(0).standard_normal((4, 16)) * 2.0
    video = make_video("v", prototypes, T=256, seed=0)
    config = PretrainConfig(epochs=2000, batch_size=128, peak_lr=1e-3, warmup_epochs=50, cosine_horizon_epochs=4000)
    result = pretrain([video.embeddings], config, EncoderConfig(l=2, h=4, d=16, L=128), {"v": video.shots})
    assert result.history[-1].rec < 0.05 * result.history[0].rec


@acceptance
def test_planted_anchor_frames(tmp_path: Path):
    _, videos = write_synthetic_dataset(tmp_path, n_videos=8, T=256, d=16, anchor_ratio=0.2, seed=0)
    sequences = [v.embeddings for v in videos]
    shots = {v.embeddings.video_id: v.shots for v in videos}
    encoder = EncoderConfig(l=2, h=4, d=16, L=32)
    pre = pretrain(
        sequences,
        PretrainConfig(epochs=200, batch_size=32, peak_lr=1e-3, warmup_epochs=10, cosine_horizon_epochs=400),
        encoder,
        shots,
    )
    rl = train_summarizer(sequences, restore_model(pre.checkpoint), RLConfig(epochs=60, lr=1e-4))
    model = rl.best_model()
    scores = np.concatenate([score_video(model, v.embeddings).O for v in videos])
    anchors = np.concatenate([v.anchors for v in videos])
    auc = stats.mannwhitneyu(scores[anchors], scores[~anchors]).statistic / (anchors.sum() * (~anchors).sum())
    assert auc > 0.7
    assert rl.history[-1].reward > rl.history[0].reward


if __name__ == "__main__":
    pytest.main([__file__, "-vs"])
