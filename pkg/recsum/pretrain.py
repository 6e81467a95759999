from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
import csv
from dataclasses import dataclass, field
from enum import Enum
import logging
import math
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence, Union
from typing_extensions import Annotated

import numpy as np
from tarina.lang import lang
import torch

from .dataio import FrameEmbeddingSequence, Video, embeddings_of
from .exception import DivergenceDetected, EmptyTrainSet, ShapeMismatch, ValidateFailed, ZeroNormVector
from .fields import NON_NEGATIVE_FLOAT, NON_NEGATIVE_INT, OPEN_RATIO, POSITIVE_FLOAT, POSITIVE_INT, RATIO
from .masking import MaskingMethod, apply_mask, plan_masking
from .model import EncoderConfig, GeneratorModel, ModelCheckpoint, build_generator, make_checkpoint
from .segmentation import ShotTable, SubSequence, decompose, kts_segment, sample_shift
from .util import derive_seed

logger = logging.getLogger(__name__)

NORM_EPS = 1e-12


class LossVariant(str, Enum):
    L1_CE = "l1+ce"
    CE = "ce"
    L1 = "l1"
    MSE = "mse"
    MSE_CE = "mse+ce"

    @property
    def terms(self) -> tuple[str, ...]:
        return tuple(self.value.split("+"))


@dataclass(frozen=True)
class PretrainConfig:
    epochs: Annotated[int, NON_NEGATIVE_INT] = 250
    batch_size: Annotated[int, POSITIVE_INT] = 128
    peak_lr: Annotated[float, POSITIVE_FLOAT] = 0.01
    warmup_epochs: Annotated[int, NON_NEGATIVE_INT] = 100
    cosine_horizon_epochs: Annotated[int, POSITIVE_INT] = 1000
    d_r: Annotated[float, RATIO] = 0.5
    m_r: Annotated[float, OPEN_RATIO] = 0.25
    loss_variant: LossVariant = LossVariant.L1_CE
    masking: MaskingMethod = MaskingMethod.DYNAMIC
    window_size: Annotated[int, POSITIVE_INT] = 7
    """candidate length in fixed-window masking"""
    masked_only: bool = False
    """restrict the loss to masked / replaced frames"""
    dilated: bool = True
    weight_decay: Annotated[float, NON_NEGATIVE_FLOAT] = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.warmup_epochs > self.cosine_horizon_epochs:
            raise ValidateFailed(
                lang.require("recsum", "error.content").format(
                    target=f"warmup_epochs={self.warmup_epochs}",
                    expected=f"<= cosine_horizon_epochs ({self.cosine_horizon_epochs})",
                )
            )


@dataclass
class ReconstructionLoss:
    """Per-sequence loss terms; ``rec`` sums the terms active in the variant."""

    ce: torch.Tensor
    l1: torch.Tensor
    mse: torch.Tensor
    rec: torch.Tensor


def reconstruction_loss(
    S: torch.Tensor,
    S_hat: torch.Tensor,
    valid: torch.Tensor,
    variant: LossVariant = LossVariant.L1_CE,
    strict: bool = False,
) -> ReconstructionLoss:
    """Masked reconstruction terms over the valid frames.

    ``CE = Σ (1 - cos(e_t, ê_t))``, ``L1 = mean ‖e_t - ê_t‖₁`` and
    ``MSE = mean of mean((e_t - ê_t)²)``.
    Accepts ``(L, d)`` or ``(B, L, d)``. A frame where either vector has norm below 1e-12 contributes
    1 to CE, or raises :class:`ZeroNormVector` when ``strict``.
    """
    S = torch.as_tensor(S)
    S_hat = torch.as_tensor(S_hat)
    valid = torch.as_tensor(valid, dtype=torch.bool)
    if S.shape != S_hat.shape or valid.shape != S.shape[:-1]:
        raise ShapeMismatch(
            lang.require("recsum", "error.shape_mismatch").format(
                got=tuple(S_hat.shape), expected=tuple(S.shape)
            )
        )
    weight = valid.to(S_hat.dtype)
    count = weight.sum(dim=-1).clamp(min=1.0)

    n1 = S.norm(dim=-1)
    n2 = S_hat.norm(dim=-1)
    degenerate = (n1 < NORM_EPS) | (n2 < NORM_EPS)
    if strict and bool((degenerate & valid).any()):
        index = int(torch.nonzero(degenerate & valid)[0][-1])
        raise ZeroNormVector(lang.require("recsum", "error.zero_norm").format(index=index))
    cos = (S * S_hat).sum(dim=-1) / torch.where(degenerate, torch.ones_like(n1), n1 * n2)
    cos = torch.where(degenerate, torch.zeros_like(cos), cos)
    ce = ((1.0 - cos) * weight).sum(dim=-1)

    diff = S - S_hat
    l1 = (diff.abs().sum(dim=-1) * weight).sum(dim=-1) / count
    mse = (diff.pow(2).mean(dim=-1) * weight).sum(dim=-1) / count

    values = {"ce": ce, "l1": l1, "mse": mse}
    rec = sum(values[t] for t in variant.terms)
    return ReconstructionLoss(ce, l1, mse, rec)


def lr_at(step: int | float, config: PretrainConfig, steps_per_epoch: int = 1) -> float:
    """linear warmup from 0 to ``peak_lr``, then half-cosine down to 0 at the horizon"""
    epoch = step / steps_per_epoch
    warmup, horizon = config.warmup_epochs, config.cosine_horizon_epochs
    if epoch >= horizon:
        return 0.0
    if epoch < warmup:
        return config.peak_lr * epoch / warmup
    return config.peak_lr * 0.5 * (1.0 + math.cos(math.pi * (epoch - warmup) / (horizon - warmup)))


@dataclass(frozen=True)
class PretrainEpoch:
    epoch: int
    ce: float
    l1: float
    rec: float
    """mean over the epoch's steps, while the weights were still moving"""
    lr: float
    end_rec: float = math.nan
    """loss of the post-epoch weights on the same masked batches"""


@dataclass
class PretrainResult:
    model: GeneratorModel
    history: list[PretrainEpoch] = field(default_factory=list)
    best: Optional[ModelCheckpoint] = None

    @property
    def checkpoint(self) -> ModelCheckpoint:
        return self.best or make_checkpoint(self.model, epoch=0)


def write_history(path: str | Path, rows: Sequence[object], columns: Sequence[str]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([getattr(row, c) for c in columns])


def resolve_shots(
    sequences: Sequence[FrameEmbeddingSequence], shots: Mapping[str, ShotTable] | None
) -> dict[str, ShotTable]:
    """given shot tables, segmenting any video without one with default KTS"""
    out = dict(shots or {})
    for E in sequences:
        if E.video_id not in out:
            logger.debug("segmenting %s (T=%d)", E.video_id, E.T)
            out[E.video_id] = kts_segment(E)
    return out


@dataclass(frozen=True)
class _Prepared:
    sub: SubSequence
    masked: np.ndarray
    altered: np.ndarray


def _batches(prepared: Sequence[_Prepared], size: int) -> list[Sequence[_Prepared]]:
    return [prepared[b : b + size] for b in range(0, len(prepared), size)]


def _stack(items: Sequence[_Prepared], dtype: torch.dtype) -> tuple[torch.Tensor, ...]:
    S = torch.from_numpy(np.stack([i.sub.frames for i in items])).to(dtype)
    M = torch.from_numpy(np.stack([i.masked for i in items])).to(dtype)
    valid = torch.from_numpy(np.stack([i.sub.valid_mask for i in items]))
    altered = torch.from_numpy(np.stack([i.altered for i in items]))
    return S, M, valid, altered


def pretrain(
    videos: Sequence[Union[Video, FrameEmbeddingSequence]],
    config: PretrainConfig,
    encoder_config: EncoderConfig,
    shots: Mapping[str, ShotTable] | None = None,
    dtype: torch.dtype = torch.float32,
    workers: int | None = None,
    on_epoch: Callable[[PretrainEpoch], None] | None = None,
) -> PretrainResult:
    """Masked-reconstruction training of the generator on the pooled sub-sequences of ``videos``.

    After every epoch the updated weights are scored again on that epoch's masked batches; the
    checkpoint with the lowest such ``end_rec`` is kept as :attr:`PretrainResult.best`.
    """
    sequences = sorted((embeddings_of(v) for v in videos), key=lambda e: e.video_id)
    if not sequences:
        raise EmptyTrainSet(lang.require("recsum", "error.empty_train_set"))
    for E in sequences:
        if E.d != encoder_config.d:
            raise ShapeMismatch(
                lang.require("recsum", "error.shape_mismatch").format(
                    got=(E.T, E.d), expected=f"(T, {encoder_config.d})"
                )
            )
    shots = resolve_shots(sequences, shots)
    model = build_generator(encoder_config, config.seed, dtype)
    result = PretrainResult(model)
    if config.epochs == 0:
        return result

    token = model.mask_token.detach().cpu().numpy().astype(np.float32)
    optimizer = torch.optim.AdamW(
        model.parameters(), lr=0.0, betas=(0.9, 0.999), eps=1e-8, weight_decay=config.weight_decay
    )
    L = encoder_config.L

    def prepare(job: tuple[int, int, SubSequence]) -> _Prepared:
        epoch, k, sub = job
        seed = derive_seed(config.seed, "mask", epoch, k)
        plan = plan_masking(sub, config.d_r, config.m_r, seed, config.masking, config.window_size)
        return _Prepared(sub, apply_mask(sub, plan, token), plan.altered_mask())

    best_loss = math.inf
    step = 0
    with ThreadPoolExecutor(max_workers=workers) as pool:
        for epoch in range(config.epochs):
            shift_rng = np.random.default_rng(derive_seed(config.seed, "shift", epoch))
            subs: list[SubSequence] = []
            for E in sequences:
                subs += decompose(E, L, shots[E.video_id], sample_shift(L, shift_rng), config.dilated)
            order = np.random.default_rng(derive_seed(config.seed, "shuffle", epoch)).permutation(len(subs))
            prepared = list(pool.map(prepare, [(epoch, k, subs[k]) for k in order]))
            batches = _batches(prepared, config.batch_size)
            steps_per_epoch = len(batches)

            totals = np.zeros(3)
            lr = 0.0
            for b, batch in enumerate(batches):
                S, M, valid, altered = _stack(batch, dtype)
                lr = lr_at(epoch * steps_per_epoch + b, config, steps_per_epoch)
                for group in optimizer.param_groups:
                    group["lr"] = lr
                loss = reconstruction_loss(
                    S, model(M, valid), valid & altered if config.masked_only else valid, config.loss_variant
                )
                total = loss.rec.mean()
                if not torch.isfinite(total):
                    raise DivergenceDetected(
                        lang.require("recsum", "error.divergence").format(epoch=epoch, step=step)
                    )
                optimizer.zero_grad()
                total.backward()
                optimizer.step()
                step += 1
                totals += [float(t.detach().sum()) for t in (loss.ce, loss.l1, loss.rec)]

            end_rec = 0.0
            with torch.no_grad():
                for batch in batches:
                    S, M, valid, altered = _stack(batch, dtype)
                    mask = valid & altered if config.masked_only else valid
                    loss = reconstruction_loss(S, model(M, valid), mask, config.loss_variant)
                    end_rec += float(loss.rec.sum())
            end_rec /= len(prepared)

            ce, l1, rec = totals / len(prepared)
            record = PretrainEpoch(epoch + 1, ce, l1, rec, lr, end_rec)
            result.history.append(record)
            logger.info(
                "pretrain epoch %d: ce=%.6f l1=%.6f rec=%.6f end_rec=%.6f lr=%.3g",
                epoch + 1,
                ce,
                l1,
                rec,
                end_rec,
                lr,
            )
            if on_epoch is not None:
                on_epoch(record)
            if end_rec < best_loss:
                best_loss = end_rec
                result.best = make_checkpoint(model, optimizer, epoch=epoch + 1, best_loss=end_rec)
    return result


__all__ = [
    "LossVariant",
    "PretrainConfig",
    "PretrainEpoch",
    "PretrainResult",
    "ReconstructionLoss",
    "lr_at",
    "pretrain",
    "reconstruction_loss",
    "resolve_shots",
    "write_history",
]
