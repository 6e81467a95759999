from __future__ import annotations

from dataclasses import dataclass, field
import logging
import math
from typing import Callable, Optional, Sequence, Union
from typing_extensions import Annotated

import numpy as np
from tarina.lang import lang
import torch

from .dataio import FrameEmbeddingSequence, Video, embeddings_of
from .exception import DivergenceDetected, EmptyTrainSet, FrozenModelViolation, ShapeMismatch
from .fields import NON_NEGATIVE_FLOAT, NON_NEGATIVE_INT, OPEN_RATIO, POSITIVE_FLOAT, POSITIVE_INT
from .model import (
    P_MAX,
    P_MIN,
    GeneratorModel,
    ModelCheckpoint,
    SummarizerModel,
    init_summarizer_from_generator,
    make_checkpoint,
    parameter_hash,
    restore_model,
)
from .pretrain import LossVariant, reconstruction_loss
from .segmentation import SubSequence, decompose, sample_shift
from .util import derive_seed

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RLConfig:
    epochs: Annotated[int, NON_NEGATIVE_INT] = 300
    batch_size: Annotated[int, POSITIVE_INT] = 16
    episodes: Annotated[int, POSITIVE_INT] = 5
    lr: Annotated[float, POSITIVE_FLOAT] = 1e-5
    delta: Annotated[float, OPEN_RATIO] = 0.5
    """target mean frame score"""
    beta: Annotated[float, NON_NEGATIVE_FLOAT] = 0.001
    baseline_decay: Annotated[float, lambda x: 0 <= x < 1, "float in [0, 1)"] = 0.9
    baseline_init: Annotated[float, OPEN_RATIO] = 0.5
    loss_variant: LossVariant = LossVariant.L1_CE
    dilated: bool = True
    weight_decay: Annotated[float, NON_NEGATIVE_FLOAT] = 0.01
    seed: int = 0


@dataclass(frozen=True)
class EpisodeTrace:
    actions: np.ndarray
    reward: float
    log_prob: float
    baseline: float


class Baseline:
    """Exponential moving average of past mean episode rewards, shared across videos."""

    def __init__(self, value: float = 0.5, decay: float = 0.9):
        self.value = value
        self.decay = decay

    def update(self, mean_reward: float) -> float:
        self.value = self.decay * self.value + (1.0 - self.decay) * float(mean_reward)
        return self.value

    def __repr__(self):
        return f"Baseline({self.value!r}, decay={self.decay!r})"


def _valid_of(p: torch.Tensor, valid: torch.Tensor | None) -> torch.Tensor:
    return p >= 0 if valid is None else torch.as_tensor(valid, dtype=torch.bool)


def sample_actions(
    p: torch.Tensor, generator: torch.Generator | None = None, valid: torch.Tensor | None = None
) -> torch.Tensor:
    """``a_t ~ Bernoulli(p_t)`` independently, padding positions forced to 0"""
    p = torch.as_tensor(p).detach()
    valid = _valid_of(p, valid)
    probs = torch.where(valid, p.clamp(0.0, 1.0), torch.zeros_like(p))
    return torch.bernoulli(probs, generator=generator)


def build_summary_input(S: torch.Tensor, actions: torch.Tensor, token: torch.Tensor) -> torch.Tensor:
    """keep ``e_t`` where ``a_t = 1``, mask token elsewhere"""
    S = torch.as_tensor(S)
    actions = torch.as_tensor(actions)
    if actions.shape != S.shape[:-1]:
        raise ShapeMismatch(
            lang.require("recsum", "error.shape_mismatch").format(
                got=tuple(actions.shape), expected=tuple(S.shape[:-1])
            )
        )
    token = torch.as_tensor(token, dtype=S.dtype)
    return torch.where(actions[..., None] > 0, S, token.expand_as(S))


def compute_reward(l_rec: Union[float, torch.Tensor]) -> Union[float, torch.Tensor]:
    """``1 / (1 + exp(L_rec))``"""
    if isinstance(l_rec, torch.Tensor):
        return torch.sigmoid(-l_rec)
    return float(torch.sigmoid(-torch.tensor(float(l_rec), dtype=torch.float64)))


def regularization_loss(
    p: torch.Tensor, valid: torch.Tensor | None = None, delta: float = 0.5
) -> torch.Tensor:
    """``|mean_valid p_t - δ|`` per sequence"""
    p = torch.as_tensor(p)
    valid = _valid_of(p, valid)
    weight = valid.to(p.dtype)
    total = (torch.where(valid, p, torch.zeros_like(p)) * weight).sum(dim=-1)
    return (total / weight.sum(dim=-1).clamp(min=1.0) - delta).abs()


def log_probability(p: torch.Tensor, actions: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
    """``Σ_valid a_t log p_t + (1 - a_t) log(1 - p_t)`` over the last axis"""
    q = p.clamp(P_MIN, P_MAX)
    lp = actions * q.log() + (1.0 - actions) * (1.0 - q).log()
    return (lp * valid.to(lp.dtype)).sum(dim=-1)


def reinforce_loss(
    p: torch.Tensor,
    actions: torch.Tensor,
    rewards: torch.Tensor,
    baseline: float,
    valid: torch.Tensor | None = None,
) -> torch.Tensor:
    """Score-function surrogate ``-(1/N) Σ_n (R_n - b) log π(a_n)`` averaged over the batch.

    ``p`` is ``(..., L)``, ``actions`` is ``(N, ..., L)`` and ``rewards`` is ``(N, ...)``.
    """
    valid = _valid_of(p.detach(), valid)
    advantage = (torch.as_tensor(rewards, dtype=p.dtype) - baseline).detach()
    surrogate = -(advantage * log_probability(p, actions, valid)).mean(dim=0)
    return surrogate.mean()


@dataclass(frozen=True)
class PolicyStep:
    loss: float
    mean_reward: float
    l_reg: float
    baseline: float
    traces: tuple[EpisodeTrace, ...] = ()


def _batch_tensors(batch: Sequence[SubSequence], dtype: torch.dtype) -> tuple[torch.Tensor, torch.Tensor]:
    S = torch.from_numpy(np.stack([s.frames for s in batch])).to(dtype)
    valid = torch.from_numpy(np.stack([s.valid_mask for s in batch]))
    return S, valid


def policy_update(
    summarizer: SummarizerModel,
    generator: GeneratorModel,
    batch: Union[Sequence[SubSequence], tuple[torch.Tensor, torch.Tensor]],
    config: RLConfig,
    baseline: Baseline,
    optimizer: torch.optim.Optimizer,
    action_generator: torch.Generator | None = None,
    check_frozen: bool = False,
    keep_traces: bool = False,
) -> PolicyStep:
    """One REINFORCE step: N episodes per sub-sequence against the frozen generator, then one
    optimizer step on the policy surrogate plus ``β * L_reg``. The baseline is updated afterwards."""
    dtype = summarizer.score_weight.dtype
    S, valid = batch if isinstance(batch, tuple) else _batch_tensors(batch, dtype)
    before = parameter_hash(generator) if check_frozen else None
    token = generator.mask_token

    p = summarizer(S, valid)
    actions, rewards = [], []
    with torch.no_grad():
        for _ in range(config.episodes):
            a = sample_actions(p, action_generator, valid)
            S_hat = generator(build_summary_input(S, a, token), valid)
            rewards.append(compute_reward(reconstruction_loss(S, S_hat, valid, config.loss_variant).rec))
            actions.append(a)
    A = torch.stack(actions)
    R = torch.stack(rewards)

    b = baseline.value
    l_reg = regularization_loss(p, valid, config.delta).mean()
    loss = reinforce_loss(p, A, R, b, valid) + config.beta * l_reg
    if not torch.isfinite(loss):
        raise DivergenceDetected(lang.require("recsum", "error.divergence").format(epoch="-", step="-"))
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    baseline.update(float(R.mean()))

    if before is not None and parameter_hash(generator) != before:
        raise FrozenModelViolation(lang.require("recsum", "error.frozen_violation"))
    traces: tuple[EpisodeTrace, ...] = ()
    if keep_traces:
        with torch.no_grad():
            lp = log_probability(p.detach(), A, valid)
        traces = tuple(
            EpisodeTrace(A[n, j].numpy().astype(np.int8), float(R[n, j]), float(lp[n, j]), b)
            for n in range(A.shape[0])
            for j in range(A.shape[1])
        )
    return PolicyStep(float(loss.detach()), float(R.mean()), float(l_reg.detach()), baseline.value, traces)


def selection_loss(
    summarizer: SummarizerModel,
    generator: GeneratorModel,
    subs: Sequence[SubSequence],
    delta: float,
    variant: LossVariant = LossVariant.L1_CE,
    batch_size: int = 64,
) -> float:
    """Mean reconstruction loss when each sub-sequence keeps only its top ``δ`` fraction of frames."""
    dtype = summarizer.score_weight.dtype
    total, count = 0.0, 0
    with torch.no_grad():
        for i in range(0, len(subs), batch_size):
            S, valid = _batch_tensors(subs[i : i + batch_size], dtype)
            p = summarizer(S, valid)
            keep = torch.zeros_like(p)
            masked = torch.where(valid, p, torch.full_like(p, -math.inf))
            ranked = torch.argsort(masked, dim=-1, descending=True)
            k = (valid.sum(dim=-1).to(torch.float64) * delta).floor().clamp(min=1).to(torch.long)
            for j in range(p.shape[0]):
                keep[j, ranked[j, : int(k[j])]] = 1.0
            S_hat = generator(build_summary_input(S, keep, generator.mask_token), valid)
            total += float(reconstruction_loss(S, S_hat, valid, variant).rec.sum())
            count += S.shape[0]
    return total / max(count, 1)


@dataclass(frozen=True)
class RLEpoch:
    epoch: int
    reward: float
    baseline: float
    l_reg: float
    selection_rec: float


@dataclass
class RLResult:
    model: SummarizerModel
    history: list[RLEpoch] = field(default_factory=list)
    best: Optional[ModelCheckpoint] = None

    @property
    def checkpoint(self) -> ModelCheckpoint:
        return self.best or make_checkpoint(self.model, epoch=0)

    def best_model(self) -> SummarizerModel:
        return restore_model(self.best) if self.best else self.model  # type: ignore


def train_summarizer(
    videos: Sequence[Union[Video, FrameEmbeddingSequence]],
    generator: GeneratorModel,
    config: RLConfig,
    on_epoch: Callable[[RLEpoch], None] | None = None,
) -> RLResult:
    """Initialize the summarizer from ``generator`` and train it with episodic REINFORCE, keeping the
    checkpoint with the least greedy-selection reconstruction loss on ``videos``."""
    sequences = sorted((embeddings_of(v) for v in videos), key=lambda e: e.video_id)
    if not sequences:
        raise EmptyTrainSet(lang.require("recsum", "error.empty_train_set"))
    generator.eval()
    generator.requires_grad_(False)
    frozen = parameter_hash(generator)

    summarizer = init_summarizer_from_generator(generator, seed=config.seed)
    result = RLResult(summarizer)
    if config.epochs == 0:
        return result

    L = generator.config.L
    optimizer = torch.optim.AdamW(
        summarizer.parameters(), lr=config.lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=config.weight_decay
    )
    baseline = Baseline(config.baseline_init, config.baseline_decay)
    actions = torch.Generator().manual_seed(derive_seed(config.seed, "action"))
    fixed_subs = [s for E in sequences for s in decompose(E, L, None, 0, config.dilated)]

    best_loss = math.inf
    for epoch in range(config.epochs):
        shift_rng = np.random.default_rng(derive_seed(config.seed, "shift", epoch))
        subs: list[SubSequence] = []
        for E in sequences:
            subs += decompose(E, L, None, sample_shift(L, shift_rng), config.dilated)
        order = np.random.default_rng(derive_seed(config.seed, "shuffle", epoch)).permutation(len(subs))
        rewards, regs = [], []
        for i in range(0, len(order), config.batch_size):
            batch = [subs[k] for k in order[i : i + config.batch_size]]
            try:
                step = policy_update(summarizer, generator, batch, config, baseline, optimizer, actions)
            except DivergenceDetected as e:
                raise DivergenceDetected(
                    lang.require("recsum", "error.divergence").format(epoch=epoch, step=i)
                ) from e
            rewards.append(step.mean_reward)
            regs.append(step.l_reg)
        if parameter_hash(generator) != frozen:
            raise FrozenModelViolation(lang.require("recsum", "error.frozen_violation"))

        sel = selection_loss(summarizer, generator, fixed_subs, config.delta, config.loss_variant)
        record = RLEpoch(epoch + 1, float(np.mean(rewards)), baseline.value, float(np.mean(regs)), sel)
        result.history.append(record)
        logger.info(
            "rl epoch %d: reward=%.6f baseline=%.6f l_reg=%.6f selection_rec=%.6f",
            record.epoch,
            record.reward,
            record.baseline,
            record.l_reg,
            record.selection_rec,
        )
        if on_epoch is not None:
            on_epoch(record)
        if sel < best_loss:
            best_loss = sel
            result.best = make_checkpoint(
                summarizer, optimizer, epoch=epoch + 1, best_loss=sel, rng=actions, baseline=baseline.value
            )
    return result


__all__ = [
    "Baseline",
    "EpisodeTrace",
    "PolicyStep",
    "RLConfig",
    "RLEpoch",
    "RLResult",
    "build_summary_input",
    "compute_reward",
    "log_probability",
    "policy_update",
    "regularization_loss",
    "reinforce_loss",
    "sample_actions",
    "selection_loss",
    "train_summarizer",
]
