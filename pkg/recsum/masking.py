from __future__ import annotations

from dataclasses import dataclass
from enum import Enum, IntEnum
import math
from typing import Union

import numpy as np
from tarina.lang import lang

from .exception import InsufficientMaskableFrames, PlanMismatch
from .segmentation import SubSequence

MAX_RETRIES = 100
MASK_PROB = 0.8
REPLACE_PROB = 0.1


class Disposition(IntEnum):
    KEEP = 0
    MASK = 1
    REPLACE = 2


class MaskingMethod(str, Enum):
    DYNAMIC = "dynamic"
    """window length = ceil(D_R * shot length)"""
    FIXED = "fixed"
    """window length = min(W_s, shot length)"""
    RANDOM = "random"
    """Bernoulli(M_R) per valid frame, every pick masked"""


@dataclass(frozen=True)
class CandidateWindow:
    start: int
    length: int
    disposition: Disposition
    source: int = -1
    """start of the copied window for REPLACE, else -1"""

    @property
    def stop(self) -> int:
        return self.start + self.length


@dataclass(frozen=True)
class MaskPlan:
    L: int
    valid_count: int
    candidate_windows: tuple[CandidateWindow, ...]
    rng_seed: int

    @property
    def dispositions(self) -> list[Union[Disposition, tuple[Disposition, int]]]:
        """per position: KEEP, MASK or (REPLACE, source frame position)"""
        out: list[Union[Disposition, tuple[Disposition, int]]] = [Disposition.KEEP] * self.L
        for w in self.candidate_windows:
            for offset in range(w.length):
                if w.disposition is Disposition.REPLACE:
                    out[w.start + offset] = (Disposition.REPLACE, w.source + offset)
                else:
                    out[w.start + offset] = w.disposition
        return out

    def candidate_mask(self) -> np.ndarray:
        mask = np.zeros(self.L, dtype=bool)
        for w in self.candidate_windows:
            mask[w.start : w.stop] = True
        return mask

    def altered_mask(self) -> np.ndarray:
        """positions whose content differs from the input (MASK or REPLACE)"""
        mask = np.zeros(self.L, dtype=bool)
        for w in self.candidate_windows:
            if w.disposition is not Disposition.KEEP:
                mask[w.start : w.stop] = True
        return mask


@dataclass(frozen=True)
class MaskToken:
    m: np.ndarray

    @classmethod
    def sample(cls, d: int, seed: int, scale: float = 0.02) -> MaskToken:
        rng = np.random.default_rng(seed)
        return cls((rng.standard_normal(d) * scale).astype(np.float32))


def _shot_spans(sub: SubSequence) -> dict[int, tuple[int, int]]:
    """shot label -> [first, last + 1) over valid in-sub positions"""
    spans: dict[int, tuple[int, int]] = {}
    valid = sub.valid_mask
    for pos in np.flatnonzero(valid):
        label = int(sub.shot_labels[pos])
        lo, hi = spans.get(label, (pos, pos))
        spans[label] = (min(lo, pos), max(hi, pos + 1))
    return spans


def _window_length(method: MaskingMethod, span_length: int, d_r: float, window_size: int) -> int:
    if method is MaskingMethod.FIXED:
        return max(1, min(window_size, span_length))
    return max(1, min(span_length, math.ceil(d_r * span_length - 1e-9)))


def _choose_windows(
    sub: SubSequence,
    d_r: float,
    m_r: float,
    rng: np.random.Generator,
    method: MaskingMethod,
    window_size: int,
) -> list[tuple[int, int]]:
    valid = sub.valid_mask
    valid_count = int(valid.sum())
    threshold = m_r * valid_count
    if method is MaskingMethod.RANDOM:
        picks = np.flatnonzero(valid & (rng.random(sub.L) < m_r))
        return [(int(p), 1) for p in picks]

    spans = _shot_spans(sub)
    labels = sorted(spans)
    taken = np.zeros(sub.L, dtype=bool)
    windows: list[tuple[int, int]] = []
    total = 0
    failures = 0
    while total < threshold - 1e-9:
        label = labels[int(rng.integers(len(labels)))]
        lo, hi = spans[label]
        length = _window_length(method, hi - lo, d_r, window_size)
        starts = [s for s in range(lo, hi - length + 1) if not taken[s : s + length].any()]
        if not starts:
            failures += 1
            if failures >= MAX_RETRIES:
                raise InsufficientMaskableFrames(
                    lang.require("recsum", "error.insufficient_maskable").format(
                        threshold=threshold, valid=valid_count, retries=MAX_RETRIES
                    )
                )
            continue
        failures = 0
        start = starts[int(rng.integers(len(starts)))]
        taken[start : start + length] = True
        windows.append((start, length))
        total += length
    return windows


def _free_spans(free: np.ndarray) -> list[tuple[int, int]]:
    spans = []
    start = None
    for pos, ok in enumerate(free):
        if ok and start is None:
            start = pos
        elif not ok and start is not None:
            spans.append((start, pos))
            start = None
    if start is not None:
        spans.append((start, len(free)))
    return spans


def plan_masking(
    sub: SubSequence,
    d_r: float,
    m_r: float,
    rng: np.random.Generator | int,
    method: MaskingMethod = MaskingMethod.DYNAMIC,
    window_size: int = 7,
) -> MaskPlan:
    """Draw shot-relative candidate windows until their total length reaches ``m_r`` of the
    valid frames, then mask / replace / keep each window with probability 0.8 / 0.1 / 0.1."""
    if isinstance(rng, (int, np.integer)):
        seed = int(rng)
    else:
        seed = int(rng.integers(2**63))
    gen = np.random.default_rng(seed)
    if sub.valid_count == 0:
        raise InsufficientMaskableFrames(
            lang.require("recsum", "error.insufficient_maskable").format(threshold=0, valid=0, retries=0)
        )
    windows = _choose_windows(sub, d_r, m_r, gen, method, window_size)

    taken = np.zeros(sub.L, dtype=bool)
    for start, length in windows:
        taken[start : start + length] = True
    free = _free_spans(sub.valid_mask & ~taken)

    candidates = []
    for start, length in windows:
        if method is MaskingMethod.RANDOM:
            candidates.append(CandidateWindow(start, length, Disposition.MASK))
            continue
        draw = gen.random()
        if draw < MASK_PROB:
            candidates.append(CandidateWindow(start, length, Disposition.MASK))
        elif draw < MASK_PROB + REPLACE_PROB:
            fitting = [(a, b) for a, b in free if b - a >= length]
            if not fitting:
                candidates.append(CandidateWindow(start, length, Disposition.MASK))
                continue
            a, b = fitting[int(gen.integers(len(fitting)))]
            source = a + int(gen.integers(b - a - length + 1))
            candidates.append(CandidateWindow(start, length, Disposition.REPLACE, source))
        else:
            candidates.append(CandidateWindow(start, length, Disposition.KEEP))
    return MaskPlan(sub.L, sub.valid_count, tuple(candidates), seed)


def apply_mask(sub: SubSequence, plan: MaskPlan, token: MaskToken | np.ndarray) -> np.ndarray:
    """Masked copy of ``sub.frames``: MASK rows hold the token, REPLACE rows copy their source window."""
    if plan.L != sub.L:
        raise PlanMismatch(lang.require("recsum", "error.plan_mismatch").format(got=plan.L, expected=sub.L))
    m = token.m if isinstance(token, MaskToken) else np.asarray(token)
    out = np.array(sub.frames, copy=True)
    for w in plan.candidate_windows:
        if w.disposition is Disposition.MASK:
            out[w.start : w.stop] = m
        elif w.disposition is Disposition.REPLACE:
            out[w.start : w.stop] = sub.frames[w.source : w.source + w.length]
    return out


def mask_fraction(plan: MaskPlan) -> float:
    if plan.valid_count == 0:
        return 0.0
    return sum(w.length for w in plan.candidate_windows) / plan.valid_count


__all__ = [
    "CandidateWindow",
    "Disposition",
    "MaskPlan",
    "MaskToken",
    "MaskingMethod",
    "apply_mask",
    "mask_fraction",
    "plan_masking",
]
