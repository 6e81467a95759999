"""Transformer encoder backbone, generator / summarizer heads and the checkpoint codec.

Checkpoint (``*.ckpt``)::

    b"KFCK" | version: u32 | role: u8 | n: u32 | n bytes of JSON (config + metadata)
    | count: u32 | count x record

    record = name_len: u16 | name: utf-8 | dtype: u8 | ndim: u8 | ndim x u64 shape | data (little-endian)
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from enum import IntEnum
import hashlib
import json
import math
from pathlib import Path
import struct
from typing import Any, Optional, Union
from typing_extensions import Annotated

import numpy as np
from tarina.lang import lang
import torch
from torch import nn
import torch.nn.functional as F

from .exception import (
    ConfigMismatch,
    CorruptFile,
    MissingCheckpoint,
    ShapeMismatch,
    ValidateFailed,
    VersionMismatch,
)
from .fields import POSITIVE_INT
from .util import derive_seed

PAD_SCORE = -1.0
"""score reported at padding positions"""
P_MIN = 1e-6
P_MAX = 1.0 - 1e-6


@dataclass(frozen=True)
class EncoderConfig:
    l: Annotated[int, POSITIVE_INT] = 3
    h: Annotated[int, POSITIVE_INT] = 8
    d: Annotated[int, POSITIVE_INT] = 1024
    ff: Annotated[Optional[int], lambda x: x is None or x > 0, "int > 0 | auto"] = None
    """feed-forward width, ``4 * d`` when unset"""
    L: Annotated[int, lambda x: x >= 2, "int >= 2"] = 128

    def __post_init__(self):
        if self.d % self.h:
            raise ValidateFailed(
                lang.require("recsum", "error.content").format(
                    target=f"d={self.d}, h={self.h}", expected="d divisible by h"
                )
            )

    @property
    def ffn(self) -> int:
        return self.ff or 4 * self.d

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, d: int, h: int):
        super().__init__()
        self.h = h
        self.d_k = d // h
        self.query = nn.Linear(d, d)
        self.key = nn.Linear(d, d)
        self.value = nn.Linear(d, d)
        self.out = nn.Linear(d, d)

    def forward(self, x: torch.Tensor, pad: torch.Tensor) -> torch.Tensor:
        B, L, d = x.shape

        def split(t: torch.Tensor) -> torch.Tensor:
            return t.view(B, L, self.h, self.d_k).transpose(1, 2)

        q, k, v = split(self.query(x)), split(self.key(x)), split(self.value(x))
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.d_k)
        # rows with no valid key attend everywhere, their outputs are never read
        pad = pad & ~pad.all(dim=1, keepdim=True)
        scores = scores.masked_fill(pad[:, None, None, :], float("-inf"))
        attn = F.softmax(scores, dim=-1)
        ctx = (attn @ v).transpose(1, 2).reshape(B, L, d)
        return self.out(ctx)


class EncoderLayer(nn.Module):
    """post-LN block: ``x = LN(x + MHA(x)); x = LN(x + FFN(x))``"""

    def __init__(self, d: int, h: int, ff: int):
        super().__init__()
        self.attention = MultiHeadSelfAttention(d, h)
        self.norm1 = nn.LayerNorm(d)
        self.linear1 = nn.Linear(d, ff)
        self.linear2 = nn.Linear(ff, d)
        self.norm2 = nn.LayerNorm(d)

    def forward(self, x: torch.Tensor, pad: torch.Tensor) -> torch.Tensor:
        x = self.norm1(x + self.attention(x, pad))
        return self.norm2(x + self.linear2(F.relu(self.linear1(x))))


class TransformerEncoder(nn.Module):
    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        self.position = nn.Parameter(torch.zeros(config.L, config.d))
        self.layers = nn.ModuleList(EncoderLayer(config.d, config.h, config.ffn) for _ in range(config.l))

    def forward(self, x: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
        pad = ~valid
        x = x + self.position[: x.shape[1]]
        for layer in self.layers:
            x = layer(x, pad)
        return x


def _init_parameters(module: nn.Module, seed: int) -> None:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        for sub in module.modules():
            if isinstance(sub, nn.Linear):
                nn.init.xavier_uniform_(sub.weight)
                nn.init.zeros_(sub.bias)
            elif isinstance(sub, nn.LayerNorm):
                nn.init.ones_(sub.weight)
                nn.init.zeros_(sub.bias)
            elif isinstance(sub, TransformerEncoder):
                nn.init.normal_(sub.position, std=0.02)


class Role(IntEnum):
    GENERATOR = 0
    SUMMARIZER = 1


class GeneratorModel(nn.Module):
    """Reconstructs masked frame embeddings; carries the fixed mask token."""

    role = Role.GENERATOR

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        self.encoder = TransformerEncoder(config)
        self.register_buffer("mask_token", torch.zeros(config.d))

    def forward(self, x: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
        return self.encoder(x, valid)


class SummarizerModel(nn.Module):
    """Scores frames with ``p_t = sigmoid(h_t . w_sc)``."""

    role = Role.SUMMARIZER

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        self.encoder = TransformerEncoder(config)
        self.score_weight = nn.Parameter(torch.zeros(config.d))

    def hidden(self, x: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
        return self.encoder(x, valid)

    def forward(self, x: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
        p = torch.sigmoid(self.hidden(x, valid) @ self.score_weight).clamp(P_MIN, P_MAX)
        return torch.where(valid, p, torch.full_like(p, PAD_SCORE))


Model = Union[GeneratorModel, SummarizerModel]


def _head_init(d: int, seed: int, dtype: torch.dtype) -> torch.Tensor:
    gen = torch.Generator().manual_seed(seed)
    bound = math.sqrt(6.0 / (d + 1))
    return ((torch.rand(d, generator=gen, dtype=torch.float64) * 2 - 1) * bound).to(dtype)


def build_generator(
    config: EncoderConfig, seed: int = 0, dtype: torch.dtype = torch.float32
) -> GeneratorModel:
    model = GeneratorModel(config)
    _init_parameters(model, derive_seed(seed, "init"))
    token = torch.Generator().manual_seed(derive_seed(seed, "init", "mask-token"))
    model.mask_token.copy_(torch.randn(config.d, generator=token, dtype=torch.float64) * 0.02)
    return model.to(dtype)


def build_summarizer(
    config: EncoderConfig, seed: int = 0, dtype: torch.dtype = torch.float32
) -> SummarizerModel:
    model = SummarizerModel(config)
    _init_parameters(model, derive_seed(seed, "init"))
    with torch.no_grad():
        model.score_weight.copy_(_head_init(config.d, derive_seed(seed, "summarizer-head"), torch.float32))
    return model.to(dtype)


def init_summarizer_from_generator(
    gen: GeneratorModel, config: EncoderConfig | None = None, seed: int = 0
) -> SummarizerModel:
    """Copy the generator's encoder (positional embeddings included) and draw a fresh scoring head."""
    if config is not None and config != gen.config:
        raise ConfigMismatch(
            lang.require("recsum", "error.config_mismatch").format(
                got=config.to_dict(), expected=gen.config.to_dict()
            )
        )
    dtype = gen.mask_token.dtype
    model = SummarizerModel(gen.config).to(dtype)
    model.encoder.load_state_dict(gen.encoder.state_dict())
    with torch.no_grad():
        model.score_weight.copy_(_head_init(gen.config.d, derive_seed(seed, "summarizer-head"), dtype))
    return model


def _check_input(
    model: Model, x: torch.Tensor, valid: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor, bool]:
    x = torch.as_tensor(x)
    valid = torch.as_tensor(valid, dtype=torch.bool)
    single = x.dim() == 2
    if single:
        x, valid = x[None], valid[None]
    cfg = model.config
    if x.dim() != 3 or x.shape[-1] != cfg.d or x.shape[1] > cfg.L or valid.shape != x.shape[:2]:
        raise ShapeMismatch(
            lang.require("recsum", "error.shape_mismatch").format(
                got=tuple(x.shape), expected=f"([B,] L <= {cfg.L}, {cfg.d})"
            )
        )
    return x.to(model.encoder.position.dtype), valid, single


def forward_generator(model: GeneratorModel, M: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
    """Reconstruction ``Ŝ`` of a masked ``(L, d)`` or ``(B, L, d)`` input."""
    x, v, single = _check_input(model, M, valid)
    out = model(x, v)
    return out[0] if single else out


def forward_summarizer(model: SummarizerModel, S: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
    """Frame scores in ``(0, 1)``, :data:`PAD_SCORE` at padding positions."""
    x, v, single = _check_input(model, S, valid)
    out = model(x, v)
    return out[0] if single else out


def gradients(model: nn.Module, loss: torch.Tensor) -> dict[str, torch.Tensor]:
    named = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    grads = torch.autograd.grad(loss, [p for _, p in named], allow_unused=True, retain_graph=True)
    return {n: torch.zeros_like(p) if g is None else g for (n, p), g in zip(named, grads)}


def parameter_hash(model: nn.Module) -> str:
    digest = hashlib.sha256()
    for name, tensor in model.state_dict().items():
        digest.update(name.encode())
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_MAGIC = b"KFCK"
FORMAT_VERSION = 2
_PREAMBLE = struct.Struct("<4sIB")
_U32 = struct.Struct("<I")
_U16 = struct.Struct("<H")
_RECORD = struct.Struct("<BB")
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1"), 3: np.dtype("<i8")}
_DTYPE_CODES = {v: k for k, v in _DTYPES.items()}


@dataclass
class ModelCheckpoint:
    role: Role
    config: EncoderConfig
    tensors: dict[str, np.ndarray]
    """``model.*`` parameters and buffers, ``optim.*`` optimizer moments, ``rng.torch`` sampler state"""
    metadata: dict[str, Any] = field(default_factory=dict)
    """epoch, best_loss, optimizer param groups and any caller extras"""

    @property
    def epoch(self) -> int:
        return int(self.metadata.get("epoch", 0))

    @property
    def best_loss(self) -> float | None:
        return self.metadata.get("best_loss")

    @property
    def mask_token(self) -> np.ndarray | None:
        return self.tensors.get("model.mask_token")

    def state_dict(self) -> dict[str, torch.Tensor]:
        return {k[6:]: torch.from_numpy(v.copy()) for k, v in self.tensors.items() if k.startswith("model.")}


def _to_numpy(t: torch.Tensor) -> np.ndarray:
    array = t.detach().cpu().contiguous().numpy()
    if array.dtype == np.float32:
        return array.astype("<f4")
    if array.dtype == np.float64:
        return array.astype("<f8")
    if array.dtype == np.uint8:
        return array.astype("u1")
    return array.astype("<i8")


def make_checkpoint(
    model: Model,
    optimizer: torch.optim.Optimizer | None = None,
    epoch: int = 0,
    best_loss: float | None = None,
    rng: torch.Generator | None = None,
    **extra: Any,
) -> ModelCheckpoint:
    tensors = {f"model.{k}": _to_numpy(v) for k, v in model.state_dict().items()}
    metadata: dict[str, Any] = {"epoch": epoch, "best_loss": best_loss, **extra}
    if optimizer is not None:
        state = optimizer.state_dict()
        for idx, slots in state["state"].items():
            for key, value in slots.items():
                value = value if isinstance(value, torch.Tensor) else torch.tensor(value)
                tensors[f"optim.{idx}.{key}"] = _to_numpy(value)
        metadata["param_groups"] = [
            {k: list(v) if isinstance(v, tuple) else v for k, v in g.items()} for g in state["param_groups"]
        ]
    if rng is not None:
        tensors["rng.torch"] = _to_numpy(rng.get_state())
    return ModelCheckpoint(model.role, model.config, tensors, metadata)


def restore_model(ckpt: ModelCheckpoint) -> Model:
    state = ckpt.state_dict()
    dtype = state["encoder.position"].dtype
    model = (GeneratorModel if ckpt.role is Role.GENERATOR else SummarizerModel)(ckpt.config).to(dtype)
    model.load_state_dict(state)
    return model


def restore_optimizer(ckpt: ModelCheckpoint, optimizer: torch.optim.Optimizer) -> None:
    if "param_groups" not in ckpt.metadata:
        return
    state: dict[int, dict[str, torch.Tensor]] = {}
    for key, value in ckpt.tensors.items():
        if key.startswith("optim."):
            _, idx, slot = key.split(".", 2)
            state.setdefault(int(idx), {})[slot] = torch.from_numpy(value.copy())
    groups = [
        {k: tuple(v) if k == "betas" else v for k, v in g.items()} for g in ckpt.metadata["param_groups"]
    ]
    optimizer.load_state_dict({"state": state, "param_groups": groups})


def save_checkpoint(path: str | Path, ckpt: ModelCheckpoint) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = json.dumps(
        {"config": ckpt.config.to_dict(), "metadata": ckpt.metadata}, sort_keys=True, separators=(",", ":")
    ).encode()
    with path.open("wb") as f:
        f.write(_PREAMBLE.pack(CHECKPOINT_MAGIC, FORMAT_VERSION, int(ckpt.role)))
        f.write(_U32.pack(len(header)))
        f.write(header)
        f.write(_U32.pack(len(ckpt.tensors)))
        for name, array in ckpt.tensors.items():
            raw = name.encode()
            f.write(_U16.pack(len(raw)))
            f.write(raw)
            f.write(_RECORD.pack(_DTYPE_CODES[array.dtype], array.ndim))
            f.write(struct.pack(f"<{array.ndim}Q", *array.shape))
            f.write(np.ascontiguousarray(array).tobytes())


def _corrupt(path: Path, reason: object) -> CorruptFile:
    return CorruptFile(lang.require("recsum", "error.corrupt_file").format(path=path, reason=reason))


class _Reader:
    def __init__(self, path: Path, buf: bytes):
        self.path = path
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise _corrupt(self.path, "truncated")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: struct.Struct) -> tuple:
        return fmt.unpack(self.take(fmt.size))


def load_checkpoint(path: str | Path) -> ModelCheckpoint:
    path = Path(path)
    if not path.is_file():
        raise MissingCheckpoint(lang.require("recsum", "error.missing_checkpoint").format(path=path))
    r = _Reader(path, path.read_bytes())
    magic, version, role = r.unpack(_PREAMBLE)
    if magic != CHECKPOINT_MAGIC:
        raise _corrupt(path, f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise VersionMismatch(
            lang.require("recsum", "error.version_mismatch").format(got=version, expected=FORMAT_VERSION)
        )
    try:
        (n,) = r.unpack(_U32)
        header = json.loads(r.take(n).decode())
        config = EncoderConfig(**header["config"])
        ckpt_role = Role(role)
    except (ValueError, KeyError, TypeError) as e:
        raise _corrupt(path, e) from e
    (count,) = r.unpack(_U32)
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = r.unpack(_U16)
        name = r.take(name_len).decode()
        code, ndim = r.unpack(_RECORD)
        if code not in _DTYPES:
            raise _corrupt(path, f"dtype code {code} of {name}")
        shape = struct.unpack(f"<{ndim}Q", r.take(8 * ndim))
        dtype = _DTYPES[code]
        size = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        tensors[name] = np.frombuffer(r.take(size), dtype=dtype).reshape(shape).copy()
    if r.pos != len(r.buf):
        raise _corrupt(path, "trailing bytes")
    return ModelCheckpoint(ckpt_role, config, tensors, header["metadata"])


__all__ = [
    "PAD_SCORE",
    "EncoderConfig",
    "GeneratorModel",
    "ModelCheckpoint",
    "Role",
    "SummarizerModel",
    "build_generator",
    "build_summarizer",
    "forward_generator",
    "forward_summarizer",
    "gradients",
    "init_summarizer_from_generator",
    "load_checkpoint",
    "make_checkpoint",
    "parameter_hash",
    "restore_model",
    "restore_optimizer",
    "save_checkpoint",
]
