"""Question-type guided gating of concatenated visual features.

The gate for a sample of question type ``t`` is column ``t`` of a learned
``M x N`` matrix, multiplied elementwise into the concatenated image feature.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import Rng, Tensor, as_tensor
from .sketch import SketchParams, mcb_fuse

TDIUC_TYPES = (
    "Other Attributes",
    "Sentiment Understanding",
    "Sports Recognition",
    "Position Reasoning",
    "Object Utilities/Affordances",
    "Activity Recognition",
    "Scene Classification",
    "Color",
    "Object Recognition",
    "Object Presence",
    "Counting",
    "Absurd",
)


@dataclass(frozen=True)
class QuestionTypeSet:
    names: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        if len(self.names) < 2:
            raise ValueError("need at least two question types")
        if len(set(self.names)) != len(self.names):
            raise ValueError("question type names must be unique")

    def __len__(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"unknown question type {name!r}") from None


Block = tuple[int, int]


def concat_visual(sources: Sequence) -> tuple[Tensor, list[Block]]:
    """Concatenate flattened sources along the last axis.

    Returns the feature and the ``[start, stop)`` block of each source.
    """
    sources = [as_tensor(s) for s in sources]
    blocks, start = [], 0
    for s in sources:
        blocks.append((start, start + s.shape[-1]))
        start += s.shape[-1]
    if len(sources) == 1:
        return sources[0], blocks
    return nx.concat(sources, axis=-1), blocks


_SOFTPLUS_ONE = float(np.log(np.e - 1.0))


@dataclass(eq=False)
class QtaWeights:
    """Gating matrix ``M x N``; one column per question type.

    With ``nonneg`` the stored tensor is a raw parameter passed through
    softplus, initialised so the effective gate starts at one.
    """

    raw: Tensor
    nonneg: bool = False

    @classmethod
    def init(cls, m: int, n: int, nonneg: bool = False, dtype=np.float64) -> QtaWeights:
        fill = _SOFTPLUS_ONE if nonneg else 1.0
        return cls(Tensor(np.full((m, n), fill), requires_grad=True, dtype=dtype), nonneg)

    @property
    def shape(self) -> tuple[int, int]:
        return self.raw.shape

    def matrix(self) -> Tensor:
        return nx.softplus(self.raw) if self.nonneg else self.raw

    def values(self) -> np.ndarray:
        return self.matrix().data


def _check_types(q_type, n: int) -> np.ndarray:
    q = np.asarray(q_type, dtype=np.int64)
    if q.size and (q.min() < 0 or q.max() >= n):
        raise IndexError(f"question type index out of range [0, {n})")
    return q


def qta_gate(F, q_type, W: QtaWeights) -> Tensor:
    """``F * W[:, q_type]``; ``F`` is ``M`` or ``B x M`` with matching ``q_type``."""
    F = as_tensor(F)
    m, n = W.shape
    if F.shape[-1] != m:
        raise ValueError(f"qta_gate: feature dim {F.shape[-1]} != gate rows {m}")
    q = _check_types(q_type, n)
    if q.ndim == 0:
        if F.ndim != 1:
            raise ValueError("scalar q_type needs a single feature vector")
        col = nx.reshape(nx.take_columns(W.matrix(), q[None]), (m,))
    else:
        if F.ndim != 2 or F.shape[0] != q.shape[0]:
            raise ValueError("batched qta_gate needs B x M features and B types")
        col = nx.take_columns(W.matrix(), q)
    return nx.mul(F, col)


def qta_gate_spatial(image, q_type, W: QtaWeights) -> Tensor:
    """Channel gating of ``C x H x W`` (or ``B x C x H x W``) maps, same gate at every location."""
    image = as_tensor(image)
    m, n = W.shape
    q = _check_types(q_type, n)
    batched = image.ndim == 4
    if image.ndim not in (3, 4) or image.shape[-3] != m:
        raise ValueError(f"qta_gate_spatial: expected {m} channels, got shape {image.shape}")
    cols = nx.take_columns(W.matrix(), np.atleast_1d(q))  # B x C
    if batched:
        if q.ndim != 1 or q.shape[0] != image.shape[0]:
            raise ValueError("batched spatial gating needs one type per sample")
        gate = nx.reshape(cols, cols.shape + (1, 1))
    else:
        if q.ndim != 0:
            raise ValueError("unbatched spatial gating needs a scalar type")
        gate = nx.reshape(cols, (m, 1, 1))
    return nx.mul(image, gate)


@dataclass(eq=False)
class TypeEmbedding:
    weight: Tensor  # N x E

    @classmethod
    def init(cls, n: int, dim: int, rng: Rng, dtype=np.float64) -> TypeEmbedding:
        w = rng.generator().normal(0.0, 1.0 / np.sqrt(max(dim, 1)), size=(n, dim))
        return cls(Tensor(w, requires_grad=True, dtype=dtype))

    @property
    def dim(self) -> int:
        return self.weight.shape[1]


def qt_concat(F, q_type, emb: TypeEmbedding) -> Tensor:
    """``[F, emb[q_type]]``: question type information without gating."""
    F = as_tensor(F)
    n = emb.weight.shape[0]
    q = _check_types(q_type, n)
    if emb.dim == 0:
        return F
    row = nx.take_rows(emb.weight, q)
    return nx.concat([F, row], axis=-1)


def mcb_qta_fuse(
    resnet_like,
    rcnn_like,
    text,
    q_type,
    W: QtaWeights,
    p_img: SketchParams,
    p_txt: SketchParams,
) -> Tensor:
    """Channel-concat two spatial maps, gate by question type, then MCB with text."""
    a, b = as_tensor(resnet_like), as_tensor(rcnn_like)
    if a.shape[-2:] != b.shape[-2:] or a.ndim != b.ndim:
        raise ValueError(f"spatial mismatch between {a.shape} and {b.shape}")
    stacked = nx.concat([a, b], axis=-3)
    gated = qta_gate_spatial(stacked, q_type, W)
    return mcb_fuse(gated, text, p_img, p_txt)


def qt_embedding_dim_for(m: int, n: int, hidden: int) -> int:
    """Type-embedding width whose extra parameters (``N*E + E*hidden``) match ``M*N``."""
    return max(1, round(m * n / (n + hidden)))
