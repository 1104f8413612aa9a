"""Question text encoders: tokenizer, embedding tables and a 2-layer LSTM."""

from __future__ import annotations

import hashlib
import json
import string
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .numerics import Rng, Tensor

PAD, UNK = 0, 1
_RESERVED = ("<pad>", "<unk>")
_TRAILING = string.punctuation


def split_tokens(question: str) -> list[str]:
    """Lowercase, split on whitespace, strip trailing punctuation."""
    tokens = []
    for raw in question.lower().split():
        tok = raw.rstrip(_TRAILING)
        if tok:
            tokens.append(tok)
    return tokens


@dataclass
class Vocab:
    tokens: list[str] = field(default_factory=lambda: list(_RESERVED))

    def __post_init__(self):
        if tuple(self.tokens[:2]) != _RESERVED:
            raise ValueError("vocab must start with the reserved PAD and UNK entries")
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocab")

    @classmethod
    def build(cls, questions: Iterable[str]) -> Vocab:
        """Ids assigned in order of first occurrence."""
        vocab = cls()
        for q in questions:
            for tok in split_tokens(q):
                if tok not in vocab.index:
                    vocab.index[tok] = len(vocab.tokens)
                    vocab.tokens.append(tok)
        return vocab

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, question: str) -> list[int]:
        return tokenize(question, self)

    def to_json(self) -> str:
        return json.dumps(self.index, ensure_ascii=False, sort_keys=False)

    @classmethod
    def from_json(cls, text: str) -> Vocab:
        mapping = json.loads(text)
        tokens = [None] * len(mapping)
        for tok, i in mapping.items():
            tokens[i] = tok
        if any(t is None for t in tokens):
            raise ValueError("vocab ids are not contiguous")
        return cls(tokens)

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()


def tokenize(question: str, vocab: Vocab) -> list[int]:
    tokens = split_tokens(question)
    if not tokens:
        raise ValueError(f"question has no tokens: {question!r}")
    return [vocab.index.get(t, UNK) for t in tokens]


@dataclass(eq=False)
class EmbeddingTable:
    weight: Tensor
    trainable: bool = True

    @classmethod
    def init(cls, vocab_size: int, dim: int, rng: Rng, trainable: bool = True, dtype=np.float64):
        w = rng.generator().normal(0.0, 1.0 / np.sqrt(dim), size=(vocab_size, dim))
        w[PAD] = 0.0
        return cls(Tensor(w, requires_grad=trainable, dtype=dtype), trainable)

    @property
    def dim(self) -> int:
        return self.weight.shape[1]

    def __len__(self) -> int:
        return self.weight.shape[0]


@dataclass(eq=False)
class TextFeature:
    vector: Tensor
    provenance: str  # "lstm", "pretrained-sum" or "concat"

    def __len__(self) -> int:
        return self.vector.shape[-1]


def _as_id_batch(tokens) -> tuple[np.ndarray, bool]:
    ids = np.asarray(tokens, dtype=np.int64)
    single = ids.ndim == 1
    if single:
        ids = ids[None, :]
    if ids.ndim != 2 or ids.shape[1] == 0:
        raise ValueError("need at least one token per sequence")
    if np.any(ids == PAD):
        raise ValueError("PAD id inside an encoded sequence")
    return ids, single


def embed_sum(tokens, table: EmbeddingTable) -> TextFeature:
    """Sum of embedding rows; ``tokens`` is one sequence or a B x T batch."""
    ids, single = _as_id_batch(tokens)
    rows = nx.take_rows(table.weight, ids)  # B x T x d
    out = nx.sum(rows, axis=1)
    if single:
        out = nx.reshape(out, (table.dim,))
    return TextFeature(out, "pretrained-sum")


@dataclass(eq=False)
class LstmLayer:
    w_x: Tensor  # in x 4H, gate blocks ordered i, f, g, o
    w_h: Tensor  # H x 4H
    bias: Tensor  # 4H

    @property
    def hidden(self) -> int:
        return self.w_h.shape[0]


@dataclass(eq=False)
class LstmParams:
    layers: list[LstmLayer]

    @classmethod
    def init(cls, input_dim: int, hidden: int, rng: Rng, n_layers: int = 2, dtype=np.float64):
        bound = 1.0 / np.sqrt(hidden)
        layers = []
        d = input_dim
        for k in range(n_layers):
            g = rng.split("lstm-layer", k).generator()
            bias = g.uniform(-bound, bound, size=4 * hidden)
            bias[hidden : 2 * hidden] += 1.0  # forget gate
            layers.append(
                LstmLayer(
                    Tensor(g.uniform(-bound, bound, size=(d, 4 * hidden)), requires_grad=True, dtype=dtype),
                    Tensor(g.uniform(-bound, bound, size=(hidden, 4 * hidden)), requires_grad=True, dtype=dtype),
                    Tensor(bias, requires_grad=True, dtype=dtype),
                )
            )
            d = hidden
        return cls(layers)

    @property
    def hidden(self) -> int:
        return self.layers[-1].hidden

    def tensors(self) -> dict[str, Tensor]:
        out = {}
        for k, layer in enumerate(self.layers):
            out[f"lstm.{k}.w_x"] = layer.w_x
            out[f"lstm.{k}.w_h"] = layer.w_h
            out[f"lstm.{k}.bias"] = layer.bias
        return out


def lstm_cell(x: Tensor, h: Tensor, c: Tensor, layer: LstmLayer) -> tuple[Tensor, Tensor]:
    H = layer.hidden
    z = nx.add(nx.add(nx.matmul(x, layer.w_x), nx.matmul(h, layer.w_h)), layer.bias)
    i = nx.sigmoid(nx.columns(z, 0, H))
    f = nx.sigmoid(nx.columns(z, H, 2 * H))
    g = nx.tanh(nx.columns(z, 2 * H, 3 * H))
    o = nx.sigmoid(nx.columns(z, 3 * H, 4 * H))
    c_new = nx.add(nx.mul(f, c), nx.mul(i, g))
    h_new = nx.mul(o, nx.tanh(c_new))
    return h_new, c_new


def lstm_forward(tokens, table: EmbeddingTable, params: LstmParams) -> TextFeature:
    """Final hidden state of the top layer.

    ``tokens`` is a single id sequence or a B x T batch of equal-length
    sequences (callers bucket by length; no padding reaches the cell).
    """
    ids, single = _as_id_batch(tokens)
    bsz, steps = ids.shape
    xs = [nx.take_rows(table.weight, ids[:, t]) for t in range(steps)]
    dtype = table.weight.dtype
    for layer in params.layers:
        zeros = np.zeros((bsz, layer.hidden), dtype=dtype)
        h, c = Tensor(zeros), Tensor(zeros)
        outs = []
        for x in xs:
            h, c = lstm_cell(x, h, c, layer)
            outs.append(h)
        xs = outs
    out = xs[-1]
    if single:
        out = nx.reshape(out, (params.hidden,))
    return TextFeature(out, "lstm")


def concat_text(lstm_out: TextFeature, pretrained: TextFeature) -> TextFeature:
    if pretrained.vector.shape[-1] == 0:
        return TextFeature(lstm_out.vector, "concat")
    return TextFeature(nx.concat([lstm_out.vector, pretrained.vector], axis=-1), "concat")


def bucket_by_length(sequences: Sequence[Sequence[int]]) -> dict[int, list[int]]:
    """Indices of ``sequences`` grouped by sequence length, in input order."""
    buckets: dict[int, list[int]] = {}
    for i, seq in enumerate(sequences):
        buckets.setdefault(len(seq), []).append(i)
    return dict(sorted(buckets.items()))
