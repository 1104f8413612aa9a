"""Model zoo, classifier heads, multi-task loss and the training loop."""

from __future__ import annotations

import hashlib
import logging
from collections.abc import Callable, Iterator
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .data import Dataset
from .encoders import (
    EmbeddingTable,
    LstmParams,
    TextFeature,
    Vocab,
    concat_text,
    embed_sum,
    lstm_forward,
    tokenize,
)
from .fusion import QtaWeights, QuestionTypeSet, TypeEmbedding, concat_visual, qt_concat, qta_gate, qta_gate_spatial
from .numerics import NonFiniteError, Rng, Tensor
from .sketch import SketchParams, make_sketch_params, mcb_fuse, signed_sqrt_l2

log = logging.getLogger(__name__)

ARCHITECTURES = ("CAT1", "CAT1L", "CATL", "CAT2", "CATL-QTA", "CAT-QT", "CATL-QT", "MCB-QTA", "CATL-QTA-M")
USES_LSTM = {"CAT1L", "CATL", "CATL-QTA", "CATL-QT", "MCB-QTA", "CATL-QTA-M"}
SINGLE_SOURCE = {"CAT1", "CAT1L"}
GATED = {"CATL-QTA", "MCB-QTA", "CATL-QTA-M"}
TYPE_EMBEDDED = {"CAT-QT", "CATL-QT"}
TEXT_VARIANTS = ("plain", "N", "W")
PROB_FLOOR = 1e-12


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class ModelSpec:
    """Architecture name plus every dimension needed to build it.

    Defaults are desk scale; :meth:`full_scale` restores the published sizes.
    """

    architecture: str = "CATL-QTA"
    text_variant: str = "plain"
    pretrained: str = "w2v"  # table used by the non-LSTM text models
    sources: list[str] = field(default_factory=lambda: ["A", "B"])
    source_shapes: dict[str, list[int]] = field(default_factory=lambda: {"A": [32], "B": [32]})
    single_source: str | None = None
    embed_dim: int = 32
    lstm_hidden: int = 64
    mlp_hidden: int = 128
    w2v_dim: int = 32
    nmt_dim: int = 64
    sketch_width: int = 64
    type_embed_dim: int = 16
    nonneg_gate: bool = False
    mcb_normalize: bool = False
    gate_input: str = "flat"  # or "pooled": spatial mean per channel before concat
    seed: int = 0
    dtype: str = "float64"

    @classmethod
    def full_scale(cls, architecture: str, **kw) -> ModelSpec:
        dims = dict(
            source_shapes={"A": [2048, 14, 14], "B": [2048, 6, 6]},
            embed_dim=300,
            lstm_hidden=1024,
            mlp_hidden=8192,
            w2v_dim=300,
            nmt_dim=1024,
            sketch_width=8000,
            type_embed_dim=1024,
        )
        dims.update(kw)
        return cls(architecture=architecture, **dims)

    def validate(self) -> None:
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}")
        if self.text_variant not in TEXT_VARIANTS:
            raise ValueError(f"unknown text variant {self.text_variant!r}")
        if self.text_variant != "plain" and (
            self.architecture not in USES_LSTM or self.architecture == "MCB-QTA"
        ):
            raise ValueError(f"{self.architecture} has no +{self.text_variant} variant")
        if self.pretrained not in ("w2v", "nmt"):
            raise ValueError(f"unknown pretrained table {self.pretrained!r}")
        if self.gate_input not in ("flat", "pooled"):
            raise ValueError(f"unknown gate input {self.gate_input!r}")
        if self.dtype not in ("float64", "float32"):
            raise ValueError("dtype must be float64 or float32")
        for s in self.visual_sources():
            if s not in self.source_shapes:
                raise ValueError(f"no shape declared for source {s!r}")
        if self.architecture == "MCB-QTA":
            spatial = {tuple(self.spatial_shape(s)[1:]) for s in self.sources}
            if len(spatial) != 1:
                raise ValueError("MCB-QTA needs equal spatial extents across sources")

    def visual_sources(self) -> list[str]:
        if self.architecture in SINGLE_SOURCE:
            return [self.single_source or self.sources[0]]
        return list(self.sources)

    def flat_dim(self, source: str) -> int:
        return int(np.prod(self.source_shapes[source]))

    def visual_dim(self, source: str) -> int:
        """Width of one source inside the concatenated (non-MCB) visual vector."""
        if self.gate_input == "pooled":
            return self.spatial_shape(source)[0]
        return self.flat_dim(source)

    def spatial_shape(self, source: str) -> list[int]:
        shape = list(self.source_shapes[source])
        return shape + [1] * (3 - len(shape)) if len(shape) < 3 else shape

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelSpec:
        return cls(**d)


def derived_seed(seed: int, label: str) -> int:
    return int.from_bytes(hashlib.blake2b(f"{seed}:{label}".encode(), digest_size=4).digest(), "little")


def _uniform_linear(rng: Rng, fan_in: int, fan_out: int, dtype) -> tuple[Tensor, Tensor]:
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    w = rng.generator().uniform(-bound, bound, size=(fan_in, fan_out))
    return Tensor(w, requires_grad=True, dtype=dtype), Tensor(np.zeros(fan_out), requires_grad=True, dtype=dtype)


@dataclass(eq=False)
class MlpHead:
    """Linear -> ReLU -> linear -> softmax."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def init(cls, rng: Rng, d_in: int, hidden: int, n_out: int, dtype) -> MlpHead:
        w1, b1 = _uniform_linear(rng.split("hidden"), d_in, hidden, dtype)
        w2, b2 = _uniform_linear(rng.split("output"), hidden, n_out, dtype)
        return cls(w1, b1, w2, b2)

    def __call__(self, x: Tensor) -> Tensor:
        h = nx.relu(nx.add(nx.matmul(x, self.w1), self.b1))
        return nx.softmax(nx.add(nx.matmul(h, self.w2), self.b2))


@dataclass(eq=False)
class TypeHead:
    """Linear -> softmax over question types."""

    w: Tensor
    b: Tensor

    @classmethod
    def init(cls, rng: Rng, d_in: int, n_types: int, dtype) -> TypeHead:
        return cls(*_uniform_linear(rng, d_in, n_types, dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return nx.softmax(nx.add(nx.matmul(x, self.w), self.b))


@dataclass
class Batch:
    token_ids: np.ndarray  # B x T, one length per batch
    type_ids: np.ndarray  # B
    answer_ids: np.ndarray  # B, -1 for answers outside the model's vocabulary
    features: dict[str, np.ndarray]  # source -> B x dim

    def __len__(self) -> int:
        return len(self.type_ids)


@dataclass
class ModelOutput:
    answer_probs: Tensor
    type_probs: Tensor | None = None
    gate_types: np.ndarray | None = None
    gated_visual: Tensor | None = None


class Model:
    def __init__(self, spec: ModelSpec, vocab: Vocab, types: QuestionTypeSet, answers: list[str]):
        spec.validate()
        self.spec = spec
        self.vocab = vocab
        self.types = types
        self.answers = list(answers)
        self.answer_index = {a: i for i, a in enumerate(self.answers)}
        dtype = np.dtype(spec.dtype)
        rng = Rng(spec.seed)
        arch = spec.architecture

        self.word_table = self.lstm = None
        self.w2v = self.nmt = None
        self.qta = self.type_embedding = self.type_head = None
        self.p_img = self.p_txt = None

        # frozen stand-ins for pretrained word vectors
        self.w2v = EmbeddingTable.init(len(vocab), spec.w2v_dim, rng.split("w2v"), trainable=False, dtype=dtype)
        self.nmt = EmbeddingTable.init(len(vocab), spec.nmt_dim, rng.split("nmt"), trainable=False, dtype=dtype)

        if arch in USES_LSTM:
            self.word_table = EmbeddingTable.init(len(vocab), spec.embed_dim, rng.split("words"), dtype=dtype)
            self.lstm = LstmParams.init(spec.embed_dim, spec.lstm_hidden, rng.split("lstm"), dtype=dtype)
            text_dim = spec.lstm_hidden + {"plain": 0, "W": spec.w2v_dim, "N": spec.nmt_dim}[spec.text_variant]
        else:
            text_dim = spec.w2v_dim if spec.pretrained == "w2v" else spec.nmt_dim

        sources = spec.visual_sources()
        if arch == "MCB-QTA":
            channels = sum(spec.spatial_shape(s)[0] for s in sources)
            self.qta = QtaWeights.init(channels, len(types), spec.nonneg_gate, dtype)
            self.p_img = make_sketch_params(channels, spec.sketch_width, derived_seed(spec.seed, "mcb-image"))
            self.p_txt = make_sketch_params(text_dim, spec.sketch_width, derived_seed(spec.seed, "mcb-text"))
            head_in = spec.sketch_width
        else:
            visual_dim = sum(spec.visual_dim(s) for s in sources)
            if arch in GATED:
                self.qta = QtaWeights.init(visual_dim, len(types), spec.nonneg_gate, dtype)
            head_in = visual_dim + text_dim
            if arch in TYPE_EMBEDDED:
                self.type_embedding = TypeEmbedding.init(len(types), spec.type_embed_dim, rng.split("qt"), dtype)
                head_in += spec.type_embed_dim
        self.head = MlpHead.init(rng.split("mlp"), head_in, spec.mlp_hidden, len(self.answers), dtype)
        if arch == "CATL-QTA-M":
            self.type_head = TypeHead.init(rng.split("type-head"), spec.lstm_hidden, len(types), dtype)

    # -- parameters --------------------------------------------------------

    def named_tensors(self) -> dict[str, Tensor]:
        """Every tensor the model owns, frozen tables included, in a fixed order."""
        out: dict[str, Tensor] = {"w2v": self.w2v.weight, "nmt": self.nmt.weight}
        if self.word_table is not None:
            out["words"] = self.word_table.weight
            out.update(self.lstm.tensors())
        if self.qta is not None:
            out["qta"] = self.qta.raw
        if self.type_embedding is not None:
            out["type_embedding"] = self.type_embedding.weight
        for k in ("w1", "b1", "w2", "b2"):
            out[f"head.{k}"] = getattr(self.head, k)
        if self.type_head is not None:
            out["type_head.w"] = self.type_head.w
            out["type_head.b"] = self.type_head.b
        return out

    def parameters(self) -> dict[str, Tensor]:
        return {k: t for k, t in self.named_tensors().items() if t.requires_grad}

    def num_parameters(self) -> int:
        return int(sum(t.data.size for t in self.parameters().values()))

    def block_boundaries(self) -> list[tuple[int, int]]:
        """Gate-row ranges per visual source (channels for MCB-QTA)."""
        spec = self.spec
        bounds, start = [], 0
        for s in spec.visual_sources():
            width = spec.spatial_shape(s)[0] if spec.architecture == "MCB-QTA" else spec.visual_dim(s)
            bounds.append((start, start + width))
            start += width
        return bounds

    # -- encoding ----------------------------------------------------------

    def encode(self, dataset: Dataset) -> EncodedData:
        tokens = [np.asarray(tokenize(s.question, self.vocab), dtype=np.int64) for s in dataset.samples]
        types = np.array([self.types.index(s.question_type) for s in dataset.samples], dtype=np.int64)
        answers = np.array([self.answer_index.get(s.answer, -1) for s in dataset.samples], dtype=np.int64)
        feats = {}
        for src in self.spec.visual_sources():
            m = dataset.feature_matrix(src)
            if m.shape[1:] != (self.spec.flat_dim(src),):
                raise ValueError(f"source {src}: expected dim {self.spec.flat_dim(src)}, got {m.shape[1:]}")
            feats[src] = m
        return EncodedData(tokens, types, answers, feats)


@dataclass
class EncodedData:
    tokens: list[np.ndarray]
    type_ids: np.ndarray
    answer_ids: np.ndarray
    features: dict[str, np.ndarray]

    def __len__(self) -> int:
        return len(self.tokens)

    def batch(self, idx) -> Batch:
        idx = np.asarray(idx, dtype=np.int64)
        return Batch(
            np.stack([self.tokens[i] for i in idx]),
            self.type_ids[idx],
            self.answer_ids[idx],
            {k: v[idx] for k, v in self.features.items()},
        )

    def batches(self, batch_size: int, rng: Rng | None = None) -> Iterator[Batch]:
        """Equal-length batches; shuffled within and across length buckets when ``rng`` is given."""
        buckets: dict[int, list[int]] = {}
        for i, t in enumerate(self.tokens):
            buckets.setdefault(len(t), []).append(i)
        chunks = []
        for length in sorted(buckets):
            members = np.asarray(buckets[length])
            if rng is not None:
                members = rng.split("bucket", length).generator().permutation(members)
            chunks.extend(members[i : i + batch_size] for i in range(0, len(members), batch_size))
        order = range(len(chunks))
        if rng is not None:
            order = rng.split("order").generator().permutation(len(chunks))
        for k in order:
            yield self.batch(chunks[k])


def build_model(spec: ModelSpec, vocab: Vocab, types: QuestionTypeSet, answers: list[str]) -> Model:
    return Model(spec, vocab, types, answers)


# ----------------------------------------------------------------------------
# forward


def _text_feature(model: Model, ids: np.ndarray) -> tuple[TextFeature, Tensor | None]:
    spec = model.spec
    if model.lstm is None:
        table = model.w2v if spec.pretrained == "w2v" else model.nmt
        return embed_sum(ids, table), None
    h = lstm_forward(ids, model.word_table, model.lstm)
    if spec.text_variant == "W":
        return concat_text(h, embed_sum(ids, model.w2v)), h.vector
    if spec.text_variant == "N":
        return concat_text(h, embed_sum(ids, model.nmt)), h.vector
    return h, h.vector


def forward(model: Model, batch: Batch, train: bool = False) -> ModelOutput:
    """Answer distribution (and type distribution for the multi-task model).

    The multi-task model gates with ground-truth types when ``train`` is set
    and with its own argmax prediction otherwise.
    """
    spec = model.spec
    arch = spec.architecture
    dtype = np.dtype(spec.dtype)
    text, lstm_out = _text_feature(model, batch.token_ids)
    out = ModelOutput(answer_probs=None)  # type: ignore[arg-type]

    gate_types = batch.type_ids
    if arch == "CATL-QTA-M":
        out.type_probs = model.type_head(lstm_out)
        if not train:
            gate_types = predict_type(out.type_probs)

    if arch == "MCB-QTA":
        maps = [
            Tensor(batch.features[s].reshape((len(batch), *spec.spatial_shape(s))), dtype=dtype)
            for s in spec.visual_sources()
        ]
        stacked = nx.concat(maps, axis=1) if len(maps) > 1 else maps[0]
        gated = qta_gate_spatial(stacked, gate_types, model.qta)
        fused = mcb_fuse(gated, text.vector, model.p_img, model.p_txt)
        pooled = nx.sum(nx.reshape(fused, fused.shape[:2] + (-1,)), axis=2)
        if spec.mcb_normalize:
            pooled = signed_sqrt_l2(pooled)
        out.gated_visual, out.gate_types = gated, gate_types
        out.answer_probs = model.head(pooled)
        return out

    feats = [Tensor(batch.features[s], dtype=dtype) for s in spec.visual_sources()]
    if spec.gate_input == "pooled":
        feats = [
            nx.mean(nx.reshape(f, (len(batch), spec.spatial_shape(s)[0], -1)), axis=2)
            for f, s in zip(feats, spec.visual_sources())
        ]
    visual, _ = concat_visual(feats)
    if arch in GATED:
        visual = qta_gate(visual, gate_types, model.qta)
        out.gated_visual, out.gate_types = visual, gate_types
    if arch in TYPE_EMBEDDED:
        visual = qt_concat(visual, batch.type_ids, model.type_embedding)
    out.answer_probs = model.head(nx.concat([visual, text.vector], axis=-1))
    return out


def predict_type(type_probs) -> np.ndarray:
    """Argmax over the last axis; ties go to the lowest index."""
    p = type_probs.data if isinstance(type_probs, Tensor) else np.asarray(type_probs)
    return np.argmax(p, axis=-1)


def cross_entropy(probs, target) -> Tensor:
    """Mean of ``-log p[target]`` with probabilities clamped at 1e-12."""
    probs = nx.as_tensor(probs)
    target = np.asarray(target, dtype=np.int64)
    if probs.ndim == 1:
        probs = nx.reshape(probs, (1, -1))
        target = target.reshape(1)
    if target.min(initial=0) < 0 or target.max(initial=0) >= probs.shape[1]:
        raise IndexError("target outside the distribution support")
    onehot = np.zeros(probs.shape, dtype=probs.dtype)
    onehot[np.arange(len(target)), target] = 1.0
    picked = nx.sum(nx.mul(probs, onehot), axis=-1)
    return nx.mul(nx.mean(nx.log(picked, floor=PROB_FLOOR)), -1.0)


def loss(pred, target, type_pred=None, type_target=None, lam: float = 0.0) -> Tensor:
    """``(1 - lam) * CE(answer) + lam * CE(type)``; plain answer CE when ``lam`` is 0."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lam must lie in [0, 1]")
    ce = cross_entropy(pred, target)
    if lam == 0.0 or type_pred is None:
        return ce
    return nx.add(nx.mul(ce, 1.0 - lam), nx.mul(cross_entropy(type_pred, type_target), lam))


# ----------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    lr: float = 1e-3
    epochs: int = 20
    batch_size: int = 32
    lam: float = 0.2
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        return cls(**d)


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float, b1=0.9, b2=0.999, eps=1e-8):
        self.params, self.lr, self.b1, self.b2, self.eps = params, lr, b1, b2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, p in self.params.items():
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            update = self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            p.data = (p.data - update).astype(p.dtype, copy=False)


class Sgd:
    def __init__(self, params: dict[str, Tensor], lr: float):
        self.params, self.lr = params, lr

    def step(self, grads: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            p.data = (p.data - self.lr * grads[k]).astype(p.dtype, copy=False)


def make_optimizer(name: str, params: dict[str, Tensor], lr: float):
    if name == "adam":
        return Adam(params, lr)
    if name == "sgd":
        return Sgd(params, lr)
    raise ValueError(f"unknown optimizer {name!r}")


@dataclass
class TrainResult:
    model: Model
    loss_curve: list[float]


EpochCallback = Callable[[int, Model, float], bool | None]


def batch_loss(model: Model, batch: Batch, lam: float) -> Tensor:
    if np.any(batch.answer_ids < 0):
        raise ValueError("training batch contains answers outside the model vocabulary")
    out = forward(model, batch, train=True)
    if model.spec.architecture == "CATL-QTA-M":
        return loss(out.answer_probs, batch.answer_ids, out.type_probs, batch.type_ids, lam)
    return loss(out.answer_probs, batch.answer_ids)


def train(model: Model, dataset: Dataset | EncodedData, cfg: TrainConfig, callback: EpochCallback | None = None) -> TrainResult:
    """Minibatch training; ``callback(epoch, model, mean_loss)`` returning True stops early."""
    data = dataset if isinstance(dataset, EncodedData) else model.encode(dataset)
    if len(data) == 0:
        raise ValueError("cannot train on an empty dataset")
    params = model.parameters()
    names = list(params)
    opt = make_optimizer(cfg.optimizer, params, cfg.lr)
    rng = Rng(cfg.seed).split("train")
    curve: list[float] = []
    for epoch in range(cfg.epochs):
        total, count = 0.0, 0
        for step, batch in enumerate(data.batches(cfg.batch_size, rng.split("epoch", epoch))):
            try:
                value = batch_loss(model, batch, cfg.lam)
                grads = nx.gradients(value, [params[k] for k in names])
            except NonFiniteError as err:
                raise TrainingDiverged(f"epoch {epoch} step {step}: {err}") from err
            opt.step(dict(zip(names, grads)))
            total += float(value.data) * len(batch)
            count += len(batch)
        mean = total / count
        if not np.isfinite(mean):
            raise TrainingDiverged(f"epoch {epoch}: non-finite mean loss")
        curve.append(mean)
        log.info("epoch %d loss %.6f", epoch, mean)
        if callback is not None and callback(epoch, model, mean):
            break
    return TrainResult(model, curve)


@dataclass
class Predictions:
    answer_ids: np.ndarray
    type_ids: np.ndarray | None = None


def predict(model: Model, dataset: Dataset | EncodedData, batch_size: int = 256) -> Predictions:
    data = dataset if isinstance(dataset, EncodedData) else model.encode(dataset)
    answers = np.zeros(len(data), dtype=np.int64)
    types = np.zeros(len(data), dtype=np.int64) if model.type_head is not None else None
    buckets: dict[int, list[int]] = {}
    for i, t in enumerate(data.tokens):
        buckets.setdefault(len(t), []).append(i)
    for length in sorted(buckets):
        members = buckets[length]
        for lo in range(0, len(members), batch_size):
            idx = np.asarray(members[lo : lo + batch_size])
            out = forward(model, data.batch(idx), train=False)
            answers[idx] = np.argmax(out.answer_probs.data, axis=-1)
            if types is not None:
                types[idx] = predict_type(out.type_probs)
    return Predictions(answers, types)
