"""Samples, manifests, binary feature files and synthetic routing datasets."""

from __future__ import annotations

import json
import os
import struct
import tempfile
from collections.abc import Iterable
from dataclasses import asdict, dataclass, field
from itertools import zip_longest
from pathlib import Path

import numpy as np

from .numerics import Rng

FEATURE_MAGIC = b"QTAF"
FEATURE_VERSION = 1
_FEATURE_HEADER = struct.Struct("<4sIII")

MANIFEST_FIELDS = ("id", "question", "question_type", "answer", "features")


class DataError(Exception):
    """Malformed dataset, manifest or feature file."""


class ManifestError(DataError):
    def __init__(self, path, line: int, reason: str):
        super().__init__(f"{path}:{line}: {reason}")
        self.line = line


class FeatureFileError(DataError):
    pass


# ----------------------------------------------------------------------------
# atomic writes


def atomic_write_bytes(path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


# ----------------------------------------------------------------------------
# samples and manifests


@dataclass(frozen=True)
class FeatureRef:
    file: str
    row: int


@dataclass
class Sample:
    id: str
    question: str
    question_type: str
    answer: str
    features: dict[str, FeatureRef]
    extra: dict = field(default_factory=dict)

    def to_record(self) -> dict:
        rec = {
            "id": self.id,
            "question": self.question,
            "question_type": self.question_type,
            "answer": self.answer,
            "features": {k: {"file": r.file, "row": r.row} for k, r in self.features.items()},
        }
        rec.update(self.extra)
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> Sample:
        missing = [k for k in MANIFEST_FIELDS if k not in rec]
        if missing:
            raise ValueError(f"missing fields {missing}")
        for k in ("id", "question", "question_type", "answer"):
            if not isinstance(rec[k], str):
                raise ValueError(f"field {k!r} must be a string")
        feats = {}
        for src, ref in rec["features"].items():
            feats[src] = FeatureRef(str(ref["file"]), int(ref["row"]))
        extra = {k: v for k, v in rec.items() if k not in MANIFEST_FIELDS}
        return cls(rec["id"], rec["question"], rec["question_type"], rec["answer"], feats, extra)


def dump_manifest(samples: Iterable[Sample]) -> str:
    return "".join(json.dumps(s.to_record(), ensure_ascii=False) + "\n" for s in samples)


def save_manifest(samples: Iterable[Sample], path) -> None:
    atomic_write_text(path, dump_manifest(samples))


def load_manifest(path) -> list[Sample]:
    samples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                if not isinstance(rec, dict):
                    raise ValueError("record is not an object")
                samples.append(Sample.from_record(rec))
            except (ValueError, TypeError, KeyError, AttributeError) as err:
                raise ManifestError(path, lineno, str(err)) from err
    return samples


# ----------------------------------------------------------------------------
# feature files


def encode_features(matrix: np.ndarray) -> bytes:
    m = np.asarray(matrix)
    if m.ndim != 2:
        raise FeatureFileError(f"feature matrix must be 2-D, got shape {m.shape}")
    header = _FEATURE_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, m.shape[0], m.shape[1])
    return header + np.ascontiguousarray(m, dtype="<f4").tobytes()


def decode_features(payload: bytes, where: str = "<bytes>") -> np.ndarray:
    if len(payload) < _FEATURE_HEADER.size:
        raise FeatureFileError(f"{where}: truncated header")
    magic, version, n, dim = _FEATURE_HEADER.unpack_from(payload)
    if magic != FEATURE_MAGIC:
        raise FeatureFileError(f"{where}: bad magic {magic!r}")
    if version != FEATURE_VERSION:
        raise FeatureFileError(f"{where}: unsupported version {version}")
    body = payload[_FEATURE_HEADER.size :]
    if len(body) != 4 * n * dim:
        raise FeatureFileError(f"{where}: header declares {n}x{dim} floats, payload has {len(body) // 4}")
    data = np.frombuffer(body, dtype="<f4").reshape(n, dim).astype(np.float32)
    if not np.all(np.isfinite(data)):
        raise FeatureFileError(f"{where}: non-finite values")
    return data


def save_features(matrix: np.ndarray, path) -> None:
    atomic_write_bytes(path, encode_features(matrix))


def load_features(path) -> np.ndarray:
    return decode_features(Path(path).read_bytes(), str(path))


# ----------------------------------------------------------------------------
# datasets


@dataclass
class Dataset:
    """Samples plus the feature matrices their refs point into."""

    samples: list[Sample]
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.samples)

    def feature(self, sample: Sample, source: str) -> np.ndarray:
        ref = sample.features[source]
        return self.arrays[ref.file][ref.row]

    def feature_matrix(self, source: str, indices=None) -> np.ndarray:
        idx = range(len(self.samples)) if indices is None else indices
        rows = [self.feature(self.samples[i], source) for i in idx]
        if not rows:
            return np.zeros((0, 0), dtype=np.float32)
        return np.stack(rows)

    def sources(self) -> list[str]:
        return list(self.samples[0].features) if self.samples else []


def save_dataset(dataset: Dataset, directory, split: str) -> None:
    directory = Path(directory)
    for name, arr in sorted(dataset.arrays.items()):
        save_features(arr, directory / name)
    save_manifest(dataset.samples, directory / f"{split}.jsonl")


def load_dataset(directory, split: str) -> Dataset:
    directory = Path(directory)
    manifest = directory / f"{split}.jsonl"
    if not manifest.exists():
        raise DataError(f"missing manifest {manifest}")
    samples = load_manifest(manifest)
    arrays: dict[str, np.ndarray] = {}
    for s in samples:
        for ref in s.features.values():
            if ref.file not in arrays:
                path = directory / ref.file
                if not path.exists():
                    raise DataError(f"missing feature file {path}")
                arrays[ref.file] = load_features(path)
            if not 0 <= ref.row < arrays[ref.file].shape[0]:
                raise DataError(f"sample {s.id}: row {ref.row} out of range in {ref.file}")
    return Dataset(samples, arrays)


# ----------------------------------------------------------------------------
# synthetic routing data

SOURCES = ("A", "B")
DEFAULT_TYPES = ("color", "absurd", "counting", "scene", "sport", "activity")
_TEMPLATES = {
    "color": "what color is the",
    "absurd": "is there a giraffe near the",
    "counting": "how many things are on the",
    "scene": "what room is shown in the",
    "sport": "which sport is played on the",
    "activity": "what is the person doing by the",
}
_FILLER = (
    "object", "picture", "image", "table", "left", "right", "photo", "corner",
    "wall", "street", "window", "shelf", "bench", "field", "background", "middle",
)


@dataclass
class SyntheticConfig:
    n_types: int = 6
    n_answers: int = 4
    dim_a: int = 32
    dim_b: int = 32
    samples_per_type: int = 600
    noise: float = 0.1
    distractor: str = "misleading"  # or "noise"
    rho: float = 0.0
    seed: int = 0
    type_names: list[str] | None = None
    absurd_type: str = "absurd"
    color_type: str = "color"
    filler_len: int = 3
    train_fraction: float = 0.8

    def names(self) -> list[str]:
        if self.type_names is not None:
            return list(self.type_names)
        if self.n_types <= len(DEFAULT_TYPES):
            return list(DEFAULT_TYPES[: self.n_types])
        return list(DEFAULT_TYPES) + [f"type{k}" for k in range(len(DEFAULT_TYPES), self.n_types)]

    def validate(self) -> None:
        names = self.names()
        if len(names) != self.n_types or self.n_types < 2:
            raise ValueError("need n_types >= 2 and one name per type")
        if self.n_answers < 2:
            raise ValueError("need at least two answers per type")
        if min(self.dim_a, self.dim_b) < self.n_answers:
            raise ValueError("source dims must be at least n_answers")
        if self.samples_per_type < 2:
            raise ValueError("need at least two samples per type")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")
        if self.distractor not in ("misleading", "noise"):
            raise ValueError(f"unknown distractor mode {self.distractor!r}")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError("rho must lie in [0, 1]")
        if self.rho > 0 and (self.absurd_type not in names or self.color_type not in names):
            raise ValueError("rho > 0 needs both the absurd and the color type")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> SyntheticConfig:
        return cls(**d)


def designated_source(type_index: int) -> str:
    """Channel carrying the answer for a type: A for even indices, B for odd."""
    return SOURCES[type_index % 2]


def answer_name(type_name: str, k: int) -> str:
    return f"{type_name}-{k}"


def answer_vocabulary(cfg: SyntheticConfig) -> list[str]:
    return [answer_name(t, k) for t in cfg.names() for k in range(cfg.n_answers)]


def pattern(answer_id: int, dim: int) -> np.ndarray:
    """Unit-norm one-hot code of a global answer id."""
    v = np.zeros(dim)
    v[answer_id % dim] = 1.0
    return v


def template(type_name: str) -> str:
    return _TEMPLATES.get(type_name, f"what about the {type_name} in the")


def _question(keyword: str, fillers: list[str]) -> str:
    return f"{keyword} {' '.join(fillers)}?"


def _generate(cfg: SyntheticConfig, rho: float) -> tuple[Dataset, Dataset]:
    cfg.validate()
    names = cfg.names()
    root = Rng(cfg.seed)
    dims = {"A": cfg.dim_a, "B": cfg.dim_b}

    records = []  # (type index, answer k, features dict, fillers)
    for t, tname in enumerate(names):
        for j in range(cfg.samples_per_type):
            idx = t * cfg.samples_per_type + j
            g = root.split("sample", idx).generator()
            k = j % cfg.n_answers
            gid = t * cfg.n_answers + k
            wrong = int(g.integers(0, cfg.n_answers - 1))
            wrong = wrong + 1 if wrong >= k else wrong
            feats = {}
            for src in SOURCES:
                d = dims[src]
                if src == designated_source(t):
                    base = pattern(gid, d)
                elif cfg.distractor == "misleading":
                    base = pattern(t * cfg.n_answers + wrong, d)
                else:
                    base = g.normal(0.0, 1.0 / np.sqrt(d), size=d)
                feats[src] = (base + g.normal(0.0, cfg.noise, size=d)).astype(np.float32)
            fillers = [_FILLER[i] for i in g.integers(0, len(_FILLER), size=cfg.filler_len)]
            records.append((t, k, feats, fillers))

    splits: dict[str, list[int]] = {"train": [], "test": []}
    for t in range(len(names)):
        members = np.arange(t * cfg.samples_per_type, (t + 1) * cfg.samples_per_type)
        g = root.split("split", t).generator()
        # shuffle within each answer, then deal answers round-robin so both
        # splits stay answer-balanced
        groups = [g.permutation(members[k :: cfg.n_answers]) for k in range(cfg.n_answers)]
        order = [int(i) for rnd in zip_longest(*groups) for i in rnd if i is not None]
        n_train = int(round(cfg.train_fraction * len(order)))
        splits["train"].extend(order[:n_train])
        splits["test"].extend(order[n_train:])

    out = []
    for split in ("train", "test"):
        idxs = sorted(splits[split])
        absurd_members = [i for i in idxs if names[records[i][0]] == cfg.absurd_type]
        n_overlap = int(round(rho * len(absurd_members)))
        overlap = set(absurd_members[:n_overlap])
        samples, mats = [], {src: [] for src in SOURCES}
        for row, i in enumerate(idxs):
            t, k, feats, fillers = records[i]
            tname = names[t]
            keyword = template(cfg.color_type if i in overlap else tname)
            refs = {}
            for src in SOURCES:
                mats[src].append(feats[src])
                refs[src] = FeatureRef(f"{split}_{src}.qtaf", row)
            extra = {"designated_source": designated_source(t)}
            samples.append(
                Sample(f"{split}-{i:06d}", _question(keyword, fillers), tname, answer_name(tname, k), refs, extra)
            )
        arrays = {f"{split}_{src}.qtaf": np.stack(mats[src]) for src in SOURCES}
        out.append(Dataset(samples, arrays))
    return out[0], out[1]


def gen_routing(cfg: SyntheticConfig) -> tuple[Dataset, Dataset]:
    """Train/test sets where each type's answer lives in one designated channel.

    The other channel carries a wrong answer's code (misleading mode) or
    isotropic noise of comparable norm (noise mode). ``cfg.rho`` is ignored;
    see :func:`gen_absurd_bias`.
    """
    return _generate(cfg, 0.0)


def gen_absurd_bias(cfg: SyntheticConfig) -> tuple[Dataset, Dataset]:
    """Routing data where a fraction ``rho`` of absurd questions reuse the color template."""
    names = cfg.names()
    if cfg.absurd_type not in names or cfg.color_type not in names:
        raise ValueError("absurd-bias data needs both the absurd and the color type")
    return _generate(cfg, cfg.rho)


def write_generated(train: Dataset, test: Dataset, cfg: SyntheticConfig, directory) -> None:
    directory = Path(directory)
    save_dataset(train, directory, "train")
    save_dataset(test, directory, "test")
    meta = {
        "question_types": cfg.names(),
        "answers": answer_vocabulary(cfg),
        "sources": {"A": [cfg.dim_a], "B": [cfg.dim_b]},
        "designated_source": {t: designated_source(i) for i, t in enumerate(cfg.names())},
        "synthetic": cfg.to_dict(),
    }
    atomic_write_text(directory / "meta.json", json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_meta(directory) -> dict:
    path = Path(directory) / "meta.json"
    if not path.exists():
        raise DataError(f"missing {path}")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as err:
        raise DataError(f"{path}: {err}") from err
