"""Per-type accuracy, mean-per-type summaries, confusion matrices and gate norm diagnostics."""

from __future__ import annotations

import csv
import io
import json
import statistics
from collections.abc import Sequence
from dataclasses import asdict, dataclass

import numpy as np

from .data import Dataset


def arithmetic_mpt(accuracies: Sequence[float]) -> float:
    return statistics.fmean(accuracies)


def harmonic_mpt(accuracies: Sequence[float]) -> float:
    # statistics.harmonic_mean already returns 0 when any term is 0
    return statistics.harmonic_mean(accuracies)


@dataclass
class EvalReport:
    per_type_acc: dict[str, float]
    n_per_type: dict[str, int]
    arithmetic_mpt: float
    harmonic_mpt: float
    overall_acc: float
    missing_types: list[str]

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


def evaluate(predictions: Sequence, targets: Sequence, types: Sequence[str], type_names: Sequence[str] | None = None) -> EvalReport:
    """Simple accuracy per question type, plus sample-weighted overall accuracy.

    Types listed in ``type_names`` without any samples are excluded from the
    means and reported in ``missing_types``.
    """
    if not len(predictions) == len(targets) == len(types):
        raise ValueError("predictions, targets and types must have equal length")
    correct: dict[str, int] = {}
    count: dict[str, int] = {}
    for p, t, ty in zip(predictions, targets, types):
        count[ty] = count.get(ty, 0) + 1
        correct[ty] = correct.get(ty, 0) + int(p == t)
    order = list(type_names) if type_names is not None else sorted(count)
    missing = [t for t in order if count.get(t, 0) == 0]
    present = [t for t in order if count.get(t, 0) > 0] + sorted(set(count) - set(order))
    per_type = {t: 100.0 * correct[t] / count[t] for t in present}
    accs = list(per_type.values())
    n = sum(count.values())
    return EvalReport(
        per_type_acc=per_type,
        n_per_type={t: count[t] for t in present},
        arithmetic_mpt=arithmetic_mpt(accs) if accs else 0.0,
        harmonic_mpt=harmonic_mpt(accs) if accs else 0.0,
        overall_acc=100.0 * sum(correct.values()) / n if n else 0.0,
        missing_types=missing,
    )


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # rows target, columns predicted
    names: list[str]

    def normalized(self) -> np.ndarray:
        """Row percentages; empty rows stay zero."""
        rows = self.counts.sum(axis=1, keepdims=True)
        with np.errstate(invalid="ignore", divide="ignore"):
            out = np.where(rows > 0, 100.0 * self.counts / np.maximum(rows, 1), 0.0)
        return out

    def accuracy(self) -> float:
        total = self.counts.sum()
        return 100.0 * np.trace(self.counts) / total if total else 0.0

    def mass(self, target: str, predicted: str) -> float:
        """Percentage of ``target`` rows predicted as ``predicted``."""
        i, j = self.names.index(target), self.names.index(predicted)
        return float(self.normalized()[i, j])

    def to_json(self) -> str:
        doc = {
            "names": self.names,
            "counts": self.counts.tolist(),
            "percent": self.normalized().tolist(),
            "accuracy": self.accuracy(),
        }
        return json.dumps(doc, indent=2) + "\n"


def confusion(type_preds, type_targets, n: int, names: Sequence[str] | None = None) -> ConfusionMatrix:
    preds = np.asarray(type_preds, dtype=np.int64)
    targets = np.asarray(type_targets, dtype=np.int64)
    if preds.shape != targets.shape:
        raise ValueError("prediction and target lengths differ")
    for arr in (preds, targets):
        if arr.size and (arr.min() < 0 or arr.max() >= n):
            raise IndexError(f"type index out of range [0, {n})")
    counts = np.zeros((n, n), dtype=np.int64)
    np.add.at(counts, (targets, preds), 1)
    return ConfusionMatrix(counts, list(names) if names is not None else [str(i) for i in range(n)])


# ----------------------------------------------------------------------------
# gate diagnostics


@dataclass
class NormRow:
    question_type: str
    source: str
    raw_norm: float
    gated_norm: float

    @property
    def difference(self) -> float:
        return self.gated_norm - self.raw_norm


@dataclass
class NormReport:
    rows: list[NormRow]

    def get(self, question_type: str, source: str) -> NormRow:
        for r in self.rows:
            if r.question_type == question_type and r.source == source:
                return r
        raise KeyError((question_type, source))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["question_type", "source", "raw_norm", "gated_norm", "difference"])
        for r in self.rows:
            w.writerow([r.question_type, r.source, repr(r.raw_norm), repr(r.gated_norm), repr(r.difference)])
        return buf.getvalue()

    def to_json(self) -> str:
        doc = [dict(asdict(r), difference=r.difference) for r in self.rows]
        return json.dumps(doc, indent=2) + "\n"


def norm_report(model, dataset: Dataset) -> NormReport:
    """Mean L2 norm of each visual block before and after gating, per question type.

    Gating uses the ground-truth type of each sample.
    """
    if model.qta is None:
        raise ValueError("model has no question-type gate")
    spec = model.spec
    W = model.qta.values()
    sources = spec.visual_sources()
    bounds = model.block_boundaries()
    types = np.array([model.types.index(s.question_type) for s in dataset.samples], dtype=np.int64)
    mats = [dataset.feature_matrix(s).astype(np.float64) for s in sources]
    rows = []
    for t, name in enumerate(model.types.names):
        sel = types == t
        if not sel.any():
            continue
        for src, (lo, hi), m in zip(sources, bounds, mats):
            x = m[sel]
            if spec.architecture == "MCB-QTA":
                # channel gate broadcast over spatial positions
                c = hi - lo
                x3 = x.reshape(len(x), c, -1)
                gated = x3 * W[lo:hi, t][None, :, None]
                raw_n = np.linalg.norm(x3.reshape(len(x), -1), axis=1)
                gated_n = np.linalg.norm(gated.reshape(len(x), -1), axis=1)
            else:
                raw_n = np.linalg.norm(x, axis=1)
                gated_n = np.linalg.norm(x * W[lo:hi, t], axis=1)
            rows.append(NormRow(name, src, float(raw_n.mean()), float(gated_n.mean())))
    return NormReport(rows)


def gate_magnitudes(model) -> dict[str, dict[str, float]]:
    """Mean absolute gate weight of each source block, per question type."""
    W = model.qta.values()
    out = {}
    for t, name in enumerate(model.types.names):
        out[name] = {
            src: float(np.abs(W[lo:hi, t]).mean())
            for src, (lo, hi) in zip(model.spec.visual_sources(), model.block_boundaries())
        }
    return out
