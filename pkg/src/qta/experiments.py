"""Desk-scale experiments on synthetic routing data.

Each runner trains on a fixed epoch budget and returns plain dicts so the
scripts can dump them as JSON.
"""

from __future__ import annotations

import time
from dataclasses import replace

import numpy as np

from .data import Dataset, SyntheticConfig, answer_vocabulary, designated_source, gen_absurd_bias, gen_routing
from .encoders import Vocab
from .fusion import QuestionTypeSet
from .metrics import confusion, evaluate, gate_magnitudes, norm_report
from .models import EncodedData, Model, ModelSpec, TrainConfig, build_model, predict, train

ROUTING_EPOCHS = 20
TYPE_EPOCHS = 10


def routing_config(**kw) -> SyntheticConfig:
    return SyntheticConfig(distractor="misleading", noise=0.1, seed=0, **kw)


def _setup(train_set: Dataset, cfg: SyntheticConfig, architecture: str, seed: int) -> Model:
    vocab = Vocab.build(s.question for s in train_set.samples)
    spec = ModelSpec(
        architecture=architecture,
        source_shapes={"A": [cfg.dim_a], "B": [cfg.dim_b]},
        seed=seed,
    )
    return build_model(spec, vocab, QuestionTypeSet(tuple(cfg.names())), answer_vocabulary(cfg))


def _accuracy(model: Model, data: EncodedData) -> tuple[float, float | None]:
    p = predict(model, data)
    ans = 100.0 * float(np.mean(p.answer_ids == data.answer_ids))
    typ = None if p.type_ids is None else 100.0 * float(np.mean(p.type_ids == data.type_ids))
    return ans, typ


def train_tracked(
    architecture: str,
    train_set: Dataset,
    test_set: Dataset,
    cfg: SyntheticConfig,
    epochs: int,
    seed: int = 0,
    lam: float = 0.2,
) -> dict:
    """Train and record per-epoch loss and test accuracies."""
    model = _setup(train_set, cfg, architecture, seed)
    test = model.encode(test_set)
    answer_acc, type_acc = [], []

    def track(epoch, m, mean_loss):
        a, t = _accuracy(m, test)
        answer_acc.append(a)
        if t is not None:
            type_acc.append(t)

    start = time.perf_counter()
    result = train(model, train_set, TrainConfig(epochs=epochs, seed=seed, lam=lam), track)
    return {
        "architecture": architecture,
        "model": model,
        "epochs": epochs,
        "loss_curve": result.loss_curve,
        "test_answer_acc": answer_acc,
        "test_type_acc": type_acc,
        "seconds": time.perf_counter() - start,
    }


def first_epoch_reaching(curve: list[float], threshold: float) -> int | None:
    """1-based epoch count at which ``curve`` first reaches ``threshold``."""
    for i, v in enumerate(curve):
        if v >= threshold:
            return i + 1
    return None


def run_routing(epochs: int = ROUTING_EPOCHS, seed: int = 0, cfg: SyntheticConfig | None = None) -> dict:
    """CATL-QTA against CATL on the routing task, plus the gate diagnostics."""
    cfg = cfg or routing_config()
    train_set, test_set = gen_routing(cfg)
    qta = train_tracked("CATL-QTA", train_set, test_set, cfg, epochs, seed)
    cat = train_tracked("CATL", train_set, test_set, cfg, epochs, seed)
    model = qta["model"]
    mags = gate_magnitudes(model)
    norms = norm_report(model, test_set)
    designated_wins = {}
    norm_wins = {}
    for t, name in enumerate(cfg.names()):
        own = designated_source(t)
        other = "B" if own == "A" else "A"
        designated_wins[name] = mags[name][own] > mags[name][other]
        norm_wins[name] = norms.get(name, own).gated_norm > norms.get(name, other).gated_norm
    return {
        "qta": qta,
        "cat": cat,
        "qta_final_acc": qta["test_answer_acc"][-1],
        "cat_final_acc": cat["test_answer_acc"][-1],
        "qta_epochs_to_95": first_epoch_reaching(qta["test_answer_acc"], 95.0),
        "gate_magnitudes": mags,
        "designated_weight_wins": designated_wins,
        "designated_norm_wins": norm_wins,
        "norm_report": norms,
        "test_set": test_set,
    }


def run_multitask(epochs: int = ROUTING_EPOCHS, seed: int = 0, lam: float = 0.2, reference: dict | None = None) -> dict:
    """CATL-QTA-M predicting its own gate type, compared with CATL-QTA on the same budget."""
    cfg = routing_config()
    train_set, test_set = gen_routing(cfg)
    multi = train_tracked("CATL-QTA-M", train_set, test_set, cfg, epochs, seed, lam)
    if reference is None:
        reference = train_tracked("CATL-QTA", train_set, test_set, cfg, epochs, seed)
    return {
        "multi": multi,
        "reference": reference,
        "type_acc_by_epoch": multi["test_type_acc"],
        "best_type_acc_within": max(multi["test_type_acc"][:TYPE_EPOCHS]),
        "multi_final_acc": multi["test_answer_acc"][-1],
        "reference_final_acc": reference["test_answer_acc"][-1],
    }


def run_absurd(rho: float, epochs: int = TYPE_EPOCHS, seed: int = 0, lam: float = 0.2) -> dict:
    """Type-prediction confusion of CATL-QTA-M when absurd questions borrow the color template."""
    cfg = replace(routing_config(), rho=rho)
    train_set, test_set = gen_absurd_bias(cfg)
    run = train_tracked("CATL-QTA-M", train_set, test_set, cfg, epochs, seed, lam)
    model = run["model"]
    test = model.encode(test_set)
    p = predict(model, test)
    cm = confusion(p.type_ids, test.type_ids, len(model.types), model.types.names)
    answers = [model.answers[i] for i in p.answer_ids]
    report = evaluate(answers, [s.answer for s in test_set.samples], [s.question_type for s in test_set.samples], model.types.names)
    per_type = {name: float(cm.normalized()[i, i]) for i, name in enumerate(model.types.names)}
    return {
        "rho": rho,
        "run": run,
        "confusion": cm,
        "report": report,
        "type_acc_per_type": per_type,
        "absurd_to_color": cm.mass(cfg.absurd_type, cfg.color_type),
        "color_to_absurd": cm.mass(cfg.color_type, cfg.absurd_type),
    }


def summary(result: dict) -> dict:
    """Drop models and datasets so a result can be serialised."""
    out = {}
    for k, v in result.items():
        if isinstance(v, (Model, Dataset)):
            continue
        if isinstance(v, dict):
            out[k] = summary(v)
        elif hasattr(v, "to_json"):
            continue
        else:
            out[k] = v
    return out
