"""Numerical verification suites behind ``qta check``."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .data import Dataset, FeatureRef, Sample
from .encoders import EmbeddingTable, LstmParams, Vocab, lstm_forward
from .fusion import QtaWeights, QuestionTypeSet, TypeEmbedding, qt_concat, qta_gate
from .models import ARCHITECTURES, MlpHead, ModelSpec, Model, batch_loss, build_model
from .numerics import Rng, Tensor, dft_naive, fft1, grad_check, ifft1
from .sketch import count_sketch, make_sketch_params, mcb_fuse, outer_sketch_direct

SUITES = ("sketch", "grad", "fft", "mcb-oracle")


@dataclass
class CheckResult:
    name: str
    measured: float
    threshold: float
    passed: bool
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f" ({self.detail})" if self.detail else ""
        return f"{status} {self.name}: measured={self.measured:.3e} threshold={self.threshold:.1e}{extra}"


def check_fft(max_len: int = 64, tol: float = 1e-9, seed: int = 0) -> list[CheckResult]:
    g = Rng(seed).split("check-fft").generator()
    worst_rt = worst_dft = worst_lin = 0.0
    for n in range(1, max_len + 1):
        x = g.normal(size=n) + 1j * g.normal(size=n)
        y = g.normal(size=n) + 1j * g.normal(size=n)
        a, b = g.normal(size=2)
        scale = max(1.0, float(np.abs(x).max()))
        worst_rt = max(worst_rt, float(np.abs(ifft1(fft1(x)) - x).max()) / scale)
        ref = dft_naive(x)
        worst_dft = max(worst_dft, float(np.abs(fft1(x) - ref).max()) / max(1.0, float(np.abs(ref).max())))
        lhs = fft1(a * x + b * y)
        rhs = a * fft1(x) + b * fft1(y)
        worst_lin = max(worst_lin, float(np.abs(lhs - rhs).max()) / max(1.0, float(np.abs(rhs).max())))
    return [
        CheckResult("fft round trip, lengths 1..%d" % max_len, worst_rt, tol, worst_rt < tol),
        CheckResult("fft vs direct DFT", worst_dft, tol, worst_dft < tol),
        CheckResult("fft linearity", worst_lin, tol, worst_lin < tol),
    ]


def check_mcb_oracle(trials: int = 100, tol: float = 1e-9, seed: int = 0, max_dim: int = 16) -> list[CheckResult]:
    """FFT compact bilinear pooling against the direct outer-product sketch."""
    root = Rng(seed).split("check-mcb")
    worst = 0.0
    for k in range(trials):
        g = root.split("trial", k).generator()
        n1, n2, b = (int(v) for v in g.integers(1, max_dim + 1, size=3))
        h, w = (int(v) for v in g.integers(1, 4, size=2))
        pa = make_sketch_params(n1, b, seed=2 * k + 1)
        pv = make_sketch_params(n2, b, seed=2 * k + 2)
        image = g.normal(size=(n1, h, w))
        text = g.normal(size=n2)
        fused = mcb_fuse(image, text, pa, pv).data
        for i in range(h):
            for j in range(w):
                ref = outer_sketch_direct(image[:, i, j], text, pa, pv)
                worst = max(worst, float(np.abs(fused[:, i, j] - ref).max()))
    return [CheckResult(f"mcb_fuse vs outer_sketch_direct, {trials} instances", worst, tol, worst < tol)]


def check_sketch_unbiased(trials: int = 1000, dim: int = 64, b: int = 32, seed: int = 0) -> list[CheckResult]:
    """Mean over hash draws of <cs(a), cs(v)> should sit within 3 standard errors of <a, v>."""
    g = Rng(seed).split("check-sketch").generator()
    a, v = g.normal(size=dim), g.normal(size=dim)
    target = float(a @ v)
    draws = np.empty(trials)
    for k in range(trials):
        p = make_sketch_params(dim, b, seed=seed * 1_000_003 + k)
        draws[k] = float(count_sketch(a, p).data @ count_sketch(v, p).data)
    se = float(draws.std(ddof=1) / np.sqrt(trials))
    z = abs(float(draws.mean()) - target) / se
    lin_err = 0.0
    p = make_sketch_params(dim, b, seed=seed)
    x, y = g.normal(size=dim), g.normal(size=dim)
    lhs = count_sketch(2.5 * x - 0.5 * y, p).data
    rhs = 2.5 * count_sketch(x, p).data - 0.5 * count_sketch(y, p).data
    lin_err = float(np.abs(lhs - rhs).max())
    return [
        CheckResult(
            f"count sketch unbiasedness, {trials} draws",
            z,
            3.0,
            z <= 3.0,
            f"mean={draws.mean():.4f} target={target:.4f} se={se:.4f}; measured is in standard errors",
        ),
        CheckResult("count sketch linearity", lin_err, 1e-12, lin_err < 1e-12),
    ]


# ----------------------------------------------------------------------------
# gradient suite


def toy_dataset(n_types: int = 2, n_answers: int = 3, shapes=None, seed: int = 0) -> tuple[Dataset, list[str], list[str]]:
    """A single-sample dataset with tiny feature dims for gradient checks."""
    shapes = shapes or {"A": [3], "B": [2]}
    g = Rng(seed).split("toy").generator()
    arrays, refs = {}, {}
    for src, shape in shapes.items():
        arrays[f"{src}.qtaf"] = g.normal(size=(1, int(np.prod(shape))))
        refs[src] = FeatureRef(f"{src}.qtaf", 0)
    types = [f"t{k}" for k in range(n_types)]
    answers = [f"a{k}" for k in range(n_answers)]
    sample = Sample("toy-0", "what color is it", types[1 % n_types], answers[-1], refs)
    return Dataset([sample], arrays), types, answers


def toy_model(architecture: str, variant: str = "plain", seed: int = 0) -> tuple[Model, Dataset]:
    spatial = architecture == "MCB-QTA"
    shapes = {"A": [2, 2, 2], "B": [3, 2, 2]} if spatial else {"A": [3], "B": [2]}
    ds, types, answers = toy_dataset(shapes=shapes, seed=seed)
    spec = ModelSpec(
        architecture=architecture,
        text_variant=variant,
        source_shapes=shapes,
        embed_dim=4,
        lstm_hidden=4,
        mlp_hidden=5,
        w2v_dim=3,
        nmt_dim=3,
        sketch_width=8,
        type_embed_dim=2,
        seed=seed,
    )
    vocab = Vocab.build(s.question for s in ds.samples)
    model = build_model(spec, vocab, QuestionTypeSet(tuple(types)), answers)
    g = Rng(seed).split("toy-gate").generator()
    if model.qta is not None:
        # move away from the all-ones start so gate gradients are not trivially symmetric
        model.qta.raw.data = model.qta.raw.data + 0.3 * g.normal(size=model.qta.shape)
    return model, ds


def model_grad_error(model: Model, dataset: Dataset, eps: float = 1e-5, lam: float = 0.3) -> float:
    batch = model.encode(dataset).batch([0])
    params = list(model.parameters().values())
    return grad_check(lambda: batch_loss(model, batch, lam), params, eps)


def component_grad_errors(eps: float = 1e-5, seed: int = 0) -> dict[str, float]:
    g = Rng(seed).split("check-grad").generator()
    out = {}

    head = MlpHead.init(Rng(seed).split("mlp"), 6, 5, 3, np.float64)
    x = Tensor(g.normal(size=(2, 6)), requires_grad=True)
    target = np.array([0, 2])
    onehot = np.eye(3)[target]

    def mlp_loss():
        p = head(x)
        return nx.mul(nx.sum(nx.mul(nx.log(nx.sum(nx.mul(p, onehot), axis=-1)), 1.0)), -1.0)

    out["mlp head"] = grad_check(mlp_loss, [x, head.w1, head.b1, head.w2, head.b2], eps)

    table = EmbeddingTable.init(7, 4, Rng(seed).split("emb"))
    lstm = LstmParams.init(4, 8, Rng(seed).split("lstm"))
    ids = np.array([[2, 3, 4, 2, 6]])
    proj = g.normal(size=8)

    def lstm_loss():
        return nx.sum(nx.mul(lstm_forward(ids, table, lstm).vector, proj))

    lstm_params = [table.weight] + list(lstm.tensors().values())
    out["2-layer lstm (len 5, H 8)"] = grad_check(lstm_loss, lstm_params, eps)

    W = QtaWeights(Tensor(g.normal(size=(5, 3)), requires_grad=True))
    F = Tensor(g.normal(size=(2, 5)), requires_grad=True)
    wq = g.normal(size=(2, 5))
    out["qta_gate"] = grad_check(lambda: nx.sum(nx.mul(qta_gate(F, [2, 0], W), wq)), [F, W.raw], eps)

    emb = TypeEmbedding(Tensor(g.normal(size=(3, 4)), requires_grad=True))
    wc = g.normal(size=(2, 9))
    out["qt_concat"] = grad_check(lambda: nx.sum(nx.mul(qt_concat(F, [1, 2], emb), wc)), [F, emb.weight], eps)

    pa, pv = make_sketch_params(6, 8, 11), make_sketch_params(4, 8, 12)
    img = Tensor(g.normal(size=(6, 2, 2)), requires_grad=True)
    txt = Tensor(g.normal(size=4), requires_grad=True)
    wm = g.normal(size=(8, 2, 2))
    out["mcb_fuse"] = grad_check(lambda: nx.sum(nx.mul(mcb_fuse(img, txt, pa, pv), wm)), [img, txt], eps)

    model, ds = toy_model("MCB-QTA", seed=seed)
    out["full MCB-QTA toy model"] = model_grad_error(model, ds, eps)
    return out


def check_gradients(eps: float = 1e-5, tol: float = 1e-4, seed: int = 0, all_architectures: bool = False) -> list[CheckResult]:
    errors = component_grad_errors(eps, seed)
    if all_architectures:
        for arch in ARCHITECTURES:
            model, ds = toy_model(arch, seed=seed)
            errors[f"full {arch} toy model"] = model_grad_error(model, ds, eps)
    return [CheckResult(f"grad_check {name}", err, tol, err < tol) for name, err in errors.items()]


def run_suite(suite: str, trials: int | None = None, eps: float | None = None) -> list[CheckResult]:
    if suite == "fft":
        return check_fft()
    if suite == "mcb-oracle":
        return check_mcb_oracle(trials=trials or 100)
    if suite == "sketch":
        return check_sketch_unbiased(trials=trials or 1000)
    if suite == "grad":
        return check_gradients(eps=eps or 1e-5, all_architectures=True)
    raise ValueError(f"unknown suite {suite!r}; choose from {', '.join(SUITES)}")
