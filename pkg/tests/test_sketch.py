import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qta import numerics as nx
from qta.numerics import Tensor, grad_check
from qta.sketch import (
    SketchParams,
    count_sketch,
    make_sketch_params,
    mcb_backward,
    mcb_fuse,
    outer_sketch_direct,
    signed_sqrt_l2,
)


def _ones(n, b, f=None):
    f = list(range(n)) if f is None else f
    return SketchParams(n, b, np.array(f), np.ones(n))


def test_make_params_trivial_width():
    assert make_sketch_params(3, 1, 123).f.tolist() == [0, 0, 0]


def test_make_params_deterministic():
    p, q = make_sketch_params(64, 32, 7), make_sketch_params(64, 32, 7)
    assert np.array_equal(p.f, q.f) and np.array_equal(p.s, q.s)
    r = make_sketch_params(64, 32, 8)
    assert not np.array_equal(p.f, r.f)


def test_make_params_ranges():
    p = make_sketch_params(500, 17, 3)
    assert p.f.min() >= 0 and p.f.max() < 17
    assert set(np.unique(p.s)) == {-1.0, 1.0}


def test_bucket_counts_within_binomial_4_sigma():
    n, b = 1000, 100
    counts = np.bincount(make_sketch_params(n, b, 1).f, minlength=b)
    sigma = np.sqrt(n * (1 / b) * (1 - 1 / b))
    assert np.abs(counts - n / b).max() <= 4 * sigma


def test_make_params_rejects_nonpositive():
    with pytest.raises(ValueError):
        make_sketch_params(0, 4, 0)
    with pytest.raises(ValueError):
        make_sketch_params(4, 0, 0)


def test_params_validate_fields():
    with pytest.raises(ValueError):
        SketchParams(2, 2, np.array([0, 2]), np.ones(2))
    with pytest.raises(ValueError):
        SketchParams(2, 2, np.array([0, 1]), np.array([1.0, 0.5]))


def test_count_sketch_hand_example():
    p = SketchParams(3, 2, np.array([0, 1, 0]), np.array([1.0, -1.0, 1.0]))
    assert count_sketch([1.0, 2.0, 3.0], p).data.tolist() == [4.0, -2.0]


def test_count_sketch_zero_and_identity():
    p = make_sketch_params(5, 3, 0)
    assert count_sketch(np.zeros(5), p).data.tolist() == [0.0, 0.0, 0.0]
    a = np.array([1.5, -2.0, 0.25, 7.0])
    assert np.array_equal(count_sketch(a, _ones(4, 4)).data, a)


def test_count_sketch_dimension_mismatch():
    with pytest.raises(ValueError):
        count_sketch(np.ones(4), make_sketch_params(5, 3, 0))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 40), st.integers(1, 40), st.integers(0, 10_000), st.floats(-5, 5), st.floats(-5, 5))
def test_count_sketch_linear(n, b, seed, alpha, beta):
    p = make_sketch_params(n, b, seed)
    g = np.random.default_rng(seed)
    x, y = g.normal(size=n), g.normal(size=n)
    lhs = count_sketch(alpha * x + beta * y, p).data
    rhs = alpha * count_sketch(x, p).data + beta * count_sketch(y, p).data
    assert np.allclose(lhs, rhs, rtol=1e-12, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 40), st.integers(1, 40), st.integers(0, 10_000))
def test_sign_flip_negates(n, b, seed):
    p = make_sketch_params(n, b, seed)
    a = np.random.default_rng(seed).normal(size=n)
    assert np.array_equal(count_sketch(a, p.negated()).data, -count_sketch(a, p).data)


def test_count_sketch_matches_loop():
    p = make_sketch_params(30, 7, 4)
    a = np.random.default_rng(0).normal(size=30)
    ref = np.zeros(7)
    for i in range(30):
        ref[p.f[i]] += p.s[i] * a[i]
    assert np.allclose(count_sketch(a, p).data, ref, atol=1e-13)


def test_unbiased_inner_product_small():
    g = np.random.default_rng(11)
    a, v = g.normal(size=64), g.normal(size=64)
    draws = []
    for k in range(400):
        p = make_sketch_params(64, 32, 10_000 + k)
        draws.append(count_sketch(a, p).data @ count_sketch(v, p).data)
    draws = np.array(draws)
    se = draws.std(ddof=1) / np.sqrt(len(draws))
    assert abs(draws.mean() - a @ v) <= 3 * se


def test_outer_direct_examples():
    assert outer_sketch_direct([2.0], [3.0], _ones(1, 1), _ones(1, 1)).tolist() == [6.0]
    pa, pv = _ones(2, 2), _ones(1, 2, [0])
    assert outer_sketch_direct([1.0, 2.0], [3.0], pa, pv).tolist() == [3.0, 6.0]
    assert outer_sketch_direct([0.0, 0.0], [3.0], pa, pv).tolist() == [0.0, 0.0]


def test_outer_direct_width_mismatch():
    with pytest.raises(ValueError):
        outer_sketch_direct([1.0], [1.0], _ones(1, 2, [0]), _ones(1, 3, [0]))


def test_mcb_scalar_case():
    out = mcb_fuse(np.array([[[2.0]]]), [3.0], _ones(1, 1), _ones(1, 1))
    assert out.shape == (1, 1, 1)
    assert out.data[0, 0, 0] == pytest.approx(6.0, abs=1e-12)


def test_mcb_matches_direct_every_location():
    g = np.random.default_rng(5)
    pa, pv = make_sketch_params(8, 16, 1), make_sketch_params(6, 16, 2)
    image, text = g.normal(size=(8, 2, 2)), g.normal(size=6)
    out = mcb_fuse(image, text, pa, pv).data
    for i in range(2):
        for j in range(2):
            ref = outer_sketch_direct(image[:, i, j], text, pa, pv)
            assert np.abs(out[:, i, j] - ref).max() < 1e-9


@settings(max_examples=40, deadline=None)
@given(
    st.integers(1, 16), st.integers(1, 16), st.integers(1, 16),
    st.integers(1, 3), st.integers(1, 3), st.integers(0, 2**31),
)
def test_mcb_fft_path_equals_direct(n1, n2, b, h, w, seed):
    g = np.random.default_rng(seed)
    pa, pv = make_sketch_params(n1, b, seed), make_sketch_params(n2, b, seed + 1)
    image, text = g.normal(size=(n1, h, w)), g.normal(size=n2)
    out = mcb_fuse(image, text, pa, pv).data
    for i in range(h):
        for j in range(w):
            assert np.abs(out[:, i, j] - outer_sketch_direct(image[:, i, j], text, pa, pv)).max() < 1e-9


def test_mcb_batched_matches_single():
    g = np.random.default_rng(2)
    pa, pv = make_sketch_params(5, 8, 1), make_sketch_params(3, 8, 2)
    images, texts = g.normal(size=(3, 5, 2, 1)), g.normal(size=(3, 3))
    batched = mcb_fuse(images, texts, pa, pv).data
    for k in range(3):
        assert np.allclose(batched[k], mcb_fuse(images[k], texts[k], pa, pv).data, atol=1e-12)


def test_mcb_zero_text_is_zero():
    pa, pv = make_sketch_params(4, 8, 1), make_sketch_params(3, 8, 2)
    out = mcb_fuse(np.ones((4, 2, 2)), np.zeros(3), pa, pv).data
    assert np.abs(out).max() < 1e-12


def test_mcb_width_mismatch():
    with pytest.raises(ValueError):
        mcb_fuse(np.ones((4, 1, 1)), np.ones(3), make_sketch_params(4, 8, 1), make_sketch_params(3, 9, 2))


def test_mcb_float32_path():
    g = np.random.default_rng(0)
    pa, pv = make_sketch_params(6, 8, 1), make_sketch_params(4, 8, 2)
    image = Tensor(g.normal(size=(6, 2, 2)), dtype=np.float32)
    text = Tensor(g.normal(size=4), dtype=np.float32)
    out = mcb_fuse(image, text, pa, pv)
    ref = outer_sketch_direct(image.data[:, 0, 0], text.data, pa, pv)
    assert np.abs(out.data[:, 0, 0] - ref).max() < 1e-4


def test_mcb_backward_scalar():
    gi, gt = mcb_backward([[[2.0]]], [3.0], _ones(1, 1), _ones(1, 1), [[[1.0]]])
    assert gt[0] == pytest.approx(2.0, abs=1e-12)
    assert gi[0, 0, 0] == pytest.approx(3.0, abs=1e-12)


def test_mcb_backward_zero_upstream():
    pa, pv = make_sketch_params(4, 8, 1), make_sketch_params(3, 8, 2)
    g = np.random.default_rng(1)
    gi, gt = mcb_backward(g.normal(size=(4, 2, 2)), g.normal(size=3), pa, pv, np.zeros((8, 2, 2)))
    assert not gi.any() and not gt.any()


def test_mcb_text_gradient_matches_finite_differences():
    pa, pv = make_sketch_params(5, 8, 3), make_sketch_params(4, 8, 4)
    image = np.ones((5, 2, 2))
    text = Tensor(np.random.default_rng(0).normal(size=4), requires_grad=True)
    assert grad_check(lambda: nx.sum(mcb_fuse(image, text, pa, pv)), text, 1e-5) < 1e-4


def test_mcb_image_and_text_gradients():
    pa, pv = make_sketch_params(6, 8, 11), make_sketch_params(4, 8, 12)
    g = np.random.default_rng(9)
    img = Tensor(g.normal(size=(6, 2, 2)), requires_grad=True)
    txt = Tensor(g.normal(size=4), requires_grad=True)
    wm = g.normal(size=(8, 2, 2))
    assert grad_check(lambda: nx.sum(nx.mul(mcb_fuse(img, txt, pa, pv), wm)), [img, txt], 1e-5) < 1e-4


def test_signed_sqrt_l2_unit_norm_and_gradient():
    x = Tensor(np.array([[4.0, -9.0, 0.5], [1.0, 2.0, -3.0]]), requires_grad=True)
    y = signed_sqrt_l2(x).data
    assert np.allclose(np.linalg.norm(y, axis=-1), 1.0, atol=1e-9)
    assert np.array_equal(np.sign(y), np.sign(x.data))
    w = np.random.default_rng(0).normal(size=(2, 3))
    assert grad_check(lambda: nx.sum(nx.mul(signed_sqrt_l2(x), w)), x, 1e-6) < 1e-4
