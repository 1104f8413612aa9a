"""Count sketch and compact bilinear pooling via FFT circular convolution."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sps

from .numerics import NonFiniteError, Rng, Tensor, as_tensor, fft1, gradients, ifft1, record, transpose
from . import numerics as nx

DEFAULT_SKETCH_WIDTH = 8000


@dataclass(frozen=True, eq=False)
class SketchParams:
    """Hash ``f: [n] -> [b]`` and signs ``s: [n] -> {-1, +1}``."""

    n: int
    b: int
    f: np.ndarray = field(repr=False)
    s: np.ndarray = field(repr=False)
    seed: int | None = None

    def __post_init__(self):
        f = np.asarray(self.f, dtype=np.int64)
        s = np.asarray(self.s, dtype=np.float64)
        if f.shape != (self.n,) or s.shape != (self.n,):
            raise ValueError("f and s must both have length n")
        if f.size and (f.min() < 0 or f.max() >= self.b):
            raise ValueError(f"hash values must lie in [0, {self.b})")
        if not np.all(np.abs(s) == 1):
            raise ValueError("signs must be +1 or -1")
        f.flags.writeable = False
        s.flags.writeable = False
        object.__setattr__(self, "f", f)
        object.__setattr__(self, "s", s)

    @cached_property
    def matrix(self) -> sps.csr_matrix:
        """Sparse n x b sketch matrix; ``a @ matrix`` is the count sketch of ``a``."""
        return sps.csr_matrix((self.s, (np.arange(self.n), self.f)), shape=(self.n, self.b))

    def negated(self) -> SketchParams:
        return SketchParams(self.n, self.b, self.f, -self.s, self.seed)


def make_sketch_params(n: int, b: int, seed: int) -> SketchParams:
    if n < 1 or b < 1:
        raise ValueError("n and b must be positive")
    g = Rng(seed).split("count-sketch", n).generator()
    f = g.integers(0, b, size=n)
    s = g.choice(np.array([-1.0, 1.0]), size=n)
    return SketchParams(n, b, f, s, seed)


def count_sketch(a, p: SketchParams) -> Tensor:
    """Sketch the last axis of ``a`` from length ``p.n`` down to ``p.b``."""
    a = as_tensor(a)
    if a.ndim == 0 or a.shape[-1] != p.n:
        raise ValueError(f"count_sketch: expected last dim {p.n}, got shape {a.shape}")
    lead = a.shape[:-1]
    flat = a.data.reshape(-1, p.n)
    out = np.asarray(p.matrix.T @ flat.T).T.astype(a.dtype, copy=False)
    mt = p.matrix

    def backward(g):
        gflat = g.reshape(-1, p.b)
        return (np.asarray(mt @ gflat.T).T.reshape(a.shape).astype(g.dtype, copy=False),)

    return record(np.ascontiguousarray(out.reshape(lead + (p.b,))), (a,), backward, "count_sketch")


def outer_sketch_direct(a, v, pa: SketchParams, pv: SketchParams) -> np.ndarray:
    """Count sketch of the outer product ``a (x) v`` evaluated term by term.

    Uses the combined hash ``(pa.f[i] + pv.f[j]) mod b`` and sign
    ``pa.s[i] * pv.s[j]``. Independent of any FFT; O(n1 * n2).
    """
    if pa.b != pv.b:
        raise ValueError(f"sketch width mismatch {pa.b} vs {pv.b}")
    a = np.asarray(a, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if a.shape != (pa.n,) or v.shape != (pv.n,):
        raise ValueError("input lengths do not match sketch params")
    b = pa.b
    out = np.zeros(b)
    for i in range(pa.n):
        for j in range(pv.n):
            out[(pa.f[i] + pv.f[j]) % b] += pa.s[i] * pv.s[j] * a[i] * v[j]
    return out


def _imag_tol(dtype) -> float:
    return 1e-9 if dtype == np.float64 else 1e-4


def _real_part(z: np.ndarray, dtype, what: str) -> np.ndarray:
    re = z.real
    scale = max(1.0, float(np.abs(re).max(initial=0.0)))
    residue = float(np.abs(z.imag).max(initial=0.0))
    if residue > _imag_tol(dtype) * scale:
        raise NonFiniteError(f"{what}: imaginary residue {residue:.3e} exceeds tolerance")
    return np.ascontiguousarray(re.astype(dtype, copy=False))


def circular_convolve(x, y) -> Tensor:
    """Circular convolution over the last axis via FFT, broadcasting leading axes.

    Gradients are circular correlations with the other operand.
    """
    x, y = as_tensor(x), as_tensor(y)
    if x.shape[-1] != y.shape[-1]:
        raise ValueError(f"circular_convolve: width mismatch {x.shape[-1]} vs {y.shape[-1]}")
    dtype = np.result_type(x.dtype, y.dtype)
    fx, fy = fft1(x.data), fft1(y.data)
    out = _real_part(ifft1(fx * fy), dtype, "circular_convolve")
    xs, ys = x.shape, y.shape

    def backward(g):
        fg = fft1(g)
        gx = _real_part(ifft1(fg * np.conj(fy)), dtype, "circular_convolve backward")
        gy = _real_part(ifft1(fg * np.conj(fx)), dtype, "circular_convolve backward")
        return nx._unbroadcast(gx, xs), nx._unbroadcast(gy, ys)

    return record(out, (x, y), backward, "circular_convolve")


def mcb_fuse(image, text, p_img: SketchParams, p_txt: SketchParams) -> Tensor:
    """Compact bilinear pooling of every spatial location with a text vector.

    ``image`` is ``C x H x W`` (or batched ``B x C x H x W``), ``text`` is
    ``L`` (or ``B x L``). Output is ``b x H x W`` (``B x b x H x W``).
    """
    if p_img.b != p_txt.b:
        raise ValueError(f"sketch width mismatch {p_img.b} vs {p_txt.b}")
    image, text = as_tensor(image), as_tensor(text)
    batched = image.ndim == 4
    if not batched:
        if image.ndim != 3 or text.ndim != 1:
            raise ValueError("mcb_fuse expects image C x H x W and text L")
        image = nx.reshape(image, (1,) + image.shape)
        text = nx.reshape(text, (1,) + text.shape)
    if text.ndim != 2 or text.shape[0] != image.shape[0]:
        raise ValueError("mcb_fuse: batch size mismatch")
    img_last = transpose(image, (0, 2, 3, 1))  # B x H x W x C
    si = count_sketch(img_last, p_img)
    st = count_sketch(text, p_txt)
    bsz = st.shape[0]
    fused = circular_convolve(si, nx.reshape(st, (bsz, 1, 1, p_txt.b)))
    out = transpose(fused, (0, 3, 1, 2))
    if not batched:
        out = nx.reshape(out, out.shape[1:])
    return out


def mcb_backward(image, text, p_img: SketchParams, p_txt: SketchParams, upstream) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of ``<upstream, mcb_fuse(image, text)>`` w.r.t. image and text."""
    image = Tensor(np.asarray(image, dtype=np.float64), requires_grad=True)
    text = Tensor(np.asarray(text, dtype=np.float64), requires_grad=True)
    out = mcb_fuse(image, text, p_img, p_txt)
    loss = nx.sum(nx.mul(out, np.asarray(upstream, dtype=np.float64)))
    gi, gt = gradients(loss, [image, text])
    return gi, gt


def signed_sqrt_l2(x, eps: float = 1e-12) -> Tensor:
    """Signed square root followed by L2 normalisation over the last axis."""
    x = as_tensor(x)
    r = np.sqrt(np.abs(x.data) + eps)
    y = np.sign(x.data) * (r - np.sqrt(eps))
    norm = np.sqrt((y * y).sum(axis=-1, keepdims=True) + eps)
    z = y / norm

    def backward(g):
        gy = (g - z * (g * z).sum(axis=-1, keepdims=True)) / norm
        return (gy * 0.5 / r,)

    return record(z, (x,), backward, "signed_sqrt_l2")
