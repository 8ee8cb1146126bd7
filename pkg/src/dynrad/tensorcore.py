"""Minimal differentiable numeric substrate.

Dense tensors with a reverse-mode tape over numpy arrays, the handful of
operations the radiance pipeline needs (affine layers, softmax, bilinear
sampling, sinusoidal encoding, real 2-D Fourier transforms), a direct-sum
DFT oracle for checking the fast transforms, and a finite-difference
gradient-check harness.
"""

from __future__ import annotations

import struct
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, EvaluationError

DEFAULT_DTYPE = np.float64
_GRAD_ENABLED = True

CHECKPOINT_MAGIC = b"DYNRADCK"
CHECKPOINT_VERSION = 1


def set_default_dtype(dtype):
    """Set the dtype used for newly created tensors ('float32'/'float64')."""
    global DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError("default dtype must be float32 or float64")
    DEFAULT_DTYPE = dtype


@contextmanager
def no_grad():
    """Disable tape recording inside the block (forward-only evaluation)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """Dense n-dimensional real array with an optional gradient slot.

    Results of operations carry closures that scatter upstream gradients to
    their parents; backward() runs them in reverse topological order.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_grad_owned")

    def __init__(self, data, requires_grad=False, dtype=None, _parents=(), _backward=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype if dtype is not None else
                               (data.dtype if isinstance(data, np.ndarray) and
                                data.dtype in (np.float32, np.float64) else DEFAULT_DTYPE))
        self.grad = None
        self._grad_owned = False
        self.requires_grad = requires_grad and _GRAD_ENABLED
        self._parents = _parents if self.requires_grad else ()
        self._backward = _backward if self.requires_grad else None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None
        self._grad_owned = False

    def _accumulate(self, g):
        # First contribution may alias the producer's buffer; by reverse-topo
        # order it is final by then, so copy only when a second one arrives.
        if self.grad is None:
            self.grad = np.broadcast_to(g, self.data.shape) if g.shape != self.data.shape else g
            self._grad_owned = False
        elif not self._grad_owned:
            self.grad = self.grad + g
            self._grad_owned = True
        else:
            self.grad += g

    def backward(self, grad=None):
        """Reverse-mode sweep from this tensor (defaults to seed gradient 1)."""
        if not self.requires_grad:
            return
        topo, visited, stack = [], set(), [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
        if grad is None:
            grad = np.ones_like(self.data)
        self._accumulate(np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return take(self, idx)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def reshape(self, *shape):
        return reshape(self, *shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)


def astensor(x, dtype=None):
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _unbroadcast(g, shape):
    """Sum gradient g down to `shape` (reverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _node(data, parents, backward):
    req = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=req, _parents=tuple(p for p in parents if p.requires_grad),
                  _backward=backward if req else None)


def add(a, b):
    a, b = astensor(a), astensor(b)
    out = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))
    return _node(out, (a, b), backward)


def sub(a, b):
    a, b = astensor(a), astensor(b)
    out = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))
    return _node(out, (a, b), backward)


def mul(a, b):
    a, b = astensor(a), astensor(b)
    out = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))
    return _node(out, (a, b), backward)


def div(a, b):
    a, b = astensor(a), astensor(b)
    out = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))
    return _node(out, (a, b), backward)


def power(a, p):
    a = astensor(a)
    out = a.data ** p

    def backward(g):
        a._accumulate(_unbroadcast(g * p * a.data ** (p - 1), a.shape))
    return _node(out, (a,), backward)


def matmul(a, b):
    a, b = astensor(a), astensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands must have ndim >= 2")
    out = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(np.matmul(g, b.data.swapaxes(-1, -2)), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.matmul(a.data.swapaxes(-1, -2), g), b.shape))
    return _node(out, (a, b), backward)


def tsum(a, axis=None, keepdims=False):
    a = astensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape).copy())
    return _node(out, (a,), backward)


def tmean(a, axis=None, keepdims=False):
    a = astensor(a)
    n = a.size if axis is None else a.shape[axis]
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a, *shape):
    a = astensor(a)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    out = a.data.reshape(shape)

    def backward(g):
        a._accumulate(g.reshape(a.shape))
    return _node(out, (a,), backward)


def moveaxis(a, src, dst):
    a = astensor(a)
    out = np.moveaxis(a.data, src, dst)

    def backward(g):
        a._accumulate(np.moveaxis(g, dst, src))
    return _node(out, (a,), backward)


def _is_basic_index(idx):
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (int, np.integer, slice, type(Ellipsis), type(None))) for p in parts)


def take(a, idx):
    """Basic/advanced indexing; gradients scatter-add back into the source."""
    a = astensor(a)
    out = a.data[idx]
    basic = _is_basic_index(idx)

    def backward(g):
        ga = np.zeros_like(a.data)
        if basic:
            ga[idx] += g
        else:
            np.add.at(ga, idx, g)
        a._accumulate(ga)
    return _node(out, (a,), backward)


def pad2d(a, pad):
    """Zero-pad the two leading spatial axes of [H, W, C] by `pad` texels."""
    a = astensor(a)
    out = np.pad(a.data, ((pad, pad), (pad, pad)) + ((0, 0),) * (a.ndim - 2))

    def backward(g):
        a._accumulate(g[pad:-pad or None, pad:-pad or None])
    return _node(out, (a,), backward)


def concat(parts, axis=-1):
    parts = [astensor(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                p._accumulate(g[tuple(sl)])
    return _node(out, tuple(parts), backward)


def stack(parts, axis=0):
    parts = [astensor(p) for p in parts]
    out = np.stack([p.data for p in parts], axis=axis)

    def backward(g):
        for i, p in enumerate(parts):
            if p.requires_grad:
                p._accumulate(np.take(g, i, axis=axis))
    return _node(out, tuple(parts), backward)


def where(cond, a, b):
    """Select per element by a boolean array; gradients route by the mask."""
    a, b = astensor(a), astensor(b)
    cond = np.asarray(cond, dtype=bool)
    out = np.where(cond, a.data, b.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(np.where(cond, g, 0.0), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.where(cond, 0.0, g), b.shape))
    return _node(out, (a, b), backward)


def exp(a):
    a = astensor(a)
    out = np.exp(a.data)

    def backward(g):
        a._accumulate(g * out)
    return _node(out, (a,), backward)


def log(a):
    a = astensor(a)
    out = np.log(a.data)

    def backward(g):
        a._accumulate(g / a.data)
    return _node(out, (a,), backward)


def tanh(a):
    a = astensor(a)
    out = np.tanh(a.data)

    def backward(g):
        a._accumulate(g * (1.0 - out * out))
    return _node(out, (a,), backward)


def sigmoid(a):
    a = astensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))

    def backward(g):
        a._accumulate(g * out * (1.0 - out))
    return _node(out, (a,), backward)


def relu(a):
    a = astensor(a)
    out = np.maximum(a.data, 0.0)

    def backward(g):
        a._accumulate(g * (a.data > 0.0))
    return _node(out, (a,), backward)


def softplus(a):
    a = astensor(a)
    out = np.logaddexp(0.0, a.data)

    def backward(g):
        a._accumulate(g * (0.5 * (1.0 + np.tanh(0.5 * a.data))))
    return _node(out, (a,), backward)


def sin(a):
    a = astensor(a)
    out = np.sin(a.data)

    def backward(g):
        a._accumulate(g * np.cos(a.data))
    return _node(out, (a,), backward)


def cos(a):
    a = astensor(a)
    out = np.cos(a.data)

    def backward(g):
        a._accumulate(-g * np.sin(a.data))
    return _node(out, (a,), backward)


def absolute(a):
    a = astensor(a)
    out = np.abs(a.data)

    def backward(g):
        a._accumulate(g * np.sign(a.data))
    return _node(out, (a,), backward)


def maximum_const(a, c):
    """max(a, c) against a constant; subgradient 1 where a > c."""
    a = astensor(a)
    out = np.maximum(a.data, c)

    def backward(g):
        a._accumulate(g * (a.data > c))
    return _node(out, (a,), backward)


def cumprod(a, axis):
    """Cumulative product; callers keep entries away from zero (eps shift)."""
    a = astensor(a)
    out = np.cumprod(a.data, axis=axis)

    def backward(g):
        gy = np.flip(np.cumsum(np.flip(g * out, axis=axis), axis=axis), axis=axis)
        a._accumulate(gy / a.data)
    return _node(out, (a,), backward)


def linear(x, weight, bias=None):
    """y = x @ weight + bias over the trailing axis of x (fused node)."""
    x, weight = astensor(x), astensor(weight)
    if x.shape[-1] != weight.shape[0]:
        raise DimensionError(
            f"linear: trailing extent {x.shape[-1]} != weight rows {weight.shape[0]}")
    bias = astensor(bias) if bias is not None else None
    lead = x.shape[:-1]
    n_out = weight.shape[1]
    x2 = x.data.reshape(-1, x.shape[-1])
    y = x2 @ weight.data
    if bias is not None:
        y += bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(-1, n_out)
        if x.requires_grad:
            x._accumulate((g2 @ weight.data.T).reshape(x.shape))
        if weight.requires_grad:
            weight._accumulate(x2.T @ g2)
        if bias is not None and bias.requires_grad:
            bias._accumulate(g2.sum(axis=0))
    return _node(y.reshape(lead + (n_out,)), parents, backward)


def softmax(x, axis=-1):
    """Numerically stabilized softmax along `axis` (max-subtraction)."""
    x = astensor(x)
    if x.shape[axis] == 0:
        raise DimensionError("softmax over an empty axis")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        x._accumulate(out * (g - dot))
    return _node(out, (x,), backward)


def bilinear_sample(fmap, uv):
    """Bilinear interpolation of fmap [H,W,d] at pixel coords uv [N,2].

    Coordinates outside [0,W-1]x[0,H-1] get the zero vector and mask 0.
    Gradient flows to the map values only, never to the coordinates.
    Returns (features Tensor [N,d], mask ndarray [N] of 0/1).
    """
    fmap = astensor(fmap)
    uv = np.asarray(uv, dtype=np.float64)
    H, W = fmap.shape[0], fmap.shape[1]
    u, v = uv[..., 0], uv[..., 1]
    inb = (u >= 0.0) & (u <= W - 1.0) & (v >= 0.0) & (v <= H - 1.0)
    uc = np.where(inb, u, 0.0)
    vc = np.where(inb, v, 0.0)
    x0 = np.floor(uc).astype(np.intp)
    y0 = np.floor(vc).astype(np.intp)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    fx = uc - x0
    fy = vc - y0
    m = inb.astype(fmap.dtype)
    w00 = ((1 - fx) * (1 - fy) * m)[..., None].astype(fmap.dtype)
    w10 = (fx * (1 - fy) * m)[..., None].astype(fmap.dtype)
    w01 = ((1 - fx) * fy * m)[..., None].astype(fmap.dtype)
    w11 = (fx * fy * m)[..., None].astype(fmap.dtype)
    d = fmap.data
    out = w00 * d[y0, x0] + w10 * d[y0, x1] + w01 * d[y1, x0] + w11 * d[y1, x1]

    def backward(g):
        # bincount scatter: much faster than np.add.at for repeated corners
        idx = np.concatenate([y0 * W + x0, y0 * W + x1, y1 * W + x0, y1 * W + x1])
        gw = np.concatenate([g * w00, g * w10, g * w01, g * w11], axis=0)
        gm = np.empty((H * W, d.shape[-1]), dtype=d.dtype)
        for c in range(d.shape[-1]):
            gm[:, c] = np.bincount(idx, weights=gw[:, c], minlength=H * W)
        fmap._accumulate(gm.reshape(fmap.shape))
    return _node(out, (fmap,), backward), inb.astype(np.float64)


def positional_encode(p, n_freq):
    """Sinusoidal encoding: sin(2^k pi p), cos(2^k pi p), k = 0..n_freq-1.

    Output layout is component-major: [..., n] -> [..., n * 2 * n_freq] with
    (sin_k, cos_k) pairs per component in frequency order.
    """
    p = astensor(p)
    if n_freq < 1:
        raise DimensionError("positional_encode requires n_freq >= 1")
    freqs = ((2.0 ** np.arange(n_freq)) * np.pi).astype(p.dtype)  # [n_freq]
    ang = p.data[..., None] * freqs                               # [..., n, n_freq]
    s, c = np.sin(ang), np.cos(ang)
    out = np.empty(p.shape + (n_freq, 2), dtype=p.dtype)
    out[..., 0] = s
    out[..., 1] = c
    out = out.reshape(p.shape[:-1] + (p.shape[-1] * 2 * n_freq,))

    def backward(g):
        gr = g.reshape(p.shape + (n_freq, 2))
        gp = (gr[..., 0] * c - gr[..., 1] * s) @ freqs
        p._accumulate(gp)
    return _node(out, (p,), backward)


# -- Fourier transforms ----------------------------------------------------

@dataclass
class ComplexSpectrum:
    """Real/imaginary pair of tensors holding a (half-)spectrum."""
    re: Tensor
    im: Tensor

    @property
    def shape(self):
        return self.re.shape

    def __post_init__(self):
        if self.re.shape != self.im.shape:
            raise DimensionError("spectrum re/im shapes differ")


def dft_1d(f):
    """Direct O(T^2) DFT sum; the reference oracle for the fast transforms."""
    f = astensor(f).data.astype(np.float64)
    T = f.shape[0]
    k = np.arange(T)
    ang = -2.0 * np.pi * np.outer(k, k) / T
    re = np.cos(ang) @ f
    im = np.sin(ang) @ f
    return ComplexSpectrum(Tensor(re), Tensor(im))


def idft_1d(S):
    """Direct O(T^2) inverse DFT sum (real part of the reconstruction)."""
    re, im = S.re.data.astype(np.float64), S.im.data.astype(np.float64)
    T = re.shape[0]
    k = np.arange(T)
    ang = 2.0 * np.pi * np.outer(k, k) / T
    out = (np.cos(ang) @ re - np.sin(ang) @ im) / T
    return Tensor(out)


def _cplx(dtype):
    return np.complex64 if np.dtype(dtype) == np.float32 else np.complex128


def _pad_half_to_full(G, B, axis):
    full_shape = list(G.shape)
    full_shape[axis] = B
    out = np.zeros(full_shape, dtype=G.dtype)
    sl = [slice(None)] * G.ndim
    sl[axis] = slice(0, G.shape[axis])
    out[tuple(sl)] = G
    return out


def rfft2(x, axes=(0, 1)):
    """Half-spectrum real 2-D DFT over `axes`; differentiable w.r.t. x."""
    x = astensor(x)
    a0, a1 = axes
    A, B = x.shape[a0], x.shape[a1]
    F = np.fft.fft2(x.data, axes=axes)
    half = B // 2 + 1
    S = np.take(F, np.arange(half), axis=a1)

    def backward_re(g):
        pad = _pad_half_to_full(g.astype(_cplx(x.dtype)), B, a1)
        x._accumulate((A * B * np.fft.ifft2(pad, axes=axes).real).astype(x.dtype))

    def backward_im(g):
        pad = _pad_half_to_full(g.astype(_cplx(x.dtype)), B, a1)
        x._accumulate((-A * B * np.fft.ifft2(pad, axes=axes).imag).astype(x.dtype))

    re = _node(np.ascontiguousarray(S.real).astype(x.dtype), (x,), backward_re)
    im = _node(np.ascontiguousarray(S.imag).astype(x.dtype), (x,), backward_im)
    return ComplexSpectrum(re, im)


def _hermitian_extend(S, A, B, a0, a1):
    """Build the full spectrum from a half-spectrum along axis a1."""
    half = B // 2 + 1
    if S.shape[a1] != half:
        raise DimensionError(f"half-spectrum extent {S.shape[a1]} != floor(B/2)+1 = {half}")
    q_upper = np.arange(half, B)           # columns to fill
    q_src = B - q_upper                    # 1 .. B - half
    mirror = np.take(np.conj(S), q_src, axis=a1)
    mirror = np.take(mirror, (-np.arange(A)) % A, axis=a0)
    return np.concatenate([S, mirror], axis=a1)


def irfft2(S, out_shape, axes=(0, 1)):
    """Inverse of rfft2 for output extents (A, B); differentiable w.r.t. S.

    Defined as Re(ifft2(hermitian_extend(S))), which is exactly linear in
    (re, im) and the exact inverse of rfft2 on real inputs.
    """
    A, B = out_shape
    a0, a1 = axes
    re_t, im_t = S.re, S.im
    cplx = _cplx(re_t.dtype)
    full = _hermitian_extend(re_t.data.astype(cplx) + im_t.data.astype(cplx) * 1j,
                             A, B, a0, a1)
    if full.shape[a0] != A:
        raise DimensionError(f"spectrum extent {full.shape[a0]} != out_shape[0] = {A}")
    y = np.fft.ifft2(full, axes=axes).real.astype(re_t.dtype)

    half = B // 2 + 1
    # interior columns 1..ceil(B/2)-1 appear twice in the full spectrum
    q = np.arange(half)
    mirrored = (q > 0) & (B - q >= half)

    def _adjoint(g):
        G = np.fft.fft2(g.astype(cplx), axes=axes) / (A * B)
        Gh = np.take(G, q, axis=a1)
        Gm = np.take(G, (B - q) % B, axis=a1)
        Gm = np.take(Gm, (-np.arange(A)) % A, axis=a0)
        sel = np.zeros(half, dtype=bool)
        sel[mirrored] = True
        shape = [1] * G.ndim
        shape[a1] = half
        selb = sel.reshape(shape)
        return Gh, np.where(selb, Gm, 0.0)

    def backward_re(g):
        Gh, Gm = _adjoint(g)
        re_t._accumulate((Gh.real + Gm.real).astype(re_t.dtype))

    def backward_im(g):
        Gh, Gm = _adjoint(g)
        im_t._accumulate((Gh.imag - Gm.imag).astype(im_t.dtype))

    req = _GRAD_ENABLED and (re_t.requires_grad or im_t.requires_grad)
    out = Tensor(y, requires_grad=req,
                 _parents=tuple(t for t in (re_t, im_t) if t.requires_grad),
                 _backward=None)
    if req:
        def backward(g):
            if re_t.requires_grad:
                backward_re(g)
            if im_t.requires_grad:
                backward_im(g)
        out._backward = backward
    return out


# -- parameters and checkpoints ---------------------------------------------

class ParameterStore:
    """Named map from parameter path to Tensor, plus the run's rng seed."""

    def __init__(self, rng_seed=0):
        self.params = {}
        self.rng_seed = int(rng_seed)

    def add(self, path, data, dtype=None):
        if path in self.params:
            raise KeyError(f"duplicate parameter path {path!r}")
        t = Tensor(np.asarray(data), requires_grad=True, dtype=dtype or DEFAULT_DTYPE)
        self.params[path] = t
        return t

    def __getitem__(self, path):
        return self.params[path]

    def __contains__(self, path):
        return path in self.params

    def items(self):
        return self.params.items()

    def paths(self):
        return list(self.params.keys())

    def tensors(self, prefix=""):
        return [t for p, t in self.params.items() if p.startswith(prefix)]

    def zero_grad(self):
        for t in self.params.values():
            t.zero_grad()

    def all_finite(self):
        return all(np.isfinite(t.data).all() for t in self.params.values())

    def copy_values(self):
        return {p: t.data.copy() for p, t in self.params.items()}

    def save(self, path):
        """Write the checkpoint: magic, version byte, records of
        (path, shape, float64 little-endian values)."""
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<B", CHECKPOINT_VERSION))
            fh.write(struct.pack("<IQ", len(self.params), self.rng_seed))
            for name, t in sorted(self.params.items()):
                enc = name.encode("utf-8")
                fh.write(struct.pack("<H", len(enc)))
                fh.write(enc)
                fh.write(struct.pack("<B", t.ndim))
                fh.write(struct.pack(f"<{t.ndim}I", *t.shape))
                fh.write(t.data.astype("<f8").tobytes())

    @classmethod
    def load(cls, path, dtype=None):
        with open(path, "rb") as fh:
            if fh.read(8) != CHECKPOINT_MAGIC:
                raise ValueError(f"{path}: not a dynrad checkpoint")
            (version,) = struct.unpack("<B", fh.read(1))
            if version != CHECKPOINT_VERSION:
                raise ValueError(f"{path}: unsupported checkpoint version {version}")
            n, seed = struct.unpack("<IQ", fh.read(12))
            store = cls(rng_seed=seed)
            for _ in range(n):
                (plen,) = struct.unpack("<H", fh.read(2))
                name = fh.read(plen).decode("utf-8")
                (ndim,) = struct.unpack("<B", fh.read(1))
                shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
                count = int(np.prod(shape)) if ndim else 1
                data = np.frombuffer(fh.read(8 * count), dtype="<f8").reshape(shape)
                store.add(name, data, dtype=dtype)
        return store


def grad_check(f, params, eps=1e-4):
    """Central finite differences vs the tape's analytic gradient.

    `f` is a zero-argument callable returning a scalar Tensor built from the
    tensors in `params` (a ParameterStore or iterable of Tensors). Returns
    the max relative error over coordinates with |analytic|+|numeric| > 1e-8.
    """
    tensors = list(params.params.values()) if isinstance(params, ParameterStore) else list(params)
    for t in tensors:
        t.zero_grad()
    out = f()
    if not np.isfinite(out.data).all():
        raise EvaluationError("grad_check: non-finite function value")
    out.backward()
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in tensors]

    worst = 0.0
    for t, an in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            with no_grad():
                f1 = float(f().data)
            flat[i] = orig - eps
            with no_grad():
                f2 = float(f().data)
            flat[i] = orig
            if not (np.isfinite(f1) and np.isfinite(f2)):
                raise EvaluationError("grad_check: non-finite value at perturbed point")
            num = (f1 - f2) / (2.0 * eps)
            ana = an.reshape(-1)[i]
            denom = abs(ana) + abs(num)
            if denom > 1e-8:
                worst = max(worst, abs(ana - num) / denom)
    return worst
