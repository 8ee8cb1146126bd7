"""Global spatio-temporal filter.

Learnable complex-valued multiplication in the 2-D Fourier domain of the
per-ray feature block (samples-along-ray x feature channels), inverted back
to the signal domain and fused residually with the attention output.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensorcore as tc
from .errors import DimensionError


@dataclass
class GstfFilter:
    re: tc.Tensor  # [M, floor(d/2)+1]
    im: tc.Tensor


def init_gstf_params(store, prefix, M, d, rng, noise=0.01):
    """All-pass initialization (1 + 0j) plus small noise."""
    h = d // 2 + 1
    store.add(f"{prefix}/re", 1.0 + noise * rng.normal(size=(M, h)))
    store.add(f"{prefix}/im", noise * rng.normal(size=(M, h)))


def gstf_filter(store, prefix):
    return GstfFilter(store[f"{prefix}/re"], store[f"{prefix}/im"])


def gstf_apply(block, filt: GstfFilter):
    """Filter a feature block in the frequency domain; shape preserved.

    block [M, d] or [R, M, d]; the transform runs over the (sample, channel)
    axes and the shared filter multiplies the half-spectrum pointwise.
    """
    single = block.ndim == 2
    x = tc.reshape(block, (1,) + tuple(block.shape)) if single else block
    R, M, d = x.shape
    h = d // 2 + 1
    if filt.re.shape != (M, h):
        raise DimensionError(f"filter shape {filt.re.shape} != ({M}, {h})")
    S = tc.rfft2(x, axes=(1, 2))
    re = S.re * filt.re - S.im * filt.im
    im = S.re * filt.im + S.im * filt.re
    y = tc.irfft2(tc.ComplexSpectrum(re, im), (M, d), axes=(1, 2))
    return tc.reshape(y, (M, d)) if single else y


def fuse(f_t, f_rbct):
    """Residual fusion of the filtered block with the attention output."""
    if f_t.shape != f_rbct.shape:
        raise DimensionError(f"fuse shapes differ: {f_t.shape} vs {f_rbct.shape}")
    return f_t + f_rbct
