"""Ray-based cross-time aggregation.

Cross-time attention lets the target frame's per-sample feature attend over
the same sample's features in adjacent frames; ray attention then mixes the
M samples along each ray (with a global coordinate embedding added first);
a mask-weighted pool over the neighbor axis yields the aggregated feature.

Shapes carry an explicit ray batch axis R throughout:
  target [R, M, d], neighbors [R, K, M, d], masks [R, K, M].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensorcore as tc
from .errors import DimensionError

NEG_INF = -1e30


@dataclass
class FeatureStack:
    target: tc.Tensor     # [R, M, d]
    neighbors: tc.Tensor  # [R, K, M, d], masked entries exactly zero
    masks: np.ndarray     # [R, K, M] of {0, 1}

    def __post_init__(self):
        R, M, d = self.target.shape
        if self.neighbors.shape[0] != R or self.neighbors.shape[2:] != (M, d):
            raise DimensionError("neighbors shape inconsistent with target")
        if self.neighbors.shape[1] not in (1, 2):
            raise DimensionError("K must be 1 or 2 (radius-1 neighbor rule)")
        if self.masks.shape != self.neighbors.shape[:3]:
            raise DimensionError("masks shape inconsistent with neighbors")


@dataclass
class AttentionParams:
    wq: tc.Tensor  # [d_model, d_model]
    wk: tc.Tensor
    wv: tc.Tensor


def init_attention_params(store, prefix, d_model, rng):
    s = np.sqrt(1.0 / d_model)
    for name in ("wq", "wk", "wv"):
        store.add(f"{prefix}/{name}", rng.normal(0.0, s, size=(d_model, d_model)))


def attention_params(store, prefix):
    return AttentionParams(store[f"{prefix}/wq"], store[f"{prefix}/wk"], store[f"{prefix}/wv"])


def init_grspe_params(store, prefix, d_model, rng, n_freq=10):
    d_pe = 3 * 2 * n_freq
    store.add(f"{prefix}/w", rng.normal(0.0, np.sqrt(1.0 / d_pe), size=(d_pe, d_model)))
    store.add(f"{prefix}/b", np.zeros(d_model))


def grspe_embed(points, w, b, n_freq=10):
    """Sinusoidal embedding of world-space sample coords, projected to d_model.

    points [R, M, 3] (array or Tensor) -> [R, M, d_model].
    """
    pts = points if isinstance(points, tc.Tensor) else tc.Tensor(np.asarray(points, dtype=tc.DEFAULT_DTYPE))
    return tc.linear(tc.positional_encode(pts, n_freq), w, b)


def cross_time_attend(stack: FeatureStack, params: AttentionParams):
    """Per-sample cross-time attention (query = target frame).

    Keys/values are the neighbor features plus the target itself; masked
    neighbor entries get -inf logits. Output [R, K, M, d] adds the neighbor
    feature back as a residual. Samples with every neighbor masked fall back
    to the raw target feature.
    """
    R, K, M, d = stack.neighbors.shape
    tokens = tc.concat([stack.neighbors,
                        tc.reshape(stack.target, (R, 1, M, d))], axis=1)  # [R, K+1, M, d]
    token_mask = np.concatenate([stack.masks, np.ones((R, 1, M))], axis=1)  # [R, K+1, M]

    q = tc.linear(stack.target, params.wq)            # [R, M, d]
    k = tc.linear(tokens, params.wk)                  # [R, K+1, M, d]
    v = tc.linear(tokens, params.wv)
    k = tc.moveaxis(k, 1, 2)                          # [R, M, K+1, d]
    v = tc.moveaxis(v, 1, 2)
    logits = tc.matmul(tc.reshape(q, (R, M, 1, d)), tc.moveaxis(k, -1, -2))  # [R, M, 1, K+1]
    logits = logits * (1.0 / np.sqrt(d))
    mask_m = np.moveaxis(token_mask, 1, 2)[:, :, None, :]  # [R, M, 1, K+1]
    logits = tc.where(mask_m > 0, logits, np.full(logits.shape, NEG_INF))
    attn = tc.softmax(logits, axis=-1)
    pooled = tc.reshape(tc.matmul(attn, v), (R, M, d))    # [R, M, d]
    out = tc.reshape(pooled, (R, 1, M, d)) + stack.neighbors  # residual per neighbor

    orphan = stack.masks.sum(axis=1) == 0                 # [R, M]
    if orphan.any():
        out = tc.where(orphan[:, None, :, None],
                       tc.reshape(stack.target, (R, 1, M, d)), out)
    return out


def ray_attend(feats, grspe, params: AttentionParams):
    """Self-attention over the M samples of each ray, per neighbor slice.

    feats [R, K, M, d]; grspe [R, M, d] or None. Tokens are feats + grspe;
    output adds the tokens back as a residual.
    """
    R, K, M, d = feats.shape
    tokens = feats if grspe is None else feats + tc.reshape(grspe, (R, 1, M, d))
    q = tc.linear(tokens, params.wq)
    k = tc.linear(tokens, params.wk)
    v = tc.linear(tokens, params.wv)
    logits = tc.matmul(q, tc.moveaxis(k, -1, -2)) * (1.0 / np.sqrt(d))  # [R, K, M, M]
    attn = tc.softmax(logits, axis=-1)
    return tc.matmul(attn, v) + tokens


def pool_views(feats, masks):
    """Mask-weighted mean over the neighbor axis: [R, K, M, d] -> [R, M, d].

    Samples with no valid neighbor pool to the zero vector.
    """
    m = np.asarray(masks, dtype=feats.dtype)[..., None]   # [R, K, M, 1]
    denom = m.sum(axis=1)                                  # [R, M, 1]
    safe = np.where(denom > 0, denom, 1.0)
    return (feats * m).sum(axis=1) * (np.where(denom > 0, 1.0, 0.0) / safe)


def rbct(stack: FeatureStack, points, params, *, no_ctt=False, no_rt=False,
         no_grspe=False, rt_before_ctt=False):
    """Full ray-based cross-time module: CTT -> (+GRSPE) -> RT -> pool.

    `params` is a dict with keys 'ctt', 'rt' (AttentionParams) and
    'grspe_w'/'grspe_b'. Ablation flags skip or reorder stages.
    """
    emb = None
    if not no_grspe and not no_rt:
        emb = grspe_embed(points, params["grspe_w"], params["grspe_b"])

    def ctt(x):
        return cross_time_attend(FeatureStack(stack.target, x, stack.masks), params["ctt"]) \
            if not no_ctt else x

    def rt(x):
        return ray_attend(x, emb, params["rt"]) if not no_rt else x

    feats = stack.neighbors
    feats = ctt(rt(feats)) if rt_before_ctt else rt(ctt(feats))
    return pool_views(feats, stack.masks)
