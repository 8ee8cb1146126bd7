"""Static and dynamic radiance fields.

Residual MLP trunks over positionally-encoded inputs plus the fused
aggregated feature; the dynamic model adds a separate four-layer head
predicting scene flow and the static/dynamic blend value.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensorcore as tc
from .errors import ConfigurationError, InputError

# positional encoding frequency counts (radiance-field defaults)
PE_X = 10   # spatial coordinates
PE_D = 4    # view direction
PE_T = 4    # time

X_PE_DIM = 3 * 2 * PE_X
D_PE_DIM = 3 * 2 * PE_D
T_PE_DIM = 1 * 2 * PE_T


@dataclass
class FieldConfig:
    hidden_width: int = 32
    n_resblocks: int = 4
    flow_clamp: float = 0.25
    feature_dim: int = 16

    def __post_init__(self):
        if self.hidden_width < 8:
            raise ConfigurationError("hidden_width must be >= 8")


@dataclass
class StaticOutput:
    c_s: tc.Tensor      # [..., 3] in [0, 1]
    sigma_s: tc.Tensor  # [...] >= 0


@dataclass
class DynamicOutput:
    c_d: tc.Tensor
    sigma_d: tc.Tensor
    s_fw: tc.Tensor     # [..., 3], |.|_inf <= flow_clamp
    s_bw: tc.Tensor
    b: tc.Tensor        # [...] in [0, 1]


def _he(rng, n_in, n_out):
    return rng.normal(0.0, np.sqrt(2.0 / n_in), size=(n_in, n_out))


def init_field_params(store, prefix, cfg: FieldConfig, rng, time_in_density=False):
    """Trunk + zero-initialized output heads under `prefix`.

    The density trunk never sees the view direction (and, for the static
    field, not the time either); both condition only the color branch.
    Anything else lets the field memorize per-view billboards instead of
    geometry.
    """
    W = cfg.hidden_width
    in_dim = X_PE_DIM + cfg.feature_dim + (T_PE_DIM if time_in_density else 0)
    store.add(f"{prefix}/in/w", _he(rng, in_dim, W))
    store.add(f"{prefix}/in/b", np.zeros(W))
    for i in range(cfg.n_resblocks):
        store.add(f"{prefix}/res{i}/w1", _he(rng, W, W))
        store.add(f"{prefix}/res{i}/b1", np.zeros(W))
        store.add(f"{prefix}/res{i}/w2", _he(rng, W, W))
        store.add(f"{prefix}/res{i}/b2", np.zeros(W))
    store.add(f"{prefix}/mid/w", _he(rng, W + X_PE_DIM, W))
    store.add(f"{prefix}/mid/b", np.zeros(W))
    color_in = W + D_PE_DIM + (0 if time_in_density else T_PE_DIM)
    store.add(f"{prefix}/color/w", _he(rng, color_in, W))
    store.add(f"{prefix}/color/b", np.zeros(W))
    store.add(f"{prefix}/sigma/w", np.zeros((W, 1)))
    store.add(f"{prefix}/sigma/b", np.zeros(1))
    store.add(f"{prefix}/rgb/w", np.zeros((W, 3)))
    store.add(f"{prefix}/rgb/b", np.zeros(3))


def init_flow_head_params(store, prefix, cfg: FieldConfig, rng, single_layer=False):
    """Four-layer scene-flow/blend head (or one linear layer when ablated)."""
    W = cfg.hidden_width
    in_dim = X_PE_DIM + T_PE_DIM + cfg.feature_dim
    if single_layer:
        store.add(f"{prefix}/flow/w", np.zeros((in_dim, 6)))
        store.add(f"{prefix}/flow/b", np.zeros(6))
        store.add(f"{prefix}/blend/w", np.zeros((in_dim, 1)))
        store.add(f"{prefix}/blend/b", np.zeros(1))
        return
    dims = [in_dim, W, W, W]
    for i in range(3):
        store.add(f"{prefix}/l{i}/w", _he(rng, dims[i], dims[i + 1]))
        store.add(f"{prefix}/l{i}/b", np.zeros(dims[i + 1]))
    store.add(f"{prefix}/flow/w", np.zeros((W, 6)))
    store.add(f"{prefix}/flow/b", np.zeros(6))
    store.add(f"{prefix}/blend/w", np.zeros((W, 1)))
    store.add(f"{prefix}/blend/b", np.zeros(1))


def _check_finite(*tensors):
    for t in tensors:
        if t is not None and not np.isfinite(t.data if isinstance(t, tc.Tensor) else t).all():
            raise InputError("field query: non-finite input")


def _trunk(store, prefix, cfg, x_pe, density_parts, color_parts):
    h = tc.relu(tc.linear(tc.concat(density_parts, axis=-1), store[f"{prefix}/in/w"],
                          store[f"{prefix}/in/b"]))
    mid = cfg.n_resblocks // 2
    for i in range(cfg.n_resblocks):
        u = tc.relu(tc.linear(tc.relu(h), store[f"{prefix}/res{i}/w1"],
                              store[f"{prefix}/res{i}/b1"]))
        h = h + tc.linear(u, store[f"{prefix}/res{i}/w2"], store[f"{prefix}/res{i}/b2"])
        if i == mid - 1:  # re-inject encoded position mid-network
            h = tc.relu(tc.linear(tc.concat([h, x_pe], axis=-1),
                                  store[f"{prefix}/mid/w"], store[f"{prefix}/mid/b"]))
    sigma = tc.softplus(tc.linear(h, store[f"{prefix}/sigma/w"],
                                  store[f"{prefix}/sigma/b"]))[..., 0]
    hc = tc.relu(tc.linear(tc.concat([h] + color_parts, axis=-1),
                           store[f"{prefix}/color/w"], store[f"{prefix}/color/b"]))
    rgb = tc.sigmoid(tc.linear(hc, store[f"{prefix}/rgb/w"], store[f"{prefix}/rgb/b"]))
    return rgb, sigma


def static_query(x_pe, t_pe, d_pe, feat, store, prefix, cfg: FieldConfig):
    """Color/density of the static field from encoded coords + fused feature."""
    _check_finite(x_pe, t_pe, d_pe, feat)
    rgb, sigma = _trunk(store, prefix, cfg, x_pe, [x_pe, feat], [d_pe, t_pe])
    return StaticOutput(rgb, sigma)


def dynamic_flow_head(x_pe, t_pe, feat_t, store, prefix, cfg: FieldConfig,
                      single_layer=False):
    """Scene flow (tanh-squashed to +/- flow_clamp) and blend value in [0, 1].

    Consumes only current-frame information (pass 1 of the dynamic scheme).
    """
    _check_finite(x_pe, t_pe, feat_t)
    h = tc.concat([x_pe, t_pe, feat_t], axis=-1)
    if not single_layer:
        for i in range(3):
            h = tc.relu(tc.linear(h, store[f"{prefix}/l{i}/w"], store[f"{prefix}/l{i}/b"]))
    s = tc.tanh(tc.linear(h, store[f"{prefix}/flow/w"], store[f"{prefix}/flow/b"]))
    s = s * cfg.flow_clamp
    b = tc.sigmoid(tc.linear(h, store[f"{prefix}/blend/w"], store[f"{prefix}/blend/b"]))[..., 0]
    return s[..., 0:3], s[..., 3:6], b


def dynamic_query(x_pe, t_pe, d_pe, feat_warped, flow_out, store, prefix,
                  cfg: FieldConfig):
    """Color/density of the dynamic field, assembled with the flow head pass.

    Time conditions the density here (geometry moves); direction still only
    reaches the color branch.
    """
    _check_finite(x_pe, t_pe, d_pe, feat_warped)
    rgb, sigma = _trunk(store, prefix, cfg, x_pe, [x_pe, t_pe, feat_warped], [d_pe])
    s_fw, s_bw, b = flow_out
    return DynamicOutput(rgb, sigma, s_fw, s_bw, b)


def encode_inputs(points, t_norm, dirs):
    """Positional encodings for (x, t, d); points [.., 3], dirs [.., 3]."""
    x_pe = tc.positional_encode(tc.Tensor(np.asarray(points, dtype=tc.DEFAULT_DTYPE)), PE_X)
    shape = np.shape(points)[:-1] + (1,)
    t_arr = np.full(shape, t_norm, dtype=tc.DEFAULT_DTYPE)
    t_pe = tc.positional_encode(tc.Tensor(t_arr), PE_T)
    d_pe = tc.positional_encode(tc.Tensor(np.asarray(dirs, dtype=tc.DEFAULT_DTYPE)), PE_D)
    return x_pe, t_pe, d_pe
