"""Volume rendering and the full per-ray model pipeline.

composite/composite_blended implement the discretized rendering integrals
with per-stream transmittances; render_rays runs the whole feature pipeline
(epipolar queries -> cross-time/ray attention -> frequency filter -> field
MLPs) for a batch of rays and composites the result.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import aggregation as agg
from . import encoder as enc
from . import fields, gstf
from . import tensorcore as tc
from .config import TrainConfig
from .errors import InputError, StateError
from .geometry import (Camera, deltas_from_depths, neighbor_frames,
                       ray_directions, sample_depths)

EPS_TRANS = 1e-10
EPS_ACC = 1e-8


@dataclass
class RenderOutput:
    rgb: np.ndarray       # [3] in [0, 1]
    depth: float
    acc: float
    weights: np.ndarray   # [M]


@dataclass
class BatchRender:
    rgb: tc.Tensor        # [R, 3]
    depth: tc.Tensor      # [R]
    acc: tc.Tensor        # [R]
    weights: tc.Tensor    # [R, M]
    extras: dict = field(default_factory=dict)


def _exclusive_cumprod(x):
    """T_i = prod_{j<i} x_j along the last axis (T_0 = 1)."""
    cp = tc.cumprod(x, axis=-1)
    ones = np.ones(x.shape[:-1] + (1,), dtype=x.dtype)
    return tc.concat([tc.Tensor(ones), cp[..., :-1]], axis=-1)


def composite(sigmas, colors, deltas, depths=None):
    """Discretized volume rendering of one density/color stream.

    sigmas [R, M] (>= 0), colors [R, M, 3], deltas [R, M]; depths [R, M]
    supply the expected-depth output. alpha = 1 - exp(-sigma * delta),
    T_i = prod_{j<i}(1 - alpha_j), weight = T * alpha.
    """
    sigmas, colors = tc.astensor(sigmas), tc.astensor(colors)
    if (sigmas.data < 0).any():
        raise InputError("composite: negative density")
    deltas = np.asarray(deltas, dtype=sigmas.dtype)
    if (deltas < 0).any():
        raise InputError("composite: negative segment length")
    alpha = 1.0 - tc.exp(-(sigmas * deltas))
    trans = _exclusive_cumprod(1.0 - alpha + EPS_TRANS)
    weights = trans * alpha
    rgb = (weights.reshape(weights.shape + (1,)) * colors).sum(axis=-2)
    acc = weights.sum(axis=-1)
    if depths is None:
        depth = acc * 0.0
    else:
        depth = (weights * np.asarray(depths, dtype=sigmas.dtype)).sum(axis=-1) \
            / tc.maximum_const(acc, EPS_ACC)
    return BatchRender(rgb, depth, acc, weights)


def composite_blended(sigma_s, color_s, sigma_d, color_d, blend, deltas,
                      depths=None, blend_in_transmittance=False):
    """Blend static and dynamic streams along the ray.

    The default keeps two separate transmittances (one per stream density)
    and weights per-sample contributions by b and (1-b). The alternative
    blends densities inside a single transmittance (off by default).
    """
    sigma_s, color_s = tc.astensor(sigma_s), tc.astensor(color_s)
    sigma_d, color_d = tc.astensor(sigma_d), tc.astensor(color_d)
    blend = tc.astensor(blend)
    if (sigma_s.data < 0).any() or (sigma_d.data < 0).any():
        raise InputError("composite_blended: negative density")
    deltas = np.asarray(deltas, dtype=sigma_s.dtype)
    b3 = blend.reshape(blend.shape + (1,))

    if blend_in_transmittance:
        sigma_mix = blend * sigma_d + (1.0 - blend) * sigma_s
        alpha = 1.0 - tc.exp(-(sigma_mix * deltas))
        trans = _exclusive_cumprod(1.0 - alpha + EPS_TRANS)
        weights = trans * alpha
        denom = tc.maximum_const(sigma_mix, EPS_ACC).reshape(sigma_mix.shape + (1,))
        mix_c = (b3 * sigma_d.reshape(sigma_d.shape + (1,)) * color_d
                 + (1.0 - b3) * sigma_s.reshape(sigma_s.shape + (1,)) * color_s) / denom
        rgb = (weights.reshape(weights.shape + (1,)) * mix_c).sum(axis=-2)
        w_d = weights * blend
    else:
        alpha_s = 1.0 - tc.exp(-(sigma_s * deltas))
        alpha_d = 1.0 - tc.exp(-(sigma_d * deltas))
        t_s = _exclusive_cumprod(1.0 - alpha_s + EPS_TRANS)
        t_d = _exclusive_cumprod(1.0 - alpha_d + EPS_TRANS)
        w_s = t_s * alpha_s * (1.0 - blend)
        w_d = t_d * alpha_d * blend
        weights = w_s + w_d
        rgb = (w_s.reshape(w_s.shape + (1,)) * color_s
               + w_d.reshape(w_d.shape + (1,)) * color_d).sum(axis=-2)

    acc = weights.sum(axis=-1)
    if depths is None:
        depth = acc * 0.0
    else:
        depth = (weights * np.asarray(depths, dtype=weights.dtype)).sum(axis=-1) \
            / tc.maximum_const(acc, EPS_ACC)
    return BatchRender(rgb, depth, acc, weights,
                       extras={"weights_dynamic": w_d, "blend": blend})


# -- full pipeline -----------------------------------------------------------

@dataclass
class RenderContext:
    """Everything render_rays needs: cameras, feature caches, params, config."""
    cameras: list                 # per-frame Camera
    n_frames: int
    near: float
    far: float
    store: tc.ParameterStore
    cfg: TrainConfig
    featmaps: dict                # (stage, t) -> FeatureMap
    rng: np.random.Generator | None = None

    def require_maps(self, stage, t):
        needed = [t] + neighbor_frames(t, self.n_frames)
        for f in needed:
            if (stage, f) not in self.featmaps:
                raise StateError(f"feature cache missing ({stage}, {f})")


def encoder_config(cfg: TrainConfig):
    return enc.EncoderConfig(cfg.feature_dim, cfg.encoder_blocks, cfg.encoder_scale)


def field_config(cfg: TrainConfig):
    return fields.FieldConfig(cfg.hidden_width, cfg.n_resblocks, cfg.flow_clamp,
                              cfg.feature_dim)


def init_stage_params(store, stage, cfg: TrainConfig, rng):
    """Register all parameters of one stage ('static' or 'dynamic')."""
    enc.init_encoder_params(store, f"{stage}/encoder", encoder_config(cfg), rng)
    agg.init_attention_params(store, f"{stage}/ctt", cfg.feature_dim, rng)
    agg.init_attention_params(store, f"{stage}/rt", cfg.feature_dim, rng)
    agg.init_grspe_params(store, f"{stage}/grspe", cfg.feature_dim, rng)
    gstf.init_gstf_params(store, f"{stage}/gstf", cfg.M, cfg.feature_dim, rng)
    fields.init_field_params(store, f"{stage}/field", field_config(cfg), rng,
                             time_in_density=(stage == "dynamic"))
    if stage == "dynamic":
        fields.init_flow_head_params(store, f"{stage}/flow_head", field_config(cfg),
                                     rng, single_layer=cfg.no_flow_head_extra)


def encode_stage_frames(images, store, cfg: TrainConfig, stage, frame_ids):
    """Encoder forward for the given frames; {(stage, t): FeatureMap}."""
    ecfg = encoder_config(cfg)
    params = enc.encoder_params(store, f"{stage}/encoder", ecfg)
    return {(stage, t): enc.encode_frame(images[t], params, ecfg, frame_index=t)
            for t in frame_ids}


def _rbct_params(store, stage):
    return {"ctt": agg.attention_params(store, f"{stage}/ctt"),
            "rt": agg.attention_params(store, f"{stage}/rt"),
            "grspe_w": store[f"{stage}/grspe/w"],
            "grspe_b": store[f"{stage}/grspe/b"]}


def aggregate_features(ctx: RenderContext, stage, t, points, neighbor_points):
    """Per-sample fused feature F for one stage.

    points [R, M, 3] are the target-ray samples; neighbor_points maps each
    neighbor frame to the (possibly flow-warped) [R, M, 3] query points.
    Returns (F [R, M, d], target_features [R, M, d]).
    """
    cfg = ctx.cfg
    R, M, _ = points.shape
    d = cfg.feature_dim
    if cfg.no_multiview:
        zero = tc.Tensor(np.zeros((R, M, d), dtype=tc.DEFAULT_DTYPE))
        return zero, zero
    flat = points.reshape(-1, 3)
    tgt_feat, _ = enc.query_features(flat, ctx.cameras[t], ctx.featmaps[(stage, t)])
    tgt_feat = tgt_feat.reshape((R, M, d))

    neigh_feats, neigh_masks = [], []
    for tn, pts_n in neighbor_points.items():
        f, m = enc.query_features(pts_n.reshape(-1, 3), ctx.cameras[tn],
                                  ctx.featmaps[(stage, tn)])
        neigh_feats.append(f.reshape((R, 1, M, d)))
        neigh_masks.append(m.reshape(R, 1, M))
    neighbors = tc.concat(neigh_feats, axis=1)
    masks = np.concatenate(neigh_masks, axis=1)
    stack = agg.FeatureStack(tgt_feat, neighbors, masks)

    if cfg.no_rbct:
        fused = agg.pool_views(neighbors, masks)
    else:
        fused = agg.rbct(stack, points, _rbct_params(ctx.store, stage),
                         no_ctt=cfg.no_ctt, no_rt=cfg.no_rt,
                         no_grspe=cfg.no_grspe, rt_before_ctt=cfg.rt_before_ctt)
    if not cfg.no_gstf:
        pooled_raw = agg.pool_views(neighbors, masks)
        f_t = gstf.gstf_apply(pooled_raw, gstf.gstf_filter(ctx.store, f"{stage}/gstf"))
        fused = gstf.fuse(f_t, fused)
    return fused, tgt_feat


def static_branch(ctx: RenderContext, t, points, encodings):
    ctx.require_maps("static", t)
    x_pe, t_pe, d_pe = encodings
    neighbor_points = {tn: points for tn in neighbor_frames(t, ctx.n_frames)}
    feat, _ = aggregate_features(ctx, "static", t, points, neighbor_points)
    out = fields.static_query(x_pe, t_pe, d_pe, feat, ctx.store, "static/field",
                              field_config(ctx.cfg))
    return out


def dynamic_branch(ctx: RenderContext, t, points, encodings):
    """Two passes: flow head from current-frame features, then warped queries."""
    ctx.require_maps("dynamic", t)
    cfg = ctx.cfg
    x_pe, t_pe, d_pe = encodings
    R, M, _ = points.shape
    d = cfg.feature_dim
    flat = points.reshape(-1, 3)
    if cfg.no_multiview:
        feat_t = tc.Tensor(np.zeros((R, M, d), dtype=tc.DEFAULT_DTYPE))
    else:
        feat_t, _ = enc.query_features(flat, ctx.cameras[t], ctx.featmaps[("dynamic", t)])
        feat_t = feat_t.reshape((R, M, d))
    s_fw, s_bw, b = fields.dynamic_flow_head(
        x_pe, t_pe, feat_t, ctx.store, "dynamic/flow_head", field_config(cfg),
        single_layer=cfg.no_flow_head_extra)

    neighbor_points = {}
    for tn in neighbor_frames(t, ctx.n_frames):
        s = s_fw if tn > t else s_bw
        neighbor_points[tn] = points + s.data  # queries sample at warped points
    feat, _ = aggregate_features(ctx, "dynamic", t, points, neighbor_points)
    out = fields.dynamic_query(x_pe, t_pe, d_pe, feat, (s_fw, s_bw, b),
                               ctx.store, "dynamic/field", field_config(cfg))
    return out


def render_rays(ctx: RenderContext, origins, dirs, t, mode="blended",
                stratified=False):
    """Render a batch of rays at frame time t; mode static|dynamic|blended."""
    cfg = ctx.cfg
    R = len(origins)
    M = cfg.M
    depths = sample_depths(ctx.near, ctx.far, M, R, stratified, ctx.rng)
    points = origins[:, None, :] + depths[..., None] * dirs[:, None, :]
    deltas = deltas_from_depths(depths, ctx.near, ctx.far, M)
    t_norm = t / max(ctx.n_frames - 1, 1)
    dir_tiled = np.broadcast_to(dirs[:, None, :], points.shape)
    encodings = fields.encode_inputs(points, t_norm, dir_tiled)

    if mode == "static":
        out = static_branch(ctx, t, points, encodings)
        return composite(out.sigma_s, out.c_s, deltas, depths), None, points
    if mode == "dynamic":
        dyn = dynamic_branch(ctx, t, points, encodings)
        render = composite(dyn.sigma_d, dyn.c_d, deltas, depths)
        render.extras["weights_dynamic"] = render.weights
        render.extras["blend"] = dyn.b
        return render, dyn, points
    if mode == "blended":
        st = static_branch(ctx, t, points, encodings)
        dyn = dynamic_branch(ctx, t, points, encodings)
        render = composite_blended(st.sigma_s, st.c_s, dyn.sigma_d, dyn.c_d,
                                   dyn.b, deltas, depths,
                                   blend_in_transmittance=cfg.blend_in_transmittance)
        return render, dyn, points
    raise InputError(f"unknown render mode {mode!r}")


def render_ray(ray, mode, ctx: RenderContext):
    """Single-ray contract: returns a plain RenderOutput."""
    render, _, _ = render_rays(ctx, ray.origin[None, :], ray.direction[None, :],
                               ray.t_index, mode=mode)
    return RenderOutput(render.rgb.data[0].copy(), float(render.depth.data[0]),
                        float(render.acc.data[0]), render.weights.data[0].copy())


def render_image(ctx: RenderContext, camera: Camera, t, mode="blended",
                 chunk=1024, threads=None, with_blend=False):
    """Full-image deterministic render; returns dict of [H, W, ...] arrays.

    Chunks are independent; DYNRAD_THREADS bounds optional worker threads.
    """
    H, W = camera.height, camera.width
    uu, vv = np.meshgrid(np.arange(W, dtype=np.float64), np.arange(H, dtype=np.float64))
    pix = np.stack([uu.ravel(), vv.ravel()], axis=-1)
    dirs = ray_directions(camera, pix)
    origins = np.broadcast_to(camera.center, dirs.shape)
    n = len(pix)
    rgb = np.zeros((n, 3))
    dep = np.zeros(n)
    acc = np.zeros(n)
    blend = np.zeros(n)

    def run(lo):
        hi = min(lo + chunk, n)
        with tc.no_grad():
            render, dyn, _ = render_rays(ctx, origins[lo:hi], dirs[lo:hi], t, mode)
        rgb[lo:hi] = render.rgb.data
        dep[lo:hi] = render.depth.data
        acc[lo:hi] = render.acc.data
        if with_blend and "blend" in render.extras:
            w = render.extras["weights_dynamic"].data
            blend[lo:hi] = w.sum(axis=-1) / np.maximum(render.weights.data.sum(axis=-1),
                                                       EPS_ACC)

    starts = list(range(0, n, chunk))
    if threads is None:
        threads = int(os.environ.get("DYNRAD_THREADS", "0") or 0)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(run, starts))
    else:
        for lo in starts:
            run(lo)
    out = {"rgb": rgb.reshape(H, W, 3), "depth": dep.reshape(H, W),
           "acc": acc.reshape(H, W)}
    if with_blend:
        out["blend"] = blend.reshape(H, W)
    return out
