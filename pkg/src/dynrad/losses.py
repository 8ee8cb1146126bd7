"""Training objective: photometric term, scene-flow regularizer, data priors.

Total = L_pho + w_small * L_small + w_depth * L_depth + w_flow * L_flow.
Prior weights are annealed by the trainer over the first half of dynamic
training. Depth priors are median-normalized on both sides before the L1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensorcore as tc
from .errors import ConfigurationError, DimensionError, TrainingError
from .geometry import Camera


@dataclass
class LossBreakdown:
    pho: float
    small: float
    data_depth: float
    data_flow: float
    total: float
    weights: dict
    total_tensor: tc.Tensor = None


def photometric_loss(rendered, target):
    """Mean over rays of the squared L2 color error."""
    rendered = tc.astensor(rendered)
    target = np.asarray(target)
    if rendered.shape != target.shape:
        raise DimensionError(f"photometric shapes differ: {rendered.shape} vs {target.shape}")
    diff = rendered - tc.Tensor(np.asarray(target, dtype=rendered.dtype))
    return (diff * diff).sum(axis=-1).mean()


def scene_flow_small_loss(s_fw, s_bw):
    """Mean over samples of |s_fw|_1 + |s_bw|_1 + |s_fw + s_bw|_1."""
    s_fw, s_bw = tc.astensor(s_fw), tc.astensor(s_bw)
    if s_fw.shape != s_bw.shape:
        raise DimensionError("flow shapes differ")
    per = (tc.absolute(s_fw).sum(axis=-1) + tc.absolute(s_bw).sum(axis=-1)
           + tc.absolute(s_fw + s_bw).sum(axis=-1))
    return per.mean()


def project_differentiable(x, camera: Camera):
    """Pinhole projection as tape ops; gradient flows to the 3-D points.

    x [.., 3] Tensor -> uv [.., 2]. Camera-space z is clamped to stay
    positive so warped points cannot blow up the division.
    """
    x = tc.astensor(x)
    centered = x - tc.Tensor(np.asarray(camera.center, dtype=x.dtype))
    lead = x.shape[:-1]
    xc = tc.matmul(centered.reshape((-1, 3)),
                   tc.Tensor(np.asarray(camera.rotation, dtype=x.dtype))).reshape(lead + (3,))
    z = tc.maximum_const(xc[..., 2], 1e-3)
    u = xc[..., 0] / z * camera.fx + camera.cx
    v = xc[..., 1] / z * camera.fy + camera.cy
    return tc.stack([u, v], axis=-1)


def depth_prior_loss(rendered_depth, prior_depth):
    """L1 between rendered and prior depth, both median-normalized."""
    rendered_depth = tc.astensor(rendered_depth)
    prior = np.asarray(prior_depth, dtype=rendered_depth.dtype)
    med_r = max(float(np.median(rendered_depth.data)), 1e-8)
    med_p = max(float(np.median(prior)), 1e-8)
    return tc.absolute(rendered_depth * (1.0 / med_r)
                       - tc.Tensor(prior / med_p)).mean()


def flow_prior_loss(points, flows, cameras, pixels, prior_flows, weights):
    """Weighted L1 between projected flow displacement and the prior flow.

    points [R, M, 3] constants; flows: per direction Tensor [R, M, 3] or
    None; cameras/prior_flows: matching neighbor camera and [R, 2] prior per
    direction; weights [R, M] compositing weights (dynamic stream). Missing
    directions (scene boundaries) are skipped.
    """
    terms = []
    pix = np.asarray(pixels)
    for s, cam, prior in zip(flows, cameras, prior_flows):
        if s is None or prior is None:
            continue
        pts = tc.Tensor(np.asarray(points, dtype=s.dtype)) + s
        uv = project_differentiable(pts, cam)                      # [R, M, 2]
        disp = uv - tc.Tensor(pix[:, None, :].astype(s.dtype))
        err = tc.absolute(disp - tc.Tensor(np.asarray(prior)[:, None, :]
                                           .astype(s.dtype))).sum(axis=-1)  # [R, M]
        terms.append((weights * err).sum(axis=-1).mean())
    if not terms:
        raise ConfigurationError("flow prior loss: no prior available")
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out * (1.0 / len(terms))


def data_prior_loss(render, points, flow_out, pixels, neighbor_cams,
                    prior_depth, prior_flows):
    """(data_depth, data_flow) per the dataset priors.

    render: BatchRender of the blended pass (depth + dynamic-stream weights);
    flow_out: (s_fw, s_bw) Tensors; neighbor_cams/prior_flows: (fw, bw)
    entries, None when the frame lacks that neighbor.
    """
    if prior_depth is None:
        raise ConfigurationError("data prior loss requires a depth prior")
    data_depth = depth_prior_loss(render.depth, prior_depth)
    weights = render.extras.get("weights_dynamic", render.weights)
    data_flow = flow_prior_loss(points, flow_out, neighbor_cams, pixels,
                                prior_flows, weights)
    return data_depth, data_flow


def total_loss(pho, small, data_depth, data_flow, w_small, w_depth, w_flow):
    """Weighted sum; raises TrainingError naming any non-finite part."""
    parts = {"pho": pho, "small": small, "data_depth": data_depth,
             "data_flow": data_flow}
    vals = {}
    for name, p in parts.items():
        v = float(p.data) if isinstance(p, tc.Tensor) else float(p)
        if not np.isfinite(v):
            raise TrainingError(f"non-finite loss term: {name}")
        vals[name] = v
    total_t = tc.astensor(pho)
    for term, w in ((small, w_small), (data_depth, w_depth), (data_flow, w_flow)):
        if w != 0.0:
            total_t = total_t + tc.astensor(term) * w
    weights = {"pho": 1.0, "small": w_small, "depth": w_depth, "flow": w_flow}
    total = vals["pho"] + w_small * vals["small"] + w_depth * vals["data_depth"] \
        + w_flow * vals["data_flow"]
    return LossBreakdown(vals["pho"], vals["small"], vals["data_depth"],
                         vals["data_flow"], total, weights, total_t)
