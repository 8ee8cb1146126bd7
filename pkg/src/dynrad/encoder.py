"""Per-frame feature extraction and epipolar feature queries.

A small trainable convolutional encoder (3x3 convs, widths 16 -> 32 -> d,
ReLU between layers, no normalization) stands in for a pretrained backbone.
Features are queried by projecting 3-D sample points into a neighbor frame
and bilinearly sampling its feature grid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensorcore as tc
from .errors import ConfigurationError, InputError
from .geometry import Camera, project


@dataclass
class EncoderConfig:
    feature_dim: int = 16
    n_conv_blocks: int = 3
    scale: float = 1.0

    def __post_init__(self):
        if self.feature_dim < 4 or self.feature_dim % 2:
            raise ConfigurationError("feature_dim must be even and >= 4")
        if not 0.0 < self.scale <= 1.0:
            raise ConfigurationError("scale must be in (0, 1]")
        if self.n_conv_blocks < 1:
            raise ConfigurationError("need at least one conv block")

    @property
    def widths(self):
        if self.n_conv_blocks == 1:
            return [self.feature_dim]
        return [16] + [32] * (self.n_conv_blocks - 2) + [self.feature_dim]


@dataclass
class FeatureMap:
    grid: tc.Tensor      # [H', W', d]
    scale: float
    frame_index: int


def init_encoder_params(store, prefix, cfg: EncoderConfig, rng):
    """He-initialized 3x3 conv stack under `prefix` in the store."""
    c_in = 3
    for i, c_out in enumerate(cfg.widths):
        fan_in = 9 * c_in
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, c_out))
        store.add(f"{prefix}/conv{i}/w", w)
        store.add(f"{prefix}/conv{i}/b", np.zeros(c_out))
        c_in = c_out


def encoder_params(store, prefix, cfg: EncoderConfig):
    return [(store[f"{prefix}/conv{i}/w"], store[f"{prefix}/conv{i}/b"])
            for i in range(cfg.n_conv_blocks)]


def conv3x3(x, w, b):
    """3x3 stride-1 conv on [H, W, Cin] via shifted-slice patches."""
    xp = tc.pad2d(x, 1)
    H, W = x.shape[0], x.shape[1]
    patches = tc.concat([xp[dy:dy + H, dx:dx + W, :]
                         for dy in range(3) for dx in range(3)], axis=-1)
    return tc.linear(patches, w, b)


def encode_frame(image, params, cfg: EncoderConfig, frame_index=0):
    """image [H, W, 3] in [0, 1] -> FeatureMap with grid [H', W', d]."""
    img = image.data if isinstance(image, tc.Tensor) else np.asarray(image)
    if not np.isfinite(img).all():
        raise InputError("encode_frame: non-finite image")
    if cfg.scale < 1.0:
        Hs = int(np.ceil(img.shape[0] * cfg.scale))
        Ws = int(np.ceil(img.shape[1] * cfg.scale))
        ys = np.minimum((np.arange(Hs) / cfg.scale).astype(int), img.shape[0] - 1)
        xs = np.minimum((np.arange(Ws) / cfg.scale).astype(int), img.shape[1] - 1)
        img = img[np.ix_(ys, xs)]
    h = tc.Tensor(np.asarray(img, dtype=tc.DEFAULT_DTYPE))
    for i, (w, b) in enumerate(params):
        h = conv3x3(h, w, b)
        if i < len(params) - 1:
            h = tc.relu(h)
    return FeatureMap(h, cfg.scale, frame_index)


def query_features(points, neighbor_cam: Camera, neighbor_map: FeatureMap):
    """Sample a neighbor frame's features at the projections of 3-D points.

    points: [N, 3] array. Returns (features Tensor [N, d], mask ndarray [N]);
    invalid projections (behind the camera / outside the image) give zero
    features and mask 0.
    """
    pts = points.data if isinstance(points, tc.Tensor) else np.asarray(points)
    uv, _, valid = project(pts, neighbor_cam)
    uv = np.where(valid[..., None], uv, -10.0)  # forced out of bounds
    feats, inb = tc.bilinear_sample(neighbor_map.grid, uv * neighbor_map.scale)
    return feats, (valid & (inb > 0)).astype(np.float64)
