"""Camera models, ray casting, stratified sampling, projection and warping.

Pose convention is camera-to-world [R|T] (3x4); projection composes the
inverse. All functions are pure; batched array variants carry the hot path.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DimensionError


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    pose: np.ndarray  # 3x4 camera-to-world [R|T]
    near: float
    far: float

    def __post_init__(self):
        self.pose = np.asarray(self.pose, dtype=np.float64)
        if self.pose.shape != (3, 4):
            raise DimensionError(f"pose must be 3x4, got {self.pose.shape}")
        R = self.pose[:, :3]
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-6) or np.linalg.det(R) < 0:
            raise ConfigurationError("pose rotation must be orthonormal with det +1")
        if not (0 < self.near < self.far):
            raise ConfigurationError("camera requires 0 < near < far")

    @property
    def rotation(self):
        return self.pose[:, :3]

    @property
    def center(self):
        return self.pose[:, 3]

    def to_json(self):
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height,
                "pose": self.pose.tolist(), "near": self.near, "far": self.far}

    @classmethod
    def from_json(cls, d):
        return cls(d["fx"], d["fy"], d["cx"], d["cy"], d["width"], d["height"],
                   np.asarray(d["pose"]), d["near"], d["far"])


@dataclass
class Ray:
    origin: np.ndarray       # [3]
    direction: np.ndarray    # [3], unit norm
    t_index: int
    pixel: tuple

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        self.direction = np.asarray(self.direction, dtype=np.float64)
        n = np.linalg.norm(self.direction)
        if abs(n - 1.0) > 1e-9:
            raise DimensionError("ray direction must be unit length")


@dataclass
class RaySamples:
    depths: np.ndarray   # [M], strictly increasing in [near, far]
    points: np.ndarray   # [M, 3], origin + depth * direction
    deltas: np.ndarray   # [M], last one is (far - near) / M by convention


def ray_directions(camera: Camera, pixels):
    """World-space unit directions for pixel coords [N, 2] (u, v)."""
    pixels = np.asarray(pixels, dtype=np.float64)
    d_cam = np.stack([(pixels[:, 0] - camera.cx) / camera.fx,
                      (pixels[:, 1] - camera.cy) / camera.fy,
                      np.ones(len(pixels))], axis=-1)
    d_world = d_cam @ camera.rotation.T
    return d_world / np.linalg.norm(d_world, axis=-1, keepdims=True)


def generate_rays(camera: Camera, pixels, t_index):
    """Pinhole rays through pixel centers; origin is the camera center."""
    dirs = ray_directions(camera, pixels)
    return [Ray(camera.center.copy(), d, t_index, (float(u), float(v)))
            for d, (u, v) in zip(dirs, np.asarray(pixels, dtype=np.float64))]


def sample_depths(near, far, M, n_rays, stratified=False, rng=None):
    """Depth values per ray: [n_rays, M] partitioning [near, far] into M bins.

    Deterministic mode places samples at bin centers; stratified jitters
    uniformly within each bin.
    """
    edges = np.linspace(near, far, M + 1)
    lower, upper = edges[:-1], edges[1:]
    if stratified:
        u = rng.uniform(size=(n_rays, M))
    else:
        u = np.full((n_rays, M), 0.5)
    return lower + (upper - lower) * u


def sample_along_ray(ray: Ray, M, stratified=False, rng=None, *, near, far):
    """Stratified or bin-center samples along one ray."""
    if M < 1:
        raise ConfigurationError("M must be >= 1")
    depths = sample_depths(near, far, M, 1, stratified, rng)[0]
    points = ray.origin[None, :] + depths[:, None] * ray.direction[None, :]
    return RaySamples(depths, points, deltas_from_depths(depths, near, far, M))


def deltas_from_depths(depths, near, far, M):
    """Segment lengths [.., M]; the last one is (far-near)/M (bounded scene)."""
    deltas = np.empty_like(depths)
    deltas[..., :-1] = np.diff(depths, axis=-1)
    deltas[..., -1] = (far - near) / M
    return deltas


def project(x, camera: Camera):
    """World point(s) -> (uv [.., 2], depth [..] camera z, valid [..] flag)."""
    x = np.asarray(x, dtype=np.float64)
    xc = (x - camera.center) @ camera.rotation  # R^T (x - T)
    z = xc[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = camera.fx * xc[..., 0] / z + camera.cx
        v = camera.fy * xc[..., 1] / z + camera.cy
    uv = np.stack([u, v], axis=-1)
    valid = (z > 0) & (u >= 0) & (u <= camera.width - 1) & (v >= 0) & (v <= camera.height - 1)
    return uv, z, valid


def unproject(u, v, z, camera: Camera):
    """Pixel + camera-space depth -> world point; inverse of project."""
    xc = np.stack([(np.asarray(u) - camera.cx) / camera.fx * z,
                   (np.asarray(v) - camera.cy) / camera.fy * z,
                   np.broadcast_to(z, np.shape(u))], axis=-1)
    return xc @ camera.rotation.T + camera.center


def warp_points(points, flow):
    """x_{t +/- 1} = x_t + s; works on Tensors (differentiable) or arrays."""
    from .tensorcore import Tensor, astensor
    if isinstance(points, Tensor) or isinstance(flow, Tensor):
        points, flow = astensor(points), astensor(flow)
    else:
        points = np.asarray(points, dtype=np.float64)
        flow = np.asarray(flow, dtype=np.float64)
    if points.shape != flow.shape:
        raise DimensionError(f"warp shapes differ: {points.shape} vs {flow.shape}")
    return points + flow


def neighbor_frames(t, n_frames):
    """Temporal neighbors at radius 1; boundary frames keep a single side."""
    if n_frames < 2:
        raise ConfigurationError("neighbor_frames requires n_frames >= 2")
    if not 0 <= t < n_frames:
        raise ConfigurationError(f"t={t} outside [0, {n_frames})")
    if t == 0:
        return [1]
    if t == n_frames - 1:
        return [t - 1]
    return [t - 1, t + 1]
