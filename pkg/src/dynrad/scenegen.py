"""Synthetic dynamic-scene generator and reference oracle.

Analytic ray tracer for a checker-textured room with a moving textured
sphere. Emits posed RGB frames with exact depth, 3-D scene flow, 2-D
optical flow and dynamic masks; flat shading, no lighting model, so the
albedo is the radiance.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import fileio
from .errors import ConfigurationError
from .geometry import Camera, project, ray_directions

# per-face two-tone palettes, keyed by (axis, sign)
_FACE_COLORS = {
    (0, +1): ([0.85, 0.35, 0.30], [0.95, 0.80, 0.65]),
    (0, -1): ([0.30, 0.60, 0.85], [0.75, 0.88, 0.95]),
    (1, +1): ([0.80, 0.80, 0.80], [0.45, 0.45, 0.50]),
    (1, -1): ([0.55, 0.40, 0.25], [0.85, 0.70, 0.45]),
    (2, +1): ([0.35, 0.70, 0.40], [0.85, 0.92, 0.70]),
    (2, -1): ([0.60, 0.35, 0.65], [0.90, 0.75, 0.90]),
}
_SPHERE_COLORS = ([0.95, 0.55, 0.15], [0.20, 0.22, 0.45])


@dataclass
class SceneSpec:
    room_half: float = 1.0
    checker_period: float = 0.5
    sphere_radius: float = 0.24
    # piecewise-linear trajectory over frame times: rows of (t, x, y, z)
    sphere_waypoints: tuple = ((0.0, -0.40, -0.05, 0.30),
                               (6.0, 0.05, 0.18, 0.42),
                               (11.0, 0.45, -0.02, 0.30))
    sphere_checker_period: float = np.pi / 2
    second_sphere: dict | None = None  # {"radius", "waypoints"}; off by default
    n_frames: int = 12
    width: int = 48
    height: int = 27
    focal: float = 42.0
    cam_orbit_radius: float = 1.0
    cam_orbit_center: tuple = (0.0, 0.0, 0.25)
    cam_arc_degrees: float = 28.0
    cam_target: tuple = (0.0, 0.05, 0.35)
    near: float = 0.55
    far: float = 2.45
    seed: int = 0

    def __post_init__(self):
        wp = np.asarray(self.sphere_waypoints, dtype=np.float64)
        for t in np.linspace(0, self.n_frames - 1, 4 * self.n_frames):
            c = self.trajectory(t)
            if np.max(np.abs(c)) + self.sphere_radius >= self.room_half:
                raise ConfigurationError("sphere leaves the room along its trajectory")
        if wp.shape[1] != 4:
            raise ConfigurationError("waypoints must be rows of (t, x, y, z)")

    def trajectory(self, t):
        """Sphere center at (possibly fractional) frame time t."""
        wp = np.asarray(self.sphere_waypoints, dtype=np.float64)
        ts, ps = wp[:, 0], wp[:, 1:]
        return np.stack([np.interp(t, ts, ps[:, i]) for i in range(3)], axis=-1)

    def camera(self, t):
        """Per-frame camera on a small arc, looking at the sphere region."""
        n = self.n_frames
        alpha = np.deg2rad(self.cam_arc_degrees) * (t / max(n - 1, 1) - 0.5)
        c = np.asarray(self.cam_orbit_center)
        eye = c + self.cam_orbit_radius * np.array([np.sin(alpha), 0.0, -np.cos(alpha)])
        eye[1] += 0.10 * np.sin(np.pi * t / max(n - 1, 1)) - 0.03
        pose = look_at(eye, np.asarray(self.cam_target))
        return Camera(self.focal, self.focal, (self.width - 1) / 2.0,
                      (self.height - 1) / 2.0, self.width, self.height,
                      pose, self.near, self.far)

    def to_json(self):
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["sphere_waypoints"] = [list(map(float, row)) for row in d["sphere_waypoints"]]
        d["cam_orbit_center"] = list(self.cam_orbit_center)
        d["cam_target"] = list(self.cam_target)
        return d


def look_at(eye, target, up=(0.0, 1.0, 0.0)):
    """Camera-to-world 3x4 pose with +z pointing at the target, det(R)=+1."""
    z = target - eye
    z = z / np.linalg.norm(z)
    x = np.cross(z, np.asarray(up, dtype=np.float64))
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    return np.column_stack([x, y, z, eye])


def checker(u, v, period):
    """Two-tone checker cell parity on a plane."""
    return ((np.floor(u / period) + np.floor(v / period)) % 2).astype(np.int64)


def _sphere_hit(origins, dirs, center, radius):
    """Smallest positive ray parameter of the sphere hit, inf when missed."""
    oc = origins - center
    b = np.sum(oc * dirs, axis=-1)
    c = np.sum(oc * oc, axis=-1) - radius * radius
    disc = b * b - c
    ok = disc >= 0
    sq = np.sqrt(np.where(ok, disc, 0.0))
    t0 = -b - sq
    t1 = -b + sq
    t = np.where(t0 > 1e-9, t0, t1)
    return np.where(ok & (t > 1e-9), t, np.inf)


def _box_exit(origins, dirs, half):
    """Exit distance of rays starting inside the [-half, half]^3 room."""
    with np.errstate(divide="ignore"):
        t_axes = (np.sign(dirs) * half - origins) / dirs
    t_axes = np.where(np.isfinite(t_axes), t_axes, np.inf)
    return t_axes.min(axis=-1)


def _wall_color(points, half, period):
    """Flat checker albedo on the room face the point lies on."""
    out = np.zeros(points.shape[:-1] + (3,))
    dist = half - np.abs(points)
    axis = np.argmin(dist, axis=-1)
    for ax in range(3):
        for sign in (+1, -1):
            sel = (axis == ax) & (np.sign(points[..., ax]) == sign)
            if not sel.any():
                continue
            j, k = [i for i in range(3) if i != ax]
            cell = checker(points[sel][:, j], points[sel][:, k], period)
            c0, c1 = _FACE_COLORS[(ax, sign)]
            out[sel] = np.where(cell[:, None] == 0, c0, c1)
    return out


def _sphere_color(points, center, radius, period):
    """Checker albedo in sphere-local spherical coords (translates rigidly)."""
    n = (points - center) / radius
    theta = np.arctan2(n[..., 1], n[..., 0])
    phi = np.arccos(np.clip(n[..., 2], -1.0, 1.0))
    cell = checker(theta + np.pi, phi, period)
    c0, c1 = _SPHERE_COLORS
    return np.where(cell[..., None] == 0, c0, c1)


def _spheres_at(spec, t):
    out = [(spec.trajectory(t), spec.sphere_radius)]
    if spec.second_sphere is not None:
        wp = np.asarray(spec.second_sphere["waypoints"], dtype=np.float64)
        ts, ps = wp[:, 0], wp[:, 1:]
        c = np.stack([np.interp(t, ts, ps[:, i]) for i in range(3)], axis=-1)
        out.append((c, spec.second_sphere["radius"]))
    return out


def trace_reference(spec: SceneSpec, t, camera: Camera):
    """Exact render: (image [H,W,3] in [0,1], depth [H,W] camera z, mask [H,W])."""
    H, W = camera.height, camera.width
    uu, vv = np.meshgrid(np.arange(W, dtype=np.float64), np.arange(H, dtype=np.float64))
    pix = np.stack([uu.ravel(), vv.ravel()], axis=-1)
    dirs = ray_directions(camera, pix)
    origins = np.broadcast_to(camera.center, dirs.shape)

    t_hit = _box_exit(origins, dirs, spec.room_half)
    kind = np.zeros(len(dirs), dtype=np.int64)  # 0 = wall, 1+ = sphere index
    for si, (center, radius) in enumerate(_spheres_at(spec, t), start=1):
        ts = _sphere_hit(origins, dirs, center, radius)
        closer = ts < t_hit
        t_hit = np.where(closer, ts, t_hit)
        kind = np.where(closer, si, kind)

    points = origins + t_hit[:, None] * dirs
    image = _wall_color(points, spec.room_half, spec.checker_period)
    for si, (center, radius) in enumerate(_spheres_at(spec, t), start=1):
        sel = kind == si
        if sel.any():
            image[sel] = _sphere_color(points[sel], center, radius,
                                       spec.sphere_checker_period)
    depth = (points - camera.center) @ camera.rotation[:, 2]
    mask = (kind > 0).astype(np.uint8)
    return (image.reshape(H, W, 3), depth.reshape(H, W), mask.reshape(H, W))


def gt_flows(spec: SceneSpec, t):
    """Ground-truth flows for frame t against its existing neighbors.

    Returns dict with keys sflow_fw/sflow_bw ([H,W,3]) and oflow_fw/oflow_bw
    ([H,W,2]); missing boundary directions are absent from the dict.
    """
    cam_t = spec.camera(t)
    _, depth, mask = trace_reference(spec, t, cam_t)
    H, W = depth.shape
    uu, vv = np.meshgrid(np.arange(W, dtype=np.float64), np.arange(H, dtype=np.float64))
    # recover the 3-D hit point of every pixel from exact depth
    xc = np.stack([(uu - cam_t.cx) / cam_t.fx * depth,
                   (vv - cam_t.cy) / cam_t.fy * depth, depth], axis=-1)
    pts = xc @ cam_t.rotation.T + cam_t.center

    out = {}
    for name, dt in (("fw", +1), ("bw", -1)):
        tn = t + dt
        if not 0 <= tn < spec.n_frames:
            continue
        delta = spec.trajectory(tn) - spec.trajectory(t)
        sflow = np.where(mask[..., None] > 0, delta, 0.0)
        cam_n = spec.camera(tn)
        uv_n, _, _ = project(pts + sflow, cam_n)
        oflow = uv_n - np.stack([uu, vv], axis=-1)
        out[f"sflow_{name}"] = sflow
        out[f"oflow_{name}"] = oflow
    return out


def generate_dataset(spec: SceneSpec, out_dir):
    """Write manifest + per-frame maps + evaluation targets; deterministic."""
    out = fileio.ensure_dir(out_dir)
    frames = []
    for t in range(spec.n_frames):
        cam = spec.camera(t)
        image, depth, mask = trace_reference(spec, t, cam)
        flows = gt_flows(spec, t)
        rec = {"index": t, "time": t, "pose": cam.pose.tolist(),
               "image": f"frame_{t:03d}.img", "depth": f"depth_{t:03d}.f64",
               "mask": f"mask_{t:03d}.u8"}
        fileio.write_image(out / rec["image"], image)
        fileio.write_map(out / rec["depth"], depth)
        fileio.write_map(out / rec["mask"], mask)
        for key in ("sflow_fw", "sflow_bw", "oflow_fw", "oflow_bw"):
            if key in flows:
                ext = "f64"
                rec[key] = f"{key}_{t:03d}.{ext}"
                fileio.write_map(out / rec[key], flows[key])
            else:
                rec[key] = None
        frames.append(rec)

    cam0 = spec.camera(0)
    eval_time, eval_cam = [], []
    for t in range(spec.n_frames):
        img, _, msk = trace_reference(spec, t, cam0)
        rec = {"time": t, "camera_index": 0,
               "image": f"eval_time_{t:03d}.img", "mask": f"eval_time_mask_{t:03d}.u8"}
        fileio.write_image(out / rec["image"], img)
        fileio.write_map(out / rec["mask"], msk)
        eval_time.append(rec)
    for j in range(spec.n_frames):
        cam = spec.camera(j)
        img, _, msk = trace_reference(spec, 0, cam)
        rec = {"time": 0, "camera_index": j,
               "image": f"eval_cam_{j:03d}.img", "mask": f"eval_cam_mask_{j:03d}.u8"}
        fileio.write_image(out / rec["image"], img)
        fileio.write_map(out / rec["mask"], msk)
        eval_cam.append(rec)

    manifest = {
        "format": "dynrad-scene", "version": 1,
        "width": spec.width, "height": spec.height, "n_frames": spec.n_frames,
        "near": spec.near, "far": spec.far,
        "intrinsics": {"fx": spec.focal, "fy": spec.focal,
                       "cx": (spec.width - 1) / 2.0, "cy": (spec.height - 1) / 2.0},
        "frames": frames,
        "eval_fix_cam_vary_time": eval_time,
        "eval_fix_time_vary_cam": eval_cam,
        "scene_spec": spec.to_json(),
    }
    with open(out / "manifest", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return SceneDataset.from_dir(out)


@dataclass
class SceneDataset:
    """In-memory view of a generated dataset directory."""
    root: Path
    manifest: dict
    cameras: list          # per-frame Camera
    images: np.ndarray     # [n, H, W, 3] float64 in [0, 1]
    depths: np.ndarray     # [n, H, W]
    masks: np.ndarray      # [n, H, W] bool
    sflow_fw: list         # [H, W, 3] or None at the last frame
    sflow_bw: list
    oflow_fw: list         # [H, W, 2] or None
    oflow_bw: list

    @property
    def n_frames(self):
        return self.manifest["n_frames"]

    @property
    def width(self):
        return self.manifest["width"]

    @property
    def height(self):
        return self.manifest["height"]

    def eval_entries(self, protocol):
        key = {"fix-cam-vary-time": "eval_fix_cam_vary_time",
               "fix-time-vary-cam": "eval_fix_time_vary_cam"}.get(protocol)
        if key is None:
            raise ConfigurationError(f"unknown eval protocol {protocol!r}")
        out = []
        for rec in self.manifest[key]:
            cam = self.camera_for_index(rec["camera_index"])
            out.append({"time": rec["time"], "camera": cam,
                        "image": fileio.read_image(self.root / rec["image"]),
                        "mask": fileio.read_map(self.root / rec["mask"]) > 0})
        return out

    def camera_for_index(self, idx):
        return self.cameras[idx]

    @classmethod
    def from_dir(cls, root):
        root = Path(root)
        with open(root / "manifest") as fh:
            manifest = json.load(fh)
        intr = manifest["intrinsics"]
        cameras, images, depths, masks = [], [], [], []
        sf, sb, of, ob = [], [], [], []
        for rec in manifest["frames"]:
            cameras.append(Camera(intr["fx"], intr["fy"], intr["cx"], intr["cy"],
                                  manifest["width"], manifest["height"],
                                  np.asarray(rec["pose"]), manifest["near"],
                                  manifest["far"]))
            images.append(fileio.read_image(root / rec["image"]))
            depths.append(fileio.read_map(root / rec["depth"]))
            masks.append(fileio.read_map(root / rec["mask"]) > 0)
            sf.append(fileio.read_map(root / rec["sflow_fw"]) if rec["sflow_fw"] else None)
            sb.append(fileio.read_map(root / rec["sflow_bw"]) if rec["sflow_bw"] else None)
            of.append(fileio.read_map(root / rec["oflow_fw"]) if rec["oflow_fw"] else None)
            ob.append(fileio.read_map(root / rec["oflow_bw"]) if rec["oflow_bw"] else None)
        return cls(root, manifest, cameras, np.stack(images), np.stack(depths),
                   np.stack(masks), sf, sb, of, ob)
