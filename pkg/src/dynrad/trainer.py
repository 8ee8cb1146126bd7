"""Two-stage optimization, evaluation, and ablation plumbing.

Stage 1 fits the static model on rays outside the dynamic mask (photometric
loss only); stage 2 freezes it and fits the dynamic model on blended renders
with the full objective. Paper-scale schedules are 300K/200K steps; the
desk-scale defaults live in TrainConfig.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import losses, metrics
from . import tensorcore as tc
from .config import TrainConfig
from .errors import StateError, TrainingError
from .geometry import neighbor_frames, ray_directions
from .rendering import (RenderContext, encode_stage_frames, init_stage_params,
                        render_image, render_rays)
from .scenegen import SceneDataset


class Adam:
    """First-order adaptive-moment optimizer with standard defaults."""

    def __init__(self, tensors, beta1=0.9, beta2=0.999, eps=1e-8):
        self.tensors = list(tensors)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(t.data) for t in self.tensors]
        self.v = [np.zeros_like(t.data) for t in self.tensors]
        self.t = 0

    def step(self, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for i, p in enumerate(self.tensors):
            if p.grad is None:
                continue
            g = p.grad
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * (g * g)
            p.data -= lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)


def cosine_lr(step, total, lr0, floor):
    if total <= 0:
        return lr0
    f = 0.5 * (1.0 + np.cos(np.pi * min(step, total) / total))
    return lr0 * (floor + (1.0 - floor) * f)


@dataclass
class EvalReport:
    protocol: str
    per_view: list
    mean_psnr: float
    mean_ssim: float
    mean_psnr_dynamic: float
    mean_ssim_dynamic: float
    mean_blend_inside: float
    mean_blend_outside: float

    def to_json(self):
        return {"protocol": self.protocol, "per_view": self.per_view,
                "mean_psnr": self.mean_psnr, "mean_ssim": self.mean_ssim,
                "mean_psnr_dynamic": self.mean_psnr_dynamic,
                "mean_ssim_dynamic": self.mean_ssim_dynamic,
                "mean_blend_inside": self.mean_blend_inside,
                "mean_blend_outside": self.mean_blend_outside}


def _pick_static_pixels(rng, mask, n, all_fraction):
    """Mostly rays outside the dynamic mask, plus a fraction from anywhere."""
    H, W = mask.shape
    flat_out = np.flatnonzero(~mask.ravel())
    n_any = int(round(n * all_fraction))
    idx = np.concatenate([rng.choice(flat_out, size=n - n_any, replace=True),
                          rng.integers(0, H * W, size=n_any)])
    return idx


def _pixels_to_rays(idx, camera, image):
    W = camera.width
    u = (idx % W).astype(np.float64)
    v = (idx // W).astype(np.float64)
    pix = np.stack([u, v], axis=-1)
    dirs = ray_directions(camera, pix)
    origins = np.broadcast_to(camera.center, dirs.shape)
    targets = image[idx // W, idx % W]
    return pix, origins, dirs, targets


def _context(ds: SceneDataset, store, cfg, featmaps, rng=None):
    return RenderContext(ds.cameras, ds.n_frames, ds.manifest["near"],
                         ds.manifest["far"], store, cfg, featmaps, rng)


class _RunLog:
    def __init__(self, out_dir):
        self.fh = None
        if out_dir is not None:
            self.fh = open(Path(out_dir) / "train_log.jsonl", "a")

    def write(self, **kv):
        if self.fh is not None:
            self.fh.write(json.dumps(kv, sort_keys=True) + "\n")
            self.fh.flush()

    def close(self):
        if self.fh is not None:
            self.fh.close()


def _abort_with_snapshot(store, snapshot, out_dir, stage, reason):
    """Restore + persist the last finite values, then raise."""
    for path, vals in snapshot.items():
        store[path].data[...] = vals
    if out_dir is not None:
        store.save(Path(out_dir) / f"{stage}_last_finite.dynrad")
    raise TrainingError(f"{stage}: {reason}; last finite checkpoint retained")


def _approve_or_abort(store, snapshot, out_dir, stage):
    if not store.all_finite():
        _abort_with_snapshot(store, snapshot, out_dir, stage, "non-finite parameters")


def train_static(dataset: SceneDataset, config: TrainConfig, out_dir=None):
    """Stage 1: encoder + aggregation + filter + static field, L_pho only."""
    tc.set_default_dtype(config.dtype)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    rng_init = np.random.default_rng(config.seed)
    rng_rays = np.random.default_rng(config.seed + 77_001)
    store = tc.ParameterStore(rng_seed=config.seed)
    init_stage_params(store, "static", config, rng_init)
    opt = Adam(store.tensors("static/"))
    log = _RunLog(out_dir)
    snapshot = store.copy_values()
    t0 = time.time()
    for step in range(config.steps_static):
        t = int(rng_rays.integers(dataset.n_frames))
        idx = _pick_static_pixels(rng_rays, dataset.masks[t], config.rays_per_batch,
                                  config.static_all_ray_fraction)
        _, origins, dirs, targets = _pixels_to_rays(idx, dataset.cameras[t],
                                                    dataset.images[t])
        frames = [t] + neighbor_frames(t, dataset.n_frames)
        maps = encode_stage_frames(dataset.images, store, config, "static", frames)
        ctx = _context(dataset, store, config, maps, rng_rays)
        render, _, _ = render_rays(ctx, origins, dirs, t, mode="static",
                                   stratified=True)
        loss = losses.photometric_loss(render.rgb, targets)
        if not np.isfinite(loss.data):
            _abort_with_snapshot(store, snapshot, out_dir, "static", "non-finite loss")
        store.zero_grad()
        loss.backward()
        opt.step(cosine_lr(step, config.steps_static, config.learning_rate,
                           config.lr_floor))
        _approve_or_abort(store, snapshot, out_dir, "static")
        if (step + 1) % config.checkpoint_every == 0:
            snapshot = store.copy_values()
            if out_dir is not None:
                store.save(Path(out_dir) / "static.dynrad")
        if step % config.log_every == 0 or step == config.steps_static - 1:
            log.write(stage="static", step=step, loss=float(loss.data),
                      lr=cosine_lr(step, config.steps_static,
                                   config.learning_rate, config.lr_floor),
                      elapsed=round(time.time() - t0, 3))
    if out_dir is not None:
        store.save(Path(out_dir) / "static.dynrad")
    log.close()
    return store


def train_dynamic(dataset: SceneDataset, static_store, config: TrainConfig,
                  out_dir=None):
    """Stage 2: freeze static, fit dynamic encoder/field/flow head (full loss)."""
    tc.set_default_dtype(config.dtype)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    if isinstance(static_store, (str, Path)):
        static_store = tc.ParameterStore.load(static_store, dtype=config.dtype)
    store = static_store
    static_paths = [p for p in store.paths() if p.startswith("static/")]
    if not static_paths:
        raise StateError("train_dynamic: static checkpoint has no static/* params")
    frozen = {p: store[p].data.copy() for p in static_paths}
    for p in static_paths:
        store[p].requires_grad = False

    rng_init = np.random.default_rng(config.seed + 1)
    rng_rays = np.random.default_rng(config.seed + 77_002)
    if "dynamic/field/in/w" not in store:
        init_stage_params(store, "dynamic", config, rng_init)
    opt = Adam(store.tensors("dynamic/"))
    log = _RunLog(out_dir)
    snapshot = store.copy_values()
    t0 = time.time()
    steps = config.steps_dynamic
    with tc.no_grad():  # static stage is frozen: encode its maps once
        static_maps = encode_stage_frames(dataset.images, store, config, "static",
                                          range(dataset.n_frames))
    for step in range(steps):
        t = int(rng_rays.integers(dataset.n_frames))
        idx = rng_rays.integers(0, dataset.height * dataset.width,
                                size=config.rays_per_batch)
        pix, origins, dirs, targets = _pixels_to_rays(idx, dataset.cameras[t],
                                                      dataset.images[t])
        frames = [t] + neighbor_frames(t, dataset.n_frames)
        maps = dict(static_maps)
        maps.update(encode_stage_frames(dataset.images, store, config, "dynamic", frames))
        ctx = _context(dataset, store, config, maps, rng_rays)
        render, dyn, points = render_rays(ctx, origins, dirs, t, mode="blended",
                                          stratified=True)

        pho = losses.photometric_loss(render.rgb, targets)
        small = losses.scene_flow_small_loss(dyn.s_fw, dyn.s_bw)
        anneal = max(0.0, 1.0 - step / max(steps / 2.0, 1.0))
        prior_depth = dataset.depths[t][idx // dataset.width, idx % dataset.width]
        nb = neighbor_frames(t, dataset.n_frames)
        cam_fw = dataset.cameras[t + 1] if t + 1 in nb else None
        cam_bw = dataset.cameras[t - 1] if t - 1 in nb else None
        pf = dataset.oflow_fw[t]
        pb = dataset.oflow_bw[t]
        prior_fw = pf[idx // dataset.width, idx % dataset.width] if pf is not None else None
        prior_bw = pb[idx // dataset.width, idx % dataset.width] if pb is not None else None
        dd, df = losses.data_prior_loss(
            render, points, (dyn.s_fw, dyn.s_bw), pix, (cam_fw, cam_bw),
            prior_depth, (prior_fw, prior_bw))
        try:
            breakdown = losses.total_loss(pho, small, dd, df, config.w_small,
                                          config.w_depth * anneal,
                                          config.w_flow * anneal)
        except TrainingError as err:
            _abort_with_snapshot(store, snapshot, out_dir, "dynamic", str(err))
        store.zero_grad()
        breakdown.total_tensor.backward()
        opt.step(cosine_lr(step, steps, config.learning_rate, config.lr_floor))
        _approve_or_abort(store, snapshot, out_dir, "dynamic")
        if (step + 1) % config.checkpoint_every == 0:
            snapshot = store.copy_values()
            if out_dir is not None:
                store.save(Path(out_dir) / "full.dynrad")
        if step % config.log_every == 0 or step == steps - 1:
            log.write(stage="dynamic", step=step, loss=breakdown.total,
                      pho=breakdown.pho, small=breakdown.small,
                      data_depth=breakdown.data_depth, data_flow=breakdown.data_flow,
                      anneal=anneal, elapsed=round(time.time() - t0, 3))

    for p in static_paths:  # freezing contract: bit-identical values
        if not np.array_equal(store[p].data, frozen[p]):
            raise TrainingError(f"static parameter {p} changed during dynamic stage")
        store[p].requires_grad = True
    if out_dir is not None:
        store.save(Path(out_dir) / "full.dynrad")
    log.close()
    return store


def evaluate(dataset: SceneDataset, store, config: TrainConfig,
             protocol="fix-cam-vary-time"):
    """Render the held-out protocol views and score PSNR/SSIM (+ breakdowns)."""
    tc.set_default_dtype(config.dtype)
    if isinstance(store, (str, Path)):
        store = tc.ParameterStore.load(store, dtype=config.dtype)
    frames = list(range(dataset.n_frames))
    with tc.no_grad():
        maps = encode_stage_frames(dataset.images, store, config, "static", frames)
        maps.update(encode_stage_frames(dataset.images, store, config, "dynamic", frames))
    ctx = _context(dataset, store, config, maps, rng=None)
    per_view = []
    blend_in, blend_out = [], []
    for entry in dataset.eval_entries(protocol):
        out = render_image(ctx, entry["camera"], entry["time"], mode="blended",
                           with_blend=True)
        gt, mask = entry["image"], entry["mask"]
        p_full = metrics.psnr(out["rgb"], gt)
        p_dyn = metrics.psnr_masked(out["rgb"], gt, mask)
        s_full, smap = metrics.ssim(out["rgb"], gt)
        s_dyn = metrics.ssim_masked_mean(smap, mask)
        if mask.any():
            blend_in.append(float(out["blend"][mask].mean()))
        if (~mask).any():
            blend_out.append(float(out["blend"][~mask].mean()))
        per_view.append({"time": int(entry["time"]), "psnr": p_full, "ssim": s_full,
                         "psnr_dynamic": p_dyn, "ssim_dynamic": s_dyn,
                         "mask_pixels": int(mask.sum())})
    return EvalReport(
        protocol, per_view,
        float(np.mean([v["psnr"] for v in per_view])),
        float(np.mean([v["ssim"] for v in per_view])),
        float(np.mean([v["psnr_dynamic"] for v in per_view])),
        float(np.mean([v["ssim_dynamic"] for v in per_view])),
        float(np.mean(blend_in)) if blend_in else 0.0,
        float(np.mean(blend_out)) if blend_out else 0.0)


def train_full(dataset, config, out_dir=None):
    """Both stages back to back; returns the full parameter store."""
    static = train_static(dataset, config, out_dir)
    return train_dynamic(dataset, static, config, out_dir)
