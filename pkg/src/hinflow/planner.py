"""Flow-prediction planner: image patches, query points, and a task token
attend together; per-point heads emit incremental offsets whose cumulative
sum (residual on the current position) forms the predicted trajectory.

The output head is zero-initialized, so an untrained planner predicts a
stationary flow: every row equals the query position. Training minimizes
MSE on image-normalized coordinates with coordinate-jitter and patch-mask
augmentation.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import nncore as nn
from .errors import DimensionError, TrainingError
from .nncore import Tape, Tensor

log = logging.getLogger("hinflow.planner")


@dataclass
class PlannerConfig:
    image_size: int = 32
    patch: int = 8
    width: int = 64
    blocks: int = 2
    block_mlp: bool = False
    head_mlp: bool = True
    head_mlp_width: int = 64
    fourier_freqs: int = 4
    k_points: int = 32
    h_out: int = 16
    n_tasks: int = 3
    batch: int = 64
    train_steps: int = 3000
    lr: float = 3e-3
    lr_final_frac: float = 0.05
    ema_decay: float = 0.0  # optional Polyak averaging of the final weights; 0 = off
    mask_ratio: float = 0.5
    mask_batch_frac: float = 0.5  # fraction of each batch the mask applies to
    coord_jitter_px: float = 0.5
    flip_augment: bool = True
    resample: int = 4

    def to_dict(self):
        return dict(self.__dict__)

    @property
    def n_patches(self):
        side = self.image_size // self.patch
        return side * side

    @property
    def point_dim(self):
        return 2 + 4 * self.fourier_freqs


def fourier_features(coords_norm: np.ndarray, freqs: int) -> np.ndarray:
    """Lift normalized 2-D coordinates with sin/cos at octave frequencies.

    (..., 2) -> (..., 2 + 4*freqs); raw coordinates stay in front.
    """
    if freqs == 0:
        return coords_norm
    parts = [coords_norm]
    for k in range(freqs):
        ang = coords_norm * (2.0 * np.pi * (2.0**k))
        parts.append(np.sin(ang))
        parts.append(np.cos(ang))
    return np.concatenate(parts, axis=-1)


def extract_patches(images: np.ndarray, patch: int) -> np.ndarray:
    """(B, H, W, C) -> (B, n_patches, patch*patch*C), row-major patch order."""
    b, h, w, c = images.shape
    ph, pw = h // patch, w // patch
    x = images.reshape(b, ph, patch, pw, patch, c)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(x).reshape(b, ph * pw, patch * patch * c)


class _PatchCache:
    """Pre-patched frames of an AnnotatedSet, uint8, keyed by sample index."""

    def __init__(self, data, patch):
        self.patch = patch
        self.frames = {}
        for e, ep in enumerate(data.episodes):
            pats = extract_patches(ep.frames.astype(np.float64), patch).astype(np.uint8)
            self.frames[e] = pats
        self.data = data

    def batch(self, indices) -> np.ndarray:
        rows = [self.frames[self.data.ep_idx[i]][self.data.t_idx[i]] for i in indices]
        return np.stack(rows).astype(np.float64)


def flip_permutations(image_size: int, patch: int):
    """Index permutations applying image mirror flips to patched frames.

    Returns {axis: (patch_perm, within_perm)} for axis "x" (columns) and
    "y" (rows), acting on (n_patches, patch*patch*3) arrays.
    """
    side = image_size // patch
    grid = np.arange(side * side).reshape(side, side)
    within = np.arange(patch * patch * 3).reshape(patch, patch, 3)
    return {
        "x": (grid[:, ::-1].reshape(-1), within[:, ::-1, :].reshape(-1)),
        "y": (grid[::-1, :].reshape(-1), within[::-1, :, :].reshape(-1)),
    }


def apply_flips(patches, points_px, flows_px, flip_x, flip_y, perms, image_size):
    """Mirror a batch in place-ish; returns flipped (patches, points, flows).

    flip_x / flip_y are boolean masks over the batch. The scene dynamics are
    mirror-symmetric, so flipping the image and all coordinates together is
    an exact label-preserving augmentation.
    """
    patches = patches.copy()
    points_px = points_px.copy()
    flows_px = flows_px.copy()
    for axis, mask in (("x", flip_x), ("y", flip_y)):
        if not mask.any():
            continue
        pperm, wperm = perms[axis]
        sub = patches[mask]
        patches[mask] = sub[:, pperm][:, :, wperm]
        coord = 0 if axis == "x" else 1
        points_px[mask, :, coord] = image_size - points_px[mask, :, coord]
        flows_px[mask, :, :, coord] = image_size - flows_px[mask, :, :, coord]
    return patches, points_px, flows_px


class PlannerModel:
    KIND = "planner"

    def __init__(self, cfg: PlannerConfig, rng):
        self.cfg = cfg
        w = cfg.width
        pdim = cfg.patch * cfg.patch * 3
        p = {}
        p["patch.w"], p["patch.b"] = nn.linear_params(rng, pdim, w)
        p["patch.pos"] = nn.uniform_param(rng, w, (1, cfg.n_patches, w))
        p["point.w"], p["point.b"] = nn.linear_params(rng, cfg.point_dim, w)
        p["task.table"] = nn.uniform_param(rng, w, (cfg.n_tasks, w))
        for i in range(cfg.blocks):
            for name, t in nn.attn_block_params(rng, w, with_mlp=cfg.block_mlp).items():
                p[f"blk{i}.{name}"] = t
        p["out.ln.g"] = nn.ones_param((w,))
        p["out.ln.b"] = nn.zeros_param((w,))
        if cfg.head_mlp:
            p["pre.w"], p["pre.b"] = nn.linear_params(rng, w, cfg.head_mlp_width)
            p["head.w"], p["head.b"] = nn.linear_params(rng, cfg.head_mlp_width, cfg.h_out * 2, zero=True)
        else:
            p["head.w"], p["head.b"] = nn.linear_params(rng, w, cfg.h_out * 2, zero=True)
        self._params = p

    def params(self) -> dict:
        return self._params

    @classmethod
    def from_checkpoint(cls, params: dict, hyper: dict) -> "PlannerModel":
        model = cls.__new__(cls)
        model.cfg = PlannerConfig(**hyper)
        model._params = params
        return model

    def forward_norm(self, images, points_norm, task_ids, mask=None, patches=None):
        """Predicted normalized positions for rows 1..h_out, (B, K, h_out, 2).

        `images` (B, H, W, 3) and `points_norm` (B, K, 2) are treated as
        constants; `mask` (B, n_patches, 1) zeroes patch tokens when given.
        Pre-extracted `patches` (B, n_patches, pdim) may replace `images`.
        """
        cfg = self.cfg
        p = self._params
        b, k = points_norm.shape[0], points_norm.shape[1]
        if k != cfg.k_points:
            raise DimensionError(f"expected {cfg.k_points} query points, got {k}")
        if patches is None:
            if images.shape[1] != cfg.image_size or images.shape[2] != cfg.image_size:
                raise DimensionError(
                    f"expected {cfg.image_size}x{cfg.image_size} images, got {images.shape[1:3]}"
                )
            patches = extract_patches(images, cfg.patch)
        w = cfg.width
        npatch = cfg.n_patches
        flat_p = patches.reshape(b * npatch, -1)
        ptok = nn.gelu(nn.linear(Tensor(flat_p), p["patch.w"], p["patch.b"]))
        ptok = nn.reshape(ptok, (b, npatch, w))
        if mask is not None:
            # mask strips content but keeps the positional code, so the
            # model can still tell which locations were hidden
            ptok = nn.mul(ptok, mask)
        ptok = nn.add(ptok, p["patch.pos"])
        feats = fourier_features(points_norm.reshape(b * k, 2), cfg.fourier_freqs)
        qtok = nn.gelu(nn.linear(Tensor(feats), p["point.w"], p["point.b"]))
        qtok = nn.reshape(qtok, (b, k, w))
        ids = np.asarray(task_ids)
        if ids.min() < 0 or ids.max() >= cfg.n_tasks:
            raise DimensionError(f"task id out of range [0, {cfg.n_tasks}): {ids}")
        ttok = nn.reshape(nn.take_rows(p["task.table"], ids), (b, 1, w))
        x = nn.concat([ptok, qtok, ttok], axis=1)
        for i in range(cfg.blocks):
            x = nn.attn_block(x, p, f"blk{i}")
        point_out = nn.narrow(x, 1, npatch, k)
        h = nn.layer_norm(point_out, p["out.ln.g"], p["out.ln.b"])
        h = nn.reshape(h, (b * k, w))
        if cfg.head_mlp:
            h = nn.gelu(nn.linear(h, p["pre.w"], p["pre.b"]))
        offsets = nn.linear(h, p["head.w"], p["head.b"])
        offsets = nn.reshape(offsets, (b, k, cfg.h_out, 2))
        path = nn.cumsum(offsets, axis=2)
        return nn.add(path, points_norm[:, :, None, :])

    def predict_flow(self, image: np.ndarray, points_px: np.ndarray, task_id: int) -> np.ndarray:
        """Flow window (K, h_out+1, 2) in pixels; row 0 is `points_px` verbatim."""
        cfg = self.cfg
        pts = np.asarray(points_px, dtype=float)
        if pts.shape != (cfg.k_points, 2):
            raise DimensionError(f"expected points ({cfg.k_points}, 2), got {pts.shape}")
        norm = self.forward_norm(
            image[None].astype(np.float64), (pts / cfg.image_size)[None], [task_id]
        ).data[0]
        window = np.empty((cfg.k_points, cfg.h_out + 1, 2))
        window[:, 0, :] = pts
        window[:, 1:, :] = np.clip(norm * cfg.image_size, 0.0, float(cfg.image_size))
        return window


def batch_loss(model: PlannerModel, images, points_norm, targets_norm, task_ids,
               mask=None, patches=None):
    pred = model.forward_norm(images, points_norm, task_ids, mask=mask, patches=patches)
    return nn.mse(pred, Tensor(targets_norm))


def initial_loss_oracle(points_px, flows_px, image_size) -> float:
    """Loss of the zero-initialized planner: mean squared normalized displacement."""
    p = np.asarray(points_px) / image_size
    f = np.asarray(flows_px) / image_size
    return float(np.mean((f - p[:, :, None, :]) ** 2))


def train_planner(model: PlannerModel, data, steps=None, seed=0, lr=None,
                  log_every=100, heldout=None):
    """Train on an AnnotatedSet; returns the loss curve [(step, loss), ...]."""
    if len(data) == 0:
        raise TrainingError("annotated dataset is empty")
    cfg = model.cfg
    steps = cfg.train_steps if steps is None else steps
    lr = cfg.lr if lr is None else lr
    opt = nn.Adam(model.params(), lr=lr)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed) & 0x7FFFFFFF, 101]))
    cache = _PatchCache(data, cfg.patch)
    perms = flip_permutations(cfg.image_size, cfg.patch)
    shadow = None
    if cfg.ema_decay > 0:
        shadow = {name: p.data.copy() for name, p in model.params().items()}
    curve = []
    t0 = time.perf_counter()
    for step in range(steps):
        # cosine decay squeezes the tail error within the fixed step budget
        frac = 0.5 * (1.0 + np.cos(np.pi * step / max(1, steps)))
        opt.state.lr = lr * (cfg.lr_final_frac + (1.0 - cfg.lr_final_frac) * frac)
        idx = rng.integers(0, len(data), size=cfg.batch)
        patches = cache.batch(idx)
        pts = data.points[idx].copy()
        flows = data.flows[idx].copy()
        if cfg.flip_augment:
            flip_x = rng.uniform(size=len(idx)) < 0.5
            flip_y = rng.uniform(size=len(idx)) < 0.5
            patches, pts, flows = apply_flips(
                patches, pts, flows, flip_x, flip_y, perms, cfg.image_size
            )
        if cfg.coord_jitter_px > 0:
            shift = rng.uniform(-cfg.coord_jitter_px, cfg.coord_jitter_px, size=(len(idx), 1, 2))
            pts += shift
            flows += shift[:, :, None, :]
        mask = None
        if cfg.mask_ratio > 0:
            keep = rng.uniform(size=(len(idx), cfg.n_patches, 1)) >= cfg.mask_ratio
            mask = keep.astype(np.float64)
            if cfg.mask_batch_frac < 1.0:
                unmasked = rng.uniform(size=(len(idx), 1, 1)) >= cfg.mask_batch_frac
                np.maximum(mask, unmasked.astype(np.float64), out=mask)
        with Tape() as tape:
            loss = batch_loss(
                model,
                None,
                pts / cfg.image_size,
                flows / cfg.image_size,
                data.task_ids[idx],
                mask=mask,
                patches=patches,
            )
        grads = tape.gradients(loss, model.params())
        opt.step(grads)
        if shadow is not None:
            d = cfg.ema_decay
            for name, p in model.params().items():
                s = shadow[name]
                s *= d
                s += (1.0 - d) * p.data
        if step % log_every == 0 or step == steps - 1:
            curve.append((step, float(loss.data)))
            log.debug("planner step %d loss %.6f (%.1fs)", step, float(loss.data), time.perf_counter() - t0)
    if shadow is not None:
        for name, p in model.params().items():
            p.data[...] = shadow[name]
    return curve


def endpoint_error_px(model: PlannerModel, data, indices=None) -> float:
    """Mean Euclidean error of the final predicted row, in pixels."""
    cfg = model.cfg
    idx = np.arange(len(data)) if indices is None else np.asarray(indices)
    errs = []
    for start in range(0, len(idx), cfg.batch):
        part = idx[start:start + cfg.batch]
        images = np.stack([data.image(i) for i in part])
        pts = data.points[part]
        pred = model.forward_norm(images, pts / cfg.image_size, data.task_ids[part]).data
        pred_px = pred * cfg.image_size
        err = np.linalg.norm(pred_px[:, :, -1, :] - data.flows[part][:, :, -1, :], axis=-1)
        errs.append(err.reshape(-1))
    return float(np.concatenate(errs).mean())


def perturb_flow(flow: np.ndarray, sigma_px: float, rng, image_size=32) -> np.ndarray:
    """Corrupt a flow window with a linearly ramped per-point Gaussian shift.

    Each point draws one (dx, dy) ~ N(0, sigma); row i moves by (i/H)(dx, dy),
    so row 0 is untouched and the trajectory gains a coherent drift.
    """
    if sigma_px < 0:
        raise DimensionError(f"perturbation sigma must be >= 0, got {sigma_px}")
    out = np.array(flow, dtype=float, copy=True)
    if sigma_px == 0.0:
        return out
    k, rows, _ = out.shape
    h = rows - 1
    delta = rng.normal(0.0, sigma_px, size=(k, 1, 2))
    ramp = (np.arange(rows) / h).reshape(1, rows, 1)
    out += delta * ramp
    out[:, 1:, :] = np.clip(out[:, 1:, :], 0.0, float(image_size))
    out[:, 0, :] = flow[:, 0, :]
    return out
