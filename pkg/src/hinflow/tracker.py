"""Exact oracle point tracker and task-centric query-point sampler.

Query points are anchored to scene entities (gripper, task object, goal) by
a body-frame offset, or fixed in image space. Projection through recorded
states yields exact pixel trajectories; a flow window is the (H+1)-row
slice starting at the current step, padded by repeating the final observed
position past the episode end.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, SamplingError
from .sim.env import PROFILES, SceneState

# default per-task split of the K=32 query points across entities
DEFAULT_POINT_COUNTS = {
    "place_disc": {"gripper": 16, "object0": 16},
    "push_box": {"gripper": 12, "object0": 12, "goal": 8},
    "place_three": {"gripper": 8, "object0": 8, "object1": 8, "object2": 8},
}


@dataclass(frozen=True)
class QueryPoint:
    anchor: str  # "gripper" | "object" | "goal" | "image"
    index: int  # object index for anchor == "object", else 0
    offset: tuple  # body-frame (ox, oy); pixel (u, v) for image-fixed points
    pixel: tuple  # pixel position at sampling time


def _sample_in_disc(rng, radius):
    r = radius * math.sqrt(rng.uniform())
    phi = rng.uniform(0.0, 2.0 * math.pi)
    return r * math.cos(phi), r * math.sin(phi)


def _sample_in_box(rng, hx, hy):
    return rng.uniform(-hx, hx), rng.uniform(-hy, hy)


def _entity_shape(state: SceneState, entity: str):
    if entity == "gripper":
        p = PROFILES[state.profile]
        if p.shape == "disc":
            return "disc", (p.size,)
        return "box", (p.size, p.size)
    if entity == "goal":
        return "disc", (state.goal.radius,)
    if entity.startswith("object"):
        idx = int(entity[len("object"):] or 0)
        if idx >= len(state.objects):
            raise SamplingError(f"entity {entity!r} not present (scene has {len(state.objects)} objects)")
        o = state.objects[idx]
        return o.shape, o.size
    raise SamplingError(f"unknown entity {entity!r}")


def sample_task_points(state: SceneState, rng, counts: dict, image_size=32):
    """Sample query points uniformly inside each entity's shape."""
    points = []
    for entity in sorted(counts):
        n = counts[entity]
        shape, size = _entity_shape(state, entity)
        if entity == "gripper":
            anchor, idx = "gripper", 0
        elif entity == "goal":
            anchor, idx = "goal", 0
        else:
            anchor, idx = "object", int(entity[len("object"):] or 0)
        for _ in range(n):
            if shape == "disc":
                off = _sample_in_disc(rng, size[0])
            else:
                off = _sample_in_box(rng, size[0], size[1])
            points.append(QueryPoint(anchor, idx, off, (0.0, 0.0)))
    if not points:
        raise SamplingError("point sampling produced an empty set")
    pix = project(state, points, image_size)
    return [
        QueryPoint(p.anchor, p.index, p.offset, (float(u), float(v)))
        for p, (u, v) in zip(points, pix)
    ]


def sample_grid_points(k_side: int, image_size=32, total=None):
    """Image-fixed points on a regular k_side x k_side lattice.

    With `total` given, the row-major lattice is trimmed or cyclically
    padded to exactly that many points (the grid-query baseline uses 32).
    """
    if k_side < 1 or k_side * k_side > 64:
        raise SamplingError(f"grid side {k_side} out of range (k_side^2 <= 64)")
    coords = (np.arange(k_side) + 0.5) * (image_size / k_side)
    pts = [
        QueryPoint("image", 0, (float(u), float(v)), (float(u), float(v)))
        for v in coords
        for u in coords
    ]
    if total is not None:
        while len(pts) < total:
            pts.extend(pts[: total - len(pts)])
        pts = pts[:total]
    return pts


def project(state: SceneState, points, image_size=32) -> np.ndarray:
    """Current pixel positions (K, 2) of `points` in `state`.

    World position is anchor pose applied to the offset (rotation then
    translation); pixels are world * image size. Out-of-image coordinates
    are not clamped here.
    """
    out = np.empty((len(points), 2))
    for i, p in enumerate(points):
        if p.anchor == "image":
            out[i] = p.offset
            continue
        ox, oy = p.offset
        if p.anchor == "gripper":
            cx, cy = state.gripper
        elif p.anchor == "goal":
            cx, cy = state.goal.x, state.goal.y
        else:
            obj = state.objects[p.index]
            cx, cy = obj.x, obj.y
            if obj.theta:
                c, s = math.cos(obj.theta), math.sin(obj.theta)
                ox, oy = c * ox - s * oy, s * ox + c * oy
        out[i, 0] = (cx + ox) * image_size
        out[i, 1] = (cy + oy) * image_size
    return out


def pose_arrays(states):
    """Per-step pose arrays for vectorized tracking.

    Returns (gripper (T, 2), objects (T, n_obj, 3), goal (2,)).
    """
    t_len = len(states)
    gripper = np.empty((t_len, 2))
    n_obj = len(states[0].objects)
    objects = np.empty((t_len, n_obj, 3))
    for t, st in enumerate(states):
        gripper[t] = st.gripper
        for j, o in enumerate(st.objects):
            objects[t, j, 0] = o.x
            objects[t, j, 1] = o.y
            objects[t, j, 2] = o.theta
    goal = np.array([states[0].goal.x, states[0].goal.y])
    return gripper, objects, goal


def track_arrays(poses, points, image_size=32, t0=0, t1=None) -> np.ndarray:
    """Trajectories (K, T, 2) over steps [t0, t1) of precomputed pose arrays."""
    gripper, objects, goal = poses
    t1 = gripper.shape[0] if t1 is None else t1
    steps = t1 - t0
    k = len(points)
    offs = np.array([p.offset for p in points])  # (K, 2)
    centers = np.zeros((steps, k, 2))
    roff = np.tile(offs, (steps, 1, 1))
    fixed = np.zeros(k, dtype=bool)
    for i, p in enumerate(points):
        if p.anchor == "gripper":
            centers[:, i, :] = gripper[t0:t1]
        elif p.anchor == "goal":
            centers[:, i, :] = goal
        elif p.anchor == "image":
            fixed[i] = True
        else:
            j = p.index
            centers[:, i, :] = objects[t0:t1, j, :2]
            th = objects[t0:t1, j, 2]
            if np.any(th):
                c, s = np.cos(th), np.sin(th)
                ox, oy = p.offset
                roff[:, i, 0] = c * ox - s * oy
                roff[:, i, 1] = s * ox + c * oy
    traj = (centers + roff) * float(image_size)
    if fixed.any():
        traj[:, fixed, :] = offs[fixed]
    return np.ascontiguousarray(traj.transpose(1, 0, 2))


def track_episode(states, points, image_size=32) -> np.ndarray:
    """Exact trajectories (K, T, 2) of `points` through recorded states."""
    return track_arrays(pose_arrays(states), points, image_size)


def make_flow_window(trajectory: np.ndarray, t: int, horizon: int, image_size=32) -> np.ndarray:
    """Rows [t, t+horizon] of the trajectory as a (K, horizon+1, 2) window.

    Past the final observed position the last row repeats (a stationary
    goal near the episode end); coordinates are clamped to the image square.
    """
    if horizon < 1:
        raise DimensionError(f"flow horizon must be >= 1, got {horizon}")
    n = trajectory.shape[1]
    if not 0 <= t < n:
        raise DimensionError(f"window start {t} outside trajectory of length {n}")
    idx = np.minimum(np.arange(t, t + horizon + 1), n - 1)
    window = trajectory[:, idx, :].copy()
    np.clip(window, 0.0, float(image_size), out=window)
    return window
