"""Deterministic planar manipulation environment.

World coordinates live in the unit square; the gripper is a point agent
with a rendered footprint, objects are discs or axis-aligned boxes, and
physics is purely kinematic: grasp attachment, rigid carry, and push-out
penetration resolution. All stochasticity comes from the seeded reset.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from ..errors import ConfigError, SimError

TASK_IDS = {"place_disc": 0, "push_box": 1, "place_three": 2}

GRIPPER_START = (0.5, 0.1)


@dataclass(frozen=True)
class EmbodimentProfile:
    id: str
    gain: float = 0.04
    shape: str = "disc"  # rendered footprint: "disc" or "box" (square)
    size: float = 0.03
    grasp_radius: float = 0.05

    def __post_init__(self):
        if self.gain <= 0:
            raise ConfigError(f"profile {self.id}: gain must be positive")
        if self.grasp_radius <= self.size * 0.5:
            raise ConfigError(f"profile {self.id}: grasp radius too small for gripper")


PROFILES = {
    "A": EmbodimentProfile("A", gain=0.04, shape="disc", size=0.03),
    "B": EmbodimentProfile("B", gain=0.05, shape="box", size=0.03),
}


@dataclass(frozen=True)
class SceneObject:
    x: float
    y: float
    theta: float
    shape: str  # "disc" or "box"
    size: tuple  # (radius,) or (half_x, half_y)
    graspable: bool = True

    @property
    def center(self):
        return (self.x, self.y)

    @property
    def reach(self) -> float:
        """Circumscribing radius, used for placement separation."""
        if self.shape == "disc":
            return self.size[0]
        return math.hypot(self.size[0], self.size[1])


@dataclass(frozen=True)
class GoalRegion:
    x: float
    y: float
    radius: float


@dataclass(frozen=True)
class SceneState:
    gripper: tuple  # (x, y)
    grip_closed: bool
    attached: int | None  # index into objects
    attach_offset: tuple | None  # object center minus gripper, frozen at grasp
    objects: tuple  # task-relevant SceneObjects
    distractors: tuple  # non-graspable scenery SceneObjects
    goal: GoalRegion
    profile: str
    step: int


@dataclass(frozen=True)
class Action:
    dx: float
    dy: float
    grip: float

    @staticmethod
    def clamp(raw) -> "Action":
        a = np.clip(np.asarray(raw, dtype=float).reshape(3), -1.0, 1.0)
        return Action(float(a[0]), float(a[1]), float(a[2]))


@dataclass(frozen=True)
class Observation:
    image: np.ndarray  # (H, W, 3) float64 in [0, 1]
    proprio: np.ndarray  # (gripper x, gripper y, grip flag)


@dataclass(frozen=True)
class TaskSpec:
    name: str
    horizon: int
    object_specs: tuple  # ((shape, size), ...) for task objects
    goal_radius: float
    image_size: int = 32
    n_distractors: int = 0
    embodiment: str = "A"
    bounds: tuple = ((0.2, 0.8), (0.3, 0.8))
    min_goal_separation: float = 0.25

    def __post_init__(self):
        if self.horizon <= 0:
            raise ConfigError("horizon must be positive")
        (x0, x1), (y0, y1) = self.bounds
        if not (0.1 <= x0 < x1 <= 0.9 and 0.1 <= y0 < y1 <= 0.9):
            raise ConfigError(f"randomization bounds {self.bounds} must lie inside [0.1, 0.9]^2")
        if self.embodiment not in PROFILES:
            raise ConfigError(f"unknown embodiment profile {self.embodiment!r}")
        if self.name not in TASK_IDS:
            raise ConfigError(f"unknown task {self.name!r}")

    @property
    def task_id(self) -> int:
        return TASK_IDS[self.name]


_TASK_DEFAULTS = {
    "place_disc": dict(
        horizon=60,
        object_specs=(("disc", (0.04,)),),
        goal_radius=0.08,
    ),
    "push_box": dict(
        horizon=80,
        object_specs=(("box", (0.045, 0.045)),),
        goal_radius=0.08,
    ),
    "place_three": dict(
        horizon=150,
        object_specs=(("disc", (0.035,)), ("disc", (0.035,)), ("disc", (0.035,))),
        goal_radius=0.12,
        min_goal_separation=0.20,
    ),
}

# place_disc with the disc swapped for a box of a different size
NOVEL_OBJECT_SPECS = (("box", (0.05, 0.03)),)


def make_task(name, novel_object=False, **overrides) -> TaskSpec:
    if name not in _TASK_DEFAULTS:
        raise ConfigError(f"unknown task {name!r} (choose from {sorted(_TASK_DEFAULTS)})")
    kw = dict(_TASK_DEFAULTS[name])
    if novel_object:
        if name != "place_disc":
            raise ConfigError("novel_object variant exists only for place_disc")
        kw["object_specs"] = NOVEL_OBJECT_SPECS
    kw.update(overrides)
    return TaskSpec(name=name, **kw)


# ---------------------------------------------------------------------------
# geometry helpers


def _radius_along(shape, size, theta, ux, uy) -> float:
    """Distance from shape center to its boundary along unit direction (ux, uy)."""
    if shape == "disc":
        return size[0]
    if theta:
        c, s = math.cos(-theta), math.sin(-theta)
        ux, uy = c * ux - s * uy, s * ux + c * uy
    tx = size[0] / abs(ux) if abs(ux) > 1e-12 else math.inf
    ty = size[1] / abs(uy) if abs(uy) > 1e-12 else math.inf
    return min(tx, ty)


def contact_distance(profile: EmbodimentProfile, obj: SceneObject, ux, uy) -> float:
    """Center separation at which gripper and object just touch along (ux, uy)."""
    g = _radius_along(profile.shape, (profile.size, profile.size), 0.0, ux, uy)
    o = _radius_along(obj.shape, obj.size, obj.theta, ux, uy)
    return g + o


def resolve_push(gripper, profile: EmbodimentProfile, obj: SceneObject) -> SceneObject:
    """Translate a penetrating object out to contact distance, clamped to bounds."""
    dx = obj.x - gripper[0]
    dy = obj.y - gripper[1]
    dist = math.hypot(dx, dy)
    if dist < 1e-12:
        ux, uy = 1.0, 0.0
    else:
        ux, uy = dx / dist, dy / dist
    contact = contact_distance(profile, obj, ux, uy)
    if dist >= contact - 1e-12:
        return obj
    nx = min(1.0, max(0.0, gripper[0] + ux * contact))
    ny = min(1.0, max(0.0, gripper[1] + uy * contact))
    return replace(obj, x=nx, y=ny)


# ---------------------------------------------------------------------------
# reset


def _separated(ax, ay, bx, by, min_dist):
    return math.hypot(ax - bx, ay - by) >= min_dist


def reset(task: TaskSpec, seed: int):
    """Sample a fresh scene; deterministic per (task, seed)."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed) & 0x7FFFFFFF, task.task_id]))
    (x0, x1), (y0, y1) = task.bounds
    for _ in range(100):
        gx, gy = rng.uniform(x0, x1), rng.uniform(y0, y1)
        goal = GoalRegion(gx, gy, task.goal_radius)
        objects = []
        for shape, size in task.object_specs:
            objects.append(
                SceneObject(rng.uniform(x0, x1), rng.uniform(y0, y1), 0.0, shape, tuple(size))
            )
        distractors = []
        for j in range(task.n_distractors):
            shape, size = ("disc", (0.025,)) if j % 2 == 0 else ("box", (0.03, 0.02))
            distractors.append(
                SceneObject(
                    rng.uniform(x0, x1), rng.uniform(y0, y1), 0.0, shape, size, graspable=False
                )
            )
        ok = True
        for i, o in enumerate(objects):
            # min_goal_separation controls task difficulty; small values let
            # scenes start with the object at (or even inside) the goal
            sep = max(o.reach + 0.02, task.min_goal_separation)
            if not _separated(o.x, o.y, goal.x, goal.y, sep):
                ok = False
            if not _separated(o.x, o.y, *GRIPPER_START, 0.12):
                ok = False
            for p in objects[:i]:
                if not _separated(o.x, o.y, p.x, p.y, o.reach + p.reach + 0.03):
                    ok = False
        for j, d in enumerate(distractors):
            if not _separated(d.x, d.y, goal.x, goal.y, goal.radius + d.reach + 0.02):
                ok = False
            if not _separated(d.x, d.y, *GRIPPER_START, 0.1):
                ok = False
            for o in objects:
                if not _separated(d.x, d.y, o.x, o.y, d.reach + o.reach + 0.03):
                    ok = False
            for p in distractors[:j]:
                if not _separated(d.x, d.y, p.x, p.y, d.reach + p.reach + 0.02):
                    ok = False
        if not ok:
            continue
        state = SceneState(
            gripper=GRIPPER_START,
            grip_closed=False,
            attached=None,
            attach_offset=None,
            objects=tuple(objects),
            distractors=tuple(distractors),
            goal=goal,
            profile=task.embodiment,
            step=0,
        )
        return state, observe(state, task.image_size)
    raise SimError(f"could not sample a non-overlapping scene for {task.name} (seed {seed})")


# ---------------------------------------------------------------------------
# step


def step(state: SceneState, action, image_size=None):
    """Advance one tick; returns (new state, observation).

    Order: move gripper (attached object rides along), update the grip flag
    with hysteresis, release/attach, then push non-attached penetrating
    objects out to contact distance.
    """
    act = action if isinstance(action, Action) else Action.clamp(action)
    profile = PROFILES[state.profile]
    gx, gy = state.gripper
    nx = gx + profile.gain * act.dx
    ny = gy + profile.gain * act.dy
    lo_x, hi_x, lo_y, hi_y = 0.0, 1.0, 0.0, 1.0
    if state.attached is not None:
        ox, oy = state.attach_offset
        lo_x, hi_x = max(lo_x, -ox), min(hi_x, 1.0 - ox)
        lo_y, hi_y = max(lo_y, -oy), min(hi_y, 1.0 - oy)
    nx = min(hi_x, max(lo_x, nx))
    ny = min(hi_y, max(lo_y, ny))

    closed = state.grip_closed
    if act.grip > 0.5:
        closed = True
    elif act.grip <= -0.5:
        closed = False

    attached = state.attached
    offset = state.attach_offset
    objects = list(state.objects)
    if attached is not None:
        if closed:
            obj = objects[attached]
            objects[attached] = replace(obj, x=nx + offset[0], y=ny + offset[1])
        else:
            attached, offset = None, None
    if closed and attached is None:
        best, best_d = None, profile.grasp_radius
        for i, o in enumerate(objects):
            if not o.graspable:
                continue
            d = math.hypot(o.x - nx, o.y - ny)
            if d <= best_d:
                best, best_d = i, d
        if best is not None:
            attached = best
            offset = (objects[best].x - nx, objects[best].y - ny)

    gripper = (nx, ny)
    for i, o in enumerate(objects):
        if i == attached:
            continue
        objects[i] = resolve_push(gripper, profile, o)
    distractors = tuple(resolve_push(gripper, profile, d) for d in state.distractors)

    new_state = SceneState(
        gripper=gripper,
        grip_closed=closed,
        attached=attached,
        attach_offset=offset,
        objects=tuple(objects),
        distractors=distractors,
        goal=state.goal,
        profile=state.profile,
        step=state.step + 1,
    )
    return new_state, observe(new_state, image_size or 32)


# ---------------------------------------------------------------------------
# rendering

_GRIDS: dict = {}


def _grids(size):
    got = _GRIDS.get(size)
    if got is None:
        centers = (np.arange(size) + 0.5) / size
        X, Y = np.meshgrid(centers, centers)  # X[v, u] = (u+.5)/W, Y[v, u] = (v+.5)/H
        got = _GRIDS[size] = (X, Y)
    return got


def _paint(channel, X, Y, shape, size, cx, cy, theta=0.0):
    dx = X - cx
    dy = Y - cy
    if shape == "disc":
        mask = dx * dx + dy * dy <= size[0] * size[0]
    else:
        if theta:
            c, s = math.cos(-theta), math.sin(-theta)
            dx, dy = c * dx - s * dy, s * dx + c * dy
        mask = (np.abs(dx) <= size[0]) & (np.abs(dy) <= size[1])
    np.maximum(channel, mask.astype(np.float64), out=channel)


def render(state: SceneState, image_size=32) -> np.ndarray:
    """Channel-coded binary raster: 0 gripper, 1 task objects, 2 goal+distractors."""
    X, Y = _grids(image_size)
    img = np.zeros((image_size, image_size, 3))
    profile = PROFILES[state.profile]
    _paint(img[:, :, 0], X, Y, profile.shape, (profile.size, profile.size), *state.gripper)
    for o in state.objects:
        _paint(img[:, :, 1], X, Y, o.shape, o.size, o.x, o.y, o.theta)
    _paint(img[:, :, 2], X, Y, "disc", (state.goal.radius,), state.goal.x, state.goal.y)
    for d in state.distractors:
        _paint(img[:, :, 2], X, Y, d.shape, d.size, d.x, d.y, d.theta)
    return img


def observe(state: SceneState, image_size=32) -> Observation:
    return Observation(
        image=render(state, image_size),
        proprio=np.array([state.gripper[0], state.gripper[1], 1.0 if state.grip_closed else 0.0]),
    )


# ---------------------------------------------------------------------------
# evaluation-only success predicate


def is_success(state: SceneState, task: TaskSpec):
    """(success, completed stage count); never consulted during training."""
    placed = 0
    for i, o in enumerate(state.objects):
        inside = math.hypot(o.x - state.goal.x, o.y - state.goal.y) <= state.goal.radius
        if inside and state.attached != i:
            placed += 1
    if task.name == "place_three":
        return placed == 3, placed
    return placed >= 1, placed
