"""Scripted proportional-control experts, one state machine per task.

The controller is stateless: every call re-derives the current phase from
the scene, so it recovers from perturbations (jitter, shoves) on its own.

Grasping exploits the step order of the environment: penetration is only
resolved after attachment checks, so driving into an object at full speed
with the grip already closed attaches before any push-out. The approach is
staged so the run direction (which becomes the attach offset) points from
the object's drop slot outward; the release shove then lands the object on
the slot while the gripper stays outside the cluster of placed objects.
"""

from __future__ import annotations

import math

import numpy as np

from .env import PROFILES, SceneState, TaskSpec, contact_distance

# distance from the object at which the grasp run is staged
RUN_DIST = 0.13
# release once the predicted post-shove object position is this close to slot
RELEASE_TRIGGER = 0.014
# slot ring radius for the three-object task
SLOT_RING = 0.058
# push alignment half-angle (cosine) for push_box
PUSH_ALIGN = math.cos(math.radians(38.0))


def scripted_expert(state: SceneState, task: TaskSpec, rng=None, jitter: float = 0.0):
    """Expert action (dx, dy, grip), optionally jittered, clamped to [-1, 1]."""
    if task.name == "push_box":
        act = _push_core(state)
    else:
        act = _place_core(state, task)
    act = np.asarray(act, dtype=float)
    if jitter > 0.0:
        if rng is None:
            raise ValueError("jitter > 0 requires an rng")
        act = act + rng.normal(0.0, jitter, size=3)
    return np.clip(act, -1.0, 1.0)


def _unit(dx, dy):
    n = math.hypot(dx, dy)
    if n < 1e-12:
        return 1.0, 0.0, 0.0
    return dx / n, dy / n, n


def _orbit(center, gripper, target, orbit_r):
    """Full-speed move circling `center` toward the side facing `target`."""
    rx, ry, rdist = _unit(gripper[0] - center[0], gripper[1] - center[1])
    want = math.atan2(target[1] - center[1], target[0] - center[0])
    cur = math.atan2(ry, rx)
    diff = math.atan2(math.sin(want - cur), math.cos(want - cur))
    tangent = 1.0 if diff >= 0 else -1.0
    tx, ty = -ry * tangent, rx * tangent
    radial = orbit_r - rdist
    return _unit(tx + rx * radial * 12.0, ty + ry * radial * 12.0)[:2]


def _go(state, target, grip, obstacles=(), clearance_pad=0.02):
    """Proportional move toward `target`, orbiting around blocking obstacles."""
    gx, gy = state.gripper
    profile = PROFILES[state.profile]
    ux, uy, dist = _unit(target[0] - gx, target[1] - gy)
    gain = profile.gain
    block = None
    for obj in obstacles:
        ox, oy = obj.x - gx, obj.y - gy
        proj = ox * ux + oy * uy
        clear = contact_distance(profile, obj, ux, uy) + clearance_pad
        if proj <= 0.0 or proj >= dist + clear:
            continue
        perp = abs(ox * uy - oy * ux)
        if perp >= clear:
            continue
        if block is None or proj < block[0]:
            block = (proj, obj, clear)
    if block is None:
        return ((target[0] - gx) / gain, (target[1] - gy) / gain, grip)
    _, obj, clear = block
    vx, vy = _orbit((obj.x, obj.y), (gx, gy), target, clear * 1.15)
    return (vx, vy, grip)


def _slots_outward(state, n):
    """Per-object (slot, outward unit) pairs; outward points away from the cluster."""
    goal = state.goal
    if n == 1:
        obj = state.objects[0]
        if state.attached == 0:
            gx, gy = state.gripper
            offx, offy = state.attach_offset
            ox, oy, _ = _unit(-offx, -offy)
            _ = (gx, gy)
        else:
            ox, oy, _ = _unit(obj.x - goal.x, obj.y - goal.y)
        return [((goal.x, goal.y), (ox, oy))]
    out = []
    for i in range(n):
        ang = math.pi / 2 + i * 2.0 * math.pi / n
        ox, oy = math.cos(ang), math.sin(ang)
        out.append(((goal.x + SLOT_RING * ox, goal.y + SLOT_RING * oy), (ox, oy)))
    return out


def _place_core(state: SceneState, task: TaskSpec):
    goal = state.goal
    profile = PROFILES[state.profile]
    slot_dirs = _slots_outward(state, len(state.objects))

    def placed(i):
        o = state.objects[i]
        return state.attached != i and math.hypot(o.x - goal.x, o.y - goal.y) <= goal.radius

    def at_slot(i):
        o = state.objects[i]
        sx, sy = slot_dirs[i][0]
        return math.hypot(o.x - sx, o.y - sy) <= goal.radius * 0.45

    # only objects resting near their own slot are sacred; an accidentally
    # placed one may be plowed through (a shove either leaves it in the goal
    # or pops it out, where it gets re-picked)
    obstacles = [o for i, o in enumerate(state.objects) if placed(i) and at_slot(i)]
    gx, gy = state.gripper

    if state.attached is not None:
        i = state.attached
        obj = state.objects[i]
        slot, _ = slot_dirs[i]
        offx, offy = state.attach_offset
        dx, dy, _ = _unit(offx, offy)
        shove = contact_distance(profile, obj, dx, dy)
        landing = (gx + shove * dx, gy + shove * dy)
        if math.hypot(landing[0] - slot[0], landing[1] - slot[1]) <= RELEASE_TRIGGER:
            return (0.0, 0.0, -1.0)
        target = (slot[0] - shove * dx, slot[1] - shove * dy)
        return _go(state, target, 1.0, obstacles)

    todo = [i for i in range(len(state.objects)) if not placed(i)]
    if not todo:
        return (0.0, 0.0, -1.0)
    i = min(todo, key=lambda j: math.hypot(state.objects[j].x - gx, state.objects[j].y - gy))
    obj = state.objects[i]
    _, outward = slot_dirs[i]
    to_obj_x, to_obj_y, dist = _unit(obj.x - gx, obj.y - gy)
    aligned = (to_obj_x * -outward[0] + to_obj_y * -outward[1]) >= 0.92
    if aligned and dist <= RUN_DIST + 0.04:
        # full-speed run with the grip closed; attachment fires before push-out;
        # if a different object happens to be nearer it gets grabbed and the
        # next calls simply carry that one to its own slot
        return (to_obj_x, to_obj_y, 1.0)
    staging = (
        min(0.985, max(0.015, obj.x + outward[0] * RUN_DIST)),
        min(0.985, max(0.015, obj.y + outward[1] * RUN_DIST)),
    )
    return _go(state, staging, -1.0, obstacles + [obj])


def _push_core(state: SceneState):
    goal = state.goal
    box = state.objects[0]
    profile = PROFILES[state.profile]
    dist_goal = math.hypot(box.x - goal.x, box.y - goal.y)
    if dist_goal <= goal.radius * 0.5:
        return (0.0, 0.0, -1.0)
    px, py, _ = _unit(goal.x - box.x, goal.y - box.y)
    rx, ry, rdist = _unit(state.gripper[0] - box.x, state.gripper[1] - box.y)
    contact_p = contact_distance(profile, box, px, py)
    orbit_r = contact_distance(profile, box, 1.0, 0.0) * 1.25 + 0.02
    behind = -(rx * px + ry * py) >= PUSH_ALIGN
    if behind and rdist <= orbit_r + 0.03:
        # track a point just inside the contact shell on the push axis: walking
        # toward it simultaneously pushes and re-centers on the axis
        target = (box.x - px * (contact_p - 0.02), box.y - py * (contact_p - 0.02))
        ux, uy, n = _unit(target[0] - state.gripper[0], target[1] - state.gripper[1])
        if n < 1e-6:
            return (px, py, -1.0)
        return (ux, uy, -1.0)
    # orbit around the box toward the spot behind it, holding the safe radius
    behind_pt = (box.x - px, box.y - py)
    vx, vy = _orbit((box.x, box.y), state.gripper, behind_pt, orbit_r)
    return (vx, vy, -1.0)
