"""Data plane: video/demo generation, flow annotation, hindsight relabeling,
and the bounded FIFO replay buffer.

Episodes keep their rendered frames as uint8 (the channel renderer emits
exactly 0.0/1.0), so transitions can reference frames by index instead of
duplicating image stacks; batches materialize float64 views on demand.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import container, tracker
from . import sim
from .errors import BufferError, DataError, RelabelError, SimError

GENERATOR_VERSION = 1


@dataclass
class EpisodeRecord:
    task: sim.TaskSpec
    seed: int
    states: list  # SceneState sequence, length T+1
    frames: np.ndarray  # (T+1, H, W, 3) uint8 in {0, 1}
    proprio: np.ndarray  # (T+1, 3) float64
    actions: np.ndarray | None  # (T, 3) float64; None for action-free videos

    def __post_init__(self):
        if self.actions is not None and len(self.states) != len(self.actions) + 1:
            raise DataError(
                f"inconsistent episode: {len(self.states)} states vs {len(self.actions)} actions"
            )

    @property
    def t_len(self) -> int:
        """Number of steps (actions when labeled, state transitions otherwise)."""
        return len(self.states) - 1

    def frame_f64(self, idx: int) -> np.ndarray:
        return self.frames[idx].astype(np.float64)


@dataclass
class Transition:
    episode: EpisodeRecord
    episode_id: int
    t: int
    action: np.ndarray  # (3,)
    flow: np.ndarray  # (K, H_c+1, 2) pixel coordinates
    task_id: int
    frame_stack: int

    def obs_stack(self) -> np.ndarray:
        """(frame_stack, H, W, 3) float64; front-padded by repeating frame 0."""
        idx = [max(0, self.t - k) for k in range(self.frame_stack - 1, -1, -1)]
        return self.episode.frames[idx].astype(np.float64)

    def proprio_stack(self) -> np.ndarray:
        idx = [max(0, self.t - k) for k in range(self.frame_stack - 1, -1, -1)]
        return self.episode.proprio[idx]


def rollout_scripted(task: sim.TaskSpec, seed: int, jitter: float, rng=None):
    """One scripted-expert episode; returns (EpisodeRecord, succeeded)."""
    state, obs = sim.reset(task, seed)
    states = [state]
    frames = [obs.image]
    proprio = [obs.proprio]
    actions = []
    rng = rng if rng is not None else np.random.default_rng(seed)
    success = False
    for _ in range(task.horizon):
        a = sim.scripted_expert(state, task, rng=rng, jitter=jitter)
        actions.append(np.asarray(a, dtype=float))
        state, obs = sim.step(state, a, task.image_size)
        states.append(state)
        frames.append(obs.image)
        proprio.append(obs.proprio)
        ok, _ = sim.is_success(state, task)
        success = success or ok
    rec = EpisodeRecord(
        task=task,
        seed=seed,
        states=states,
        frames=np.asarray(frames).astype(np.uint8),
        proprio=np.asarray(proprio),
        actions=np.asarray(actions),
    )
    return rec, success


def _derived_seed(seed, kind, index, attempt):
    ss = np.random.SeedSequence([int(seed) & 0x7FFFFFFF, kind, index, attempt])
    return int(ss.generate_state(1)[0] & 0x7FFFFFFF)


def generate_dataset(task: sim.TaskSpec, n_videos: int, n_demos: int, jitter: float, seed: int):
    """Scripted rollouts: jittered action-free videos plus jitter-free demos.

    Every second video starts from a relaxed scene (the object may begin
    right next to the goal), so the planner also sees late-task and
    recovery-like configurations. Demos and evaluation keep the standard
    scene constraints. Failed rollouts are discarded and regenerated with a
    derived seed, up to 20 attempts each.
    """
    if n_videos < 1:
        raise DataError(f"need at least one video, got {n_videos}")
    relaxed = dataclasses.replace(task, min_goal_separation=0.02)
    videos, demos = [], []
    for kind, count, jit, out in ((0, n_videos, jitter, videos), (1, n_demos, 0.0, demos)):
        for i in range(count):
            ep_task = relaxed if (kind == 0 and i % 2 == 1) else task
            for attempt in range(20):
                ep_seed = _derived_seed(seed, kind, i, attempt)
                rng = np.random.default_rng(np.random.SeedSequence([ep_seed, 7]))
                rec, ok = rollout_scripted(ep_task, ep_seed, jit, rng)
                if ok:
                    out.append(rec)
                    break
            else:
                raise SimError(
                    f"scripted expert failed 20 attempts for {task.name} "
                    f"({'video' if kind == 0 else 'demo'} {i})"
                )
    for v in videos:
        v.actions = None
    return videos, demos


@dataclass
class AnnotatedSet:
    """Columnar flow-annotated samples referencing their source episodes."""

    episodes: list
    ep_idx: np.ndarray  # (N,)
    t_idx: np.ndarray  # (N,)
    task_ids: np.ndarray  # (N,)
    points: np.ndarray  # (N, K, 2) current pixel positions
    flows: np.ndarray  # (N, K, H_out, 2) future pixel positions

    def __len__(self):
        return len(self.ep_idx)

    def image(self, i: int) -> np.ndarray:
        return self.episodes[self.ep_idx[i]].frame_f64(self.t_idx[i])


def annotate_videos(episodes, h_out: int, resample: int, seed: int, counts=None, grid_side=None):
    """Flow-annotate every frame of every episode, `resample` times each."""
    if h_out < 1:
        raise DataError(f"flow output length must be >= 1, got {h_out}")
    ep_idx, t_idx, task_ids, points, flows = [], [], [], [], []
    rng = np.random.default_rng(np.random.SeedSequence([int(seed) & 0x7FFFFFFF, 11]))
    for e, ep in enumerate(episodes):
        size = ep.task.image_size
        cts = counts or tracker.DEFAULT_POINT_COUNTS[ep.task.name]
        poses = tracker.pose_arrays(ep.states)
        n_states = len(ep.states)
        for t in range(ep.t_len):
            for _ in range(resample):
                if grid_side is not None:
                    pts = tracker.sample_grid_points(grid_side, size, total=32)
                else:
                    pts = tracker.sample_task_points(ep.states[t], rng, cts, size)
                traj = tracker.track_arrays(poses, pts, size, t0=t, t1=min(t + h_out + 1, n_states))
                win = tracker.make_flow_window(traj, 0, h_out, size)
                ep_idx.append(e)
                t_idx.append(t)
                task_ids.append(ep.task.task_id)
                points.append(win[:, 0, :])
                flows.append(win[:, 1:, :])
    return AnnotatedSet(
        episodes=list(episodes),
        ep_idx=np.asarray(ep_idx, dtype=np.int64),
        t_idx=np.asarray(t_idx, dtype=np.int64),
        task_ids=np.asarray(task_ids, dtype=np.int64),
        points=np.asarray(points),
        flows=np.asarray(flows),
    )


def relabel_episode(episode: EpisodeRecord, h_c: int, frame_stack: int, rng,
                    episode_id: int = 0, counts=None, grid_side=None,
                    return_points: bool = False):
    """Hindsight-relabel one labeled episode into flow-conditioned transitions.

    Points are sampled once at the first state and oracle-tracked through
    the whole episode; each step then gets its (padded) flow window. With
    `return_points` the sampled query points come back alongside, so audits
    can re-project them.
    """
    if episode.actions is None:
        raise RelabelError("cannot relabel an action-free episode")
    if episode.t_len < 1 or len(episode.states) < 2:
        raise RelabelError(f"episode too short to relabel ({len(episode.states)} states)")
    size = episode.task.image_size
    if grid_side is not None:
        pts = tracker.sample_grid_points(grid_side, size, total=32)
    else:
        cts = counts or tracker.DEFAULT_POINT_COUNTS[episode.task.name]
        pts = tracker.sample_task_points(episode.states[0], rng, cts, size)
    traj = tracker.track_episode(episode.states, pts, size)
    out = []
    for t in range(episode.t_len):
        out.append(
            Transition(
                episode=episode,
                episode_id=episode_id,
                t=t,
                action=episode.actions[t],
                flow=tracker.make_flow_window(traj, t, h_c, size),
                task_id=episode.task.task_id,
                frame_stack=frame_stack,
            )
        )
    if return_points:
        return out, pts
    return out


class ReplayBuffer:
    """Bounded FIFO of transitions with uniform with-replacement sampling."""

    def __init__(self, capacity: int = 50_000):
        if capacity < 1:
            raise BufferError(f"capacity must be positive, got {capacity}")
        self.capacity = capacity
        self.items: list = []
        self.pushed = 0

    def __len__(self):
        return len(self.items)

    def push(self, transition) -> None:
        self.items.append(transition)
        self.pushed += 1
        if len(self.items) > self.capacity:
            del self.items[0]

    def extend(self, transitions) -> None:
        for tr in transitions:
            self.push(tr)

    def sample(self, batch: int, rng) -> list:
        if len(self.items) < batch:
            raise BufferError(f"buffer holds {len(self.items)} transitions, need {batch}")
        idx = rng.integers(0, len(self.items), size=batch)
        return [self.items[i] for i in idx]


# ---------------------------------------------------------------------------
# episode file format


def episode_to_file(path, episode: EpisodeRecord) -> None:
    task = episode.task
    n = len(episode.states)
    gripper = np.array([s.gripper for s in episode.states])
    grip = np.array([1.0 if s.grip_closed else 0.0 for s in episode.states])
    attached = np.array([-1.0 if s.attached is None else float(s.attached) for s in episode.states])
    offsets = np.array([
        (0.0, 0.0) if s.attach_offset is None else s.attach_offset for s in episode.states
    ])
    obj_poses = np.array([[(o.x, o.y, o.theta) for o in s.objects] for s in episode.states])
    dis_poses = (
        np.array([[(d.x, d.y, d.theta) for d in s.distractors] for s in episode.states])
        if episode.states[0].distractors
        else np.zeros((n, 0, 3))
    )
    header = {
        "record": "episode",
        "generator_version": GENERATOR_VERSION,
        "seed": episode.seed,
        "task": {
            "name": task.name,
            "horizon": task.horizon,
            "object_specs": [[s, list(z)] for s, z in task.object_specs],
            "goal_radius": task.goal_radius,
            "image_size": task.image_size,
            "n_distractors": task.n_distractors,
            "embodiment": task.embodiment,
            "bounds": [list(task.bounds[0]), list(task.bounds[1])],
            "min_goal_separation": task.min_goal_separation,
        },
        "objects": [
            {"shape": o.shape, "size": list(o.size), "graspable": o.graspable}
            for o in episode.states[0].objects
        ],
        "distractors": [
            {"shape": d.shape, "size": list(d.size), "graspable": d.graspable}
            for d in episode.states[0].distractors
        ],
        "goal": [episode.states[0].goal.x, episode.states[0].goal.y, episode.states[0].goal.radius],
        "has_actions": episode.actions is not None,
    }
    arrays = {
        "gripper": gripper,
        "grip_flag": grip,
        "attached": attached,
        "attach_offset": offsets,
        "object_poses": obj_poses,
        "distractor_poses": dis_poses,
        "frames": episode.frames.astype(np.float64),
        "proprio": episode.proprio,
    }
    if episode.actions is not None:
        arrays["actions"] = episode.actions
    container.write_container(path, header, arrays)


def episode_from_file(path) -> EpisodeRecord:
    header, arrays = container.read_container(path)
    if header.get("record") != "episode":
        raise DataError(f"{path}: not an episode file")
    tk = header["task"]
    task = sim.TaskSpec(
        name=tk["name"],
        horizon=tk["horizon"],
        object_specs=tuple((s, tuple(z)) for s, z in tk["object_specs"]),
        goal_radius=tk["goal_radius"],
        image_size=tk["image_size"],
        n_distractors=tk["n_distractors"],
        embodiment=tk["embodiment"],
        bounds=(tuple(tk["bounds"][0]), tuple(tk["bounds"][1])),
        min_goal_separation=tk["min_goal_separation"],
    )
    goal = sim.GoalRegion(*header["goal"])
    obj_meta = header["objects"]
    dis_meta = header["distractors"]
    states = []
    n = arrays["gripper"].shape[0]
    for i in range(n):
        objects = tuple(
            sim.SceneObject(
                arrays["object_poses"][i, j, 0],
                arrays["object_poses"][i, j, 1],
                arrays["object_poses"][i, j, 2],
                obj_meta[j]["shape"],
                tuple(obj_meta[j]["size"]),
                obj_meta[j]["graspable"],
            )
            for j in range(len(obj_meta))
        )
        distractors = tuple(
            sim.SceneObject(
                arrays["distractor_poses"][i, j, 0],
                arrays["distractor_poses"][i, j, 1],
                arrays["distractor_poses"][i, j, 2],
                dis_meta[j]["shape"],
                tuple(dis_meta[j]["size"]),
                dis_meta[j]["graspable"],
            )
            for j in range(len(dis_meta))
        )
        att = int(arrays["attached"][i])
        states.append(
            sim.SceneState(
                gripper=tuple(arrays["gripper"][i]),
                grip_closed=bool(arrays["grip_flag"][i] > 0.5),
                attached=None if att < 0 else att,
                attach_offset=None if att < 0 else tuple(arrays["attach_offset"][i]),
                objects=objects,
                distractors=distractors,
                goal=goal,
                profile=task.embodiment,
                step=i,
            )
        )
    return EpisodeRecord(
        task=task,
        seed=header["seed"],
        states=states,
        frames=arrays["frames"].astype(np.uint8),
        proprio=arrays["proprio"],
        actions=arrays.get("actions"),
    )
