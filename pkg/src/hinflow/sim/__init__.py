"""Planar manipulation simulator: tasks, kinematics, rendering, experts."""

from .env import (
    GRIPPER_START,
    PROFILES,
    TASK_IDS,
    Action,
    EmbodimentProfile,
    GoalRegion,
    Observation,
    SceneObject,
    SceneState,
    TaskSpec,
    contact_distance,
    is_success,
    make_task,
    observe,
    render,
    reset,
    resolve_push,
    step,
)
from .expert import scripted_expert

__all__ = [
    "GRIPPER_START",
    "PROFILES",
    "TASK_IDS",
    "Action",
    "EmbodimentProfile",
    "GoalRegion",
    "Observation",
    "SceneObject",
    "SceneState",
    "TaskSpec",
    "contact_distance",
    "is_success",
    "make_task",
    "observe",
    "render",
    "reset",
    "resolve_push",
    "step",
    "scripted_expert",
]
