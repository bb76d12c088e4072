"""Flow-conditioned low-level policy with action chunking.

One attention block mixes patch tokens (stacked frames concatenated per
spatial location), one proprioception token, one token per flow point, and
a learned aggregation token whose output feeds the action head. The head
is zero-initialized and tanh-squashed, so an untrained policy emits zero
actions and every output component stays within [-1, 1].

Pretraining on demonstrations and online updates on hindsight-relabeled
batches share the same loss function; only the data source differs.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import nncore as nn
from .errors import DataError, DimensionError, TrainingError
from .nncore import Tape, Tensor
from .planner import extract_patches

log = logging.getLogger("hinflow.policy")


@dataclass
class PolicyConfig:
    image_size: int = 32
    patch: int = 8
    width: int = 64
    k_points: int = 32
    h_in: int = 8
    chunk: int = 5
    chunk_every: int = 1  # re-predict cadence; overlapping chunks get ensembled
    frame_stack: int = 2
    batch: int = 64
    pretrain_steps: int = 3000
    lr: float = 1e-3
    ensemble_m: float = 0.01
    head_mlp: bool = True
    zero_flow: bool = False  # behavior-cloning ablation: flow input forced to zero

    def to_dict(self):
        return dict(self.__dict__)

    @property
    def n_patches(self):
        side = self.image_size // self.patch
        return side * side

    @property
    def flow_dim(self):
        return (self.h_in + 1) * 2


class PolicyModel:
    KIND = "policy"

    def __init__(self, cfg: PolicyConfig, rng):
        self.cfg = cfg
        w = cfg.width
        pdim = cfg.frame_stack * cfg.patch * cfg.patch * 3
        p = {}
        p["patch.w"], p["patch.b"] = nn.linear_params(rng, pdim, w)
        p["patch.pos"] = nn.uniform_param(rng, w, (1, cfg.n_patches, w))
        p["proprio.w"], p["proprio.b"] = nn.linear_params(rng, cfg.frame_stack * 3, w)
        p["flow.w"], p["flow.b"] = nn.linear_params(rng, cfg.flow_dim, w)
        p["cls"] = nn.uniform_param(rng, w, (1, w))
        for name, t in nn.attn_block_params(rng, w, with_mlp=False).items():
            p[f"blk.{name}"] = t
        p["out.ln.g"] = nn.ones_param((w,))
        p["out.ln.b"] = nn.zeros_param((w,))
        if cfg.head_mlp:
            p["pre.w"], p["pre.b"] = nn.linear_params(rng, w, w)
        p["head.w"], p["head.b"] = nn.linear_params(rng, w, cfg.chunk * 3, zero=True)
        self._params = p

    def params(self) -> dict:
        return self._params

    @classmethod
    def from_checkpoint(cls, params: dict, hyper: dict) -> "PolicyModel":
        model = cls.__new__(cls)
        model.cfg = PolicyConfig(**hyper)
        model._params = params
        return model

    def forward(self, patches, proprio, flows_norm):
        """Action chunks (B, chunk, 3) in [-1, 1].

        patches: (B, n_patches, frame_stack*patch*patch*3) constants;
        proprio: (B, frame_stack*3); flows_norm: (B, K, (h_in+1)*2).
        """
        cfg = self.cfg
        p = self._params
        b = patches.shape[0]
        w = cfg.width
        npatch = cfg.n_patches
        if flows_norm.shape[1] != cfg.k_points or flows_norm.shape[2] != cfg.flow_dim:
            raise DimensionError(
                f"flow batch must be (B, {cfg.k_points}, {cfg.flow_dim}), got {flows_norm.shape}"
            )
        if cfg.zero_flow:
            flows_norm = np.zeros_like(flows_norm)
        ptok = nn.gelu(nn.linear(Tensor(patches.reshape(b * npatch, -1)), p["patch.w"], p["patch.b"]))
        ptok = nn.add(nn.reshape(ptok, (b, npatch, w)), p["patch.pos"])
        otok = nn.reshape(
            nn.gelu(nn.linear(Tensor(proprio), p["proprio.w"], p["proprio.b"])), (b, 1, w)
        )
        ftok = nn.gelu(nn.linear(Tensor(flows_norm.reshape(b * cfg.k_points, -1)), p["flow.w"], p["flow.b"]))
        ftok = nn.reshape(ftok, (b, cfg.k_points, w))
        cls = nn.reshape(nn.take_rows(p["cls"], np.zeros(b, dtype=np.int64)), (b, 1, w))
        x = nn.concat([ptok, otok, ftok, cls], axis=1)
        x = nn.attn_block(x, p, "blk")
        n_tokens = npatch + 1 + cfg.k_points + 1
        out = nn.narrow(x, 1, n_tokens - 1, 1)
        out = nn.layer_norm(out, p["out.ln.g"], p["out.ln.b"])
        out = nn.reshape(out, (b, w))
        if cfg.head_mlp:
            out = nn.gelu(nn.linear(out, p["pre.w"], p["pre.b"]))
        act = nn.tanh(nn.linear(out, p["head.w"], p["head.b"]))
        return nn.reshape(act, (b, cfg.chunk, 3))

    def _norm_flow(self, flow: np.ndarray) -> np.ndarray:
        cfg = self.cfg
        rows = flow[:, : cfg.h_in + 1, :]
        if rows.shape != (cfg.k_points, cfg.h_in + 1, 2):
            raise DimensionError(
                f"flow window must cover at least rows 0..{cfg.h_in} for "
                f"{cfg.k_points} points, got {flow.shape}"
            )
        return (rows / cfg.image_size).reshape(cfg.k_points, -1)

    def predict_chunk(self, obs_stack, proprio_stack, flow) -> np.ndarray:
        """One deterministic action chunk (chunk, 3) from a single observation.

        `flow` is a pixel-space window with at least h_in+1 rows; extra
        planner rows beyond the policy's input length are ignored.
        """
        cfg = self.cfg
        obs = np.asarray(obs_stack, dtype=np.float64)
        if obs.shape != (cfg.frame_stack, cfg.image_size, cfg.image_size, 3):
            raise DimensionError(f"observation stack has shape {obs.shape}")
        patches = stack_patches(obs[None], cfg.patch)
        pro = np.asarray(proprio_stack, dtype=np.float64).reshape(1, -1)
        flows = self._norm_flow(np.asarray(flow, dtype=np.float64))[None]
        return self.forward(patches, pro, flows).data[0]


def stack_patches(frames: np.ndarray, patch: int) -> np.ndarray:
    """(B, S, H, W, 3) -> (B, n_patches, S*patch*patch*3).

    Same-position patches from all stacked frames are concatenated, so each
    token sees its location's recent history.
    """
    b, s = frames.shape[0], frames.shape[1]
    per = extract_patches(frames.reshape(b * s, *frames.shape[2:]), patch)
    npatch, pdim = per.shape[1], per.shape[2]
    return per.reshape(b, s, npatch, pdim).transpose(0, 2, 1, 3).reshape(b, npatch, s * pdim)


def chunk_targets(actions: np.ndarray, t: int, k: int) -> np.ndarray:
    """Actions a_t..a_{t+k-1}, repeating the final action past the episode end."""
    idx = np.minimum(np.arange(t, t + k), len(actions) - 1)
    return actions[idx]


def assemble_batch(transitions, cfg: PolicyConfig):
    """Batch arrays (patches, proprio, flows_norm, targets) from transitions."""
    obs, pro, flows, targets = [], [], [], []
    for tr in transitions:
        if tr.flow.shape[0] != cfg.k_points or tr.flow.shape[1] < cfg.h_in + 1:
            raise DataError(
                f"episode {tr.episode_id} step {tr.t}: flow window {tr.flow.shape} "
                f"does not cover {cfg.k_points} points x rows 0..{cfg.h_in}"
            )
        if tr.episode.actions is None:
            raise DataError(f"episode {tr.episode_id} step {tr.t}: transition without actions")
        obs.append(tr.obs_stack())
        pro.append(tr.proprio_stack().reshape(-1))
        flows.append(tr.flow[:, : cfg.h_in + 1, :].reshape(cfg.k_points, -1) / cfg.image_size)
        targets.append(chunk_targets(tr.episode.actions, tr.t, cfg.chunk))
    patches = stack_patches(np.asarray(obs), cfg.patch)
    return patches, np.asarray(pro), np.asarray(flows), np.asarray(targets)


def imitation_loss(model: PolicyModel, patches, proprio, flows_norm, targets):
    """Chunked-action MSE; shared verbatim by pretraining and online updates."""
    pred = model.forward(patches, proprio, flows_norm)
    return nn.mse(pred, Tensor(targets))


def update_online(model: PolicyModel, opt: nn.Adam, transitions) -> float:
    """One gradient step on a batch of transitions; returns the loss."""
    patches, pro, flows, targets = assemble_batch(transitions, model.cfg)
    with Tape() as tape:
        loss = imitation_loss(model, patches, pro, flows, targets)
    grads = tape.gradients(loss, model.params())
    opt.step(grads)
    return float(loss.data)


def pretrain(model: PolicyModel, transitions, iterations=None, seed=0, lr=None):
    """Imitation pretraining on demo transitions; returns the loss curve."""
    cfg = model.cfg
    iterations = cfg.pretrain_steps if iterations is None else iterations
    if iterations == 0:
        return []
    if not transitions:
        raise TrainingError("cannot pretrain on an empty demo set")
    lr = cfg.lr if lr is None else lr
    opt = nn.Adam(model.params(), lr=lr)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed) & 0x7FFFFFFF, 211]))
    curve = []
    for step in range(iterations):
        idx = rng.integers(0, len(transitions), size=min(cfg.batch, len(transitions)))
        loss = update_online(model, opt, [transitions[i] for i in idx])
        if step % 100 == 0 or step == iterations - 1:
            curve.append((step, loss))
            log.debug("pretrain step %d loss %.6f", step, loss)
    return curve


# ---------------------------------------------------------------------------
# execution-time machinery


def temporal_ensemble(predictions, m: float) -> np.ndarray:
    """Exponentially weighted mean of [(age, action), ...] with w = exp(-m*age)."""
    if not predictions:
        raise DataError("temporal ensemble got no pending predictions")
    weights = np.array([np.exp(-m * age) for age, _ in predictions])
    acts = np.array([a for _, a in predictions])
    return (weights[:, None] * acts).sum(axis=0) / weights.sum()


class EnsembleState:
    """Pending action chunks and their ages for temporal ensembling."""

    def __init__(self, chunk: int, m: float):
        self.chunk = chunk
        self.m = m
        self.pending: list = []  # (t0, (chunk, 3) array)

    def add(self, t0: int, actions: np.ndarray) -> None:
        self.pending.append((t0, np.asarray(actions)))

    def action(self, t: int) -> np.ndarray:
        self.pending = [(t0, a) for t0, a in self.pending if t0 <= t < t0 + self.chunk]
        preds = [(t - t0, a[t - t0]) for t0, a in self.pending]
        return temporal_ensemble(preds, self.m)


@dataclass
class DwellState:
    """Grip-command hold: a threshold crossing pins the command for a while."""

    closed: bool = False
    hold: float = -1.0
    remaining: int = 0


def explore(action, sigma: float, dwell: DwellState, rng, dwell_steps: int = 8):
    """Exploration noise on (dx, dy) plus the grip dwell mechanism.

    Gaussian noise of scale `sigma` is added to the translation components.
    The (noisy) grip command is latched for `dwell_steps` consecutive steps
    whenever it crosses the open/close threshold, giving the gripper the
    temporal consistency a flip needs to take effect.
    """
    if sigma < 0:
        raise TrainingError(f"exploration sigma must be >= 0, got {sigma}")
    a = np.asarray(action, dtype=float).copy()
    grip = a[2]
    if sigma > 0:
        a[0] += rng.normal(0.0, sigma)
        a[1] += rng.normal(0.0, sigma)
        grip = grip + rng.normal(0.0, sigma)
    if dwell.remaining > 0:
        dwell.remaining -= 1
        a[2] = dwell.hold
    else:
        if grip > 0.5 and not dwell.closed:
            dwell.closed = True
            dwell.hold = min(grip, 1.0)
            dwell.remaining = dwell_steps - 1
        elif grip <= -0.5 and dwell.closed:
            dwell.closed = False
            dwell.hold = max(grip, -1.0)
            dwell.remaining = dwell_steps - 1
        a[2] = grip
    return np.clip(a, -1.0, 1.0)
