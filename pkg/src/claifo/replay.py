"""Agent replay buffer and observation-only expert demonstrations.

Agent storage is sequential: every record is a frame together with the action
and reward that *led* to it, and the first frame of an episode has no action::

    frames:  x0   x1   x2  ...  xT
    actions:  -   a0   a1  ...  a(T-1)
    first:    T    F    F  ...  F
    done:     F    F    F  ...  T

Record ``j`` (not first) therefore defines the transition ``(x[j-1], a[j], x[j])``.
Frame stacks of depth ``d`` ending at ``e`` take ``x[e-d+1 .. e]`` and repeat the
earliest frame of the episode still in storage when the window would cross the
episode start.  Frames are kept as uint8; dequantisation error is <= 1/510.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

EP_MAGIC = b"CLAIFO-EP-1"
REWARD_MODE_CODES = {"dense": 0, "sparse": 1}
STATE_DIM = 4


def quantize(frame: np.ndarray) -> np.ndarray:
    return np.round(np.clip(frame, 0.0, 1.0) * 255.0).astype(np.uint8)


def dequantize(frames: np.ndarray) -> np.ndarray:
    return frames.astype(np.float32) / 255.0


class TransitionBatch(NamedTuple):
    obs: np.ndarray  # (B, d, H, W, 3) float32
    action: np.ndarray  # (B, A)
    next_obs: np.ndarray
    env_reward: np.ndarray  # (B,)
    state: np.ndarray  # (B, 4) true state at the last obs frame (rl+ state fusion only)
    next_state: np.ndarray
    index: np.ndarray  # absolute record index of next_obs's last frame


class ExpertPairs(NamedTuple):
    obs: np.ndarray
    next_obs: np.ndarray


class AgentBuffer:
    def __init__(self, capacity: int, frame_shape: tuple[int, int, int], action_dim: int = 2,
                 initial_alloc: int = 4096):
        if capacity < 2:
            raise ValueError("capacity must be at least 2")
        self.capacity = int(capacity)
        self.frame_shape = tuple(frame_shape)
        self.action_dim = action_dim
        self._alloc = 0
        self._grow(min(initial_alloc, self.capacity))
        self.total = 0  # absolute index of the next record
        self._ep_start = 0
        self._last_done = True
        self._count = 0

    def _grow(self, size: int):
        def resized(arr, shape, dtype):
            new = np.zeros((size, *shape), dtype=dtype)
            if arr is not None:
                new[: len(arr)] = arr
            return new

        get = lambda name: getattr(self, name, None)
        self.frames = resized(get("frames"), self.frame_shape, np.uint8)
        self.actions = resized(get("actions"), (self.action_dim,), np.float32)
        self.rewards = resized(get("rewards"), (), np.float32)
        self.states = resized(get("states"), (STATE_DIM,), np.float32)
        self.first = resized(get("first"), (), bool)
        self.ep_start = resized(get("ep_start"), (), np.int64)
        self._alloc = size

    @property
    def oldest(self) -> int:
        return max(0, self.total - self.capacity)

    def __len__(self) -> int:
        """Number of complete transitions currently stored."""
        return self._count

    def _slot(self, idx):
        return idx % self.capacity

    def push(self, frame: np.ndarray, action=None, done: bool = False, reward: float = 0.0, state=None):
        """Append a frame.  ``action``/``reward`` are the ones that produced it
        (``None`` for the first frame of an episode); ``done`` closes the episode."""
        frame = np.asarray(frame)
        if frame.shape != self.frame_shape:
            raise ValueError(f"frame shape {frame.shape} does not match buffer {self.frame_shape}")
        first = self._last_done
        if first and action is not None:
            raise ValueError("first frame of an episode cannot carry an action")
        if not first and action is None:
            raise ValueError("non-initial frame needs the action that led to it")
        if self.total >= self._alloc and self._alloc < self.capacity:
            self._grow(min(2 * self._alloc, self.capacity))
        i = self.total
        s = self._slot(i)
        if first:
            self._ep_start = i
        self.frames[s] = quantize(frame) if frame.dtype != np.uint8 else frame
        self.actions[s] = 0.0 if action is None else np.asarray(action, dtype=np.float32)
        self.rewards[s] = reward
        self.states[s] = 0.0 if state is None else np.asarray(state, dtype=np.float32)
        self.first[s] = first
        self.ep_start[s] = self._ep_start
        old_lo = self.oldest + 1
        self.total += 1
        self._last_done = bool(done)
        if not first:
            self._count += 1
        # the window of valid transition indices is [oldest + 1, total)
        if self.oldest + 1 > old_lo and old_lo < self.total and not self.first[self._slot(old_lo)]:
            self._count -= 1

    def stack_indices(self, end: np.ndarray, d: int) -> np.ndarray:
        """Absolute indices ``(B, d)`` of stacks ending at ``end`` with repeat-first padding."""
        end = np.asarray(end, dtype=np.int64)
        lo = np.maximum(self.ep_start[self._slot(end)], self.oldest)
        offsets = np.arange(-(d - 1), 1)
        return np.maximum(end[:, None] + offsets[None, :], lo[:, None])

    def _stacks(self, end: np.ndarray, d: int) -> np.ndarray:
        idx = self.stack_indices(end, d)
        return dequantize(self.frames[self._slot(idx)])

    def sample_indices(self, batch_size: int, rng: np.random.Generator) -> np.ndarray:
        """Absolute indices ``j`` of transitions ``(x[j-1], a[j], x[j])``, uniform over stored ones."""
        if len(self) == 0:
            raise ValueError("buffer holds no complete transition")
        lo, hi = self.oldest + 1, self.total
        out = np.empty(0, dtype=np.int64)
        while len(out) < batch_size:
            cand = rng.integers(lo, hi, size=2 * batch_size)
            cand = cand[~self.first[self._slot(cand)]]
            out = np.concatenate([out, cand])
        return out[:batch_size]

    def sample_transitions(self, batch_size: int, d: int, rng: np.random.Generator) -> TransitionBatch:
        j = self.sample_indices(batch_size, rng)
        return self.gather(j, d)

    def gather(self, j: np.ndarray, d: int) -> TransitionBatch:
        sj = self._slot(j)
        return TransitionBatch(
            obs=self._stacks(j - 1, d),
            action=self.actions[sj].copy(),
            next_obs=self._stacks(j, d),
            env_reward=self.rewards[sj].copy(),
            state=self.states[self._slot(j - 1)].copy(),
            next_state=self.states[sj].copy(),
            index=j,
        )

    def latest_stack(self, d: int) -> np.ndarray:
        """Stack ending at the most recent frame (what the agent acts on)."""
        if self.total == 0:
            raise ValueError("empty buffer")
        return self._stacks(np.array([self.total - 1]), d)[0]


# -- expert demonstrations ---------------------------------------------------


@dataclass
class DemoEpisode:
    frames: np.ndarray  # (T, H, W, 3) uint8
    actions: np.ndarray  # (T, A) action taken *from* frame t; last row zero
    rewards: np.ndarray  # (T,) reward for leaving frame t; last entry zero
    states: np.ndarray  # (T, 4) true (p, v) at frame t
    reward_mode: str = "dense"

    @property
    def length(self) -> int:
        return len(self.frames)


@dataclass
class DemoSet:
    """Expert episodes.  The sampling API exposes observations only."""

    episodes: list[DemoEpisode]
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.episodes)


def _stack_from_episode(frames: np.ndarray, end: int, d: int) -> np.ndarray:
    idx = np.maximum(np.arange(end - d + 1, end + 1), 0)
    return frames[idx]


def sample_expert_pairs(demos: DemoSet, batch_size: int, d: int, rng: np.random.Generator) -> ExpertPairs:
    """Uniform episode, then uniform transition inside it; returns stacked ``(obs, next_obs)``."""
    if len(demos) == 0:
        raise ValueError("empty demonstration set")
    ep_idx = rng.integers(0, len(demos), size=batch_size)
    obs, nxt = [], []
    for e in ep_idx:
        ep = demos.episodes[e]
        if ep.length < 2:
            raise ValueError("demo episode shorter than one transition")
        t = int(rng.integers(0, ep.length - 1))
        obs.append(_stack_from_episode(ep.frames, t, d))
        nxt.append(_stack_from_episode(ep.frames, t + 1, d))
    return ExpertPairs(dequantize(np.stack(obs)), dequantize(np.stack(nxt)))


def write_episode(path, ep: DemoEpisode):
    frames = np.ascontiguousarray(ep.frames, dtype=np.uint8)
    t, h, w, c = frames.shape
    if c != 3:
        raise ValueError("frames must have 3 channels")
    with open(path, "wb") as f:
        f.write(EP_MAGIC)
        f.write(struct.pack("<IHHBB", t, h, w, c, REWARD_MODE_CODES[ep.reward_mode]))
        f.write(frames.tobytes())
        f.write(np.ascontiguousarray(ep.actions, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(ep.rewards, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(ep.states, dtype="<f4").tobytes())


def read_episode(path, action_dim: int = 2) -> DemoEpisode:
    data = Path(path).read_bytes()
    if not data.startswith(EP_MAGIC):
        raise ValueError(f"{path}: bad episode magic")
    off = len(EP_MAGIC)
    t, h, w, c, mode = struct.unpack_from("<IHHBB", data, off)
    off += struct.calcsize("<IHHBB")
    modes = {v: k for k, v in REWARD_MODE_CODES.items()}
    if mode not in modes:
        raise ValueError(f"{path}: unknown reward mode code {mode}")
    n = t * h * w * c
    frames = np.frombuffer(data, np.uint8, n, off).reshape(t, h, w, c).copy()
    off += n
    actions = np.frombuffer(data, "<f4", t * action_dim, off).reshape(t, action_dim).copy()
    off += 4 * t * action_dim
    rewards = np.frombuffer(data, "<f4", t, off).copy()
    off += 4 * t
    states = np.frombuffer(data, "<f4", t * STATE_DIM, off).reshape(t, STATE_DIM).copy()
    off += 4 * t * STATE_DIM
    if off != len(data):
        raise ValueError(f"{path}: size mismatch ({len(data) - off} trailing bytes)")
    return DemoEpisode(frames, actions, rewards, states, modes[mode])


def write_demo_dir(path, demos: DemoSet):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    (path / "meta.json").write_text(json.dumps(demos.meta, indent=2, sort_keys=True))
    for i, ep in enumerate(demos.episodes):
        write_episode(path / f"episode_{i:05d}.bin", ep)


def read_demo_dir(path) -> DemoSet:
    path = Path(path)
    meta_path = path / "meta.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"{path}: no meta.json")
    files = sorted(path.glob("episode_*.bin"))
    if not files:
        raise FileNotFoundError(f"{path}: no episode files")
    return DemoSet([read_episode(f) for f in files], json.loads(meta_path.read_text()))
