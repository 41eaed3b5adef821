"""Point-mass reaching task rendered to RGB frames under swappable visual themes.

The dynamics never look at the theme, so a source/target pair built by
:func:`make_mismatch_pair` shares states, actions and rewards and differs only in
how states are drawn.  Rendering is nearest-pixel with no anti-aliasing, which
keeps frames bit-identical across runs.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

V_MAX = 0.2
GOAL_DISC_RADIUS = 0.12
AGENT_DISC_RADIUS = 0.08
REWARD_MODES = ("dense", "sparse")
MISMATCH_KINDS = ("light", "color", "full")


@dataclass
class PointMassState:
    p: np.ndarray
    v: np.ndarray

    def copy(self) -> PointMassState:
        return PointMassState(self.p.copy(), self.v.copy())

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.p, self.v]).astype(np.float32)


@dataclass
class VisualTheme:
    brightness: float = 1.0
    c_bg: tuple[float, float, float] = (0.85, 0.85, 0.80)
    c_agent: tuple[float, float, float] = (0.85, 0.15, 0.15)
    c_goal: tuple[float, float, float] = (0.15, 0.65, 0.25)

    def __post_init__(self):
        if self.brightness < 0:
            raise ValueError("brightness must be non-negative")
        for name in ("c_bg", "c_agent", "c_goal"):
            c = tuple(float(x) for x in getattr(self, name))
            if len(c) != 3 or min(c) < 0.0 or max(c) > 1.0:
                raise ValueError(f"{name} must be an RGB triple in [0,1]")
            setattr(self, name, c)

    def scaled(self, color: tuple[float, float, float]) -> np.ndarray:
        return np.clip(np.asarray(color, dtype=np.float64) * self.brightness, 0.0, 1.0)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> VisualTheme:
        return cls(
            brightness=float(d["brightness"]),
            c_bg=tuple(d["c_bg"]),
            c_agent=tuple(d["c_agent"]),
            c_goal=tuple(d["c_goal"]),
        )


@dataclass
class EnvConfig:
    image_size: int = 64
    episode_length: int = 100
    goal: tuple[float, float] = (0.6, 0.6)
    goal_radius: float = 0.15
    reward_mode: str = "dense"
    damping: float = 0.9
    force_gain: float = 0.03
    theme: VisualTheme = field(default_factory=VisualTheme)
    seed: int = 0

    def __post_init__(self):
        if self.image_size < 16:
            raise ValueError("image_size must be >= 16")
        self.goal = tuple(float(g) for g in self.goal)
        if len(self.goal) != 2 or max(abs(g) for g in self.goal) > 1.0:
            raise ValueError("goal must lie inside [-1,1]^2")
        if self.reward_mode not in REWARD_MODES:
            raise ValueError(f"reward_mode must be one of {REWARD_MODES}")
        if self.episode_length < 1:
            raise ValueError("episode_length must be positive")
        if isinstance(self.theme, dict):
            self.theme = VisualTheme.from_dict(self.theme)

    def replace(self, **changes) -> EnvConfig:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["goal"] = list(self.goal)
        d["theme"] = self.theme.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> EnvConfig:
        d = dict(d)
        d["theme"] = VisualTheme.from_dict(d["theme"])
        d["goal"] = tuple(d["goal"])
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, s: str) -> EnvConfig:
        return cls.from_dict(json.loads(s))


def reset(config: EnvConfig, rng: np.random.Generator) -> tuple[PointMassState, np.ndarray]:
    p = rng.uniform(-0.8, -0.4, size=2)
    state = PointMassState(p=p, v=np.zeros(2))
    return state, render(state, config)


def reward_at(p: np.ndarray, config: EnvConfig) -> float:
    dist = float(np.linalg.norm(p - np.asarray(config.goal)))
    if config.reward_mode == "dense":
        return -dist
    return 1.0 if dist <= config.goal_radius else 0.0


def step(
    state: PointMassState, action, config: EnvConfig, t: int = 0
) -> tuple[PointMassState, float, bool]:
    """Advance one step; ``t`` is the number of steps already taken this episode."""
    a = np.asarray(action, dtype=np.float64)
    if a.shape != (2,) or not np.all(np.isfinite(a)) or np.any(np.abs(a) > 1.0):
        raise ValueError(f"action must be a finite 2-vector in [-1,1], got {action!r}")
    v = np.clip(config.damping * state.v + config.force_gain * a, -V_MAX, V_MAX)
    p_raw = state.p + v
    p = np.clip(p_raw, -1.0, 1.0)
    v = np.where(np.abs(p_raw) > 1.0, 0.0, v)
    nxt = PointMassState(p=p, v=v)
    return nxt, reward_at(p, config), t + 1 >= config.episode_length


@lru_cache(maxsize=8)
def _pixel_grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    centers = -1.0 + (np.arange(size) + 0.5) * (2.0 / size)
    xs = centers[None, :].repeat(size, axis=0)
    ys = centers[::-1, None].repeat(size, axis=1)
    return xs, ys


def render(state: PointMassState, config: EnvConfig, theme: VisualTheme | None = None) -> np.ndarray:
    """Rasterize ``state`` as an ``(H, W, 3)`` float32 frame; row 0 is the top (y = +1)."""
    theme = config.theme if theme is None else theme
    n = config.image_size
    xs, ys = _pixel_grid(n)
    frame = np.empty((n, n, 3), dtype=np.float32)
    frame[...] = theme.scaled(theme.c_bg)
    gx, gy = config.goal
    goal_mask = (xs - gx) ** 2 + (ys - gy) ** 2 <= GOAL_DISC_RADIUS**2
    frame[goal_mask] = theme.scaled(theme.c_goal)
    px, py = state.p
    agent_mask = (xs - px) ** 2 + (ys - py) ** 2 <= AGENT_DISC_RADIUS**2
    frame[agent_mask] = theme.scaled(theme.c_agent)
    return frame


SOURCE_THEME = VisualTheme()
DARK_BRIGHTNESS = 0.45
SHIFTED_PALETTE = dict(
    c_bg=(0.20, 0.30, 0.55),
    c_agent=(0.95, 0.80, 0.20),
    c_goal=(0.80, 0.30, 0.85),
)


def make_mismatch_pair(kind: str, base: EnvConfig | None = None) -> tuple[EnvConfig, EnvConfig]:
    """Return ``(source, target)`` configs that differ only in their theme."""
    if kind not in MISMATCH_KINDS:
        raise ValueError(f"unknown mismatch kind {kind!r}; expected one of {MISMATCH_KINDS}")
    base = base or EnvConfig()
    source = base.replace(theme=SOURCE_THEME)
    if kind == "light":
        target_theme = dataclasses.replace(SOURCE_THEME, brightness=DARK_BRIGHTNESS)
    elif kind == "color":
        target_theme = dataclasses.replace(SOURCE_THEME, **SHIFTED_PALETTE)
    else:
        target_theme = dataclasses.replace(SOURCE_THEME, brightness=DARK_BRIGHTNESS, **SHIFTED_PALETTE)
    return source, base.replace(theme=target_theme)


class PointMassEnv:
    """Stateful wrapper that tracks the step counter and the frame history."""

    def __init__(self, config: EnvConfig, rng: np.random.Generator):
        self.config = config
        self.rng = rng
        self.state: PointMassState | None = None
        self.t = 0

    def reset(self) -> np.ndarray:
        self.state, frame = reset(self.config, self.rng)
        self.t = 0
        return frame

    def step(self, action) -> tuple[np.ndarray, float, bool]:
        if self.state is None:
            raise RuntimeError("call reset() before step()")
        self.state, reward, done = step(self.state, action, self.config, self.t)
        self.t += 1
        return render(self.state, self.config), reward, done

    def success(self) -> bool:
        return float(np.linalg.norm(self.state.p - np.asarray(self.config.goal))) <= self.config.goal_radius
