"""Fully observable expert trained on the true (p, v) state, and demo recording.

The expert never sees pixels.  Demonstrations are rendered in the source theme
and stored in the episode format of :mod:`claifo.replay`; the imitator only
ever reads their frames.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from claifo.envsim import EnvConfig, PointMassEnv, render, reset, step
from claifo.losses import TDBatch, actor_loss, critic_td_loss
from claifo.nets import (
    Actor,
    Critic,
    NoiseSchedule,
    act,
    load_checkpoint,
    load_module,
    module_blocks,
    polyak_update,
    save_checkpoint,
)
from claifo.replay import DemoEpisode, DemoSet, quantize, write_demo_dir
from claifo.runs import CsvLog
from claifo.seeding import child_seed, numpy_stream, torch_stream

log = logging.getLogger(__name__)

STATE_DIM = 4
ORACLE_KP = 8.0
ORACLE_KD = 4.0


def scripted_controller(state, goal=(0.6, 0.6), kp: float = ORACLE_KP, kd: float = ORACLE_KD) -> np.ndarray:
    """Proportional-derivative reference: ``clip(kp (g - p) - kd v, -1, 1)``."""
    return np.clip(kp * (np.asarray(goal) - state.p) - kd * state.v, -1.0, 1.0)


def zero_controller(state, goal=None) -> np.ndarray:
    return np.zeros(2)


@dataclass
class ExpertTrainConfig:
    steps: int = 20_000
    seed: int = 0
    warmup: int = 1000
    batch_size: int = 256
    lr: float = 3e-4
    gamma: float = 0.99
    tau: float = 0.01
    clip: float = 0.3
    noise_start: float = 1.0
    noise_end: float = 0.1
    noise_duration: int = 100_000
    eval_interval: int = 5000
    eval_episodes: int = 10


class Expert:
    def __init__(self):
        self.actor = Actor(STATE_DIM)
        self.critic = Critic(STATE_DIM)

    def policy(self, state) -> np.ndarray:
        with torch.no_grad():
            s = torch.from_numpy(state.as_vector()).unsqueeze(0)
            return self.actor(s)[0].numpy().astype(np.float64)

    __call__ = policy

    def save(self, path):
        save_checkpoint(path, {**module_blocks("expert.actor", self.actor), **module_blocks("expert.critic",
                                                                                           self.critic)})

    @classmethod
    def load(cls, path) -> Expert:
        blocks = load_checkpoint(path)
        e = cls()
        load_module(e.actor, "expert.actor", blocks)
        load_module(e.critic, "expert.critic", blocks)
        return e


def rollout_return(policy, config: EnvConfig, rng: np.random.Generator) -> tuple[float, bool]:
    state, _ = reset(config, rng)
    total = 0.0
    for t in range(config.episode_length):
        state, r, done = step(state, policy(state), config, t)
        total += r
        if done:
            break
    success = float(np.linalg.norm(state.p - np.asarray(config.goal))) <= config.goal_radius
    return total, success


def evaluate_policy(policy, config: EnvConfig, episodes: int = 10, seed: int = 0,
                    stream: str = "expert-eval") -> list[float]:
    """Noise-free returns from start states fixed by ``(seed, stream)``.  Passing
    ``stream="eval"`` reproduces the start states of the imitator's evaluation."""
    rng = numpy_stream(seed, stream)
    return [rollout_return(policy, config, rng)[0] for _ in range(episodes)]


def normalized_score(ret: float, reference: float, floor: float) -> float:
    """Fraction of the way from ``floor`` to ``reference`` (1 = matches the reference)."""
    return (ret - floor) / (reference - floor)


class _StateBuffer:
    def __init__(self, capacity: int):
        self.s = np.zeros((capacity, STATE_DIM), np.float32)
        self.a = np.zeros((capacity, 2), np.float32)
        self.r = np.zeros((capacity, 1), np.float32)
        self.s2 = np.zeros((capacity, STATE_DIM), np.float32)
        self.n = 0

    def add(self, s, a, r, s2):
        i = self.n
        self.s[i], self.a[i], self.r[i], self.s2[i] = s, a, r, s2
        self.n += 1

    def sample(self, batch: int, rng):
        idx = rng.integers(0, self.n, size=batch)
        return tuple(torch.from_numpy(x[idx]) for x in (self.s, self.a, self.r, self.s2))


def train_expert(env_config: EnvConfig, cfg: ExpertTrainConfig, out_dir=None) -> tuple[Expert, list[dict]]:
    """Twin-critic deterministic actor-critic on the true state.  Episodes never
    terminate early, so the TD target bootstraps on every transition."""
    if env_config.reward_mode != "dense":
        raise ValueError("the expert is trained on the dense reward")
    torch.manual_seed(child_seed(cfg.seed, "expert-init"))
    expert = Expert()
    critic_target = Critic(STATE_DIM)
    critic_target.load_state_dict(expert.critic.state_dict())
    critic_target.requires_grad_(False)
    actor_opt = torch.optim.Adam(expert.actor.parameters(), lr=cfg.lr)
    critic_opt = torch.optim.Adam(expert.critic.parameters(), lr=cfg.lr)
    schedule = NoiseSchedule(cfg.noise_start, cfg.noise_end, cfg.noise_duration)
    noise = torch_stream(cfg.seed, "expert-noise")
    rng_env = numpy_stream(cfg.seed, "expert-env")
    rng_sample = numpy_stream(cfg.seed, "expert-sampling")
    buf = _StateBuffer(cfg.steps)
    env = PointMassEnv(env_config, rng_env)
    metrics = CsvLog(Path(out_dir) / "metrics.csv", ["step", "eval_return_mean", "eval_return_std", "loss_critic",
                                                     "loss_actor"]) if out_dir else None
    rows = []
    env.reset()
    losses_c, losses_a = [], []
    for t in range(1, cfg.steps + 1):
        sigma = schedule(t)
        s = env.state.as_vector()
        with torch.no_grad():
            a = act(expert.actor, torch.from_numpy(s).unsqueeze(0), sigma, cfg.clip, noise, mode="explore")[0]
        a = a.numpy().astype(np.float64)
        _, r, done = env.step(a)
        buf.add(s, a, r, env.state.as_vector())
        if done:
            env.reset()
        if t >= cfg.warmup:
            bs, ba, br, bs2 = buf.sample(cfg.batch_size, rng_sample)
            loss_c, _ = critic_td_loss(expert.critic, critic_target, expert.actor, TDBatch(bs, ba, bs2, br),
                                       cfg.gamma, sigma, cfg.clip, noise)
            if not torch.isfinite(loss_c):
                raise FloatingPointError(f"expert critic diverged at step {t}")
            critic_opt.zero_grad(set_to_none=True)
            loss_c.backward()
            critic_opt.step()
            polyak_update(critic_target, expert.critic, cfg.tau)
            loss_a = actor_loss(expert.actor, expert.critic, bs, sigma, cfg.clip, noise)
            actor_opt.zero_grad(set_to_none=True)
            loss_a.backward()
            actor_opt.step()
            losses_c.append(loss_c.item())
            losses_a.append(loss_a.item())
        if t % cfg.eval_interval == 0 or t == cfg.steps:
            rets = evaluate_policy(expert, env_config, cfg.eval_episodes, cfg.seed)
            row = dict(step=t, eval_return_mean=float(np.mean(rets)), eval_return_std=float(np.std(rets)),
                       loss_critic=float(np.mean(losses_c)) if losses_c else None,
                       loss_actor=float(np.mean(losses_a)) if losses_a else None)
            losses_c, losses_a = [], []
            rows.append(row)
            if metrics:
                metrics.write(row)
            log.info("expert step %d  return %.3f", t, row["eval_return_mean"])
    return expert, rows


def collect_demos(expert, source_config: EnvConfig, n_episodes: int = 100, seed: int = 0,
                  noise_std: float = 0.0) -> DemoSet:
    """Roll the expert out in the source domain and record rendered frames."""
    episodes = []
    for k in range(n_episodes):
        rng = numpy_stream(child_seed(seed, "demo"), f"episode-{k}")
        state, frame = reset(source_config, rng)
        frames, actions, rewards, states = [quantize(frame)], [], [], [state.as_vector()]
        for t in range(source_config.episode_length):
            a = np.asarray(expert(state), dtype=np.float64)
            if noise_std > 0:
                a = np.clip(a + rng.normal(0.0, noise_std, size=2), -1.0, 1.0)
            state, r, done = step(state, a, source_config, t)
            frames.append(quantize(render(state, source_config)))
            actions.append(a)
            rewards.append(r)
            states.append(state.as_vector())
            if done:
                break
        actions.append(np.zeros(2))
        rewards.append(0.0)
        episodes.append(DemoEpisode(
            frames=np.stack(frames),
            actions=np.asarray(actions, np.float32),
            rewards=np.asarray(rewards, np.float32),
            states=np.asarray(states, np.float32),
            reward_mode=source_config.reward_mode,
        ))
    meta = {"theme": source_config.theme.to_dict(), "config": source_config.to_dict(), "seed": seed,
            "n_episodes": n_episodes, "noise_std": noise_std}
    return DemoSet(episodes, meta)


def save_expert_run(out_dir, expert: Expert, env_config: EnvConfig, cfg: ExpertTrainConfig):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    expert.save(out / "checkpoint.bin")
    (out / "config.json").write_text(json.dumps({"env": env_config.to_dict(), "train": asdict(cfg)}, indent=2,
                                                sort_keys=True))


def demo_returns(demos: DemoSet) -> list[float]:
    return [float(ep.rewards[:-1].sum()) for ep in demos.episodes]


__all__ = [
    "Expert",
    "ExpertTrainConfig",
    "collect_demos",
    "demo_returns",
    "evaluate_policy",
    "normalized_score",
    "save_expert_run",
    "scripted_controller",
    "train_expert",
    "write_demo_dir",
    "zero_controller",
]
