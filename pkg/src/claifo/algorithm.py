"""Training loop for latent adversarial imitation with a contrastive encoder.

One iteration = one environment step in the target domain followed by the
encoder, discriminator, critic and actor updates, in that order, each on its
own freshly sampled batch.

Gradient routing per update:

=================  =======  =====  =============  ======  ================
update             encoder  actor  critic         disc    critic targets
=================  =======  =====  =============  ======  ================
encoder            yes      -      -              -       -
discriminator      -        -      -              yes     -
critic             yes [1]  -      yes            -       polyak
actor              -        yes    -              -       -
=================  =======  =====  =============  ======  ================

[1] not for ``claifo-no-qbackprop``.  The imitation reward is always computed
from un-augmented latents; augmentation randomness is only consumed by the
encoder, critic and actor updates.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from claifo import augment
from claifo.augment import AugmentPipeline
from claifo.envsim import EnvConfig, PointMassEnv, make_mismatch_pair
from claifo.losses import (
    Hyperparams,
    TDBatch,
    actor_loss,
    byol_loss,
    combined_reward,
    critic_td_loss,
    discriminator_bce,
    imitation_reward,
    infonce,
)
from claifo.nets import (
    Actor,
    ByolHead,
    Critic,
    Discriminator,
    Encoder,
    NoiseSchedule,
    act,
    load_module,
    module_blocks,
    polyak_update,
    save_checkpoint,
)
from claifo.replay import AgentBuffer, DemoSet, sample_expert_pairs
from claifo.runs import CsvLog, RunManifest
from claifo.seeding import child_seed, numpy_stream, torch_stream

log = logging.getLogger(__name__)

VARIANTS = (
    "claifo",
    "byol-laifo",
    "laifo",
    "claifo-no-qbackprop",
    "claifo-full-aug",
    "claifo-no-aug",
    "rl+claifo",
    "rl+laifo",
    "rl",
)
METRIC_COLUMNS = [
    "step",
    "eval_return_mean",
    "eval_return_std",
    "loss_disc",
    "loss_critic",
    "loss_contrastive",
    "loss_actor",
    "r_chi_mean",
    "env_reward_mean",
]
EVAL_COLUMNS = ["step", "episode", "return", "success"]

# variant -> presets it may run with
_ALLOWED_PRESETS = {
    "claifo": ("light", "color"),
    "byol-laifo": ("light", "color"),
    "claifo-no-qbackprop": ("light", "color"),
    "rl+claifo": ("light", "color"),
    "claifo-full-aug": ("full",),
    "claifo-no-aug": ("none",),
    "laifo": ("none",),
    "rl+laifo": ("none",),
    "rl": ("none",),
}


class ConfigError(ValueError):
    """Inconsistent combination of configuration fields."""


def default_preset(variant: str, mismatch: str) -> str:
    allowed = _ALLOWED_PRESETS[variant]
    if len(allowed) == 1:
        return allowed[0]
    return "light" if mismatch == "light" else "color"


@dataclass
class AlgoConfig:
    variant: str = "claifo"
    mismatch: str = "light"
    aug_preset: str | None = None
    total_steps: int = 150_000
    seed: int = 0
    hyper: Hyperparams = field(default_factory=Hyperparams)
    warmup: int = 1000
    eval_interval: int = 5000
    eval_episodes: int = 10
    buffer_capacity: int = 1_000_000
    latent_dim: int = 64
    noise_start: float = 1.0
    noise_end: float = 0.1
    noise_duration: int = 100_000
    byol_ema: float = 0.99
    sparse_env: bool = False
    fuse_state: bool = False
    episode_length: int = 100
    checkpoint_interval: int = 0

    def __post_init__(self):
        if isinstance(self.hyper, dict):
            self.hyper = Hyperparams(**self.hyper)
        if self.aug_preset is None and self.variant in _ALLOWED_PRESETS:
            self.aug_preset = default_preset(self.variant, self.mismatch)
        self.validate()

    def validate(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.mismatch not in ("light", "color", "full"):
            raise ConfigError(f"unknown mismatch {self.mismatch!r}")
        if self.aug_preset not in _ALLOWED_PRESETS[self.variant]:
            raise ConfigError(
                f"variant {self.variant} cannot run with aug preset {self.aug_preset!r} "
                f"(allowed: {', '.join(_ALLOWED_PRESETS[self.variant])})"
            )
        if self.variant == "rl" and not self.sparse_env:
            raise ConfigError("variant rl is the sparse-reward baseline and needs sparse_env")
        if self.fuse_state and not self.is_rl_plus and self.variant != "rl":
            raise ConfigError("fuse_state is only defined for reward-combining variants")
        if self.total_steps < 1 or self.eval_interval < 1:
            raise ConfigError("total_steps and eval_interval must be positive")

    @property
    def uses_contrastive(self) -> bool:
        return self.variant not in ("laifo", "rl+laifo", "rl")

    @property
    def contrastive_kind(self) -> str | None:
        if not self.uses_contrastive:
            return None
        return "byol" if self.variant == "byol-laifo" else "infonce"

    @property
    def q_backprop(self) -> bool:
        return self.variant != "claifo-no-qbackprop"

    @property
    def is_rl_plus(self) -> bool:
        return self.variant.startswith("rl+")

    @property
    def uses_imitation(self) -> bool:
        return self.variant != "rl"

    @property
    def uses_env_reward(self) -> bool:
        return self.is_rl_plus or self.variant == "rl"

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["hyper"] = self.hyper.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> AlgoConfig:
        return cls(**d)

    def env_pair(self) -> tuple[EnvConfig, EnvConfig]:
        base = EnvConfig(
            image_size=self.hyper.image_size,
            episode_length=self.episode_length,
            reward_mode="sparse" if self.sparse_env else "dense",
            seed=self.seed,
        )
        return make_mismatch_pair(self.mismatch, base)


def _to_tensor(x: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(x))


class Trainer:
    """Mutable training state: networks, optimisers, buffers, rng streams and logs."""

    def __init__(self, config: AlgoConfig, demos: DemoSet | None = None, require_demos: bool = True):
        if require_demos and config.uses_imitation and (demos is None or len(demos) == 0):
            raise ValueError(f"variant {config.variant} needs expert demonstrations")
        self.config = config
        self.demos = demos
        hp = config.hyper
        self.source_config, self.target_config = config.env_pair()
        seed = config.seed

        self.rng_env = numpy_stream(seed, "env")
        self.rng_aug = numpy_stream(seed, "aug")
        self.rng_sample = numpy_stream(seed, "sampling")
        self.noise_gen = torch_stream(seed, "noise")

        torch.manual_seed(child_seed(seed, "init"))
        m = config.latent_dim
        extra = 4 if config.fuse_state else 0
        self.encoder = Encoder(hp.image_size, hp.frame_stack, m)
        self.actor = Actor(m + extra)
        self.critic = Critic(m + extra)
        self.critic_target = Critic(m + extra)
        self.critic_target.load_state_dict(self.critic.state_dict())
        self.critic_target.requires_grad_(False)
        self.disc = Discriminator(m)
        self.byol = ByolHead(self.encoder, ema=config.byol_ema) if config.contrastive_kind == "byol" else None

        adam = lambda params, lr: torch.optim.Adam(params, lr=lr, betas=(0.9, 0.999), eps=1e-8)
        self.encoder_opt = adam(self.encoder.parameters(), hp.lr)
        contrastive_params = list(self.encoder.parameters())
        if self.byol is not None:
            contrastive_params += list(self.byol.predictor.parameters())
        self.contrastive_opt = adam(contrastive_params, hp.lr)
        self.critic_opt = adam(self.critic.parameters(), hp.lr)
        self.actor_opt = adam(self.actor.parameters(), hp.lr)
        self.disc_opt = adam(self.disc.parameters(), hp.lr_disc)

        self.pipeline = AugmentPipeline.from_preset(config.aug_preset)
        self.schedule = NoiseSchedule(config.noise_start, config.noise_end, config.noise_duration)
        frame_shape = (hp.image_size, hp.image_size, 3)
        self.buffer = AgentBuffer(config.buffer_capacity, frame_shape)
        self.env = PointMassEnv(self.target_config, self.rng_env)
        self.episode_done = True
        self.step = 0
        self.trace: dict | None = None  # set to {} to record critic-update internals
        self._reset_accumulators()

    # -- helpers ---------------------------------------------------------------

    def _reset_accumulators(self):
        self.acc: dict[str, list[float]] = {
            k: [] for k in ("loss_disc", "loss_critic", "loss_contrastive", "loss_actor", "r_chi_mean",
                            "env_reward_mean")
        }

    def sigma(self) -> float:
        return self.schedule(self.step)

    def _augment(self, obs: torch.Tensor) -> torch.Tensor:
        return augment.augment_batch(self.pipeline, obs, self.rng_aug)

    def _policy_input(self, z: torch.Tensor, state) -> torch.Tensor:
        if not self.config.fuse_state:
            return z
        return torch.cat([z, _to_tensor(np.asarray(state, dtype=np.float32)).reshape(z.shape[0], -1)], dim=-1)

    @property
    def ready(self) -> bool:
        return self.step >= self.config.warmup and len(self.buffer) > 0

    # -- Algorithm steps ---------------------------------------------------------

    def collect_step(self):
        """One target-domain env step with the exploration policy on the clean latent."""
        if self.episode_done:
            frame = self.env.reset()
            self.buffer.push(frame, state=self.env.state.as_vector())
            self.episode_done = False
        stack = self.buffer.latest_stack(self.config.hyper.frame_stack)
        with torch.no_grad():
            z = self.encoder(_to_tensor(stack).unsqueeze(0))
            z = self._policy_input(z, self.env.state.as_vector())
            a = act(self.actor, z, self.sigma(), self.config.hyper.clip, self.noise_gen, mode="explore")[0]
        action = a.numpy().astype(np.float64)
        frame, reward, done = self.env.step(action)
        self.buffer.push(frame, action=action, done=done, reward=reward, state=self.env.state.as_vector())
        self.episode_done = done
        self.step += 1

    def _sample(self):
        return self.buffer.sample_transitions(self.config.hyper.batch_size, self.config.hyper.frame_stack,
                                              self.rng_sample)

    def update_encoder(self) -> float | None:
        kind = self.config.contrastive_kind
        if kind is None:
            return None
        batch = self._sample()
        obs = _to_tensor(batch.obs)
        view_i, view_j = augment.positive_pair(self.pipeline, obs, self.rng_aug)
        z_i = self.encoder(view_i)
        z_j = self.encoder(view_j)
        if kind == "infonce":
            loss = infonce(z_i, z_j, self.config.hyper.temperature)
        else:
            with torch.no_grad():
                t_i = self.byol.target_encoder(view_i)
                t_j = self.byol.target_encoder(view_j)
            loss = byol_loss(z_i, t_j, self.byol.predictor) + byol_loss(z_j, t_i, self.byol.predictor)
        self.contrastive_opt.zero_grad(set_to_none=True)
        loss.backward()
        self.contrastive_opt.step()
        if self.byol is not None:
            self.byol.update_target(self.encoder)
        return float(loss.item())

    def update_discriminator(self) -> float | None:
        if not self.config.uses_imitation:
            return None
        hp = self.config.hyper
        expert = sample_expert_pairs(self.demos, hp.batch_size, hp.frame_stack, self.rng_sample)
        agent = self._sample()
        with torch.no_grad():
            ze = self.encoder(_to_tensor(expert.obs))
            ze_next = self.encoder(_to_tensor(expert.next_obs))
            za = self.encoder(_to_tensor(agent.obs))
            za_next = self.encoder(_to_tensor(agent.next_obs))
        loss = discriminator_bce(self.disc, (ze, ze_next), (za, za_next))
        self.disc_opt.zero_grad(set_to_none=True)
        loss.backward()
        self.disc_opt.step()
        return float(loss.item())

    def update_critic(self) -> float:
        cfg, hp = self.config, self.config.hyper
        batch = self._sample()
        obs, next_obs = _to_tensor(batch.obs), _to_tensor(batch.next_obs)
        with torch.no_grad():
            r_chi = None
            if cfg.uses_imitation:
                z_clean = self.encoder(obs)
                z_clean_next = self.encoder(next_obs)
                r_chi = imitation_reward(self.disc, z_clean, z_clean_next)
            env_r = _to_tensor(batch.env_reward).unsqueeze(-1)
            if cfg.variant == "rl":
                reward = env_r
            elif cfg.is_rl_plus:
                reward = combined_reward(env_r, r_chi)
            else:
                reward = r_chi
        obs_aug = self._augment(obs)
        with torch.no_grad():
            next_aug = self._augment(next_obs)
            z_aug_next = self._policy_input(self.encoder(next_aug), batch.next_state)
        z_aug = self.encoder(obs_aug)
        if not cfg.q_backprop:
            z_aug = z_aug.detach()
        z_aug = self._policy_input(z_aug, batch.state)
        td = TDBatch(z_aug, _to_tensor(batch.action), z_aug_next, reward)
        loss, y = critic_td_loss(self.critic, self.critic_target, self.actor, td, hp.gamma, self.sigma(), hp.clip,
                                 self.noise_gen)
        if not torch.isfinite(loss):
            raise FloatingPointError(f"non-finite critic loss at step {self.step}: {loss.item()}")
        self.critic_opt.zero_grad(set_to_none=True)
        self.encoder_opt.zero_grad(set_to_none=True)
        loss.backward()
        self.critic_opt.step()
        if cfg.q_backprop:
            self.encoder_opt.step()
        polyak_update(self.critic_target, self.critic, hp.tau)
        if r_chi is not None:
            self.acc["r_chi_mean"].append(float(r_chi.mean()))
        if cfg.uses_env_reward:
            self.acc["env_reward_mean"].append(float(env_r.mean()))
        if self.trace is not None:
            self.trace.update(obs=obs, obs_aug=obs_aug, next_obs=next_obs, next_aug=next_aug, r_chi=r_chi,
                              reward=reward, y=y, index=batch.index)
        return float(loss.item())

    def update_actor(self) -> float:
        hp = self.config.hyper
        batch = self._sample()
        with torch.no_grad():
            z = self.encoder(self._augment(_to_tensor(batch.obs)))
            z = self._policy_input(z, batch.state)
        loss = actor_loss(self.actor, self.critic, z, self.sigma(), hp.clip, self.noise_gen)
        self.actor_opt.zero_grad(set_to_none=True)
        loss.backward()
        self.actor_opt.step()
        return float(loss.item())

    def iteration(self):
        self.collect_step()
        if not self.ready:
            return
        for key, fn in (
            ("loss_contrastive", self.update_encoder),
            ("loss_disc", self.update_discriminator),
            ("loss_critic", self.update_critic),
            ("loss_actor", self.update_actor),
        ):
            v = fn()
            if v is not None:
                self.acc[key].append(v)

    # -- evaluation and persistence ----------------------------------------------

    def evaluate(self, episodes: int | None = None) -> tuple[list[float], list[bool]]:
        """Noise-free episodes in the target domain; start states fixed per seed."""
        episodes = episodes or self.config.eval_episodes
        rng = numpy_stream(self.config.seed, "eval")
        env = PointMassEnv(self.target_config, rng)
        d = self.config.hyper.frame_stack
        returns, successes = [], []
        for _ in range(episodes):
            frames = [env.reset()]
            total, done = 0.0, False
            while not done:
                idx = np.maximum(np.arange(len(frames) - d, len(frames)), 0)
                stack = np.stack([frames[i] for i in idx])
                # match the replay path: the learner only ever sees quantised frames
                stack = np.round(stack * 255.0).astype(np.float32) / 255.0
                with torch.no_grad():
                    z = self.encoder(_to_tensor(stack).unsqueeze(0))
                    z = self._policy_input(z, env.state.as_vector())
                    a = act(self.actor, z, 0.0, 0.0, None, mode="eval")[0].numpy().astype(np.float64)
                frame, r, done = env.step(a)
                frames.append(frame)
                total += r
            returns.append(total)
            successes.append(env.success())
        return returns, successes

    def checkpoint_blocks(self) -> dict:
        blocks = {}
        for name, mod in (("encoder", self.encoder), ("actor", self.actor), ("critic", self.critic),
                          ("critic_target", self.critic_target), ("discriminator", self.disc)):
            blocks.update(module_blocks(name, mod))
        if self.byol is not None:
            blocks.update(module_blocks("byol", self.byol))
        return blocks

    def load_blocks(self, blocks: dict):
        for name, mod in (("encoder", self.encoder), ("actor", self.actor), ("critic", self.critic),
                          ("critic_target", self.critic_target), ("discriminator", self.disc)):
            load_module(mod, name, blocks)
        if self.byol is not None:
            load_module(self.byol, "byol", blocks)

    def summarise_interval(self) -> dict:
        def mean(xs):
            return float(np.mean(xs)) if xs else None

        row = {k: mean(v) for k, v in self.acc.items()}
        self._reset_accumulators()
        return row


def train(config: AlgoConfig, demos: DemoSet | None, out_dir, manifest: RunManifest | None = None) -> Path:
    """Run the full loop and write ``metrics.csv``, ``eval.csv``, ``config.json`` and ``checkpoint.bin``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = manifest or RunManifest(command="imitate", config=config.to_dict(), seed=config.seed)
    manifest.write(out)
    (out / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True))
    trainer = Trainer(config, demos)
    metrics = CsvLog(out / "metrics.csv", METRIC_COLUMNS)
    evals = CsvLog(out / "eval.csv", EVAL_COLUMNS)
    for _ in range(config.total_steps):
        trainer.iteration()
        t = trainer.step
        if t % config.eval_interval == 0:
            returns, successes = trainer.evaluate()
            row = trainer.summarise_interval()
            row.update(step=t, eval_return_mean=float(np.mean(returns)), eval_return_std=float(np.std(returns)))
            metrics.write(row)
            for i, (r, s) in enumerate(zip(returns, successes)):
                evals.write({"step": t, "episode": i, "return": float(r), "success": int(s)})
            log.info("step %d  eval return %.3f +- %.3f", t, row["eval_return_mean"], row["eval_return_std"])
        if config.checkpoint_interval and t % config.checkpoint_interval == 0:
            save_checkpoint(out / f"checkpoint_{t:07d}.bin", trainer.checkpoint_blocks())
    save_checkpoint(out / "checkpoint.bin", trainer.checkpoint_blocks())
    manifest.finish(out, metrics="metrics.csv", eval="eval.csv", checkpoint="checkpoint.bin", config="config.json")
    return out


def load_trainer(run_dir) -> Trainer:
    """Rebuild networks from a run directory for evaluation or analysis; buffers start empty."""
    from claifo.nets import load_checkpoint

    run_dir = Path(run_dir)
    config = AlgoConfig.from_dict(json.loads((run_dir / "config.json").read_text()))
    trainer = Trainer(config, require_demos=False)
    trainer.load_blocks(load_checkpoint(run_dir / "checkpoint.bin"))
    return trainer
