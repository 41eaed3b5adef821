"""Instrumented single-iteration audit of which parameters each update touches."""

import copy

import numpy as np
import torch

from claifo import augment
from claifo.algorithm import AlgoConfig, Trainer
from claifo.losses import Hyperparams, imitation_reward

UPDATES = ("update_encoder", "update_discriminator", "update_critic", "update_actor")


def small_config(variant="claifo", **kw):
    base = dict(variant=variant, total_steps=200, seed=0, hyper=Hyperparams(image_size=16, batch_size=8),
                warmup=25, eval_interval=100, eval_episodes=2, episode_length=20, buffer_capacity=10_000)
    if variant == "rl":
        base["sparse_env"] = True
    base.update(kw)
    return AlgoConfig(**base)


def modules(tr: Trainer) -> dict[str, torch.nn.Module]:
    mods = {"encoder": tr.encoder, "actor": tr.actor, "critic": tr.critic, "critic_target": tr.critic_target,
            "discriminator": tr.disc}
    if tr.byol is not None:
        mods["byol_predictor"] = tr.byol.predictor
        mods["byol_target"] = tr.byol.target_encoder
    return mods


def snapshot(tr: Trainer) -> dict[str, list[torch.Tensor]]:
    return {k: [p.detach().clone() for p in m.parameters()] for k, m in modules(tr).items()}


def changed(before, after) -> set[str]:
    return {k for k in before if any(not torch.equal(a, b) for a, b in zip(before[k], after[k]))}


def expected_pattern(cfg: AlgoConfig) -> dict[str, set[str]]:
    enc = set()
    if cfg.uses_contrastive:
        enc = {"encoder", "byol_predictor", "byol_target"} if cfg.contrastive_kind == "byol" else {"encoder"}
    crit = {"critic", "critic_target"} | ({"encoder"} if cfg.q_backprop else set())
    return {
        "update_encoder": enc,
        "update_discriminator": {"discriminator"} if cfg.uses_imitation else set(),
        "update_critic": crit,
        "update_actor": {"actor"},
    }


def routing_audit(cfg: AlgoConfig, demos) -> dict:
    """Run past warmup, then one instrumented iteration.  Returns the observed
    change pattern plus the reward-path checks."""
    tr = Trainer(cfg, demos if cfg.uses_imitation else None)
    while not tr.ready:
        tr.collect_step()
    tr.collect_step()
    observed = {}
    disc_aug_untouched = None
    reward_clean = aug_draws_only_for_q = None
    for name in UPDATES:
        before = snapshot(tr)
        aug_state = copy.deepcopy(tr.rng_aug.bit_generator.state)
        if name == "update_critic":
            enc0, disc0 = copy.deepcopy(tr.encoder), copy.deepcopy(tr.disc)
            tr.trace = {}
        getattr(tr, name)()
        observed[name] = changed(before, snapshot(tr))
        if name == "update_discriminator":
            disc_aug_untouched = tr.rng_aug.bit_generator.state == aug_state
        if name == "update_critic":
            t = tr.trace
            tr.trace = None
            if cfg.uses_imitation:
                with torch.no_grad():
                    ref = imitation_reward(disc0, enc0(t["obs"]), enc0(t["next_obs"]))
                reward_clean = bool(torch.equal(ref, t["r_chi"]))
            else:
                reward_clean = True
            # replay the augmentation stream: exactly the two Q-input draws, nothing for the reward
            g = np.random.Generator(np.random.PCG64())
            g.bit_generator.state = aug_state
            obs_aug = augment.augment_batch(tr.pipeline, t["obs"], g)
            next_aug = augment.augment_batch(tr.pipeline, t["next_obs"], g)
            aug_draws_only_for_q = (torch.equal(obs_aug, t["obs_aug"]) and torch.equal(next_aug, t["next_aug"])
                                    and g.bit_generator.state == tr.rng_aug.bit_generator.state)
    return {
        "observed": observed,
        "expected": expected_pattern(cfg),
        "disc_consumes_no_aug": disc_aug_untouched,
        "reward_from_clean_latents": reward_clean,
        "aug_only_for_q_inputs": aug_draws_only_for_q,
    }
