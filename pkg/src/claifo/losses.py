"""Objectives for the contrastive encoder, the discriminator, the critics and the actor."""

from __future__ import annotations

from collections.abc import Callable
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F

from claifo.nets import Actor, Critic, act, frozen

D_EPS = 1e-6


@dataclass
class Hyperparams:
    frame_stack: int = 3
    gamma: float = 0.99
    image_size: int = 64
    batch_size: int = 256
    optimizer: str = "adam"
    lr: float = 1e-4
    lr_disc: float = 4e-4
    tau: float = 0.01
    clip: float = 0.3
    temperature: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.batch_size < 2 or self.batch_size % 2:
            raise ValueError("batch_size must be even and >= 2")
        if self.optimizer != "adam":
            raise ValueError("only the Adam optimizer is supported")

    def to_dict(self) -> dict:
        return asdict(self)


def _check_nonzero(*zs: torch.Tensor):
    for z in zs:
        if (z.detach().norm(dim=-1) == 0).any():
            raise ValueError("zero-norm embedding: cosine similarity undefined")


def infonce(z_i: torch.Tensor, z_j: torch.Tensor, temperature: float = 1.0) -> torch.Tensor:
    """NT-Xent loss averaged over all 2N anchors.

    Row ``k`` of ``z_i`` and row ``k`` of ``z_j`` form a positive pair; every
    other point in the 2N-sized union acts as a negative.
    """
    if z_i.shape != z_j.shape or z_i.dim() != 2:
        raise ValueError("views must be aligned (N, m) batches")
    _check_nonzero(z_i, z_j)
    n = z_i.shape[0]
    z = F.normalize(torch.cat([z_i, z_j], dim=0), dim=1)
    logits = z @ z.t() / temperature
    self_mask = torch.eye(2 * n, dtype=torch.bool)
    logits = logits.masked_fill(self_mask, float("-inf"))
    targets = torch.cat([torch.arange(n, 2 * n), torch.arange(0, n)])
    return F.cross_entropy(logits, targets)


def byol_loss(online_i: torch.Tensor, target_j: torch.Tensor, predictor: Callable) -> torch.Tensor:
    """Mean of ``2 - 2 cos(predictor(online_i), target_j)``; the target is detached.

    Symmetrise by adding the call with the views swapped.
    """
    p = predictor(online_i)
    t = target_j.detach()
    _check_nonzero(p, t)
    return (2.0 - 2.0 * F.cosine_similarity(p, t, dim=-1)).mean()


def discriminator_bce(disc: Callable, expert_pairs, agent_pairs) -> torch.Tensor:
    """``-mean log D(expert) - mean log(1 - D(agent))`` with D clamped away from 0 and 1."""
    d_exp = disc(*expert_pairs).clamp(D_EPS, 1.0 - D_EPS)
    d_agent = disc(*agent_pairs).clamp(D_EPS, 1.0 - D_EPS)
    loss = -torch.log(d_exp).mean() - torch.log1p(-d_agent).mean()
    if not torch.isfinite(loss):
        raise FloatingPointError("non-finite discriminator loss")
    return loss


def reward_from_prob(d: torch.Tensor) -> torch.Tensor:
    return -torch.log1p(-d.clamp(D_EPS, 1.0 - D_EPS))


def imitation_reward(disc: Callable, z: torch.Tensor, z_next: torch.Tensor) -> torch.Tensor:
    """``-log(1 - D(z, z'))``; callers pass latents of un-augmented observations."""
    with torch.no_grad():
        return reward_from_prob(disc(z, z_next))


def combined_reward(env_reward, r_chi):
    return env_reward + r_chi


@dataclass
class TDBatch:
    z_aug: torch.Tensor  # carries encoder gradient unless detached upstream
    action: torch.Tensor
    z_aug_next: torch.Tensor
    reward: torch.Tensor  # already computed from clean latents, shape (B, 1)


def td_target(critic_target: Critic, actor: Actor, z_aug_next: torch.Tensor, reward: torch.Tensor,
              gamma: float, sigma: float, clip: float, generator: torch.Generator | None) -> torch.Tensor:
    with torch.no_grad():
        a_next = act(actor, z_aug_next, sigma, clip, generator, mode="target")
        tq1, tq2 = critic_target(z_aug_next, a_next)
        y = reward + gamma * torch.min(tq1, tq2)
    if not torch.isfinite(y).all():
        raise FloatingPointError("non-finite TD target")
    return y


def critic_td_loss(critic: Critic, critic_target: Critic, actor: Actor, batch: TDBatch, gamma: float,
                   sigma: float, clip: float, generator: torch.Generator | None = None):
    """Twin-critic regression onto a stop-gradient clipped-double-Q target.

    Returns ``(loss, y)``.  Gradients reach both critics and, through
    ``batch.z_aug``, the encoder.
    """
    y = td_target(critic_target, actor, batch.z_aug_next, batch.reward, gamma, sigma, clip, generator)
    q1, q2 = critic(batch.z_aug, batch.action)
    loss = F.mse_loss(q1, y) + F.mse_loss(q2, y)
    return loss, y


def actor_loss(actor: Actor, critic: Critic, z_aug: torch.Tensor, sigma: float, clip: float,
               generator: torch.Generator | None = None) -> torch.Tensor:
    """``-mean Q1(z, pi(z) + clipped noise)`` on detached latents; only the actor gets gradient."""
    z = z_aug.detach()
    a = act(actor, z, sigma, clip, generator, mode="target", straight_through=True)
    with frozen(critic):
        q1, _ = critic(z, a)
    return -q1.mean()

