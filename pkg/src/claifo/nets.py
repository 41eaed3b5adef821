"""Encoder, actor, twin critics, discriminator and the BYOL head.

All networks act on channel-last frame stacks or on latent vectors.  Weights
use orthogonal initialisation with zero biases so a seed fully fixes them.
"""

from __future__ import annotations

import copy
import struct
from collections.abc import Callable, Iterable
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

LATENT_DIM = 64
FRAME_STACK = 3
ACTION_DIM = 2
HIDDEN = 256
CKPT_MAGIC = b"CLAIFO-CKPT-1"


def weight_init(m: nn.Module):
    if isinstance(m, nn.Linear):
        nn.init.orthogonal_(m.weight.data)
        if m.bias is not None:
            m.bias.data.fill_(0.0)
    elif isinstance(m, nn.Conv2d):
        nn.init.orthogonal_(m.weight.data, nn.init.calculate_gain("relu"))
        if m.bias is not None:
            m.bias.data.fill_(0.0)


def mlp(in_dim: int, hidden: int, out_dim: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Linear(in_dim, hidden),
        nn.ReLU(),
        nn.Linear(hidden, hidden),
        nn.ReLU(),
        nn.Linear(hidden, out_dim),
    )


def conv_out(size: int) -> int:
    size = (size - 3) // 2 + 1
    return size - 6


class Encoder(nn.Module):
    """Maps a ``(B, d, H, W, 3)`` stack in [0,1] to a tanh-bounded latent."""

    def __init__(self, image_size: int = 64, frame_stack: int = FRAME_STACK, latent_dim: int = LATENT_DIM,
                 channels: int = 32):
        super().__init__()
        self.image_size = image_size
        self.frame_stack = frame_stack
        self.latent_dim = latent_dim
        self.convnet = nn.Sequential(
            nn.Conv2d(3 * frame_stack, channels, 3, stride=2),
            nn.ReLU(),
            nn.Conv2d(channels, channels, 3, stride=1),
            nn.ReLU(),
            nn.Conv2d(channels, channels, 3, stride=1),
            nn.ReLU(),
            nn.Conv2d(channels, channels, 3, stride=1),
            nn.ReLU(),
        )
        self.repr_dim = channels * conv_out(image_size) ** 2
        self.fc = nn.Linear(self.repr_dim, latent_dim)
        self.norm = nn.LayerNorm(latent_dim)
        self.apply(weight_init)

    def forward(self, obs: torch.Tensor) -> torch.Tensor:
        if obs.dim() == 4:
            return self.forward(obs.unsqueeze(0))[0]
        if obs.dim() != 5 or obs.shape[1] != self.frame_stack:
            raise ValueError(f"expected a stack of {self.frame_stack} frames, got shape {tuple(obs.shape)}")
        b, d, h, w, c = obs.shape
        x = obs.permute(0, 1, 4, 2, 3).reshape(b, d * c, h, w) - 0.5
        h = self.convnet(x).flatten(1)
        return torch.tanh(self.norm(self.fc(h)))


class Actor(nn.Module):
    def __init__(self, in_dim: int = LATENT_DIM, action_dim: int = ACTION_DIM, hidden: int = HIDDEN):
        super().__init__()
        self.policy = mlp(in_dim, hidden, action_dim)
        self.apply(weight_init)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return torch.tanh(self.policy(z))


class Critic(nn.Module):
    """Two parameter-disjoint Q-networks."""

    def __init__(self, in_dim: int = LATENT_DIM, action_dim: int = ACTION_DIM, hidden: int = HIDDEN):
        super().__init__()
        self.q1 = mlp(in_dim + action_dim, hidden, 1)
        self.q2 = mlp(in_dim + action_dim, hidden, 1)
        self.apply(weight_init)

    def forward(self, z: torch.Tensor, a: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        za = torch.cat([z, a], dim=-1)
        return self.q1(za), self.q2(za)


class Discriminator(nn.Module):
    """D(z, z') in (0, 1); expert transitions are labelled 1."""

    def __init__(self, latent_dim: int = LATENT_DIM, hidden: int = HIDDEN):
        super().__init__()
        self.net = mlp(2 * latent_dim, hidden, 1)
        self.apply(weight_init)

    def forward(self, z: torch.Tensor, z_next: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.net(torch.cat([z, z_next], dim=-1)))


class ByolHead(nn.Module):
    """Online predictor plus an EMA copy of the encoder that never gets gradients."""

    def __init__(self, encoder: Encoder, hidden: int = 128, ema: float = 0.99):
        super().__init__()
        m = encoder.latent_dim
        self.predictor = nn.Sequential(nn.Linear(m, hidden), nn.ReLU(), nn.Linear(hidden, m))
        self.predictor.apply(weight_init)
        self.target_encoder = copy.deepcopy(encoder)
        self.target_encoder.requires_grad_(False)
        self.ema = ema

    @torch.no_grad()
    def update_target(self, encoder: Encoder):
        polyak_update(self.target_encoder, encoder, 1.0 - self.ema)


@dataclass
class NoiseSchedule:
    """Linear decay of the exploration std, constant after ``duration`` steps."""

    start: float = 1.0
    end: float = 0.1
    duration: int = 100_000

    def __call__(self, step: int) -> float:
        frac = min(max(step, 0) / self.duration, 1.0)
        return self.start + frac * (self.end - self.start)


ACT_MODES = ("explore", "target", "eval")


def act(actor: Actor, latent: torch.Tensor, sigma: float, clip_c: float, generator: torch.Generator | None,
        mode: str = "eval", straight_through: bool = False) -> torch.Tensor:
    """Policy mean plus mode-dependent noise, clamped to [-1, 1].

    ``explore`` adds unclipped N(0, sigma^2) noise, ``target`` clips it to
    [-clip_c, clip_c], ``eval`` adds nothing.  With ``straight_through`` the
    final clamp passes gradients as identity (used by the actor loss).
    """
    if mode not in ACT_MODES:
        raise ValueError(f"unknown act mode {mode!r}")
    mu = actor(latent)
    if mode == "eval" or sigma == 0.0:
        a = mu
    else:
        eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype) * sigma
        if mode == "target":
            eps = eps.clamp(-clip_c, clip_c)
        a = mu + eps
    clamped = a.clamp(-1.0, 1.0)
    if straight_through:
        return a + (clamped - a).detach()
    return clamped


@torch.no_grad()
def polyak_update(target: nn.Module, online: nn.Module, tau: float):
    """``target <- (1 - tau) * target + tau * online``, elementwise."""
    tp = list(target.parameters())
    op = list(online.parameters())
    if len(tp) != len(op) or any(a.shape != b.shape for a, b in zip(tp, op)):
        raise ValueError("target and online parameter sets differ in shape")
    for t, o in zip(tp, op):
        t.mul_(1.0 - tau).add_(o, alpha=tau)


def grad(loss_fn: Callable[..., torch.Tensor], params: Iterable[torch.Tensor], *inputs) -> list[torch.Tensor]:
    """Gradient of a scalar loss w.r.t. ``params`` (zeros where unused)."""
    params = list(params)
    loss = loss_fn(*inputs)
    if loss.numel() != 1:
        raise ValueError("loss must be scalar")
    if not torch.isfinite(loss):
        raise FloatingPointError(f"non-finite loss {loss.item()}")
    gs = torch.autograd.grad(loss, params, allow_unused=True)
    return [torch.zeros_like(p) if g is None else g for p, g in zip(params, gs)]


@contextmanager
def frozen(*modules: nn.Module):
    """Temporarily stop gradients into ``modules``."""
    saved = [[p.requires_grad for p in m.parameters()] for m in modules]
    for m in modules:
        m.requires_grad_(False)
    try:
        yield
    finally:
        for m, flags in zip(modules, saved):
            for p, f in zip(m.parameters(), flags):
                p.requires_grad_(f)


# -- checkpoint format ------------------------------------------------------
# magic, u32 block count, then per block:
#   u16 name length, utf-8 name, u8 dtype code (1 = f32), u8 ndim, u32[ndim] shape,
#   raw little-endian float32 data.  All integers little-endian.


def save_checkpoint(path, blocks: dict[str, np.ndarray | torch.Tensor]):
    path = Path(path)
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", len(blocks)))
        for name, arr in blocks.items():
            if isinstance(arr, torch.Tensor):
                arr = arr.detach().cpu().numpy()
            arr = np.ascontiguousarray(arr, dtype="<f4")
            raw = name.encode("utf-8")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            f.write(struct.pack("<BB", 1, arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(CKPT_MAGIC):
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    off = len(CKPT_MAGIC)
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    blocks = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off : off + nlen].decode("utf-8")
        off += nlen
        dtype, ndim = struct.unpack_from("<BB", data, off)
        off += 2
        if dtype != 1:
            raise ValueError(f"{path}: unsupported dtype code {dtype}")
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        size = int(np.prod(shape)) * 4
        blocks[name] = np.frombuffer(data, dtype="<f4", count=size // 4, offset=off).reshape(shape).copy()
        off += size
    if off != len(data):
        raise ValueError(f"{path}: trailing bytes after last block")
    return blocks


def module_blocks(prefix: str, module: nn.Module) -> dict[str, torch.Tensor]:
    return {f"{prefix}.{k}": v for k, v in module.state_dict().items()}


def load_module(module: nn.Module, prefix: str, blocks: dict[str, np.ndarray]):
    own = module.state_dict()
    state = {}
    for k, v in own.items():
        key = f"{prefix}.{k}"
        if key not in blocks:
            raise KeyError(f"checkpoint lacks {key}")
        if tuple(blocks[key].shape) != tuple(v.shape):
            raise ValueError(f"{key}: shape {blocks[key].shape} does not match {tuple(v.shape)}")
        state[k] = torch.from_numpy(blocks[key]).to(v.dtype)
    module.load_state_dict(state)
