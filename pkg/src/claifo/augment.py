"""Randomized image augmentation for stacks of frames.

A draw holds one parameter set per stack and is shared by every frame of that
stack, so temporal structure survives augmentation.  Frames are channel-last
RGB in [0, 1]; batched input has shape ``(n, d, H, W, 3)``.

Parameter ranges (not fixed by the method, chosen to straddle the themes of
:mod:`claifo.envsim`; the 0.45 dark target lies inside the brightness range):

==============  ==============================  ==========  ==========
op              parameter                       light       color/full
==============  ==============================  ==========  ==========
brightness      factor ~ U(0.3, 1.7)            p = 1.0     p = 0.8
contrast        factor ~ U(0.5, 1.5)            -           p = 0.8
saturation      factor ~ U(0.5, 1.5)            -           p = 0.8
hue             shift ~ U(-0.25, 0.25)          -           p = 0.8
grayscale       -                               -           p = 0.2
gaussian_blur   sigma ~ U(0.1, 1.0), 3x3        -           p = 0.5
invert          -                               -           p = 0.2
hflip           -                               -           p = 0.5 (full)
vflip           -                               -           p = 0.5 (full)
resized_crop    area ~ U(0.6, 1.0), offsets U   -           p = 0.5 (full)
==============  ==============================  ==========  ==========

Hue rotation goes RGB -> HSV -> RGB with the usual hexcone formulas:
``v = max``, ``s = (max - min) / max`` and ``h`` piecewise by the arg-max
channel, divided by 6; the inverse uses ``i = floor(6h)`` with ``p, q, t`` as
in Foley & van Dam.  Grayscale uses luma weights (0.299, 0.587, 0.114).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

OP_KINDS = (
    "brightness",
    "contrast",
    "saturation",
    "hue",
    "grayscale",
    "gaussian_blur",
    "invert",
    "hflip",
    "vflip",
    "resized_crop",
)
COLOR_KINDS = OP_KINDS[:7]
PRESETS = ("none", "light", "color", "full")

DEFAULT_PARAMS: dict[str, dict[str, float]] = {
    "brightness": {"low": 0.3, "high": 1.7},
    "contrast": {"low": 0.5, "high": 1.5},
    "saturation": {"low": 0.5, "high": 1.5},
    "hue": {"low": -0.25, "high": 0.25},
    "grayscale": {},
    "gaussian_blur": {"low": 0.1, "high": 1.0},
    "invert": {},
    "hflip": {},
    "vflip": {},
    "resized_crop": {"low": 0.6, "high": 1.0},
}
DEFAULT_PROB = {
    "brightness": 0.8,
    "contrast": 0.8,
    "saturation": 0.8,
    "hue": 0.8,
    "grayscale": 0.2,
    "gaussian_blur": 0.5,
    "invert": 0.2,
    "hflip": 0.5,
    "vflip": 0.5,
    "resized_crop": 0.5,
}
LUMA = (0.299, 0.587, 0.114)


@dataclass
class AugmentOp:
    kind: str
    params: dict = field(default_factory=dict)
    apply_prob: float = 1.0

    def __post_init__(self):
        if self.kind not in OP_KINDS:
            raise ValueError(f"unknown augmentation {self.kind!r}")
        if not 0.0 <= self.apply_prob <= 1.0:
            raise ValueError("apply_prob must lie in [0, 1]")
        merged = dict(DEFAULT_PARAMS[self.kind])
        merged.update(self.params)
        self.params = merged


@dataclass
class AugmentPipeline:
    ops: list[AugmentOp]
    preset: str = "none"

    @classmethod
    def from_preset(cls, preset: str, overrides: list[dict] | None = None) -> AugmentPipeline:
        if preset not in PRESETS:
            raise ValueError(f"unknown preset {preset!r}; expected one of {PRESETS}")
        if preset == "none":
            kinds: tuple[str, ...] = ()
        elif preset == "light":
            kinds = ("brightness",)
        elif preset == "color":
            kinds = COLOR_KINDS
        else:
            kinds = OP_KINDS
        if preset == "light":
            ops = [AugmentOp("brightness", apply_prob=1.0)]
        else:
            ops = [AugmentOp(k, apply_prob=DEFAULT_PROB[k]) for k in kinds]
        for o in overrides or []:
            op = AugmentOp(o["kind"], dict(o.get("params", {})), float(o.get("apply_prob", 1.0)))
            for i, existing in enumerate(ops):
                if existing.kind == op.kind:
                    ops[i] = op
                    break
            else:
                ops.append(op)
        return cls(ops=ops, preset=preset)

    def to_dict(self) -> dict:
        base = AugmentPipeline.from_preset(self.preset)
        base_map = {o.kind: o for o in base.ops}
        overrides = [
            {"kind": o.kind, "params": dict(o.params), "apply_prob": o.apply_prob}
            for o in self.ops
            if o.kind not in base_map or base_map[o.kind] != o
        ]
        return {"preset": self.preset, "overrides": overrides}

    @classmethod
    def from_dict(cls, d: dict) -> AugmentPipeline:
        return cls.from_preset(d["preset"], d.get("overrides", []))


@dataclass
class OpDraw:
    kind: str
    active: np.ndarray  # (n,) bool
    values: dict[str, np.ndarray]  # name -> (n,)


@dataclass
class ParamDraw:
    n: int
    ops: list[OpDraw]

    def __len__(self):
        return len(self.ops)

    def subset(self, i: int) -> ParamDraw:
        return ParamDraw(
            1,
            [OpDraw(o.kind, o.active[i : i + 1], {k: v[i : i + 1] for k, v in o.values.items()}) for o in self.ops],
        )


def sample_params(pipeline: AugmentPipeline, rng: np.random.Generator, n: int = 1) -> ParamDraw:
    """Draw ``n`` independent parameter sets (one per stack)."""
    draws = []
    for op in pipeline.ops:
        active = rng.random(n) < op.apply_prob
        p = op.params
        if op.kind in ("brightness", "contrast", "saturation", "hue"):
            values = {"factor" if op.kind != "hue" else "shift": rng.uniform(p["low"], p["high"], n)}
        elif op.kind == "gaussian_blur":
            values = {"sigma": rng.uniform(p["low"], p["high"], n)}
        elif op.kind == "resized_crop":
            values = {
                "scale": rng.uniform(p["low"], p["high"], n),
                "u": rng.random(n),
                "v": rng.random(n),
            }
        else:
            values = {}
        draws.append(OpDraw(op.kind, active, values))
    return ParamDraw(n, draws)


def _gray(x: torch.Tensor) -> torch.Tensor:
    w = x.new_tensor(LUMA)
    return (x * w).sum(dim=-1, keepdim=True)


def rgb_to_hsv(x: torch.Tensor) -> torch.Tensor:
    r, g, b = x.unbind(-1)
    maxc, argmax = x.max(dim=-1)
    minc = x.min(dim=-1).values
    delta = maxc - minc
    s = torch.where(maxc > 0, delta / maxc.clamp_min(1e-12), torch.zeros_like(maxc))
    safe = delta.clamp_min(1e-12)
    hr = torch.remainder((g - b) / safe, 6.0)
    hg = (b - r) / safe + 2.0
    hb = (r - g) / safe + 4.0
    h = torch.where(argmax == 0, hr, torch.where(argmax == 1, hg, hb))
    h = torch.where(delta > 0, h / 6.0, torch.zeros_like(h))
    return torch.stack([h, s, maxc], dim=-1)


def hsv_to_rgb(x: torch.Tensor) -> torch.Tensor:
    h, s, v = x.unbind(-1)
    h6 = torch.remainder(h, 1.0) * 6.0
    i = torch.floor(h6)
    f = h6 - i
    i = i.long() % 6
    p = v * (1 - s)
    q = v * (1 - s * f)
    t = v * (1 - s * (1 - f))
    table = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)]
    out = torch.zeros_like(x)
    for k, (rr, gg, bb) in enumerate(table):
        m = (i == k).unsqueeze(-1)
        out = torch.where(m, torch.stack([rr, gg, bb], dim=-1), out)
    return out


def _blur(x: torch.Tensor, sigma: torch.Tensor) -> torch.Tensor:
    # separable 3-tap Gaussian with reflect padding; sigma has shape (n,)
    w = torch.exp(-1.0 / (2.0 * sigma.to(x.dtype) ** 2))
    norm = 1.0 + 2.0 * w
    w_side = (w / norm).view(-1, 1, 1, 1, 1)
    w_mid = (1.0 / norm).view(-1, 1, 1, 1, 1)
    n, d, h, wd, c = x.shape
    y = x.permute(0, 1, 4, 2, 3).reshape(n, d * c, h, wd)
    y = F.pad(y, (1, 1, 1, 1), mode="reflect").view(n, d, c, h + 2, wd + 2).permute(0, 1, 3, 4, 2)
    rows = w_side * y[:, :, :-2] + w_mid * y[:, :, 1:-1] + w_side * y[:, :, 2:]
    return w_side * rows[:, :, :, :-2] + w_mid * rows[:, :, :, 1:-1] + w_side * rows[:, :, :, 2:]


def _resized_crop(x: torch.Tensor, scale, u, v) -> torch.Tensor:
    n, d, h, w, c = x.shape
    side = torch.sqrt(scale.to(x.dtype))
    cx = (1.0 - side) * (2.0 * u.to(x.dtype) - 1.0)
    cy = (1.0 - side) * (2.0 * v.to(x.dtype) - 1.0)
    theta = torch.zeros(n, 2, 3, dtype=x.dtype)
    theta[:, 0, 0] = side
    theta[:, 1, 1] = side
    theta[:, 0, 2] = cx
    theta[:, 1, 2] = cy
    grid = F.affine_grid(theta, (n, d * c, h, w), align_corners=False)
    y = x.permute(0, 1, 4, 2, 3).reshape(n, d * c, h, w)
    y = F.grid_sample(y, grid, mode="bilinear", padding_mode="border", align_corners=False)
    return y.view(n, d, c, h, w).permute(0, 1, 3, 4, 2)


def _apply_op(kind: str, x: torch.Tensor, vals: dict[str, torch.Tensor]) -> torch.Tensor:
    def col(name):
        return vals[name].to(x.dtype).view(-1, 1, 1, 1, 1)

    if kind == "brightness":
        return x * col("factor")
    if kind == "contrast":
        mean = _gray(x).mean(dim=(2, 3), keepdim=True)
        return (x - mean) * col("factor") + mean
    if kind == "saturation":
        g = _gray(x)
        return g + col("factor") * (x - g)
    if kind == "hue":
        hsv = rgb_to_hsv(x)
        h = torch.remainder(hsv[..., 0] + col("shift")[..., 0], 1.0)
        return hsv_to_rgb(torch.stack([h, hsv[..., 1], hsv[..., 2]], dim=-1))
    if kind == "grayscale":
        return _gray(x).expand_as(x)
    if kind == "gaussian_blur":
        return _blur(x, vals["sigma"])
    if kind == "invert":
        return 1.0 - x
    if kind == "hflip":
        return x.flip(-2)
    if kind == "vflip":
        return x.flip(-3)
    if kind == "resized_crop":
        return _resized_crop(x, vals["scale"], vals["u"], vals["v"])
    raise ValueError(kind)


def apply(draw: ParamDraw, stacks):
    """Apply ``draw`` to one stack ``(d, H, W, 3)`` or a batch ``(n, d, H, W, 3)``.

    Accepts numpy arrays or torch tensors and returns the same kind.
    """
    is_numpy = isinstance(stacks, np.ndarray)
    x = torch.from_numpy(stacks) if is_numpy else stacks
    single = x.dim() == 4
    if single:
        x = x.unsqueeze(0)
    if x.dim() != 5 or x.shape[-1] != 3:
        raise ValueError(f"expected (d, H, W, 3) or (n, d, H, W, 3), got {tuple(x.shape)}")
    if x.shape[1] == 0:
        raise ValueError("empty frame stack")
    if x.shape[0] != draw.n:
        raise ValueError(f"draw holds {draw.n} parameter sets for {x.shape[0]} stacks")
    for op in draw.ops:
        if not op.active.any():
            continue
        vals = {k: torch.from_numpy(np.asarray(v)) for k, v in op.values.items()}
        y = _apply_op(op.kind, x, vals).clamp(0.0, 1.0)
        mask = torch.from_numpy(op.active).view(-1, 1, 1, 1, 1)
        x = torch.where(mask, y, x)
    if single:
        x = x[0]
    return x.numpy() if is_numpy else x


def augment_batch(pipeline: AugmentPipeline, stacks, rng: np.random.Generator):
    """Independent draw per stack, applied to the whole batch."""
    if not pipeline.ops:
        return stacks
    n = stacks.shape[0]
    return apply(sample_params(pipeline, rng, n), stacks)


def positive_pair(pipeline: AugmentPipeline, stacks, rng: np.random.Generator):
    """Two independently augmented views of the same stack(s)."""
    single = stacks.ndim == 4 if isinstance(stacks, np.ndarray) else stacks.dim() == 4
    n = 1 if single else stacks.shape[0]
    if not pipeline.ops:
        return stacks, stacks
    view_i = apply(sample_params(pipeline, rng, n), stacks)
    view_j = apply(sample_params(pipeline, rng, n), stacks)
    return view_i, view_j
