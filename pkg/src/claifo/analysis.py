"""Latent-space diagnostics: PCA of encoder outputs across domains and policies.

Four groups of latents are produced by one encoder: optimal and uniform-random
policies, each rendered in the source and in the target theme.  Source and
target rollouts share start states and action sequences, so the two domains
differ only in appearance.

``overlap_metric`` is this package's own quantification of the clustering
picture: the distance between the source-optimal and target-optimal centroids,
divided by the mean distance between each domain's optimal and random
centroids.  Values near 0 mean the encoder maps both themes of the same
behaviour to the same place; values near 1 or above mean the domain dominates.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from claifo.envsim import EnvConfig, render, reset, step
from claifo.nets import Encoder
from claifo.replay import dequantize, quantize
from claifo.seeding import numpy_stream

LABELS = ("source-optimal", "source-random", "target-optimal", "target-random")


@dataclass
class LatentCorpus:
    latents: np.ndarray  # (N, m)
    labels: np.ndarray  # (N,) str
    episode: np.ndarray  # (N,) int
    t: np.ndarray  # (N,) int

    def group(self, label: str) -> np.ndarray:
        return self.latents[self.labels == label]


@dataclass
class Projection:
    points: np.ndarray  # (N, k), k <= 2
    components: np.ndarray  # (k, m)
    explained_variance: np.ndarray  # (k,) ratios
    mean: np.ndarray


def _rollout_states(config: EnvConfig, policy, rng_start, rng_act, random_policy: bool):
    state, _ = reset(config, rng_start)
    states = [state]
    for t in range(config.episode_length):
        a = rng_act.uniform(-1.0, 1.0, size=2) if random_policy else policy(state)
        state, _, done = step(state, a, config, t)
        states.append(state)
        if done:
            break
    return states


def _encode_episode(encoder: Encoder, frames: np.ndarray, d: int) -> np.ndarray:
    n = len(frames)
    idx = np.maximum(np.arange(n)[:, None] + np.arange(-(d - 1), 1)[None, :], 0)
    stacks = dequantize(frames[idx])
    with torch.no_grad():
        return encoder(torch.from_numpy(np.ascontiguousarray(stacks))).numpy().astype(np.float64)


def build_corpus(encoder: Encoder, optimal_policy, mismatch_pair: tuple[EnvConfig, EnvConfig], episodes: int = 5,
                 seed: int = 0) -> LatentCorpus:
    """Roll out the optimal (state-based) policy and a uniform-random policy, render
    every trajectory in both themes and encode each frame with its d-stack."""
    source, target = mismatch_pair
    if encoder.image_size != source.image_size or encoder.image_size != target.image_size:
        raise ValueError(f"encoder expects {encoder.image_size}px frames, env renders "
                         f"{source.image_size}/{target.image_size}px")
    d = encoder.frame_stack
    encoder.eval()
    latents, labels, eps, ts = [], [], [], []
    for kind in ("optimal", "random"):
        for k in range(episodes):
            states = _rollout_states(source, optimal_policy, numpy_stream(seed, f"corpus-start-{k}"),
                                     numpy_stream(seed, f"corpus-act-{k}"), kind == "random")
            for domain, cfg in (("source", source), ("target", target)):
                frames = np.stack([quantize(render(s, cfg)) for s in states])
                z = _encode_episode(encoder, frames, d)
                latents.append(z)
                labels += [f"{domain}-{kind}"] * len(z)
                eps.append(np.full(len(z), k))
                ts.append(np.arange(len(z)))
    return LatentCorpus(np.concatenate(latents), np.asarray(labels), np.concatenate(eps), np.concatenate(ts))


def pca_project(latents: np.ndarray, n_components: int = 2, rank_tol: float = 1e-10) -> Projection:
    """Centre, take the top right singular vectors, project.  Each component's sign is
    fixed so that its largest-magnitude coordinate is positive."""
    X = np.asarray(latents, dtype=np.float64)
    if X.ndim != 2 or len(X) < 3:
        raise ValueError("need at least 3 latent vectors")
    mean = X.mean(0)
    Xc = X - mean
    _, s, vt = np.linalg.svd(Xc, full_matrices=False)
    var = s**2
    total = var.sum()
    rank = int(np.sum(s > rank_tol * max(s[0], 1e-300))) if total > 0 else 0
    k = min(n_components, rank)
    if k < n_components:
        warnings.warn(f"degenerate corpus: rank {rank}, returning {k} component(s)", RuntimeWarning, stacklevel=2)
    comps = vt[:k]
    for i in range(k):
        if comps[i, np.argmax(np.abs(comps[i]))] < 0:
            comps[i] = -comps[i]
    ratios = var[:k] / total if total > 0 else np.zeros(k)
    return Projection(Xc @ comps.T, comps, ratios, mean)


def overlap_metric(points: np.ndarray, labels: np.ndarray) -> float:
    labels = np.asarray(labels)
    c = {}
    for lab in LABELS:
        sel = points[labels == lab]
        if len(sel) == 0:
            raise ValueError(f"empty group {lab!r}")
        c[lab] = sel.mean(0)
    num = np.linalg.norm(c["source-optimal"] - c["target-optimal"])
    den = 0.5 * (np.linalg.norm(c["source-optimal"] - c["source-random"])
                 + np.linalg.norm(c["target-optimal"] - c["target-random"]))
    if den == 0:
        warnings.warn("optimal and random centroids coincide; overlap ratio undefined", RuntimeWarning, stacklevel=2)
        return float("inf") if num > 0 else 0.0
    return float(num / den)


def write_outputs(out_dir, corpus: LatentCorpus, proj: Projection, ratio: float) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "pca_points.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["label", "episode", "t", "pc1", "pc2"])
        pts = proj.points
        for i in range(len(pts)):
            pc = [repr(float(pts[i, j])) if j < pts.shape[1] else "" for j in range(2)]
            w.writerow([corpus.labels[i], int(corpus.episode[i]), int(corpus.t[i]), *pc])
    summary = {
        "explained_variance": [float(v) for v in proj.explained_variance],
        "overlap_ratio": ratio,
        "n_latents": len(corpus.latents),
        "latent_dim": int(corpus.latents.shape[1]),
        "groups": {lab: int(np.sum(corpus.labels == lab)) for lab in LABELS},
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return summary
