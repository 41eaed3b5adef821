"""End-to-end protocol for the direction-of-effect checks.

``run_experiment`` trains the state-based expert, records source demos, trains
every compared variant over several seeds in the target domain, analyses two
encoders, and finally calls :func:`assess`, which writes ``results.json``.
Every stage skips work whose output already exists, so an interrupted protocol
can be resumed by rerunning the same command.

Returns are scored relative to the expert on the *same* evaluation start
states: ``score = (R - R_zero) / (R_expert - R_zero)``, with ``R_zero`` the
return of the zero-action policy.  Dense returns are negative distances, so a
raw ratio of returns would not order policies sensibly.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from claifo import analysis
from claifo.algorithm import AlgoConfig, load_trainer, train
from claifo.envsim import EnvConfig, make_mismatch_pair
from claifo.expert import (
    Expert,
    ExpertTrainConfig,
    collect_demos,
    evaluate_policy,
    normalized_score,
    save_expert_run,
    scripted_controller,
    train_expert,
    zero_controller,
)
from claifo.losses import Hyperparams
from claifo.replay import read_demo_dir, write_demo_dir
from claifo.runs import read_csv

log = logging.getLogger(__name__)

IMITATION_VARIANTS = ("claifo", "claifo-no-aug", "claifo-no-qbackprop")
SPARSE_VARIANTS = ("rl+claifo", "rl")


@dataclass
class ExperimentConfig:
    seeds: int = 6
    steps: int = 150_000
    image_size: int = 64
    batch_size: int = 128
    n_demos: int = 100
    expert_steps: int = 20_000
    eval_episodes: int = 10
    eval_interval: int = 5000
    mismatch: str = "light"
    analysis_episodes: int = 5


def _run_name(variant: str, seed: int) -> str:
    return f"{variant.replace('+', '-plus-')}_seed{seed}"


def run_experiment(cfg: ExperimentConfig, out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "experiment.json").write_text(json.dumps(asdict(cfg), indent=2, sort_keys=True))
    dense = EnvConfig(image_size=cfg.image_size)
    source, _ = make_mismatch_pair(cfg.mismatch, dense)

    expert_dir = out / "expert"
    if not (expert_dir / "checkpoint.bin").exists():
        ecfg = ExpertTrainConfig(steps=cfg.expert_steps, seed=0)
        expert, _ = train_expert(dense, ecfg, expert_dir)
        save_expert_run(expert_dir, expert, dense, ecfg)
    expert = Expert.load(expert_dir / "checkpoint.bin")

    demo_dir = out / "demos"
    if not (demo_dir / "meta.json").exists():
        write_demo_dir(demo_dir, collect_demos(expert, source, cfg.n_demos, seed=0))
    demos = read_demo_dir(demo_dir)

    for seed in range(cfg.seeds):
        for variant in IMITATION_VARIANTS + SPARSE_VARIANTS:
            run_dir = out / "runs" / _run_name(variant, seed)
            if (run_dir / "checkpoint.bin").exists():
                continue
            ac = AlgoConfig(
                variant=variant, mismatch=cfg.mismatch, total_steps=cfg.steps, seed=seed,
                hyper=Hyperparams(image_size=cfg.image_size, batch_size=cfg.batch_size),
                eval_interval=min(cfg.eval_interval, cfg.steps), eval_episodes=cfg.eval_episodes,
                sparse_env=variant in SPARSE_VARIANTS,
            )
            log.info("training %s", run_dir.name)
            train(ac, demos if ac.uses_imitation else None, run_dir)
    return assess(out)


def _final_eval(run_dir: Path) -> tuple[float, float]:
    rows = read_csv(run_dir / "eval.csv")
    last = max(int(r["step"]) for r in rows)
    rows = [r for r in rows if int(r["step"]) == last]
    return float(np.mean([float(r["return"]) for r in rows])), float(np.mean([int(r["success"]) for r in rows]))


def assess(out_dir) -> dict:
    """Score whatever runs exist under ``out_dir`` and write ``results.json``."""
    out = Path(out_dir)
    cfg = ExperimentConfig(**json.loads((out / "experiment.json").read_text()))
    dense = EnvConfig(image_size=cfg.image_size)
    expert = Expert.load(out / "expert" / "checkpoint.bin")

    oracle = float(np.mean(evaluate_policy(scripted_controller, dense, cfg.eval_episodes, 0)))
    floor = float(np.mean(evaluate_policy(zero_controller, dense, cfg.eval_episodes, 0)))
    exp_ret = float(np.mean(evaluate_policy(expert, dense, cfg.eval_episodes, 0)))
    res: dict = {"config": asdict(cfg), "expert_return": exp_ret, "oracle_return": oracle, "zero_return": floor}
    res["8a"] = {"expert_score_vs_oracle": normalized_score(exp_ret, oracle, floor)}
    res["8a"]["pass"] = res["8a"]["expert_score_vs_oracle"] >= 0.9

    scores: dict[str, list] = {}
    success: dict[str, list] = {}
    for variant in IMITATION_VARIANTS + SPARSE_VARIANTS:
        scores[variant], success[variant] = [], []
        for seed in range(cfg.seeds):
            run_dir = out / "runs" / _run_name(variant, seed)
            if not (run_dir / "eval.csv").exists():
                scores[variant].append(None)
                success[variant].append(None)
                continue
            ret, succ = _final_eval(run_dir)
            # reference returns on the imitator's own evaluation start states
            e = float(np.mean(evaluate_policy(expert, dense, cfg.eval_episodes, seed, stream="eval")))
            z = float(np.mean(evaluate_policy(zero_controller, dense, cfg.eval_episodes, seed, stream="eval")))
            scores[variant].append(normalized_score(ret, e, z) if variant in IMITATION_VARIANTS else None)
            success[variant].append(succ)
    res["scores"], res["success"] = scores, success

    def complete(xs):
        return len(xs) == cfg.seeds and all(x is not None for x in xs)

    full_scale = cfg.seeds >= 6 and cfg.steps >= 150_000 and cfg.image_size == 64 and cfg.batch_size == 128
    res["full_scale"] = full_scale
    cl = scores["claifo"]
    res["8b"] = {"seeds_at_70pct": sum(s >= 0.7 for s in cl if s is not None),
                 "pass": complete(cl) and sum(s >= 0.7 for s in cl) >= 4}
    medians = {v: float(np.median(scores[v])) if complete(scores[v]) else None
               for v in ("claifo-no-aug", "claifo-no-qbackprop")}
    res["8c"] = {"medians": medians, "pass": all(m is not None and m < 0.4 for m in medians.values())}
    rp, rl = success["rl+claifo"], success["rl"]
    res["8d"] = {
        "rl_plus_claifo_seeds_at_0.8": sum(s >= 0.8 for s in rp if s is not None),
        "rl_success_max": max((s for s in rl if s is not None), default=None),
        "pass": complete(rp) and complete(rl) and sum(s >= 0.8 for s in rp) >= 4 and max(rl) < 0.3,
    }

    res["9"] = _assess_latents(out, cfg, expert, scores)
    for key in ("8a", "8b", "8c", "8d", "9"):
        # a reduced-scale protocol never counts as meeting the stated criterion
        res[key]["pass"] = bool(res[key]["pass"] and full_scale)
    (out / "results.json").write_text(json.dumps(res, indent=2, sort_keys=True))
    return res


def _assess_latents(out: Path, cfg: ExperimentConfig, expert, scores) -> dict:
    cl = [(s, i) for i, s in enumerate(scores["claifo"]) if s is not None]
    if not cl:
        return {"pass": False, "reason": "no claifo run"}
    best_score, best_seed = max(cl)
    ratios = {}
    for variant in ("claifo", "claifo-no-aug"):
        run_dir = out / "runs" / _run_name(variant, best_seed)
        if not (run_dir / "checkpoint.bin").exists():
            return {"pass": False, "reason": f"missing {run_dir.name}"}
        trainer = load_trainer(run_dir)
        corpus = analysis.build_corpus(trainer.encoder, expert, (trainer.source_config, trainer.target_config),
                                       cfg.analysis_episodes, seed=0)
        proj = analysis.pca_project(corpus.latents)
        ratios[variant] = analysis.overlap_metric(proj.points, corpus.labels)
        analysis.write_outputs(out / "analysis" / variant, corpus, proj, ratios[variant])
    return {
        "seed": best_seed,
        "claifo_score": best_score,
        "overlap_claifo": ratios["claifo"],
        "overlap_no_aug": ratios["claifo-no-aug"],
        "pass": best_score >= 0.7 and ratios["claifo"] < 0.5 and ratios["claifo"] < ratios["claifo-no-aug"],
    }
