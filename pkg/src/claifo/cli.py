"""Command-line entry point: ``claifo <subcommand> ...``.

Exit codes: 0 success, 1 runtime failure (including failed theory checks),
2 usage error.  Relative ``--out`` paths are placed under ``$CLAIFO_RUNS_DIR``
when it is set.  Every subcommand writes a ``manifest.json`` into its output
directory.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from claifo.runs import RunManifest, resolve_out

log = logging.getLogger("claifo")


class UsageError(Exception):
    pass


def _expert_path(path: str) -> Path:
    p = Path(path)
    if p.is_dir():
        p = p / "checkpoint.bin"
    if not p.exists():
        raise FileNotFoundError(f"expert checkpoint not found: {path}")
    return p


def cmd_train_expert(args) -> int:
    from claifo.envsim import EnvConfig
    from claifo.expert import (
        ExpertTrainConfig,
        evaluate_policy,
        normalized_score,
        save_expert_run,
        scripted_controller,
        train_expert,
        zero_controller,
    )

    env = EnvConfig.from_json(Path(args.env_config).read_text()) if args.env_config else EnvConfig()
    if env.reward_mode != "dense":
        raise UsageError("the expert is trained on the dense reward")
    cfg = ExpertTrainConfig(steps=args.steps, seed=args.seed)
    out = resolve_out(args.out)
    manifest = RunManifest(command="train-expert", config={"env": env.to_dict(), "train": asdict(cfg)},
                           seed=args.seed)
    manifest.write(out)
    expert, _ = train_expert(env, cfg, out)
    save_expert_run(out, expert, env, cfg)
    oracle = float(np.mean(evaluate_policy(scripted_controller, env, cfg.eval_episodes, cfg.seed)))
    floor = float(np.mean(evaluate_policy(zero_controller, env, cfg.eval_episodes, cfg.seed)))
    ret = float(np.mean(evaluate_policy(expert, env, cfg.eval_episodes, cfg.seed)))
    summary = {"expert_return": ret, "oracle_return": oracle, "zero_return": floor,
               "score_vs_oracle": normalized_score(ret, oracle, floor)}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    manifest.finish(out, checkpoint="checkpoint.bin", metrics="metrics.csv", config="config.json",
                    summary="summary.json")
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_collect(args) -> int:
    from claifo.envsim import EnvConfig, make_mismatch_pair
    from claifo.expert import Expert, collect_demos, demo_returns
    from claifo.replay import write_demo_dir

    if args.theme != "source":
        raise UsageError("demonstrations are recorded in the source domain only")
    ckpt = _expert_path(args.expert_ckpt)
    cfg_file = ckpt.parent / "config.json"
    env = EnvConfig.from_dict(json.loads(cfg_file.read_text())["env"]) if cfg_file.exists() else EnvConfig()
    if args.image_size:
        env = env.replace(image_size=args.image_size)
    source, _ = make_mismatch_pair("light", env)
    out = resolve_out(args.out)
    manifest = RunManifest(command="collect", config={"expert_ckpt": str(ckpt), "episodes": args.episodes,
                                                      "env": source.to_dict()}, seed=args.seed)
    manifest.write(out)
    demos = collect_demos(Expert.load(ckpt), source, args.episodes, seed=args.seed)
    write_demo_dir(out, demos)
    manifest.finish(out, demos=".")
    print(f"wrote {len(demos)} episodes to {out} (mean return {np.mean(demo_returns(demos)):.3f})")
    return 0


def cmd_imitate(args) -> int:
    from claifo.algorithm import AlgoConfig, ConfigError, train
    from claifo.losses import Hyperparams
    from claifo.replay import read_demo_dir

    base = json.loads(Path(args.config).read_text()) if args.config else {}
    hyper = dict(base.pop("hyper", {}))
    for key, val in (("image_size", args.image_size), ("batch_size", args.batch_size)):
        if val is not None:
            hyper[key] = val
    overrides = {k: v for k, v in (("variant", args.variant), ("mismatch", args.mismatch),
                                   ("aug_preset", args.aug_preset), ("total_steps", args.steps),
                                   ("seed", args.seed), ("eval_interval", args.eval_interval),
                                   ("warmup", args.warmup)) if v is not None}
    if args.sparse_env:
        overrides["sparse_env"] = True
    if args.fuse_state:
        overrides["fuse_state"] = True
    try:
        config = AlgoConfig(**{**base, **overrides, "hyper": Hyperparams(**hyper)})
    except (ConfigError, TypeError, ValueError) as e:
        raise UsageError(str(e)) from e
    if config.uses_imitation and not args.demos:
        raise UsageError(f"variant {config.variant} needs --demos")
    demos = read_demo_dir(args.demos) if args.demos else None
    out = resolve_out(args.out)
    manifest = RunManifest(command="imitate", config=config.to_dict(), seed=config.seed)
    manifest.config["demos"] = args.demos
    train(config, demos, out, manifest)
    print(f"run written to {out}")
    return 0


def cmd_analyze(args) -> int:
    from claifo import analysis
    from claifo.algorithm import load_trainer
    from claifo.envsim import make_mismatch_pair
    from claifo.expert import Expert, scripted_controller

    trainer = load_trainer(args.ckpt)
    if args.mismatch:
        base = trainer.source_config
        pair = make_mismatch_pair(args.mismatch, base)
    else:
        pair = (trainer.source_config, trainer.target_config)
    policy = Expert.load(_expert_path(args.expert_ckpt)) if args.expert_ckpt else scripted_controller
    out = resolve_out(args.out)
    manifest = RunManifest(command="analyze", config={"ckpt": str(args.ckpt), "mismatch": args.mismatch,
                                                      "episodes": args.episodes,
                                                      "expert_ckpt": args.expert_ckpt}, seed=args.seed)
    manifest.write(out)
    corpus = analysis.build_corpus(trainer.encoder, policy, pair, args.episodes, args.seed)
    proj = analysis.pca_project(corpus.latents)
    ratio = analysis.overlap_metric(proj.points, corpus.labels)
    summary = analysis.write_outputs(out, corpus, proj, ratio)
    manifest.finish(out, points="pca_points.csv", summary="summary.json")
    print(json.dumps({k: summary[k] for k in ("overlap_ratio", "explained_variance")}))
    return 0


def cmd_check_theory(args) -> int:
    from claifo.theory import run_checks

    rows = run_checks(args.instances, args.seed, args.horizon, inject_fault=args.inject_fault)
    passed = sum(r["pass"] for r in rows)
    report = {"instances": args.instances, "seed": args.seed, "horizon": args.horizon,
              "inject_fault": args.inject_fault, "passed": passed, "all_pass": passed == len(rows), "rows": rows}
    if args.out:
        out = resolve_out(args.out)
        manifest = RunManifest(command="check-theory", config={k: report[k] for k in
                                                               ("instances", "horizon", "inject_fault")},
                               seed=args.seed)
        manifest.write(out)
        (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
        manifest.finish(out, report="report.json")
    print(f"{passed}/{len(rows)} instances pass")
    return 0 if report["all_pass"] else 1


def cmd_experiment(args) -> int:
    from claifo.experiment import ExperimentConfig, assess, run_experiment

    out = resolve_out(args.out)
    if args.assess_only:
        res = assess(out)
    else:
        cfg = ExperimentConfig(seeds=args.seeds, steps=args.steps, image_size=args.image_size,
                               batch_size=args.batch_size, expert_steps=args.expert_steps,
                               n_demos=args.demos)
        manifest = RunManifest(command="experiment", config=asdict(cfg), seed=0)
        manifest.write(out)
        res = run_experiment(cfg, out)
        manifest.finish(out, results="results.json")
    print(json.dumps({k: res[k]["pass"] for k in ("8a", "8b", "8c", "8d", "9")}))
    return 0


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(2, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="claifo", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("train-expert", help="train the state-based expert")
    s.add_argument("--env-config", help="EnvConfig JSON file")
    s.add_argument("--steps", type=int, default=20_000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_train_expert)

    s = sub.add_parser("collect", help="record source-domain expert videos")
    s.add_argument("--expert-ckpt", required=True)
    s.add_argument("--episodes", type=int, default=100)
    s.add_argument("--theme", choices=("source", "target"), default="source")
    s.add_argument("--image-size", type=int)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_collect)

    s = sub.add_parser("imitate", help="train an imitation variant in the target domain")
    s.add_argument("--variant")
    s.add_argument("--mismatch", choices=("light", "color", "full"))
    s.add_argument("--aug-preset", choices=("none", "light", "color", "full"))
    s.add_argument("--demos")
    s.add_argument("--steps", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--sparse-env", action="store_true")
    s.add_argument("--fuse-state", action="store_true")
    s.add_argument("--image-size", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--eval-interval", type=int)
    s.add_argument("--warmup", type=int)
    s.add_argument("--config", help="AlgoConfig JSON; flags override its fields")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_imitate)

    s = sub.add_parser("analyze", help="PCA of encoder latents across domains")
    s.add_argument("--ckpt", required=True, help="run directory written by imitate")
    s.add_argument("--mismatch", choices=("light", "color", "full"))
    s.add_argument("--episodes", type=int, default=5)
    s.add_argument("--expert-ckpt", help="optimal policy; defaults to the scripted controller")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_analyze)

    s = sub.add_parser("check-theory", help="exact checks on random tabular instances")
    s.add_argument("--instances", type=int, default=100)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--horizon", type=int, default=5)
    s.add_argument("--inject-fault", action="store_true", help="let the latent record the distractor")
    s.add_argument("--out")
    s.set_defaults(fn=cmd_check_theory)

    s = sub.add_parser("experiment", help="full multi-seed comparison protocol")
    s.add_argument("--out", required=True)
    s.add_argument("--seeds", type=int, default=6)
    s.add_argument("--steps", type=int, default=150_000)
    s.add_argument("--image-size", type=int, default=64)
    s.add_argument("--batch-size", type=int, default=128)
    s.add_argument("--expert-steps", type=int, default=20_000)
    s.add_argument("--demos", type=int, default=100)
    s.add_argument("--assess-only", action="store_true")
    s.set_defaults(fn=cmd_experiment)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.fn(args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"claifo {args.command}: error: {e}", file=sys.stderr)
        return 2
    except Exception as e:
        log.debug("failure", exc_info=True)
        print(f"claifo {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
