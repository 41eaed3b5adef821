import numpy as np
import pytest
import torch

from claifo import expert as expert_mod
from claifo.envsim import EnvConfig, PointMassState, make_mismatch_pair
from claifo.expert import (
    Expert,
    ExpertTrainConfig,
    collect_demos,
    demo_returns,
    evaluate_policy,
    normalized_score,
    scripted_controller,
    train_expert,
    zero_controller,
)
from claifo.replay import quantize, read_demo_dir, write_demo_dir

SHORT = ExpertTrainConfig(steps=400, warmup=100, batch_size=32, eval_interval=200, eval_episodes=2)


def test_scripted_controller_formula():
    s = PointMassState(np.array([0.5, 0.6]), np.array([0.01, -0.02]))
    np.testing.assert_allclose(scripted_controller(s), [8 * 0.1 - 4 * 0.01, 0 + 4 * 0.02])
    far = PointMassState(np.array([-1.0, -1.0]), np.zeros(2))
    np.testing.assert_array_equal(scripted_controller(far), [1.0, 1.0])


def test_oracle_beats_doing_nothing():
    cfg = EnvConfig(image_size=16)
    oracle = np.mean(evaluate_policy(scripted_controller, cfg, 10))
    zero = np.mean(evaluate_policy(zero_controller, cfg, 10))
    assert oracle > zero
    assert normalized_score(oracle, oracle, zero) == 1.0 and normalized_score(zero, oracle, zero) == 0.0


def test_expert_acts_on_true_state_only():
    e = Expert()
    assert e.actor.policy[0].in_features == 4
    a = e(PointMassState(np.zeros(2), np.zeros(2)))
    assert a.shape == (2,) and np.all(np.abs(a) <= 1)


def test_training_is_deterministic(tmp_path):
    cfg = EnvConfig(image_size=16)
    e1, rows1 = train_expert(cfg, SHORT, tmp_path / "a")
    e2, rows2 = train_expert(cfg, SHORT, tmp_path / "b")
    assert rows1 == rows2 and len(rows1) == 2
    assert all(torch.equal(p, q) for p, q in zip(e1.actor.parameters(), e2.actor.parameters()))
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_training_requires_dense_reward():
    with pytest.raises(ValueError):
        train_expert(EnvConfig(reward_mode="sparse"), SHORT)


def test_divergence_aborts(monkeypatch):
    def nan_loss(*a, **k):
        return torch.tensor(float("nan"), requires_grad=True), None

    monkeypatch.setattr(expert_mod, "critic_td_loss", nan_loss)
    with pytest.raises(FloatingPointError):
        train_expert(EnvConfig(image_size=16), SHORT)


def test_save_load_roundtrip(tmp_path):
    e = Expert()
    e.save(tmp_path / "x.bin")
    back = Expert.load(tmp_path / "x.bin")
    s = PointMassState(np.array([0.1, -0.3]), np.array([0.02, 0.0]))
    np.testing.assert_array_equal(e(s), back(s))


def test_demos_use_source_theme_and_roundtrip(tmp_path):
    source, target = make_mismatch_pair("full", EnvConfig(image_size=16))
    demos = collect_demos(scripted_controller, source, n_episodes=3, seed=1)
    bg_src = quantize(np.asarray(source.theme.scaled(source.theme.c_bg)))
    bg_tgt = quantize(np.asarray(target.theme.scaled(target.theme.c_bg)))
    for ep in demos.episodes:
        assert ep.length == source.episode_length + 1
        corners = ep.frames[:, [0, 0, -1, -1], [0, -1, 0, -1]]
        # the agent or goal disc can occasionally cover a corner
        assert np.mean(np.all(corners == bg_src, axis=-1)) > 0.9
        assert not np.any(np.all(corners == bg_tgt, axis=-1))
        np.testing.assert_array_equal(ep.actions[-1], 0.0)
    write_demo_dir(tmp_path, demos)
    back = read_demo_dir(tmp_path)
    assert all(a.frames.tobytes() == b.frames.tobytes() for a, b in zip(demos.episodes, back.episodes))
    assert back.meta["theme"] == source.theme.to_dict()


def test_default_episode_count():
    import inspect

    assert inspect.signature(collect_demos).parameters["n_episodes"].default == 100


def test_demo_returns_match_policy_returns():
    cfg = EnvConfig(image_size=16)
    demos = collect_demos(scripted_controller, cfg, n_episodes=100, seed=0)
    demo = np.mean(demo_returns(demos))
    ev = np.mean(evaluate_policy(scripted_controller, cfg, 100, seed=0))
    assert abs(demo - ev) / abs(ev) < 0.05
