import numpy as np
import pytest
import torch

from claifo.envsim import EnvConfig, make_mismatch_pair
from claifo.expert import collect_demos, scripted_controller


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_demos():
    source, _ = make_mismatch_pair("light", EnvConfig(image_size=16, episode_length=20))
    return collect_demos(scripted_controller, source, n_episodes=4, seed=0)


def rng(seed=0):
    return np.random.default_rng(seed)


# criterion id -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: (int(k.rstrip("abcd")), k)):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {key}: {detail}")
