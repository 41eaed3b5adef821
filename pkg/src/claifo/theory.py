"""Exact tabular checks of the two theoretical results behind the method.

*Posterior invariance.*  Observations factor as ``x = (x̄, x̂)``: ``x̄ ~ Ē[s]`` carries
the goal-completion information and is emitted identically in both domains, while
the distractor ``x̂ ~ Ĥ_S[s]`` or ``Ĥ_T[s]`` depends on the domain.  When the latent
``z_t`` is a function of the x̄-history and past actions only, the filtering posterior
``P(s_t | z_t)`` and the pair posterior ``P(s_t, s_{t+1} | z_t, z_{t+1})`` are the same
for every policy acting on ``z`` and in both domains.  :func:`check_prop1` verifies this
by brute-force enumeration of the full generative process (states, both emission
channels and policy choices) and compares the result against the closed-form
recursions :func:`exact_filter` and :func:`exact_pair_filter`.

*Value-gap bound.*  For a fully observed MDP,

    |J(π_E) - J(π_θ)| <= 2 R_max / (1-γ) * D_TV(ρ_θ(s,s'), ρ_E(s,s')) + C,
    C = 2 R_max / (1-γ) * E_{ρ_θ}[ TV(P_θ(a|s,s'), P_E(a|s,s')) ],

with ``C = 0`` when the reward depends on ``(s, s')`` only.  ``J`` is the
(unnormalised) discounted return and ``ρ_π(s,s') = d_π(s) P_π(s'|s)`` uses the
normalised discounted visitation ``d_π = (1-γ) ρ₀ + γ P_πᵀ d_π``.  Where
``P_E(a|s,s')`` is undefined (``ρ_E(s,s') = 0``) it is taken equal to ``P_θ``; the
bound holds under that convention because the pair's whole mass is already
charged to the D_TV term.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ROW_TOL = 1e-12
MAX_HISTORIES = 1_000_000


@dataclass
class TabularPOMDP:
    T: np.ndarray  # (n, k, n) transition probabilities
    E_bar: np.ndarray  # (n, n_xbar) invariant emission
    H_src: np.ndarray  # (n, n_xhat) source distractor emission
    H_tgt: np.ndarray  # (n, n_xhat) target distractor emission
    R: np.ndarray  # (n, k) or (n, n) when reward_on_pairs
    rho0: np.ndarray  # (n,)
    gamma: float = 0.9
    reward_on_pairs: bool = False

    def __post_init__(self):
        for name in ("T", "E_bar", "H_src", "H_tgt", "R", "rho0"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        n, k, n2 = self.T.shape
        if n2 != n:
            raise ValueError("T must have shape (n, k, n)")
        for name, arr in (("T", self.T), ("E_bar", self.E_bar), ("H_src", self.H_src), ("H_tgt", self.H_tgt),
                          ("rho0", self.rho0)):
            if np.any(arr < 0) or np.max(np.abs(arr.sum(-1) - 1.0)) > ROW_TOL:
                raise ValueError(f"{name} rows must be probability distributions")
        if self.E_bar.shape[0] != n or self.H_src.shape[0] != n or self.H_tgt.shape != self.H_src.shape:
            raise ValueError("emission tables must have one row per state")
        if self.rho0.shape != (n,):
            raise ValueError("rho0 must have shape (n,)")
        if self.R.shape != ((n, n) if self.reward_on_pairs else (n, k)):
            raise ValueError(f"reward table has shape {self.R.shape}")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")

    @property
    def n_states(self) -> int:
        return self.T.shape[0]

    @property
    def n_actions(self) -> int:
        return self.T.shape[1]

    @property
    def n_xbar(self) -> int:
        return self.E_bar.shape[1]

    @property
    def n_xhat(self) -> int:
        return self.H_src.shape[1]

    def distractor(self, domain: str) -> np.ndarray:
        if domain == "S":
            return self.H_src
        if domain == "T":
            return self.H_tgt
        raise ValueError(f"domain must be 'S' or 'T', got {domain!r}")

    @property
    def r_max(self) -> float:
        return float(np.max(np.abs(self.R)))


def _dirichlet_rows(rng, rows: int, cols: int, alpha: float = 1.0) -> np.ndarray:
    p = rng.dirichlet(np.full(cols, alpha), size=rows)
    return p / p.sum(-1, keepdims=True)


def random_pomdp(rng: np.random.Generator, n_states: int = 4, n_actions: int = 2, n_xbar: int = 3,
                 n_xhat: int = 2, gamma: float = 0.9, reward_on_pairs: bool = False) -> TabularPOMDP:
    n, k = n_states, n_actions
    return TabularPOMDP(
        T=_dirichlet_rows(rng, n * k, n).reshape(n, k, n),
        E_bar=_dirichlet_rows(rng, n, n_xbar),
        H_src=_dirichlet_rows(rng, n, n_xhat, 0.3),
        H_tgt=_dirichlet_rows(rng, n, n_xhat, 0.3),
        R=rng.uniform(-1.0, 1.0, size=(n, n) if reward_on_pairs else (n, k)),
        rho0=_dirichlet_rows(rng, 1, n)[0],
        gamma=gamma,
        reward_on_pairs=reward_on_pairs,
    )


def random_history_policy(rng: np.random.Generator, pomdp: TabularPOMDP, horizon: int,
                          sees_xhat: bool = False) -> np.ndarray:
    """Stochastic policy on the latent statistic: ``π[t, x̄_t, a]``, or
    ``π[t, x̄_t, x̂_t, a]`` when the policy is allowed to see the distractor."""
    shape = (horizon, pomdp.n_xbar, pomdp.n_xhat) if sees_xhat else (horizon, pomdp.n_xbar)
    rows = _dirichlet_rows(rng, int(np.prod(shape)), pomdp.n_actions)
    return rows.reshape(*shape, pomdp.n_actions)


# -- filtering recursions ----------------------------------------------------


def exact_filter(pomdp: TabularPOMDP, domain: str, policy, xbar_history, action_history) -> np.ndarray:
    """Posteriors ``P(s_t | x̄_{0:t}, a_{0:t-1})`` for every ``t`` along one history.

    Returns an array ``(len(xbar_history), n)``.  ``domain`` and ``policy`` are
    accepted for interface symmetry; neither enters the recursion, which is exactly
    the content of the invariance result.  A zero-probability history raises.
    """
    pomdp.distractor(domain)
    xb = np.asarray(xbar_history, dtype=np.int64)
    acts = np.asarray(action_history, dtype=np.int64)
    if len(xb) == 0 or len(acts) != len(xb) - 1:
        raise ValueError("need len(action_history) == len(xbar_history) - 1 >= 0")
    out = np.empty((len(xb), pomdp.n_states))
    b = pomdp.rho0 * pomdp.E_bar[:, xb[0]]
    for t in range(len(xb)):
        if t > 0:
            b = (b @ pomdp.T[:, acts[t - 1], :]) * pomdp.E_bar[:, xb[t]]
        z = b.sum()
        if z <= 0.0:
            raise ValueError(f"history has zero probability at step {t}")
        b = b / z
        out[t] = b
    return out


def exact_pair_filter(pomdp: TabularPOMDP, domain: str, policy, xbar_history, action_history) -> np.ndarray:
    """Pair posteriors ``P(s_t, s_{t+1} | z_t, z_{t+1})``, shape ``(len-1, n, n)``."""
    beliefs = exact_filter(pomdp, domain, policy, xbar_history, action_history)
    xb = np.asarray(xbar_history, dtype=np.int64)
    acts = np.asarray(action_history, dtype=np.int64)
    out = np.empty((len(xb) - 1, pomdp.n_states, pomdp.n_states))
    for t in range(len(xb) - 1):
        joint = beliefs[t][:, None] * pomdp.T[:, acts[t], :] * pomdp.E_bar[None, :, xb[t + 1]]
        out[t] = joint / joint.sum()
    return out


def _batched_filter(pomdp: TabularPOMDP, xb: np.ndarray, acts: np.ndarray) -> np.ndarray:
    """Vectorised :func:`exact_filter` over histories ``xb (N, t+1)``, ``acts (N, t)``; last step only."""
    b = pomdp.rho0[None, :] * pomdp.E_bar[:, xb[:, 0]].T
    b = b / b.sum(-1, keepdims=True)
    for t in range(acts.shape[1]):
        b = np.einsum("hs,hsk->hk", b, pomdp.T[:, acts[:, t], :].transpose(1, 0, 2)) * pomdp.E_bar[:, xb[:, t + 1]].T
        b = b / b.sum(-1, keepdims=True)
    return b


# -- brute-force enumeration -------------------------------------------------


@dataclass
class _Level:
    joint: np.ndarray  # (N, n): P(history, s_t)
    xb: np.ndarray  # (N, t+1)
    xh: np.ndarray  # (N, t+1)
    acts: np.ndarray  # (N, t)


def history_count(pomdp: TabularPOMDP, horizon: int) -> int:
    return (pomdp.n_xbar * pomdp.n_xhat) ** horizon * pomdp.n_actions ** max(horizon - 1, 0)


def _policy_rows(policy: np.ndarray, t: int, level: _Level) -> np.ndarray:
    if policy.ndim == 3:
        return policy[t, level.xb[:, -1]]
    return policy[t, level.xb[:, -1], level.xh[:, -1]]


def _z_keys(level: _Level, pomdp: TabularPOMDP, with_xhat: bool) -> np.ndarray:
    """Integer code of the latent history; injective for a fixed length."""
    key = np.zeros(len(level.joint), dtype=np.int64)
    for t in range(level.xb.shape[1]):
        if t > 0:
            key = key * pomdp.n_actions + level.acts[:, t - 1]
        key = key * pomdp.n_xbar + level.xb[:, t]
        if with_xhat:
            key = key * pomdp.n_xhat + level.xh[:, t]
    return key


def _group(keys: np.ndarray, mass: np.ndarray):
    """Sum rows of ``mass`` sharing a key; returns (unique keys, first index, summed rows)."""
    order = np.argsort(keys, kind="stable")
    sk = keys[order]
    starts = np.flatnonzero(np.r_[True, sk[1:] != sk[:-1]])
    flat = mass.reshape(len(keys), -1)[order]
    out = np.add.reduceat(flat, starts, axis=0)
    return sk[starts], order[starts], out.reshape(len(starts), *mass.shape[1:])


def enumerate_posteriors(pomdp: TabularPOMDP, domain: str, policy: np.ndarray, horizon: int,
                         z_includes_xhat: bool = False):
    """Exact posteriors from the full generative process, level by level.

    Returns ``(filters, pairs)``: lists indexed by ``t`` of dicts mapping a latent
    history key to ``P(s_t | z_t)`` and (for ``t >= 1``) ``P(s_{t-1}, s_t | z_t)``,
    together with the decoded ``(x̄, a)`` history used for the recursion cross-check.
    """
    if history_count(pomdp, horizon) > MAX_HISTORIES:
        raise ValueError(f"horizon {horizon} enumerates more than {MAX_HISTORIES} histories")
    H = pomdp.distractor(domain)
    n, k, nxb, nxh = pomdp.n_states, pomdp.n_actions, pomdp.n_xbar, pomdp.n_xhat
    # t = 0: P(x̄0, x̂0, s0)
    j0 = pomdp.rho0[None, None, :] * pomdp.E_bar.T[:, None, :] * H.T[None, :, :]
    xb0, xh0 = np.meshgrid(np.arange(nxb), np.arange(nxh), indexing="ij")
    level = _Level(j0.reshape(-1, n), xb0.reshape(-1, 1), xh0.reshape(-1, 1), np.zeros((nxb * nxh, 0), np.int64))
    filters, pairs = [], []
    pair_mass = None
    for t in range(horizon):
        keys = _z_keys(level, pomdp, z_includes_xhat)
        uniq, first, pz_s = _group(keys, level.joint)
        pz = pz_s.sum(-1)
        ok = pz > 0.0
        filters.append({
            "keys": uniq[ok],
            "post": pz_s[ok] / pz[ok, None],
            "xb": level.xb[first[ok]],
            "acts": level.acts[first[ok]],
        })
        if pair_mass is not None:
            _, _, pzz = _group(keys, pair_mass)
            pzz = pzz[ok]
            pairs.append({"keys": uniq[ok], "post": pzz / pzz.sum((-1, -2), keepdims=True)})
        if t == horizon - 1:
            break
        pol = _policy_rows(policy, t, level)  # (N, k)
        # P(h, s_t, a_t, s_{t+1}, x̄_{t+1}, x̂_{t+1})
        full = (level.joint[:, :, None, None, None, None]
                * pol[:, None, :, None, None, None]
                * pomdp.T[None, :, :, :, None, None]
                * pomdp.E_bar[None, None, None, :, :, None]
                * H[None, None, None, :, None, :])
        # reorder to (h, a, x̄', x̂', s, s')
        full = full.transpose(0, 2, 4, 5, 1, 3)
        N = len(level.joint)
        pair_mass = full.reshape(N * k * nxb * nxh, n, n)
        grid_a, grid_xb, grid_xh = (g.reshape(-1) for g in np.meshgrid(np.arange(k), np.arange(nxb), np.arange(nxh),
                                                                        indexing="ij"))
        rep = np.repeat(np.arange(N), k * nxb * nxh)
        level = _Level(
            joint=pair_mass.sum(1),
            xb=np.concatenate([level.xb[rep], np.tile(grid_xb, N)[:, None]], 1),
            xh=np.concatenate([level.xh[rep], np.tile(grid_xh, N)[:, None]], 1),
            acts=np.concatenate([level.acts[rep], np.tile(grid_a, N)[:, None]], 1),
        )
    return filters, pairs


def _max_common_deviation(a: dict, b: dict) -> float:
    common, ia, ib = np.intersect1d(a["keys"], b["keys"], return_indices=True)
    if len(common) == 0:
        return 0.0
    return float(np.max(np.abs(a["post"][ia] - b["post"][ib])))


@dataclass
class Prop1Result:
    deviation: float  # max over domain x policy pairs, all t, of posterior differences
    pair_deviation: float
    recursion_error: float  # enumeration vs closed-form recursion
    n_histories: int

    @property
    def holds(self) -> bool:
        return max(self.deviation, self.pair_deviation) <= 1e-10


def check_prop1(pomdp: TabularPOMDP, policies: list, horizon: int, z_includes_xhat: bool = False) -> Prop1Result:
    """Max deviation of ``P(s_t|z_t)`` and ``P(s_t,s_{t+1}|z_t,z_{t+1})`` across
    {source, target} x ``policies``.  ``z_includes_xhat`` is the deliberate fault in
    which the latent also records the distractor; the result then need not hold."""
    runs = []
    for domain in ("S", "T"):
        for pol in policies:
            runs.append(enumerate_posteriors(pomdp, domain, np.asarray(pol), horizon, z_includes_xhat))
    dev = pair_dev = 0.0
    ref_f, ref_p = runs[0]
    for f, p in runs[1:]:
        for t in range(horizon):
            dev = max(dev, _max_common_deviation(ref_f[t], f[t]))
        for t in range(horizon - 1):
            pair_dev = max(pair_dev, _max_common_deviation(ref_p[t], p[t]))
    rec_err = 0.0
    if not z_includes_xhat:
        for f, p in runs:
            for t in range(horizon):
                rec = _batched_filter(pomdp, f[t]["xb"], f[t]["acts"])
                rec_err = max(rec_err, float(np.max(np.abs(rec - f[t]["post"]))))
            for t in range(1, horizon):
                prev = _batched_filter(pomdp, f[t]["xb"][:, :t], f[t]["acts"][:, : t - 1])
                a = f[t]["acts"][:, t - 1]
                joint = (prev[:, :, None] * pomdp.T[:, a, :].transpose(1, 0, 2)
                         * pomdp.E_bar[:, f[t]["xb"][:, t]].T[:, None, :])
                joint /= joint.sum((-1, -2), keepdims=True)
                rec_err = max(rec_err, float(np.max(np.abs(joint - p[t - 1]["post"]))))
    return Prop1Result(dev, pair_dev, rec_err, history_count(pomdp, horizon))


def distractor_fault_instance() -> TabularPOMDP:
    """Two states, uninformative x̄, and distractors that point at opposite states
    in the two domains.  A latent that records x̂ sees posteriors 0.95 vs 0.05."""
    return TabularPOMDP(
        T=np.full((2, 2, 2), 0.5),
        E_bar=np.full((2, 2), 0.5),
        H_src=np.array([[0.95, 0.05], [0.05, 0.95]]),
        H_tgt=np.array([[0.05, 0.95], [0.95, 0.05]]),
        R=np.zeros((2, 2)),
        rho0=np.array([0.5, 0.5]),
    )


# -- visitation and the value-gap bound -----------------------------------------


def policy_transition(pomdp: TabularPOMDP, policy: np.ndarray) -> np.ndarray:
    return np.einsum("sa,sat->st", policy, pomdp.T)


def _check_policy(pomdp: TabularPOMDP, policy: np.ndarray) -> np.ndarray:
    policy = np.asarray(policy, dtype=np.float64)
    if policy.shape != (pomdp.n_states, pomdp.n_actions):
        raise ValueError(f"policy must have shape {(pomdp.n_states, pomdp.n_actions)}")
    if np.any(policy < 0) or np.max(np.abs(policy.sum(-1) - 1.0)) > ROW_TOL:
        raise ValueError("policy rows must be probability distributions")
    return policy


def expected_reward(pomdp: TabularPOMDP, policy: np.ndarray) -> np.ndarray:
    """``r_π(s)``: one-step expected reward under ``policy``."""
    if pomdp.reward_on_pairs:
        return np.sum(policy_transition(pomdp, policy) * pomdp.R, -1)
    return np.sum(policy * pomdp.R, -1)


@dataclass
class Visitation:
    d: np.ndarray  # (n,) normalised discounted state visitation
    rho: np.ndarray  # (n, n) pair visitation
    J: float  # discounted return


def visitation(pomdp: TabularPOMDP, policy) -> Visitation:
    policy = _check_policy(pomdp, policy)
    P = policy_transition(pomdp, policy)
    n, g = pomdp.n_states, pomdp.gamma
    A = np.eye(n) - g * P.T
    if abs(np.linalg.det(A)) < 1e-14:
        raise np.linalg.LinAlgError("singular visitation system")
    d = np.linalg.solve(A, (1.0 - g) * pomdp.rho0)
    V = np.linalg.solve(np.eye(n) - g * P, expected_reward(pomdp, policy))
    return Visitation(d=d, rho=d[:, None] * P, J=float(pomdp.rho0 @ V))


def action_posterior(pomdp: TabularPOMDP, policy: np.ndarray, fallback: np.ndarray | None = None) -> np.ndarray:
    """``P_π(a | s, s') = π(a|s) T(s'|s,a) / P_π(s'|s)``, shape ``(n, n, k)``.  Pairs
    the policy never produces take ``fallback`` (uniform when not given)."""
    num = policy[:, :, None] * pomdp.T  # (s, a, s')
    den = num.sum(1)  # (s, s')
    post = np.where(den[:, None, :] > 0, num / np.where(den > 0, den, 1.0)[:, None, :], np.nan)
    post = post.transpose(0, 2, 1)
    if fallback is None:
        fallback = np.full_like(post, 1.0 / pomdp.n_actions)
    return np.where(np.isnan(post), fallback, post)


@dataclass
class Prop2Result:
    gap: float
    bound: float
    d_tv: float
    C: float

    @property
    def holds(self) -> bool:
        return self.gap <= self.bound + 1e-12


def check_prop2(pomdp: TabularPOMDP, pi_E, pi_theta) -> Prop2Result:
    pi_E, pi_theta = _check_policy(pomdp, pi_E), _check_policy(pomdp, pi_theta)
    vE, vT = visitation(pomdp, pi_E), visitation(pomdp, pi_theta)
    scale = 2.0 * pomdp.r_max / (1.0 - pomdp.gamma)
    d_tv = 0.5 * float(np.abs(vE.rho - vT.rho).sum())
    if pomdp.reward_on_pairs:
        C = 0.0
    else:
        p_theta = action_posterior(pomdp, pi_theta)
        p_E = action_posterior(pomdp, pi_E, fallback=p_theta)
        tv = 0.5 * np.abs(p_E - p_theta).sum(-1)
        C = scale * float(np.sum(vT.rho * tv))
    gap = abs(vE.J - vT.J)
    return Prop2Result(gap=gap, bound=scale * d_tv + C, d_tv=d_tv, C=C)


def monte_carlo_return(pomdp: TabularPOMDP, policy, n_rollouts: int, rng: np.random.Generator,
                       tol: float = 1e-12) -> tuple[float, float]:
    """Mean and standard error of the discounted return over ``n_rollouts``
    episodes, truncated once ``γ^t`` falls below ``tol``."""
    policy = _check_policy(pomdp, policy)
    g = pomdp.gamma
    horizon = 1 if g == 0 else int(np.ceil(np.log(tol) / np.log(g)))
    cum_rho = np.cumsum(pomdp.rho0)
    cum_pi = np.cumsum(policy, -1)
    cum_T = np.cumsum(pomdp.T, -1)

    def draw(cum, u):
        return np.minimum((u[:, None] > cum).sum(-1), cum.shape[-1] - 1)

    s = draw(np.broadcast_to(cum_rho, (n_rollouts, len(cum_rho))), rng.random(n_rollouts))
    ret = np.zeros(n_rollouts)
    disc = 1.0
    for _ in range(horizon):
        a = draw(cum_pi[s], rng.random(n_rollouts))
        s2 = draw(cum_T[s, a], rng.random(n_rollouts))
        r = pomdp.R[s, s2] if pomdp.reward_on_pairs else pomdp.R[s, a]
        ret += disc * r
        disc *= g
        s = s2
    return float(ret.mean()), float(ret.std(ddof=1) / np.sqrt(n_rollouts))


# -- batch report ------------------------------------------------------------


def run_checks(instances: int = 100, seed: int = 0, horizon: int = 5, inject_fault: bool = False,
               n_policies: int = 3) -> list[dict]:
    """One report row per random instance covering both results."""
    from claifo.seeding import numpy_stream

    rows = []
    for i in range(instances):
        rng = numpy_stream(seed, f"theory-{i}")
        n = int(rng.integers(2, 5))
        pomdp = random_pomdp(rng, n_states=n, n_actions=2, n_xbar=3, n_xhat=2)
        pols = [random_history_policy(rng, pomdp, horizon, sees_xhat=inject_fault) for _ in range(n_policies)]
        p1 = check_prop1(pomdp, pols, horizon, z_includes_xhat=inject_fault)
        mdp = random_pomdp(rng, n_states=5, n_actions=3, n_xbar=1, n_xhat=1, gamma=0.9)
        pi_E, pi_T = (_dirichlet_rows(rng, 5, 3) for _ in range(2))
        p2 = check_prop2(mdp, pi_E, pi_T)
        rows.append({
            "instance": i,
            "n_states": n,
            "prop1_deviation": p1.deviation,
            "prop1_pair_deviation": p1.pair_deviation,
            "prop1_recursion_error": p1.recursion_error,
            "prop1_pass": p1.holds,
            "prop2_gap": p2.gap,
            "prop2_bound": p2.bound,
            "prop2_d_tv": p2.d_tv,
            "prop2_C": p2.C,
            "prop2_pass": p2.holds,
            "pass": p1.holds and p2.holds,
        })
    return rows
