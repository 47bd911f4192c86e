"""Finite-population stochastic simulation of the token economy.

Every agent carries three independent Poisson clocks (action, noise,
revision).  Their superposition is one global exponential clock of rate
``N * (Rd + Rno + Rr)`` paired with a uniform agent pick and a rate-
proportional clock-type pick, which the event loop exploits for O(1) cost
per event.  Action events collect the single-stage reward at the current
empirical flows and move tokens by the toll kernel; noise events gift one
token; revision events switch policies with probability ``rho / Rr`` under
the scenario's revision protocol evaluated at the empirical state.

The loop maintains running counts (agents per policy, per (policy, token)
cell, per prospective action, per resource) so empirical flows, payoffs,
and distribution snapshots are incremental.  The hot loop is numba-compiled
and deterministic given the seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .meanfield import MeanFieldGame, _eval_rewards
from .model import ScenarioError

__all__ = [
    "PopulationState",
    "PopulationTrajectory",
    "init_population",
    "step_event",
    "empirical_distribution",
    "run",
    "compare_to_meanfield",
]

EV_ACTION = 0
EV_NOISE = 1
EV_REVISION = 2


@dataclass
class PopulationState:
    """Mutable state of one finite-N simulation."""

    game: MeanFieldGame
    t: float
    seed: int
    agent_class: np.ndarray
    agent_k: np.ndarray
    agent_u: np.ndarray  # global policy index
    cum_reward: np.ndarray
    n_actions_taken: np.ndarray
    event_counts: np.ndarray  # [action, noise, revision]

    @property
    def n(self) -> int:
        return len(self.agent_class)


@dataclass
class PopulationTrajectory:
    times: np.ndarray
    sigmas: np.ndarray
    wbars: np.ndarray
    mus: np.ndarray | None
    agent_mean_reward: np.ndarray
    agent_action_counts: np.ndarray
    event_counts: np.ndarray
    final_state: "PopulationState" = field(repr=False, default=None)


def _largest_remainder_counts(masses: np.ndarray, n: int) -> np.ndarray:
    """Integer class sizes proportional to masses, summing exactly to n."""
    quota = masses / masses.sum() * n
    counts = np.floor(quota).astype(np.int64)
    short = n - counts.sum()
    order = np.argsort(-(quota - counts), kind="stable")
    counts[order[:short]] += 1
    return counts


def init_population(game: MeanFieldGame, n: int, mu0: list[np.ndarray], seed: int) -> PopulationState:
    """Sample ``n`` agents i.i.d. from the normalized cells of ``mu0``.

    Class sizes follow the largest-remainder rounding of ``n * mass_c`` so
    they sum exactly to ``n``; each agent's (policy, token) cell is drawn
    from its class's normalized distribution.
    """
    scn = game.scenario
    if n < scn.n_classes:
        raise ScenarioError(f"population {n} smaller than the number of classes {scn.n_classes}")
    counts = _largest_remainder_counts(game.mass, n)
    rng = np.random.default_rng(seed)
    agent_class = np.repeat(np.arange(scn.n_classes, dtype=np.int64), counts)
    agent_k = np.zeros(n, dtype=np.int64)
    agent_u = np.zeros(n, dtype=np.int64)
    pos = 0
    for c in range(scn.n_classes):
        block = np.asarray(mu0[c], dtype=float).ravel()
        p = block / block.sum()
        cells = rng.choice(len(block), size=counts[c], p=p)
        n_u, K1 = mu0[c].shape
        agent_u[pos : pos + counts[c]] = game.u_off[c] + cells // K1
        agent_k[pos : pos + counts[c]] = cells % K1
        pos += counts[c]
    return PopulationState(
        game=game,
        t=0.0,
        seed=seed,
        agent_class=agent_class,
        agent_k=agent_k,
        agent_u=agent_u,
        cum_reward=np.zeros(n),
        n_actions_taken=np.zeros(n, dtype=np.int64),
        event_counts=np.zeros(3, dtype=np.int64),
    )


def empirical_distribution(state: PopulationState):
    """Empirical state-policy distribution and resource flows.

    ``mu_hat[c][u, k]`` is the fraction of the population in that cell, so
    the flows returned equal ``sigma_from_distribution(mu_hat)`` exactly.
    """
    game = state.game
    scn = game.scenario
    n = state.n
    mus = []
    sigma = np.zeros(scn.n_resources)
    for c in range(scn.n_classes):
        n_u = game.n_policies(c)
        block = np.zeros((n_u, game.K1))
        sel = state.agent_class == c
        local_u = state.agent_u[sel] - game.u_off[c]
        np.add.at(block, (local_u, state.agent_k[sel]), 1.0 / n)
        mus.append(block)
    for i in range(n):
        u, k = state.agent_u[i], state.agent_k[i]
        a = game.act_id[u, k]
        for p in range(game.act_res_ptr[a], game.act_res_ptr[a + 1]):
            sigma[game.act_res_idx[p]] += scn.rate_action / n
    return mus, sigma


# -- single-event reference ------------------------------------------------------


def step_event(state: PopulationState, rng: np.random.Generator) -> str:
    """Apply one event in place and return its type (reference path).

    The bulk runner compiles the same transition logic; this function exists
    for inspection and contract tests on individual events.
    """
    game = state.game
    scn = game.scenario
    n = state.n
    total = scn.rate_action + scn.rate_noise + scn.rate_revision
    state.t += rng.exponential(1.0 / (n * total))
    i = int(rng.integers(n))
    u, k, c = int(state.agent_u[i]), int(state.agent_k[i]), int(state.agent_class[i])
    draw = rng.random() * total
    _, sigma = empirical_distribution(state)
    w_res = scn.resource_rewards(sigma)
    if draw < scn.rate_action:
        a = game.act_id[u, k]
        reward = sum(
            w_res[game.act_res_idx[p]]
            for p in range(game.act_res_ptr[a], game.act_res_ptr[a + 1])
        )
        state.cum_reward[i] += reward
        state.n_actions_taken[i] += 1
        state.agent_k[i] = game.act_target[u, k]
        state.event_counts[EV_ACTION] += 1
        return "action"
    if draw < scn.rate_action + scn.rate_noise:
        state.agent_k[i] = min(k + 1, scn.kbar)
        state.event_counts[EV_NOISE] += 1
        return "noise"
    # Revision: switch u -> v with probability rho_uv / Rr.
    lo, hi = game.u_off[c], game.u_off[c + 1]
    w_act = np.array(
        [
            w_res[game.act_res_idx[game.act_res_ptr[a] : game.act_res_ptr[a + 1]]].sum()
            for a in range(game.q_off[c], game.q_off[c + 1])
        ]
    )
    F = game.G[c] @ w_act
    x = np.bincount(state.agent_u[state.agent_class == c] - lo, minlength=hi - lo) / n
    gain = np.maximum(F - F[u - lo], 0.0)
    if scn.protocol == "imitative":
        rho = game.kappa[c] * gain * (x / game.mass[c])
    else:
        rho = game.kappa[c] * gain
    rho[u - lo] = 0.0
    probs = rho / scn.rate_revision
    r = rng.random()
    acc = 0.0
    for v in range(hi - lo):
        acc += probs[v]
        if r < acc:
            state.agent_u[i] = lo + v
            break
    state.event_counts[EV_REVISION] += 1
    return "revision"


# -- compiled bulk runner ---------------------------------------------------------


@njit(cache=True)
def _run_events(
    agent_class,
    agent_k,
    agent_u,
    cum_reward,
    n_actions,
    event_counts,
    t_start,
    t_end,
    burn_at,
    sample_times,
    out_sigma,
    out_wbar,
    out_mu,
    store_mu,
    seed,
    # packed model
    act_id,
    act_target,
    G_pack,
    u_off,
    q_off,
    class_counts,
    act_res_ptr,
    act_res_idx,
    rew_kind,
    rew_par,
    mass,
    kappa,
    proto,
    rate_action,
    rate_noise,
    rate_revision,
    kbar,
):
    np.random.seed(seed)
    n = agent_class.shape[0]
    NU = act_id.shape[0]
    K1 = act_id.shape[1]
    NQ = act_res_ptr.shape[0] - 1
    R = rew_kind.shape[0]
    C = u_off.shape[0] - 1

    pol_count = np.zeros(NU, dtype=np.int64)
    cell_count = np.zeros((NU, K1), dtype=np.int64)
    act_count = np.zeros(NQ, dtype=np.int64)
    res_count = np.zeros(R, dtype=np.int64)
    for i in range(n):
        u = agent_u[i]
        k = agent_k[i]
        pol_count[u] += 1
        cell_count[u, k] += 1
        a = act_id[u, k]
        act_count[a] += 1
        for p in range(act_res_ptr[a], act_res_ptr[a + 1]):
            res_count[act_res_idx[p]] += 1

    sigma = np.zeros(R)
    w_res = np.zeros(R)
    w_act_cls = np.zeros(NQ)
    F_cls = np.zeros(NU)
    rho_row = np.zeros(NU)

    total = rate_action + rate_noise + rate_revision
    inv_rate = 1.0 / (n * total)
    t = t_start
    burned = t_start >= burn_at
    n_samples = sample_times.shape[0]
    s_idx = 0
    while s_idx < n_samples and sample_times[s_idx] < t_start - 1e-12:
        s_idx += 1

    # Bounded loop: the event count over a finite horizon is Poisson with
    # mean n * total * span, so this cap is unreachable in practice and
    # doubles as a guard against a runaway loop.
    max_events = np.int64(n * total * (t_end - t_start) * 4.0 + 10_000_000)
    finished = False
    for _ev in range(max_events):
        dt = np.random.exponential(inv_rate)
        t_next = t + dt
        # Snapshot the state for every grid time passed by this jump.
        while s_idx < n_samples and sample_times[s_idx] <= min(t_next, t_end) + 1e-12:
            for r in range(R):
                sigma[r] = rate_action * res_count[r] / n
            _eval_rewards(sigma, rew_kind, rew_par, w_res)
            for r in range(R):
                out_sigma[s_idx, r] = sigma[r]
            for c in range(C):
                acc = 0.0
                for a in range(q_off[c], q_off[c + 1]):
                    wa = 0.0
                    for p in range(act_res_ptr[a], act_res_ptr[a + 1]):
                        wa += w_res[act_res_idx[p]]
                    acc += act_count[a] * wa
                out_wbar[s_idx, c] = acc / class_counts[c]
            if store_mu:
                for u in range(NU):
                    for k in range(K1):
                        out_mu[s_idx, u, k] = cell_count[u, k] / n
            s_idx += 1
        if t_next > t_end:
            t = t_end
            finished = True
            break
        t = t_next
        if not burned and t >= burn_at:
            for i in range(n):
                cum_reward[i] = 0.0
                n_actions[i] = 0
            burned = True

        i = np.random.randint(0, n)
        u = agent_u[i]
        k = agent_k[i]
        c = agent_class[i]
        draw = np.random.random() * total
        if draw < rate_action:
            event_counts[0] += 1
            a = act_id[u, k]
            reward = 0.0
            for p in range(act_res_ptr[a], act_res_ptr[a + 1]):
                r = act_res_idx[p]
                x = rate_action * res_count[r] / n
                if rew_kind[r] == 0:
                    reward += rew_par[r, 0] - rew_par[r, 1] * x
                else:
                    reward += -rew_par[r, 0] * (1.0 + rew_par[r, 2] * (x / rew_par[r, 1]) ** rew_par[r, 3]) - rew_par[r, 4] * x
            cum_reward[i] += reward
            n_actions[i] += 1
            k_new = act_target[u, k]
        elif draw < rate_action + rate_noise:
            event_counts[1] += 1
            k_new = k + 1 if k < kbar else kbar
        else:
            event_counts[2] += 1
            # Payoffs of the agent's class at the current empirical flows.
            for r in range(R):
                sigma[r] = rate_action * res_count[r] / n
            _eval_rewards(sigma, rew_kind, rew_par, w_res)
            for a in range(q_off[c], q_off[c + 1]):
                wa = 0.0
                for p in range(act_res_ptr[a], act_res_ptr[a + 1]):
                    wa += w_res[act_res_idx[p]]
                w_act_cls[a] = wa
            lo = u_off[c]
            hi = u_off[c + 1]
            for v in range(lo, hi):
                f = 0.0
                for aa in range(q_off[c + 1] - q_off[c]):
                    f += G_pack[v, aa] * w_act_cls[q_off[c] + aa]
                F_cls[v] = f
            Fu = F_cls[u]
            acc = 0.0
            for v in range(lo, hi):
                gain = F_cls[v] - Fu
                if gain < 0.0 or v == u:
                    rho_row[v] = 0.0
                else:
                    if proto == 0:
                        rho_row[v] = kappa[c] * gain * (pol_count[v] / n) / mass[c]
                    else:
                        rho_row[v] = kappa[c] * gain
                acc += rho_row[v]
            rdraw = np.random.random() * rate_revision
            v_new = u
            run_acc = 0.0
            for v in range(lo, hi):
                run_acc += rho_row[v]
                if rdraw < run_acc:
                    v_new = v
                    break
            if v_new != u:
                a_old = act_id[u, k]
                a_new = act_id[v_new, k]
                pol_count[u] -= 1
                pol_count[v_new] += 1
                cell_count[u, k] -= 1
                cell_count[v_new, k] += 1
                if a_new != a_old:
                    act_count[a_old] -= 1
                    act_count[a_new] += 1
                    for p in range(act_res_ptr[a_old], act_res_ptr[a_old + 1]):
                        res_count[act_res_idx[p]] -= 1
                    for p in range(act_res_ptr[a_new], act_res_ptr[a_new + 1]):
                        res_count[act_res_idx[p]] += 1
                agent_u[i] = v_new
            continue
        # Token move shared by action and noise events.
        if k_new != k:
            a_old = act_id[u, k]
            a_new = act_id[u, k_new]
            cell_count[u, k] -= 1
            cell_count[u, k_new] += 1
            if a_new != a_old:
                act_count[a_old] -= 1
                act_count[a_new] += 1
                for p in range(act_res_ptr[a_old], act_res_ptr[a_old + 1]):
                    res_count[act_res_idx[p]] -= 1
                for p in range(act_res_ptr[a_new], act_res_ptr[a_new + 1]):
                    res_count[act_res_idx[p]] += 1
            agent_k[i] = k_new
    if not finished:
        return -1.0
    return t


def run(
    state: PopulationState,
    t_end: float,
    sample_stride: float | None = None,
    burn_in: float = 0.5,
    store_mu: bool = False,
) -> PopulationTrajectory:
    """Event loop to ``t_end`` with periodic snapshots.

    Per-agent cumulative rewards and action counts restart at the burn-in
    time (``burn_in`` fraction of the horizon), so the reported means are
    post-burn-in long-run averages.  With ``store_mu`` the full empirical
    (policy, token) distribution is recorded at every sample time.
    """
    game = state.game
    scn = game.scenario
    if sample_stride is None:
        sample_stride = max(t_end / 200.0, 1e-9)
    sample_times = np.arange(0.0, t_end + sample_stride * 0.5, sample_stride)
    S = len(sample_times)
    out_sigma = np.zeros((S, scn.n_resources))
    out_wbar = np.zeros((S, scn.n_classes))
    out_mu = np.zeros((S, game.NU, game.K1)) if store_mu else np.zeros((1, 1, 1))

    q_sizes = np.diff(game.q_off)
    G_pack = np.zeros((game.NU, int(q_sizes.max())))
    for c in range(scn.n_classes):
        lo, hi = game.u_off[c], game.u_off[c + 1]
        G_pack[lo:hi, : q_sizes[c]] = game.G[c]
    class_counts = np.bincount(state.agent_class, minlength=scn.n_classes).astype(np.int64)

    t_final = _run_events(
        state.agent_class, state.agent_k, state.agent_u,
        state.cum_reward, state.n_actions_taken, state.event_counts,
        state.t, t_end, burn_in * t_end, sample_times,
        out_sigma, out_wbar, out_mu, store_mu, state.seed,
        game.act_id, game.act_target, G_pack, game.u_off, game.q_off, class_counts,
        game.act_res_ptr, game.act_res_idx, game.rew_kind, game.rew_par,
        game.mass, game.kappa, game.proto_code,
        scn.rate_action, scn.rate_noise, scn.rate_revision, scn.kbar,
    )
    if t_final < 0:
        raise RuntimeError("event loop exceeded its safety cap before reaching the horizon")
    state.t = t_final
    mean_reward = np.where(
        state.n_actions_taken > 0, state.cum_reward / np.maximum(state.n_actions_taken, 1), np.nan
    )
    return PopulationTrajectory(
        times=sample_times,
        sigmas=out_sigma,
        wbars=out_wbar,
        mus=out_mu if store_mu else None,
        agent_mean_reward=mean_reward,
        agent_action_counts=state.n_actions_taken.copy(),
        event_counts=state.event_counts.copy(),
        final_state=state,
    )


def compare_to_meanfield(pop: PopulationTrajectory, mf_times: np.ndarray, mf_mus: np.ndarray):
    """Sup over sampled times of the L1 distance between mu-hat and mu.

    Both trajectories must be sampled on the same grid; ``mf_mus`` has shape
    (samples, policies, tokens) in the packed layout.  Returns the sup
    distance and the per-time series.
    """
    if pop.mus is None:
        raise ValueError("population trajectory was recorded without store_mu")
    if len(pop.times) != len(mf_times) or np.max(np.abs(pop.times - mf_times)) > 1e-9:
        raise ValueError("sample grids do not match")
    series = np.abs(pop.mus - mf_mus).sum(axis=(1, 2))
    return float(series.max()), series
