"""Mean-field evolution of the token economy and its equilibrium machinery.

The mean-field state is a per-class joint distribution ``mu[c][u, k]`` over
(policy, token count).  Its ODE combines two terms: wallet-chain relaxation
at rate ``Rd + Rno`` and policy revisions driven by a protocol (imitative or
pairwise comparison) whose switch rates compare long-run policy payoffs.
Payoffs weight single-stage action rewards by each policy's stationary token
distribution, so the whole model is pinned down by the cached wallet chains.

The steady-state game over policy marginals is a full potential game: its
payoff map is the gradient of ``U(x) = (1/Rd) * sum_r int_0^{sigma_r} w_r``,
which makes equilibria computable by concave maximization and makes the
flows at every equilibrium unique.  Certificates quantify distance from
equilibrium: the policy slack (mass on policies that are beaten by more than
epsilon) and the state slack (distance from the stationary lift).

Hot paths (drift evaluation and the RK4 loop) are numba-compiled; the
revision term uses sorted prefix sums instead of dense rate matrices, so one
drift evaluation costs O(n log n + n * kbar) per class.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from . import wallet
from .model import Scenario, ScenarioError
from .policy import PolicyFamily, enumerate_policies

__all__ = [
    "MeanFieldGame",
    "RevisionProtocolSpec",
    "MsneCertificate",
    "Trajectory",
    "IntegrationError",
    "payoff_map",
    "revision_rates",
    "drift",
    "integrate",
    "steady_state_lift",
    "potential",
    "msne_certificate",
    "steady_state_equilibrium",
    "default_initial_state",
    "random_interior_state",
]

PROTO_IMITATIVE = 0
PROTO_PAIRWISE = 1


class IntegrationError(RuntimeError):
    """Step-size underflow or invalid state during ODE integration."""


@dataclass(frozen=True)
class RevisionProtocolSpec:
    """Protocol kind plus the scale that enforces the revision-rate budget.

    ``kappa`` is chosen so that the total switch rate out of any policy never
    exceeds ``rate_revision``: imitative rates carry the imitated policy's
    mass share (which sums to at most one), pairwise rates do not, hence the
    extra ``n - 1`` factor there.
    """

    kind: str
    kappa: float
    rate_revision: float


@dataclass(frozen=True)
class MsneCertificate:
    """Equilibrium accuracy certificate.

    ``eps_policy`` is the smallest slack at which every policy holding more
    than that much mass is within that slack of the best payoff in its class
    (the two occurrences of the slack are coupled, hence the bisection).
    ``eps_state`` bounds the distance from the stationary lift.  ``eps`` is
    their maximum; zero exactly at an equilibrium.
    """

    eps_policy: float
    eps_state: float
    per_class_policy: tuple[float, ...]
    per_class_state: tuple[float, ...]

    @property
    def eps(self) -> float:
        return max(self.eps_policy, self.eps_state)


@dataclass
class Trajectory:
    times: np.ndarray
    sigmas: np.ndarray
    wbars: np.ndarray
    potentials: np.ndarray
    certificates: np.ndarray
    mu_final: list[np.ndarray]
    stopped_at: float | None
    clipped_mass: float


class MeanFieldGame:
    """Scenario compiled for mean-field evaluation.

    Enumerates the monotone policy family of every class, builds and solves
    all wallet chains once, and packs policy tables, stationary weights, and
    reward parameters into flat arrays for the numba kernels.
    """

    def __init__(
        self,
        scenario: Scenario,
        max_distinct_actions: int = 2,
        families: tuple[PolicyFamily, ...] | None = None,
    ):
        if scenario.tolls is None:
            raise ScenarioError("scenario has no tolls; design them or use zero_tolls()")
        self.scenario = scenario
        if families is None:
            families = tuple(
                enumerate_policies(c.id, scenario.tolls[ci], scenario.kbar, max_distinct_actions)
                for ci, c in enumerate(scenario.classes)
            )
        self.families = families

        C = scenario.n_classes
        K1 = scenario.kbar + 1
        self.K1 = K1
        self.u_off = np.zeros(C + 1, dtype=np.int64)
        self.q_off = np.zeros(C + 1, dtype=np.int64)
        for c in range(C):
            self.u_off[c + 1] = self.u_off[c] + len(families[c])
            self.q_off[c + 1] = self.q_off[c] + len(scenario.classes[c].actions)
        self.NU = int(self.u_off[-1])
        self.NQ = int(self.q_off[-1])

        self.act_id = np.zeros((self.NU, K1), dtype=np.int64)
        self.act_target = np.zeros((self.NU, K1), dtype=np.int64)
        self.eta = np.zeros((self.NU, K1))
        ks = np.arange(K1)
        for c in range(C):
            tolls = scenario.tolls[c]
            for j, pol in enumerate(families[c].policies):
                u = int(self.u_off[c]) + j
                table = pol.as_array()
                self.act_id[u] = self.q_off[c] + table
                self.act_target[u] = np.minimum(ks - tolls[table], scenario.kbar)
                chain = wallet.build_chain(
                    table, tolls, scenario.rate_action, scenario.rate_noise, scenario.kbar
                )
                self.eta[u] = wallet.stationary_distribution(chain)

        # Action -> resource incidence in CSR form over global action ids.
        res_idx: list[int] = []
        ptr = [0]
        for c in range(C):
            for a in scenario.classes[c].actions:
                res_idx.extend(a)
                ptr.append(len(res_idx))
        self.act_res_ptr = np.asarray(ptr, dtype=np.int64)
        self.act_res_idx = np.asarray(res_idx, dtype=np.int64)

        self.rew_kind, self.rew_par = scenario.reward_arrays()
        self.mass = np.array([c.mass for c in scenario.classes])

        # Stationary action frequencies per class: F(x) = G @ w_act.
        self.G = []
        for c in range(C):
            n_c = len(families[c])
            q_c = len(scenario.classes[c].actions)
            Gc = np.zeros((n_c, q_c))
            for j, pol in enumerate(families[c].policies):
                np.add.at(Gc[j], pol.as_array(), self.eta[self.u_off[c] + j])
            self.G.append(Gc)

        self.protocol = RevisionProtocolSpec(
            scenario.protocol, 0.0, scenario.rate_revision
        )
        self.dF_max = np.zeros(C)
        w_lo = scenario.resource_rewards(np.full(scenario.n_resources, scenario.sigma_cap))
        w_hi = scenario.resource_rewards(np.zeros(scenario.n_resources))
        self.kappa = np.zeros(C)
        for c in range(C):
            acts = scenario.classes[c].actions
            amax = max(w_hi[list(a)].sum() for a in acts)
            amin = min(w_lo[list(a)].sum() for a in acts)
            self.dF_max[c] = max(amax - amin, 1e-12)
            n_c = len(families[c])
            if scenario.protocol == "imitative":
                self.kappa[c] = scenario.rate_revision / self.dF_max[c]
            elif scenario.protocol == "pairwise":
                self.kappa[c] = scenario.rate_revision / (max(n_c - 1, 1) * self.dF_max[c])
            else:
                raise ScenarioError(f"unknown revision protocol {scenario.protocol!r}")
        self.proto_code = PROTO_IMITATIVE if scenario.protocol == "imitative" else PROTO_PAIRWISE

    # -- state layout helpers -------------------------------------------------

    def split(self, flat: np.ndarray) -> list[np.ndarray]:
        return [flat[self.u_off[c] : self.u_off[c + 1]] for c in range(self.scenario.n_classes)]

    def pack(self, mu: list[np.ndarray]) -> np.ndarray:
        flat = np.zeros((self.NU, self.K1))
        for c, arr in enumerate(mu):
            flat[self.u_off[c] : self.u_off[c + 1]] = arr
        return flat

    def n_policies(self, c: int) -> int:
        return int(self.u_off[c + 1] - self.u_off[c])

    # -- evaluation wrappers ---------------------------------------------------

    def make_workspace(self):
        """Scratch buffers for the numba kernels (one set per integration run)."""
        R = self.scenario.n_resources
        n_max = max(self.n_policies(c) for c in range(self.scenario.n_classes))
        floats = (
            np.zeros(self.NQ),  # action_rate
            np.zeros(R),  # sigma
            np.zeros(R),  # w_res
            np.zeros(self.NQ),  # w_act
            np.zeros(self.NU),  # F
            np.zeros(self.NU),  # x
            np.zeros(n_max),  # Fs
            np.zeros(n_max + 1),  # T0
            np.zeros(n_max + 1),  # T1
            np.zeros(n_max + 1),  # V1
        )
        mats = (np.zeros((n_max + 1, self.K1)), np.zeros((n_max + 1, self.K1)))
        ints = (np.zeros(n_max, dtype=np.int64), np.zeros(n_max, dtype=np.int64))
        return (floats, mats, ints)

    def sigma_F_x(self, mu_flat: np.ndarray):
        """Resource flows, action rewards, policy payoffs, policy marginals."""
        ws = self.make_workspace()
        floats = ws[0]
        _sigma_F_x(
            mu_flat,
            self.act_id,
            self.eta,
            self.act_res_ptr,
            self.act_res_idx,
            self.rew_kind,
            self.rew_par,
            self.scenario.rate_action,
            floats[0],
            floats[1],
            floats[2],
            floats[3],
            floats[4],
            floats[5],
        )
        return floats[1].copy(), floats[3].copy(), floats[4].copy(), floats[5].copy()

    def class_wbar(self, mu_flat: np.ndarray) -> np.ndarray:
        """Average per-decision reward of each class under ``mu``."""
        sigma, w_act, _, _ = self.sigma_F_x(mu_flat)
        out = np.zeros(self.scenario.n_classes)
        for c in range(self.scenario.n_classes):
            rate = np.zeros(len(self.scenario.classes[c].actions))
            block = mu_flat[self.u_off[c] : self.u_off[c + 1]]
            np.add.at(rate, self.act_id[self.u_off[c] : self.u_off[c + 1]].ravel() - self.q_off[c], block.ravel())
            wa = w_act[self.q_off[c] : self.q_off[c + 1]]
            out[c] = float(rate @ wa) / self.mass[c]
        return out


# -- numba kernels -------------------------------------------------------------


@njit(cache=True)
def _eval_rewards(sigma, rew_kind, rew_par, out):
    for r in range(sigma.shape[0]):
        x = sigma[r]
        if rew_kind[r] == 0:
            out[r] = rew_par[r, 0] - rew_par[r, 1] * x
        else:
            fft = rew_par[r, 0]
            cap = rew_par[r, 1]
            b = rew_par[r, 2]
            power = rew_par[r, 3]
            eps = rew_par[r, 4]
            out[r] = -fft * (1.0 + b * (x / cap) ** power) - eps * x


@njit(cache=True)
def _sigma_F_x(mu, act_id, eta, act_res_ptr, act_res_idx, rew_kind, rew_par, rate_action,
               action_rate, sigma, w_res, w_act, F, x):
    NU, K1 = mu.shape
    NQ = act_res_ptr.shape[0] - 1
    R = sigma.shape[0]
    action_rate[:] = 0.0
    for u in range(NU):
        for k in range(K1):
            action_rate[act_id[u, k]] += mu[u, k]
    sigma[:] = 0.0
    for a in range(NQ):
        for p in range(act_res_ptr[a], act_res_ptr[a + 1]):
            sigma[act_res_idx[p]] += rate_action * action_rate[a]
    _eval_rewards(sigma, rew_kind, rew_par, w_res)
    for a in range(NQ):
        s = 0.0
        for p in range(act_res_ptr[a], act_res_ptr[a + 1]):
            s += w_res[act_res_idx[p]]
        w_act[a] = s
    for u in range(NU):
        f = 0.0
        m = 0.0
        for k in range(K1):
            f += eta[u, k] * w_act[act_id[u, k]]
            m += mu[u, k]
        F[u] = f
        x[u] = m


@njit(cache=True)
def _drift(
    mu,
    out,
    act_id,
    act_target,
    eta,
    act_res_ptr,
    act_res_idx,
    rew_kind,
    rew_par,
    u_off,
    mass,
    kappa,
    proto,
    rate_action,
    rate_noise,
    ws,
):
    NU, K1 = mu.shape
    kbar = K1 - 1
    action_rate, sigma, w_res, w_act, F, x, Fs, T0, T1, V1 = ws[0]
    S0, S1 = ws[1]
    grp, gend = ws[2]
    _sigma_F_x(mu, act_id, eta, act_res_ptr, act_res_idx, rew_kind, rew_par, rate_action,
               action_rate, sigma, w_res, w_act, F, x)
    total = rate_action + rate_noise
    wa = rate_action / total
    wn = rate_noise / total

    # Wallet-chain relaxation: rate * (P^T mu - mu), scattered by kernel targets.
    for u in range(NU):
        for k in range(K1):
            out[u, k] = -total * mu[u, k]
        for k in range(K1):
            m = mu[u, k]
            if m != 0.0:
                out[u, act_target[u, k]] += total * wa * m
                kn = k + 1 if k < kbar else kbar
                out[u, kn] += total * wn * m

    # Revision flows via prefix sums over payoff-sorted policies.
    C = u_off.shape[0] - 1
    for c in range(C):
        lo = u_off[c]
        hi = u_off[c + 1]
        n = hi - lo
        if n <= 1:
            continue
        kap = kappa[c]
        m_c = mass[c]
        Fc = F[lo:hi]
        order = np.argsort(Fc)
        for j in range(n):
            Fs[j] = Fc[order[j]]
        # Tie-group boundaries: grp[j] is the first index of j's group in the
        # sorted order, gend[j] the first strictly-better index.
        j = 0
        while j < n:
            e = j + 1
            while e < n and Fs[e] == Fs[j]:
                e += 1
            for i in range(j, e):
                grp[i] = j
                gend[i] = e
            j = e
        # Prefix sums of mu and F * mu over the sorted order, per token count,
        # plus scalar prefixes over x (imitative outflow) and plain F (pairwise).
        for k in range(K1):
            S0[0, k] = 0.0
            S1[0, k] = 0.0
        T0[0] = 0.0
        T1[0] = 0.0
        V1[0] = 0.0
        for j in range(n):
            uu = lo + order[j]
            for k in range(K1):
                S0[j + 1, k] = S0[j, k] + mu[uu, k]
                S1[j + 1, k] = S1[j, k] + Fs[j] * mu[uu, k]
            T0[j + 1] = T0[j] + x[uu]
            T1[j + 1] = T1[j] + Fs[j] * x[uu]
            V1[j + 1] = V1[j] + Fs[j]
        for j in range(n):
            uu = lo + order[j]
            gj = grp[j]
            ge = gend[j]
            if proto == 0:
                w_in = kap * x[uu] / m_c
                rate_out = (kap / m_c) * ((T1[n] - T1[ge]) - Fs[j] * (T0[n] - T0[ge]))
            else:
                w_in = kap
                rate_out = kap * ((V1[n] - V1[ge]) - Fs[j] * (n - ge))
            for k in range(K1):
                inflow = w_in * (Fs[j] * S0[gj, k] - S1[gj, k])
                out[uu, k] += inflow - rate_out * mu[uu, k]


@njit(cache=True)
def _rk4_span(
    mu,
    t_span,
    h_base,
    act_id,
    act_target,
    eta,
    act_res_ptr,
    act_res_idx,
    rew_kind,
    rew_par,
    u_off,
    mass,
    kappa,
    proto,
    rate_action,
    rate_noise,
    ws,
    k1,
    k2,
    k3,
    k4,
    stage,
    tmp,
):
    """Advance ``mu`` in place by ``t_span`` with fixed-step RK4.

    A step whose negative undershoot exceeds the per-step budget is rejected
    and retried with up to 2**20 substeps; any surviving undershoot is
    clipped and the class masses renormalized.  Returns (clipped_total,
    status) with status 0 on success, 1 on step-size underflow.
    """
    NU, K1 = mu.shape
    C = u_off.shape[0] - 1
    n_steps = max(int(round(t_span / h_base)), 1)
    h_step = t_span / n_steps
    clipped_total = 0.0
    for _ in range(n_steps):
        depth = 0
        while True:
            sub = 2**depth
            hs = h_step / sub
            for i in range(NU):
                for k in range(K1):
                    tmp[i, k] = mu[i, k]
            ok = True
            clip_here = 0.0
            for _s in range(sub):
                _drift(tmp, k1, act_id, act_target, eta, act_res_ptr, act_res_idx,
                       rew_kind, rew_par, u_off, mass, kappa, proto, rate_action, rate_noise, ws)
                for i in range(NU):
                    for k in range(K1):
                        stage[i, k] = tmp[i, k] + 0.5 * hs * k1[i, k]
                _drift(stage, k2, act_id, act_target, eta, act_res_ptr, act_res_idx,
                       rew_kind, rew_par, u_off, mass, kappa, proto, rate_action, rate_noise, ws)
                for i in range(NU):
                    for k in range(K1):
                        stage[i, k] = tmp[i, k] + 0.5 * hs * k2[i, k]
                _drift(stage, k3, act_id, act_target, eta, act_res_ptr, act_res_idx,
                       rew_kind, rew_par, u_off, mass, kappa, proto, rate_action, rate_noise, ws)
                for i in range(NU):
                    for k in range(K1):
                        stage[i, k] = tmp[i, k] + hs * k3[i, k]
                _drift(stage, k4, act_id, act_target, eta, act_res_ptr, act_res_idx,
                       rew_kind, rew_par, u_off, mass, kappa, proto, rate_action, rate_noise, ws)
                neg = 0.0
                for i in range(NU):
                    for k in range(K1):
                        v = tmp[i, k] + (hs / 6.0) * (k1[i, k] + 2.0 * k2[i, k] + 2.0 * k3[i, k] + k4[i, k])
                        if v < 1e-200:
                            # Clip undershoots; also flush vanishing mass so
                            # decaying cells never reach subnormal range,
                            # which would cripple floating-point throughput.
                            if v < 0.0:
                                neg -= v
                            v = 0.0
                        tmp[i, k] = v
                clip_here += neg
                if neg > 1e-8:
                    ok = False
                    break
            if ok:
                if clip_here > 0.0:
                    for c in range(C):
                        s = 0.0
                        for i in range(u_off[c], u_off[c + 1]):
                            for k in range(K1):
                                s += tmp[i, k]
                        scale = mass[c] / s
                        for i in range(u_off[c], u_off[c + 1]):
                            for k in range(K1):
                                tmp[i, k] *= scale
                clipped_total += clip_here
                for i in range(NU):
                    for k in range(K1):
                        mu[i, k] = tmp[i, k]
                break
            depth += 1
            if depth > 20:
                return clipped_total, 1
    return clipped_total, 0


# -- public operations ----------------------------------------------------------


def payoff_map(mu: list[np.ndarray], game: MeanFieldGame) -> list[np.ndarray]:
    """Long-run average payoff of every enumerated policy at state ``mu``.

    ``F[c][u] = sum_k sum_a eta[c,u](k) * [policy u plays a at k] * w(a, sigma(mu))``.
    """
    _, _, F, _ = game.sigma_F_x(game.pack(mu))
    return game.split(F)


def revision_rates(spec: RevisionProtocolSpec, F: np.ndarray, x: np.ndarray, class_mass: float) -> np.ndarray:
    """Dense switch-rate matrix ``rho[u, v]`` of one class.

    Imitative: ``kappa * max(0, F_v - F_u) * x_v / m`` (never imitates an
    extinct policy); pairwise comparison: ``kappa * max(0, F_v - F_u)``.
    Diagonal is zero.  Row sums stay below the revision rate by the choice
    of ``kappa``.
    """
    F = np.asarray(F, dtype=float)
    x = np.asarray(x, dtype=float)
    gain = np.maximum(F[None, :] - F[:, None], 0.0)
    if spec.kind == "imitative":
        rho = spec.kappa * gain * (x[None, :] / class_mass)
    elif spec.kind == "pairwise":
        rho = spec.kappa * gain
    else:
        raise ValueError(f"unknown protocol kind {spec.kind!r}")
    np.fill_diagonal(rho, 0.0)
    return rho


def drift(mu: list[np.ndarray], game: MeanFieldGame) -> list[np.ndarray]:
    """Right-hand side of the mean-field ODE at ``mu`` (chain + revision)."""
    flat = game.pack(mu)
    out = np.zeros_like(flat)
    _drift(
        flat, out, game.act_id, game.act_target, game.eta,
        game.act_res_ptr, game.act_res_idx, game.rew_kind, game.rew_par,
        game.u_off, game.mass, game.kappa, game.proto_code,
        game.scenario.rate_action, game.scenario.rate_noise, game.make_workspace(),
    )
    return game.split(out)


def steady_state_lift(x: list[np.ndarray], game: MeanFieldGame) -> list[np.ndarray]:
    """Pair a policy marginal with each policy's stationary token distribution."""
    out = []
    for c, xc in enumerate(x):
        xc = np.asarray(xc, dtype=float)
        block = game.eta[game.u_off[c] : game.u_off[c + 1]]
        out.append(xc[:, None] * block)
    return out


def potential(x: list[np.ndarray], game: MeanFieldGame) -> float:
    """Potential of the steady-state game: summed reward antiderivatives.

    ``U(x) = (1/Rd) * sum_r int_0^{sigma_r(lift(x))} w_r(s) ds``; its partial
    derivative in ``x[c][u]`` equals the steady-state payoff of policy ``u``.
    """
    scn = game.scenario
    sigma = np.zeros(scn.n_resources)
    for c, xc in enumerate(x):
        rate = np.asarray(xc, dtype=float) @ game.G[c]
        for a, resources in enumerate(scn.classes[c].actions):
            for r in resources:
                sigma[r] += scn.rate_action * rate[a]
    total = 0.0
    for res in scn.resources:
        total += float(res.reward.antiderivative(sigma[res.id]))
    return total / scn.rate_action


def msne_certificate(mu: list[np.ndarray], game: MeanFieldGame) -> MsneCertificate:
    """Accuracy certificate of ``mu`` against the enumerated policy families.

    The policy slack solves the self-referential condition "every policy with
    mass above eps is within eps of the best payoff" by bisection on eps (the
    condition is monotone in eps).  The state slack is the sup-norm distance
    to the stationary lift of the marginals.
    """
    flat = game.pack(mu)
    _, _, F, x = game.sigma_F_x(flat)
    per_pol, per_state = [], []
    for c in range(game.scenario.n_classes):
        lo, hi = game.u_off[c], game.u_off[c + 1]
        Fc, xc = F[lo:hi], x[lo:hi]
        gap = Fc.max() - Fc
        lo_e, hi_e = 0.0, max(float(gap.max(initial=0.0)), float(xc.max(initial=0.0)), 1e-300)
        for _ in range(80):
            mid = 0.5 * (lo_e + hi_e)
            if np.all((xc <= mid) | (gap <= mid)):
                hi_e = mid
            else:
                lo_e = mid
        per_pol.append(hi_e if hi_e > 1e-280 else 0.0)
        block = flat[lo:hi]
        lifted = xc[:, None] * game.eta[lo:hi]
        per_state.append(float(np.max(np.abs(block - lifted))))
    return MsneCertificate(
        eps_policy=max(per_pol),
        eps_state=max(per_state),
        per_class_policy=tuple(per_pol),
        per_class_state=tuple(per_state),
    )


def default_initial_state(game: MeanFieldGame) -> list[np.ndarray]:
    """Uniform-over-policies interior start, lifted through each policy's chain."""
    x = [np.full(game.n_policies(c), game.mass[c] / game.n_policies(c)) for c in range(game.scenario.n_classes)]
    return _floor_and_renorm(steady_state_lift(x, game), game)


def random_interior_state(game: MeanFieldGame, rng: np.random.Generator) -> list[np.ndarray]:
    """Dirichlet-random interior start, lifted and floored like the default."""
    x = [
        game.mass[c] * rng.dirichlet(np.ones(game.n_policies(c)))
        for c in range(game.scenario.n_classes)
    ]
    return _floor_and_renorm(steady_state_lift(x, game), game)


def _floor_and_renorm(mu: list[np.ndarray], game: MeanFieldGame, floor: float = 1e-6) -> list[np.ndarray]:
    out = []
    for c, arr in enumerate(mu):
        arr = np.maximum(arr, floor)
        arr *= game.mass[c] / arr.sum()
        out.append(arr)
    return out


def integrate(
    game: MeanFieldGame,
    mu0: list[np.ndarray],
    t_end: float,
    h: float | None = None,
    sample_stride: float | None = None,
    stop_eps: float | None = None,
    check_every: float | None = None,
) -> Trajectory:
    """Integrate the mean-field ODE with classical fixed-step RK4.

    The default step obeys ``h = min(0.05 / (Rd + Rno), 0.05 / Rr)``.  The
    trajectory is sampled every ``sample_stride`` time units (resource flows,
    class rewards, potential of the marginals, certificate).  If ``stop_eps``
    is given, integration ends early once the certificate reaches it
    (checked every ``check_every`` time units, default one sample stride).
    """
    scn = game.scenario
    if h is None:
        h = min(0.05 / (scn.rate_action + scn.rate_noise), 0.05 / max(scn.rate_revision, 1e-12))
    if sample_stride is None:
        sample_stride = max(t_end / 200.0, h)
    if check_every is None:
        check_every = sample_stride
    chunk = min(sample_stride, check_every)

    flat = game.pack(mu0).copy()
    ws = game.make_workspace()
    bufs = [np.zeros_like(flat) for _ in range(6)]
    times, sigmas, wbars, pots, certs = [], [], [], [], []
    clipped = 0.0
    stopped_at = None

    def record(t):
        sigma, _, F, x = game.sigma_F_x(flat)
        cert = msne_certificate(game.split(flat), game)
        times.append(t)
        sigmas.append(sigma)
        wbars.append(game.class_wbar(flat))
        pots.append(potential(game.split(np.asarray(x)), game))
        certs.append(cert.eps)
        return cert

    cert = record(0.0)
    t = 0.0
    next_sample = sample_stride
    while t < t_end - 1e-9:
        span = min(chunk, t_end - t)
        got, status = _rk4_span(
            flat, span, h, game.act_id, game.act_target, game.eta,
            game.act_res_ptr, game.act_res_idx, game.rew_kind, game.rew_par,
            game.u_off, game.mass, game.kappa, game.proto_code,
            scn.rate_action, scn.rate_noise, ws, *bufs,
        )
        clipped += got
        t += span
        if status != 0:
            raise IntegrationError(f"step-size underflow at t = {t:.6g}")
        if t >= next_sample - 1e-9 or t >= t_end - 1e-9:
            cert = record(t)
            next_sample += sample_stride
        else:
            cert = msne_certificate(game.split(flat), game)
        if stop_eps is not None and cert.eps <= stop_eps:
            stopped_at = t
            if times[-1] != t:
                record(t)
            break

    return Trajectory(
        times=np.asarray(times),
        sigmas=np.asarray(sigmas),
        wbars=np.asarray(wbars),
        potentials=np.asarray(pots),
        certificates=np.asarray(certs),
        mu_final=game.split(flat),
        stopped_at=stopped_at,
        clipped_mass=clipped,
    )


def steady_state_equilibrium(
    game: MeanFieldGame,
    tol: float = 1e-12,
    max_iter: int = 200_000,
) -> list[np.ndarray]:
    """Equilibrium policy marginals via potential maximization.

    The potential is concave and smooth over the product of class simplices,
    so pairwise Frank-Wolfe steps (shift mass from the worst supported policy
    to the best, with exact one-dimensional line search) converge to the
    maximizer; transfers hit the boundary exactly, which zeroes suboptimal
    policies and makes the result a clean equilibrium support.
    """
    scn = game.scenario
    C = scn.n_classes
    x = [np.full(game.n_policies(c), game.mass[c] / game.n_policies(c)) for c in range(C)]

    def payoffs():
        sigma = np.zeros(scn.n_resources)
        rates = []
        for c in range(C):
            rate = x[c] @ game.G[c]
            rates.append(rate)
            for a, resources in enumerate(scn.classes[c].actions):
                for r in resources:
                    sigma[r] += scn.rate_action * rate[a]
        w = scn.resource_rewards(sigma)
        F = []
        for c in range(C):
            w_act = np.array([w[list(a)].sum() for a in scn.classes[c].actions])
            F.append(game.G[c] @ w_act)
        return sigma, F

    ref = max(abs(game.dF_max).max(), 1.0)
    for _ in range(max_iter):
        sigma, F = payoffs()
        gap = 0.0
        for c in range(C):
            gap += game.mass[c] * F[c].max() - float(F[c] @ x[c])
        if gap <= tol * ref:
            break
        # Move within the class holding the largest payoff spread on support.
        scores = []
        for c in range(C):
            sup = x[c] > 0
            spread = F[c].max() - F[c][sup].min() if sup.any() else 0.0
            scores.append(spread * game.mass[c])
        c = int(np.argmax(scores))
        Fc = F[c]
        u_to = int(np.argmax(Fc))
        sup = np.nonzero(x[c] > 0)[0]
        u_from = int(sup[np.argmin(Fc[sup])])
        if u_to == u_from:
            continue
        gmax = x[c][u_from]
        # Exact line search: the directional derivative is decreasing in the
        # transfer, so bisection on its sign finds the concave maximum.
        dG = game.G[c][u_to] - game.G[c][u_from]
        dsigma = np.zeros(scn.n_resources)
        for a, resources in enumerate(scn.classes[c].actions):
            for r in resources:
                dsigma[r] += scn.rate_action * dG[a]

        def dderiv(g):
            w = scn.resource_rewards(sigma + g * dsigma)
            w_act = np.array([w[list(a)].sum() for a in scn.classes[c].actions])
            return float(dG @ w_act)

        if dderiv(gmax) >= 0:
            g_star = gmax
        else:
            lo_g, hi_g = 0.0, gmax
            for _ in range(70):
                mid = 0.5 * (lo_g + hi_g)
                if dderiv(mid) >= 0:
                    lo_g = mid
                else:
                    hi_g = mid
            g_star = 0.5 * (lo_g + hi_g)
        x[c][u_from] -= g_star
        x[c][u_to] += g_star
        if x[c][u_from] < 1e-15 * game.mass[c]:
            x[c][u_to] += x[c][u_from]
            x[c][u_from] = 0.0
    return x
