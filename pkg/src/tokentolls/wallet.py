"""Token-wallet jump chains and their stationary analysis.

For one (class, policy) pair the wallet evolves by two Poisson clocks: the
action clock (rate ``Rd``) applies the deterministic toll kernel, the noise
clock (rate ``Rno``) gifts one token.  Superposition gives a single jump
chain with rate ``Rd + Rno`` whose transition matrix mixes the two kernels.
With any positive noise rate the chain has a unique recurrent class and thus
a unique stationary distribution; with zero noise it can split (parity traps
or disjoint recurrent classes), which this module detects and reports rather
than silently returning one of many fixed points.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse
from scipy.sparse.csgraph import connected_components

__all__ = [
    "WalletChainError",
    "NonUniqueStationaryError",
    "WalletChain",
    "action_kernel",
    "noise_kernel",
    "build_chain",
    "stationary_distribution",
    "stationary_action_frequencies",
    "tail_mass_bound",
]

ROW_SUM_TOL = 1e-12
STATIONARY_TOL = 1e-10


class WalletChainError(ValueError):
    """Raised on contract violations when building or analyzing a chain."""


class NonUniqueStationaryError(WalletChainError):
    """The jump chain has more than one recurrent class (noise regularization
    missing or degenerate), so no unique stationary distribution exists."""


def action_kernel(k: int, toll: int, kbar: int) -> np.ndarray:
    """Next-token distribution after paying ``toll`` from ``k`` tokens.

    Deterministic: all mass on ``min(k - toll, kbar)``.  The action must be
    affordable (``toll <= k``); gains saturate at the cap.
    """
    if not 0 <= k <= kbar:
        raise WalletChainError(f"token count {k} outside [0, {kbar}]")
    if toll > k:
        raise WalletChainError(f"unaffordable action: toll {toll} > tokens {k}")
    out = np.zeros(kbar + 1)
    out[min(k - toll, kbar)] = 1.0
    return out


def noise_kernel(k: int, kbar: int) -> np.ndarray:
    """Next-token distribution after a noise ring: one token gifted, capped."""
    if not 0 <= k <= kbar:
        raise WalletChainError(f"token count {k} outside [0, {kbar}]")
    out = np.zeros(kbar + 1)
    out[min(k + 1, kbar)] = 1.0
    return out


@dataclass(frozen=True)
class WalletChain:
    """Combined jump chain of one (class, policy) pair.

    ``matrix`` is the row-stochastic transition matrix of size ``kbar + 1``;
    ``jump_rate`` is ``Rd + Rno``.  ``unique_recurrent`` records the verified
    unique-recurrent-class property required for a unique stationary
    distribution.
    """

    matrix: np.ndarray
    jump_rate: float
    rate_action: float
    rate_noise: float
    unique_recurrent: bool

    @property
    def kbar(self) -> int:
        return self.matrix.shape[0] - 1


def _recurrent_class_count(P: np.ndarray) -> int:
    support = scipy.sparse.csr_matrix(P > 0)
    n_comp, labels = connected_components(support, directed=True, connection="strong")
    # A strongly connected component is recurrent iff it has no edge leaving it.
    rows, cols = support.nonzero()
    leaves = set(labels[rows[labels[rows] != labels[cols]]])
    return n_comp - len(leaves)


def build_chain(
    policy: np.ndarray,
    class_tolls: np.ndarray,
    rate_action: float,
    rate_noise: float,
    kbar: int,
) -> WalletChain:
    """Assemble the combined jump chain for a policy.

    ``policy`` maps each token count to an action index, ``class_tolls`` maps
    action indices to integer tolls.  The matrix is the rate-weighted mix of
    the action kernel rows and the noise kernel rows.
    """
    policy = np.asarray(policy, dtype=np.int64)
    class_tolls = np.asarray(class_tolls, dtype=np.int64)
    if len(policy) != kbar + 1:
        raise WalletChainError(f"policy length {len(policy)} != kbar + 1 = {kbar + 1}")
    if rate_action <= 0 or rate_noise < 0:
        raise WalletChainError("need rate_action > 0 and rate_noise >= 0")
    if rate_noise >= rate_action / 4.0:
        raise WalletChainError(f"noise rate {rate_noise} violates Rno < Rd/4 (Assumption 4)")
    total = rate_action + rate_noise
    wa, wn = rate_action / total, rate_noise / total
    P = np.zeros((kbar + 1, kbar + 1))
    for k in range(kbar + 1):
        toll = int(class_tolls[policy[k]])
        if toll > k:
            raise WalletChainError(f"policy plays unaffordable action at k={k} (toll {toll})")
        P[k, min(k - toll, kbar)] += wa
        P[k, min(k + 1, kbar)] += wn
    chain = WalletChain(
        matrix=P,
        jump_rate=total,
        rate_action=rate_action,
        rate_noise=rate_noise,
        unique_recurrent=_recurrent_class_count(P) == 1,
    )
    rows = P.sum(axis=1)
    if np.max(np.abs(rows - 1.0)) > ROW_SUM_TOL:
        raise WalletChainError("row sums deviate from 1 beyond tolerance")
    return chain


def stationary_distribution(chain: WalletChain, method: str = "solve") -> np.ndarray:
    """Unique stationary distribution of the combined jump chain.

    The default is a dense linear solve of ``(P^T - I) eta = 0`` with a
    normalization row; ``method="power"`` runs power iteration instead (the
    independent cross-check).  Raises :class:`NonUniqueStationaryError` when
    the chain has several recurrent classes, which happens exactly when the
    noise regularization is absent (e.g. all-even tolls trap parity, or a
    non-monotone policy splits the state space).
    """
    if not chain.unique_recurrent:
        raise NonUniqueStationaryError(
            "chain has multiple recurrent classes; stationary distribution is not unique "
            "(requires positive noise rate)"
        )
    P = chain.matrix
    n = P.shape[0]
    if method == "power":
        # Iterate the lazy chain (P + I)/2: same stationary vector, but
        # aperiodic, so iteration converges even for bipartite wallets
        # (all-singleton-toll policies jump by exactly one every ring).
        lazy = 0.5 * (P + np.eye(n))
        eta = np.full(n, 1.0 / n)
        for _ in range(2_000_000):
            nxt = eta @ lazy
            if np.max(np.abs(nxt - eta)) < 1e-16:
                eta = nxt
                break
            eta = nxt
        eta = np.maximum(eta, 0.0)
        eta /= eta.sum()
    elif method == "solve":
        A = P.T - np.eye(n)
        A[-1, :] = 1.0
        b = np.zeros(n)
        b[-1] = 1.0
        try:
            eta = scipy.linalg.solve(A, b)
        except scipy.linalg.LinAlgError as exc:
            raise NonUniqueStationaryError(f"stationary solve singular: {exc}") from None
        eta = np.where(np.abs(eta) < 1e-14, 0.0, eta)
        if eta.min() < -1e-9:
            raise NonUniqueStationaryError("stationary solve produced negative mass")
        eta = np.maximum(eta, 0.0)
        eta /= eta.sum()
    else:
        raise ValueError(f"unknown method {method!r}")
    residual = np.max(np.abs(eta @ P - eta))
    if residual > STATIONARY_TOL:
        raise NonUniqueStationaryError(f"stationary residual {residual:.3e} exceeds {STATIONARY_TOL}")
    return eta


def stationary_action_frequencies(
    eta: np.ndarray, policy: np.ndarray, n_actions: int
) -> np.ndarray:
    """Long-run fraction of action rings spent on each action under ``eta``."""
    freq = np.zeros(n_actions)
    np.add.at(freq, np.asarray(policy, dtype=np.int64), eta)
    return freq


def tail_mass_bound(tau_q: int, kbar: int, rno_over_rd: float) -> float:
    """Geometric upper bound on the stationary mass at the token cap.

    For the two-action threshold policy that spends ``tau_q`` above the
    threshold, the stationary mass at ``kbar`` satisfies
    ``eta(kbar) <= gamma ** (floor((kbar - tau_q + 1) / tau_q) - 1)`` with
    ``gamma = 1/2 - sqrt(1/4 - Rno/Rd)``, so it decays geometrically in the
    cap size.
    """
    if tau_q < 1:
        raise WalletChainError(f"tau_q must be >= 1, got {tau_q}")
    if not 0 <= rno_over_rd < 0.25:
        raise WalletChainError(f"Rno/Rd must lie in [0, 1/4), got {rno_over_rd}")
    gamma = 0.5 - math.sqrt(0.25 - rno_over_rd)
    exponent = (kbar - tau_q + 1) // tau_q - 1
    return float(gamma**exponent)
