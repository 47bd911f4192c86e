"""Monotone deterministic policies over token counts.

A policy maps every token count in ``{0, ..., kbar}`` to an affordable
action.  Agents never choose cheaper actions as their wallet grows, so the
chosen toll sequence must be non-decreasing; the enumerator additionally
restricts each action's usage to one contiguous token interval and caps the
number of distinct actions per policy.  With the default cap of two this
family is exactly the threshold policies (plus constants), which is the
support the toll design construction needs.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

__all__ = [
    "PolicyError",
    "Policy",
    "PolicyFamily",
    "affordable_actions",
    "is_monotone",
    "enumerate_policies",
    "threshold_policy",
]

ENUMERATION_HARD_LIMIT = 100_000


class PolicyError(ValueError):
    """Raised for invalid policies or infeasible enumeration requests."""


@dataclass(frozen=True)
class Policy:
    """Deterministic map from token count to an action index of the class."""

    class_id: int
    table: tuple[int, ...]

    @property
    def kbar(self) -> int:
        return len(self.table) - 1

    def as_array(self) -> np.ndarray:
        return np.asarray(self.table, dtype=np.int64)

    def action_at(self, k: int) -> int:
        return self.table[k]


@dataclass(frozen=True)
class PolicyFamily:
    """Deterministically ordered, duplicate-free family for one class."""

    class_id: int
    policies: tuple[Policy, ...]
    max_distinct_actions: int

    def __len__(self) -> int:
        return len(self.policies)

    def table_matrix(self) -> np.ndarray:
        return np.stack([p.as_array() for p in self.policies])

    def index_of(self, table) -> int:
        key = tuple(int(v) for v in table)
        for i, p in enumerate(self.policies):
            if p.table == key:
                return i
        raise PolicyError("policy not in enumerated family")


def affordable_actions(k: int, class_tolls: np.ndarray) -> list[int]:
    """Action indices payable with ``k`` tokens; empty means Assumption 1 fails."""
    tolls = np.asarray(class_tolls, dtype=np.int64)
    out = [int(a) for a in np.nonzero(tolls <= k)[0]]
    if not out:
        raise PolicyError(
            f"no affordable action at k={k}: every class needs an action with toll <= 0 (Assumption 1)"
        )
    return out


def is_monotone(policy, class_tolls) -> bool:
    """True iff the chosen toll sequence is non-decreasing in the token count."""
    table = policy.as_array() if isinstance(policy, Policy) else np.asarray(policy, dtype=np.int64)
    tolls = np.asarray(class_tolls, dtype=np.int64)[table]
    return bool(np.all(np.diff(tolls) >= 0))


def _validate(table: np.ndarray, class_tolls: np.ndarray) -> None:
    k = np.arange(len(table))
    if np.any(np.asarray(class_tolls)[table] > k):
        raise PolicyError("policy plays an unaffordable action")
    if not is_monotone(table, class_tolls):
        raise PolicyError("policy violates toll monotonicity")


def enumerate_policies(
    class_id: int,
    class_tolls: np.ndarray,
    kbar: int,
    max_distinct_actions: int = 2,
) -> PolicyFamily:
    """All monotone contiguous-interval policies with a distinct-action cap.

    A member is an ordered tuple of distinct actions with non-decreasing
    tolls (equal-toll actions may appear in either order) together with cut
    points splitting ``{0, ..., kbar}`` into one nonempty interval per
    action; interval ``i`` must start at or above its action's toll.
    Enumeration order is deterministic: actions are ranked by (toll, id)
    and cut tuples ascend lexicographically.
    """
    if max_distinct_actions < 1:
        raise PolicyError("max_distinct_actions must be >= 1")
    tolls = np.asarray(class_tolls, dtype=np.int64)
    q = len(tolls)
    order = sorted(range(q), key=lambda a: (tolls[a], a))
    tables: list[tuple[int, ...]] = []
    seen: set[tuple[int, ...]] = set()

    def emit(table: tuple[int, ...]) -> None:
        if table not in seen:
            seen.add(table)
            tables.append(table)
        if len(tables) > ENUMERATION_HARD_LIMIT:
            raise PolicyError(
                f"policy enumeration exceeded {ENUMERATION_HARD_LIMIT}; lower max_distinct_actions"
            )

    for j in range(1, max_distinct_actions + 1):
        for seq in itertools.permutations(order, j):
            if any(tolls[seq[i]] > tolls[seq[i + 1]] for i in range(j - 1)):
                continue
            if tolls[seq[0]] > 0:
                continue  # first interval starts at k = 0
            # Cut points t_1 < ... < t_{j-1}; interval i is [t_{i-1}, t_i).
            feasible_cuts = [range(max(int(tolls[seq[i]]), 1), kbar + 1) for i in range(1, j)]
            for cuts in itertools.product(*feasible_cuts):
                if any(cuts[i] >= cuts[i + 1] for i in range(len(cuts) - 1)):
                    continue
                bounds = (0, *cuts, kbar + 1)
                table = np.empty(kbar + 1, dtype=np.int64)
                for i, a in enumerate(seq):
                    table[bounds[i] : bounds[i + 1]] = a
                emit(tuple(int(v) for v in table))

    if not tables:
        raise PolicyError(f"class {class_id}: no admissible policy (Assumption 1 violated?)")
    policies = tuple(Policy(class_id, t) for t in tables)
    for p in policies:
        _validate(p.as_array(), tolls)
    return PolicyFamily(class_id, policies, max_distinct_actions)


def threshold_policy(p: int, q: int, class_tolls: np.ndarray, kbar: int, class_id: int = 0) -> Policy:
    """Two-action policy: play ``p`` below ``tau_q`` tokens, ``q`` at or above.

    Requires ``toll(p) <= 0 < toll(q)`` and ``kbar >= toll(q)``: the cheap
    action must be free-or-earning so the low interval is affordable, and
    the threshold sits exactly at the expensive action's toll.
    """
    tolls = np.asarray(class_tolls, dtype=np.int64)
    tau_p, tau_q = int(tolls[p]), int(tolls[q])
    if not (tau_p <= 0 < tau_q):
        raise PolicyError(f"threshold policy needs toll(p) <= 0 < toll(q), got ({tau_p}, {tau_q})")
    if kbar < tau_q:
        raise PolicyError(f"kbar = {kbar} below threshold toll {tau_q}")
    table = np.full(kbar + 1, q, dtype=np.int64)
    table[:tau_q] = p
    pol = Policy(class_id, tuple(int(v) for v in table))
    _validate(pol.as_array(), tolls)
    return pol
