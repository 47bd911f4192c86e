"""Domain model for token-tolled congestion games.

A scenario couples a set of congestible resources (each with a decreasing
reward function of its utilization rate) with agent classes, their action
menus (subsets of resources), Poisson clock rates, a token cap, and integer
tolls.  Network games are the special case where resources are the edges of
a directed graph and actions are simple origin-destination paths.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import networkx as nx
import numpy as np

__all__ = [
    "RewardFn",
    "Resource",
    "ClassSpec",
    "Scenario",
    "NetworkParseError",
    "ScenarioError",
    "load_network",
    "load_od_pairs",
    "enumerate_actions",
    "single_stage_reward",
    "sigma_from_distribution",
    "validate_scenario",
]

# Reward-function kind codes shared with the numba kernels.
KIND_AFFINE = 0
KIND_BPR = 1


class NetworkParseError(ValueError):
    """Raised for malformed network or OD-pair files."""


class ScenarioError(ValueError):
    """Raised when a scenario violates a structural precondition."""


@dataclass(frozen=True)
class RewardFn:
    """Reward of using one resource as a function of its normalized flow rate.

    Two kinds are supported:

    * ``affine``: ``w(x) = intercept - slope * x`` with ``slope > 0``.
    * ``bpr``: negated BPR travel time with a uniform-decrease correction,
      ``w(x) = -fft * (1 + b * (x / capacity) ** power) - eps * x``.
      The plain negated BPR curve has zero slope at ``x = 0``; the ``eps``
      term (default ``1e-3 * fft``) restores a uniform decrease.

    Both kinds are Lipschitz and uniformly decreasing on any bounded flow
    range, with closed-form derivatives and antiderivatives (the latter are
    needed by the potential function).
    """

    kind: int
    params: tuple[float, ...]

    @staticmethod
    def affine(intercept: float, slope: float) -> "RewardFn":
        if slope <= 0:
            raise ScenarioError(f"affine reward needs slope > 0, got {slope}")
        return RewardFn(KIND_AFFINE, (float(intercept), float(slope)))

    @staticmethod
    def bpr(
        fft: float,
        capacity: float,
        b: float = 0.15,
        power: float = 4.0,
        eps: float | None = None,
    ) -> "RewardFn":
        if fft < 0 or capacity <= 0 or b < 0 or power < 1:
            raise ScenarioError("bpr reward needs fft >= 0, capacity > 0, b >= 0, power >= 1")
        if eps is None:
            eps = 1e-3 * fft
        if eps <= 0 and (b == 0 or fft == 0):
            raise ScenarioError("bpr reward is not uniformly decreasing without eps > 0")
        return RewardFn(KIND_BPR, (float(fft), float(capacity), float(b), float(power), float(eps)))

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == KIND_AFFINE:
            a, s = self.params
            return a - s * x
        fft, cap, b, power, eps = self.params
        return -fft * (1.0 + b * (x / cap) ** power) - eps * x

    def derivative(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == KIND_AFFINE:
            return np.full_like(x, -self.params[1])
        fft, cap, b, power, eps = self.params
        return -fft * b * power * x ** (power - 1.0) / cap**power - eps

    def antiderivative(self, x):
        """Integral of the reward from 0 to ``x`` (used by the potential)."""
        x = np.asarray(x, dtype=float)
        if self.kind == KIND_AFFINE:
            a, s = self.params
            return a * x - 0.5 * s * x * x
        fft, cap, b, power, eps = self.params
        return -fft * (x + b * x ** (power + 1.0) / ((power + 1.0) * cap**power)) - 0.5 * eps * x * x

    def packed(self) -> np.ndarray:
        """Five-slot parameter row consumed by the numba reward evaluator."""
        row = np.zeros(5)
        row[: len(self.params)] = self.params
        return row


@dataclass(frozen=True)
class Resource:
    """A congestible resource: integer id plus its reward function."""

    id: int
    reward: RewardFn


@dataclass(frozen=True)
class ClassSpec:
    """One agent class: population mass and the menu of actions.

    Each action is a nonempty sorted tuple of resource ids.  For network
    games the actions are simple OD paths and ``origin``/``dest`` record the
    node ids; for abstract games they are ``None``.
    """

    id: int
    mass: float
    actions: tuple[tuple[int, ...], ...]
    origin: int | None = None
    dest: int | None = None

    def __post_init__(self):
        if self.mass <= 0:
            raise ScenarioError(f"class {self.id}: mass must be positive, got {self.mass}")
        if not self.actions:
            raise ScenarioError(f"class {self.id}: empty action set")
        for a in self.actions:
            if len(a) == 0:
                raise ScenarioError(f"class {self.id}: actions must be nonempty resource sets")


@dataclass(frozen=True)
class Scenario:
    """Full game instance.

    ``tolls`` holds one integer array per class (aligned with the class's
    action list) and may be ``None`` before design.  Rates are events per
    unit time; ``kbar`` is the token cap.
    """

    resources: tuple[Resource, ...]
    classes: tuple[ClassSpec, ...]
    rate_action: float
    rate_noise: float
    rate_revision: float
    kbar: int
    tolls: tuple[np.ndarray, ...] | None = None
    seed: int = 0
    population: int = 1000
    protocol: str = "imitative"
    name: str = "scenario"
    graph: nx.MultiDiGraph | None = field(default=None, compare=False, repr=False)

    @property
    def n_resources(self) -> int:
        return len(self.resources)

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    @property
    def total_mass(self) -> float:
        return sum(c.mass for c in self.classes)

    @property
    def sigma_cap(self) -> float:
        """Upper bound on any resource flow: every agent using it at every ring."""
        return self.rate_action * self.total_mass

    def with_tolls(self, tolls: Sequence[np.ndarray], kbar: int | None = None) -> "Scenario":
        tolls = tuple(np.asarray(t, dtype=np.int64) for t in tolls)
        if len(tolls) != self.n_classes:
            raise ScenarioError("one toll array per class required")
        for c, t in zip(self.classes, tolls):
            if len(t) != len(c.actions):
                raise ScenarioError(f"class {c.id}: toll array length mismatch")
        return replace(self, tolls=tolls, kbar=self.kbar if kbar is None else int(kbar))

    def zero_tolls(self) -> "Scenario":
        return self.with_tolls(tuple(np.zeros(len(c.actions), dtype=np.int64) for c in self.classes))

    def reward_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """(kind codes, packed params) for the numba evaluators."""
        kinds = np.array([r.reward.kind for r in self.resources], dtype=np.int64)
        params = np.stack([r.reward.packed() for r in self.resources])
        return kinds, params

    def resource_rewards(self, sigma: np.ndarray) -> np.ndarray:
        sigma = np.asarray(sigma, dtype=float)
        return np.array([r.reward(sigma[r.id]) for r in self.resources])

    def action_rewards(self, sigma: np.ndarray) -> list[np.ndarray]:
        """Per class, the reward of each action at flows ``sigma``."""
        w = self.resource_rewards(sigma)
        return [np.array([w[list(a)].sum() for a in c.actions]) for c in self.classes]


def load_network(path) -> nx.MultiDiGraph:
    """Parse a text edge list into a directed multigraph of resources.

    Each non-comment line is ``tail head free_flow_time capacity b power``
    with an optional trailing integer edge id (defaults to the running
    index).  Edges become resources with negated-BPR rewards; parallel
    edges are allowed, duplicate explicit ids are not.
    """
    g = nx.MultiDiGraph()
    seen_ids: set[int] = set()
    n_edges = 0
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) not in (6, 7):
                raise NetworkParseError(
                    f"{path}:{lineno}: expected 'tail head fft cap b power [id]', got {len(parts)} fields"
                )
            try:
                tail, head = int(parts[0]), int(parts[1])
                fft, cap, b, power = (float(v) for v in parts[2:6])
                edge_id = int(parts[6]) if len(parts) == 7 else n_edges
            except ValueError as exc:
                raise NetworkParseError(f"{path}:{lineno}: {exc}") from None
            if edge_id in seen_ids:
                raise NetworkParseError(f"{path}:{lineno}: duplicate edge id {edge_id}")
            seen_ids.add(edge_id)
            try:
                reward = RewardFn.bpr(fft, cap, b, power)
            except ScenarioError as exc:
                raise NetworkParseError(f"{path}:{lineno}: {exc}") from None
            g.add_edge(tail, head, key=edge_id, id=edge_id, reward=reward, fft=fft)
            n_edges += 1
    if n_edges == 0:
        raise NetworkParseError(f"{path}: no edges found")
    return g


def load_od_pairs(path) -> list[tuple[int, int, int, float]]:
    """Parse ``class_id origin dest mass`` lines; node existence is checked later."""
    rows = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 4:
                raise NetworkParseError(f"{path}:{lineno}: expected 'class_id origin dest mass'")
            try:
                rows.append((int(parts[0]), int(parts[1]), int(parts[2]), float(parts[3])))
            except ValueError as exc:
                raise NetworkParseError(f"{path}:{lineno}: {exc}") from None
    if not rows:
        raise NetworkParseError(f"{path}: no OD pairs found")
    return rows


def graph_resources(g: nx.MultiDiGraph) -> tuple[Resource, ...]:
    """Edges of a loaded network as a resource tuple ordered by edge id."""
    edges = sorted(g.edges(keys=True, data=True), key=lambda e: e[3]["id"])
    res = []
    for idx, (_, _, _, data) in enumerate(edges):
        if data["id"] != idx:
            raise NetworkParseError("edge ids must be consecutive from 0")
        res.append(Resource(idx, data["reward"]))
    return tuple(res)


def _path_search_graph(g: nx.MultiDiGraph) -> nx.DiGraph:
    # Split every edge through a marker node so parallel edges survive the
    # simple-path search (networkx path generators reject multigraphs).
    h = nx.DiGraph()
    for u, v, key, data in g.edges(keys=True, data=True):
        mid = ("edge", data["id"])
        h.add_edge(u, mid, weight=data["fft"])
        h.add_edge(mid, v, weight=0.0)
    return h


def enumerate_actions(
    g: nx.MultiDiGraph,
    od_pairs: Iterable[tuple[int, int, int, float]],
    max_paths_per_class: int,
) -> tuple[ClassSpec, ...]:
    """Build class action menus as the K shortest simple paths per OD pair.

    Paths are ranked by free-flow cost; ties break lexicographically on
    the sorted edge-id tuple so enumeration is deterministic.  Paths whose
    edge sets coincide are deduplicated.
    """
    if max_paths_per_class < 1:
        raise ScenarioError("max_paths_per_class must be >= 1")
    search = _path_search_graph(g)
    fft = {data["id"]: data["fft"] for _, _, data in g.edges(data=True)}
    classes = []
    for class_id, origin, dest, mass in od_pairs:
        if origin not in g.nodes or dest not in g.nodes:
            raise NetworkParseError(f"class {class_id}: unknown node in OD pair ({origin}, {dest})")
        if not nx.has_path(search, origin, dest):
            raise ScenarioError(f"class {class_id}: no path connects {origin} -> {dest}")
        found: list[tuple[float, tuple[int, ...]]] = []
        seen: set[tuple[int, ...]] = set()
        kth_cost = math.inf
        for node_path in nx.shortest_simple_paths(search, origin, dest, weight="weight"):
            edge_ids = tuple(sorted(n[1] for n in node_path if isinstance(n, tuple) and n[0] == "edge"))
            cost = sum(fft[e] for e in edge_ids)
            if edge_ids not in seen:
                seen.add(edge_ids)
                found.append((cost, edge_ids))
            if len(found) >= max_paths_per_class:
                kth_cost = min(kth_cost, sorted(c for c, _ in found)[max_paths_per_class - 1])
                # Drain cost ties of the K-th path so the id tie-break is stable.
                if cost > kth_cost + 1e-12 or len(found) >= 4 * max_paths_per_class + 16:
                    break
        found.sort(key=lambda t: (round(t[0], 12), t[1]))
        actions = tuple(edge_ids for _, edge_ids in found[:max_paths_per_class])
        classes.append(ClassSpec(class_id, mass, actions, origin=origin, dest=dest))
    return tuple(classes)


def single_stage_reward(action: Sequence[int], sigma: np.ndarray, scenario: Scenario) -> float:
    """Reward of one action at flows ``sigma``: the sum over its resources."""
    w = scenario.resource_rewards(np.asarray(sigma, dtype=float))
    return float(sum(w[r] for r in action))


def sigma_from_distribution(mu: Sequence[np.ndarray], game) -> np.ndarray:
    """Resource utilization rates induced by a state-policy distribution.

    ``mu`` holds one ``(n_policies, kbar + 1)`` array per class and ``game``
    is the compiled :class:`tokentolls.meanfield.MeanFieldGame` carrying the
    policy families.  The map is linear in ``mu``:
    ``sigma_r = Rd * sum_c sum_u sum_k mu[c][u, k] * [r in action chosen by u at k]``.
    """
    scn = game.scenario
    sigma = np.zeros(scn.n_resources)
    for c in range(scn.n_classes):
        arr = np.asarray(mu[c], dtype=float)
        total = arr.sum()
        if abs(total - scn.classes[c].mass) > 1e-6 * max(1.0, scn.classes[c].mass):
            raise ScenarioError(
                f"class {c}: distribution mass {total} does not match class mass {scn.classes[c].mass}"
            )
        rate = np.zeros(len(scn.classes[c].actions))
        local_ids = game.act_id[game.u_off[c] : game.u_off[c + 1]] - game.q_off[c]
        np.add.at(rate, local_ids.ravel(), arr.ravel())
        for a, resources in enumerate(scn.classes[c].actions):
            for r in resources:
                sigma[r] += scn.rate_action * rate[a]
    return sigma


def validate_scenario(scenario: Scenario) -> list[str]:
    """Check the standing assumptions; returns one diagnostic per violation.

    An empty list means the scenario is admissible.  Covered checks:
    affordability of tolls (Assumption 1), uniform decrease of rewards
    (Assumption 2), noise-rate bound (Assumption 4), the revision/action
    time-scale ratio, and the token cap against the largest toll.
    """
    diags = []
    scn = scenario
    if scn.rate_action <= 0:
        diags.append("action rate must be positive")
    if scn.rate_noise <= 0:
        diags.append("Assumption 4 violated: noise rate must be positive (Rno = 0 breaks unique stationarity)")
    elif scn.rate_noise >= scn.rate_action / 4.0:
        diags.append(
            f"Assumption 4 violated: Rno = {scn.rate_noise} must be < Rd/4 = {scn.rate_action / 4.0}"
        )
    ratio = scn.rate_revision / max(scn.rate_action + scn.rate_noise, 1e-300)
    if ratio > 0.1:
        diags.append(
            f"time-scale separation weak: Rr/(Rd+Rno) = {ratio:.3g} exceeds 0.1 (revisions should be rare)"
        )
    grid = np.linspace(0.0, max(scn.sigma_cap, 1.0), 33)
    for res in scn.resources:
        dw = res.reward.derivative(grid)
        if np.any(dw >= 0):
            diags.append(f"Assumption 2 violated: resource {res.id} reward is not uniformly decreasing")
    if scn.tolls is not None:
        for c, t in zip(scn.classes, scn.tolls):
            if t.min() > 0:
                diags.append(f"Assumption 1 violated: class {c.id} has no action with toll <= 0")
            if scn.kbar < int(np.abs(t).max()):
                diags.append(
                    f"token cap too small: class {c.id} max |toll| = {int(np.abs(t).max())} exceeds kbar = {scn.kbar}"
                )
    total = scn.total_mass
    if abs(total - 1.0) > 1e-9:
        diags.append(f"class masses sum to {total}, expected 1 (normalized population)")
    return diags
