"""Network, traffic, rate-power and randomness models.

A configuration is a TOML document with the sections ``[graph]``,
``[[commodities]]``, ``[rate_power]``, ``[channel_process]``,
``[energy_process]`` and ``[params]``.  :func:`load_config` parses it and
:func:`validate_and_derive` turns the raw mapping into an immutable
:class:`NetworkConfig` from which per-``V`` :class:`SystemParams` are derived.

Node ids are 1-based in configuration files and 0-based everywhere else.
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field
from functools import cached_property, reduce
from pathlib import Path
from typing import Any

import numpy as np
import tomli_w

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

UTILITY_FORMS = ("log", "zero")
SCENARIO_DIR = Path(__file__).parent / "scenarios"


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""

    def __init__(self, field_name: str, message: str):
        self.field = field_name
        super().__init__(f"{field_name}: {message}")


# ---------------------------------------------------------------------------
# graph and commodities


@dataclass(frozen=True)
class NetworkGraph:
    n_nodes: int
    links: tuple[tuple[int, int], ...]
    out_links: tuple[tuple[int, ...], ...] = field(init=False)
    in_links: tuple[tuple[int, ...], ...] = field(init=False)

    def __post_init__(self):
        out = [[] for _ in range(self.n_nodes)]
        inn = [[] for _ in range(self.n_nodes)]
        for i, (a, b) in enumerate(self.links):
            out[a].append(i)
            inn[b].append(i)
        object.__setattr__(self, "out_links", tuple(map(tuple, out)))
        object.__setattr__(self, "in_links", tuple(map(tuple, inn)))

    @property
    def n_links(self) -> int:
        return len(self.links)

    @cached_property
    def src(self) -> np.ndarray:
        return np.array([a for a, _ in self.links], dtype=np.intp)

    @cached_property
    def dst(self) -> np.ndarray:
        return np.array([b for _, b in self.links], dtype=np.intp)

    @property
    def d_max(self) -> int:
        """Maximum in-degree over all nodes."""
        return max((len(x) for x in self.in_links), default=0)

    def out_neighbors(self, n: int) -> list[int]:
        return [self.links[i][1] for i in self.out_links[n]]

    def in_neighbors(self, n: int) -> list[int]:
        return [self.links[i][0] for i in self.in_links[n]]

    @cached_property
    def out_incidence(self) -> np.ndarray:
        """(N, L) matrix with a 1 where the node is the link's sender."""
        m = np.zeros((self.n_nodes, self.n_links))
        m[self.src, np.arange(self.n_links)] = 1.0
        return m

    @cached_property
    def in_incidence(self) -> np.ndarray:
        m = np.zeros((self.n_nodes, self.n_links))
        m[self.dst, np.arange(self.n_links)] = 1.0
        return m


@dataclass(frozen=True)
class CommoditySpec:
    """Traffic admitted at ``source`` and destined for ``dest``.

    ``utility`` is ``"log"`` for ``scale * ln(1 + r)`` or ``"zero"``.
    """

    source: int
    dest: int
    utility: str = "log"
    scale: float = 1.0
    r_max: float = 1.0

    @property
    def beta(self) -> float:
        """Derivative of the utility at zero."""
        return self.scale if self.utility == "log" else 0.0


def _check_rate(commodity: CommoditySpec, r):
    r_arr = np.asarray(r, dtype=float)
    if np.any(r_arr < 0) or np.any(r_arr > commodity.r_max * (1 + 1e-12)):
        raise ValueError(f"rate {r} outside [0, {commodity.r_max}]")


def utility_value(commodity: CommoditySpec, r):
    _check_rate(commodity, r)
    if commodity.utility == "zero":
        return np.zeros_like(np.asarray(r, dtype=float)) if np.ndim(r) else 0.0
    return commodity.scale * np.log1p(r)


def utility_deriv(commodity: CommoditySpec, r):
    _check_rate(commodity, r)
    if commodity.utility == "zero":
        return np.zeros_like(np.asarray(r, dtype=float)) if np.ndim(r) else 0.0
    return commodity.scale / (1.0 + np.asarray(r, dtype=float)) if np.ndim(r) \
        else commodity.scale / (1.0 + r)


def total_utility(commodities, rates) -> float:
    """Sum of commodity utilities evaluated at the given average rates."""
    return float(sum(utility_value(k, min(max(r, 0.0), k.r_max))
                     for k, r in zip(commodities, rates)))


def _validate_utility(k: CommoditySpec, field_name: str):
    if k.utility not in UTILITY_FORMS:
        raise ConfigError(field_name, f"unknown utility form {k.utility!r}")
    if k.utility == "zero":
        return
    grid = np.linspace(0.0, k.r_max, 257)
    u = utility_value(k, grid)
    du = np.diff(u)
    if abs(u[0]) > 0 or not np.all(du > 0):
        raise ConfigError(field_name, "utility must be increasing with U(0)=0")
    if not np.all(np.diff(du) < 0):
        raise ConfigError(field_name, "utility must be strictly concave")
    if not math.isfinite(k.beta):
        raise ConfigError(field_name, "utility derivative at 0 must be finite")


# ---------------------------------------------------------------------------
# rate-power model


@dataclass(frozen=True, eq=False)
class RatePowerModel:
    """Finite set of joint power actions and their link rates.

    ``kind == "linear"``: links do not interfere and the rate of link ``l``
    is ``channel[l] * P[l]``, where ``channel`` is the per-link multiplier
    emitted by the channel process.

    ``kind == "table"``: the channel process emits a state index ``s`` and
    ``rate_table[s]`` holds the (A, L) rate matrix for the action list.

    ``actions`` is sorted by total power, then lexicographically, so the
    first maximizer in this order implements the tie-breaking rule.
    """

    kind: str
    actions: np.ndarray
    node_of_link: np.ndarray
    n_nodes: int
    p_max: float
    mu_max: float
    delta: float
    levels: tuple[float, ...] = ()
    channel_levels: tuple[float, ...] = ()
    rate_table: np.ndarray | None = None

    @property
    def n_actions(self) -> int:
        return self.actions.shape[0]

    @property
    def n_states(self) -> int:
        return 0 if self.rate_table is None else self.rate_table.shape[0]

    @property
    def separable(self) -> bool:
        return self.kind == "linear"

    @cached_property
    def spend(self) -> np.ndarray:
        """(A, N) per-node power sums of every action."""
        m = np.zeros((self.actions.shape[1], self.n_nodes))
        m[np.arange(self.actions.shape[1]), self.node_of_link] = 1.0
        return self.actions @ m

    @cached_property
    def local_actions(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Per-node action lists for separable models, stacked.

        Returns ``(actions, node, start)``: each row of ``actions`` is one
        node's local choice embedded in link space, ``node`` names its owner
        and ``start[n]`` is the first row of node ``n``.  Rows of one node are
        ordered by total power, then lexicographically.
        """
        rows, owner, start = [], [], []
        n_links = self.actions.shape[1]
        for n in range(self.n_nodes):
            mask = self.node_of_link == n
            if mask.any():
                local = np.unique(self.actions[:, mask], axis=0)
            else:
                local = np.zeros((1, 0))
            emb = np.zeros((local.shape[0], n_links))
            emb[:, mask] = local
            emb = emb[_sort_actions(emb)]
            start.append(len(rows))
            rows.extend(emb)
            owner.extend([n] * emb.shape[0])
        return np.array(rows), np.array(owner, dtype=np.intp), np.array(start, dtype=np.intp)

    def rate_matrix(self, channel) -> np.ndarray:
        """(A, L) rates of every action under one channel state."""
        if self.kind == "linear":
            return self.actions * np.asarray(channel, dtype=float)
        return self.rate_table[int(channel)]

    def action_index(self, power) -> int:
        hits = np.flatnonzero(np.all(self.actions == np.asarray(power, dtype=float), axis=1))
        if hits.size == 0:
            raise ValueError(f"power vector {list(power)} is not a feasible action")
        return int(hits[0])

    def sample_channels(self, rng, count: int):
        if self.kind == "linear":
            lv = np.asarray(self.channel_levels)
            return [lv[rng.integers(0, lv.size, self.actions.shape[1])] for _ in range(count)]
        return list(rng.integers(0, self.n_states, count))

    def all_channels(self, limit: int = 4096):
        """Every channel state, or None when there are more than ``limit``."""
        if self.kind == "table":
            return list(range(self.n_states))
        n = len(self.channel_levels) ** self.actions.shape[1]
        if n > limit:
            return None
        return [np.array(c) for c in itertools.product(self.channel_levels,
                                                       repeat=self.actions.shape[1])]


def link_rates(model: RatePowerModel, channel, power) -> np.ndarray:
    """Per-link rates of a feasible power vector under a channel state."""
    idx = model.action_index(power)
    return model.rate_matrix(channel)[idx].copy()


def _sort_actions(actions: np.ndarray) -> np.ndarray:
    keys = [actions[:, j] for j in reversed(range(actions.shape[1]))]
    keys.append(actions.sum(axis=1))
    return np.lexsort(keys)


def enumerate_linear_actions(graph: NetworkGraph, levels, p_max: float) -> np.ndarray:
    """All per-link power combinations whose per-node sums stay within p_max."""
    local = []
    for n in range(graph.n_nodes):
        k = len(graph.out_links[n])
        combos = [c for c in itertools.product(levels, repeat=k) if sum(c) <= p_max + 1e-12]
        local.append(combos)
    rows = []
    for choice in itertools.product(*local):
        p = np.zeros(graph.n_links)
        for n, c in enumerate(choice):
            p[list(graph.out_links[n])] = c
        rows.append(p)
    a = np.array(rows, dtype=float).reshape(-1, graph.n_links)
    return a[_sort_actions(a)]


@dataclass
class PropertyReport:
    checked: int = 0
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def check_rate_properties(model: RatePowerModel, sample_count: int = 2000,
                          rng_seed: int = 0, exhaustive_limit: int = 200_000) -> PropertyReport:
    """Check the linear-bound and monotonicity properties of a rate model.

    For each (channel, action) pair and each link with positive power, the
    action with that link zeroed must be feasible, the zeroed link's rate
    may drop by at most ``delta * P``, and no other link's rate may drop.
    All pairs are checked when there are at most ``exhaustive_limit`` of
    them; otherwise ``sample_count`` random pairs are drawn.
    """
    rng = np.random.default_rng(rng_seed)
    report = PropertyReport()
    spend = model.spend
    if np.any(spend > model.p_max + 1e-12):
        report.violations.append("an action exceeds the per-node power cap p_max")
    index = {a.tobytes(): i for i, a in enumerate(model.actions)}

    channels = model.all_channels()
    if channels is not None and len(channels) * model.n_actions <= exhaustive_limit:
        pairs = [(c, a) for c in channels for a in range(model.n_actions)]
    else:
        chans = model.sample_channels(rng, sample_count)
        pairs = [(c, int(rng.integers(0, model.n_actions))) for c in chans]

    for chan, a in pairs:
        rates = model.rate_matrix(chan)
        mu = rates[a]
        report.checked += 1
        if np.any(mu > model.mu_max + 1e-12):
            report.violations.append(f"action {a}: rate exceeds mu_max={model.mu_max}")
        p = model.actions[a]
        for link in np.flatnonzero(p > 0):
            q = p.copy()
            q[link] = 0.0
            b = index.get(q.tobytes())
            if b is None:
                report.violations.append(f"action {a}: zeroing link {link} leaves the action set")
                continue
            mu_zeroed = rates[b]
            if mu[link] > mu_zeroed[link] + model.delta * p[link] + 1e-12:
                report.violations.append(
                    f"property 1 fails on action {a}, link {link}: "
                    f"{mu[link]} > {mu_zeroed[link]} + {model.delta}*{p[link]}")
            others = np.arange(mu.size) != link
            if np.any(mu[others] > mu_zeroed[others] + 1e-12):
                bad = int(np.flatnonzero(others & (mu > mu_zeroed + 1e-12))[0])
                report.violations.append(
                    f"property 2 fails on action {a}: zeroing link {link} lowers link {bad}")
    return report


# ---------------------------------------------------------------------------
# random state processes


def _period(adj: np.ndarray) -> int:
    n = adj.shape[0]
    level = [-1] * n
    level[0] = 0
    frontier = [0]
    while frontier:
        nxt = []
        for u in frontier:
            for v in np.flatnonzero(adj[u]):
                if level[v] < 0:
                    level[v] = level[u] + 1
                    nxt.append(v)
        frontier = nxt
    diffs = [level[u] + 1 - level[v] for u in range(n) for v in np.flatnonzero(adj[u])]
    return reduce(math.gcd, diffs, 0)


def _irreducible(adj: np.ndarray) -> bool:
    n = adj.shape[0]
    reach = (adj | np.eye(n, dtype=bool)).astype(int)
    for _ in range(max(1, math.ceil(math.log2(max(n, 2))))):
        reach = ((reach @ reach) > 0).astype(int)
    return bool(reach.all())


@dataclass(eq=False)
class StateProcess:
    """Finite-state i.i.d. or Markov process, possibly replicated.

    ``copies`` independent replicas run side by side (one per link or per
    node); each emits ``values[state]``.  With a single copy ``values`` may
    hold vectors (a joint channel or harvest state).
    """

    kind: str
    states: tuple[str, ...]
    values: np.ndarray
    probs: np.ndarray | None = None
    transition: np.ndarray | None = None
    copies: int = 1
    joint: bool = False
    current: np.ndarray | None = None

    def __post_init__(self):
        self._cum = None

    @property
    def n_states(self) -> int:
        return len(self.states)

    def stationary(self) -> np.ndarray:
        if self.kind == "iid":
            return np.asarray(self.probs, dtype=float)
        p = np.asarray(self.transition, dtype=float)
        n = p.shape[0]
        a = np.vstack([p.T - np.eye(n), np.ones(n)])
        b = np.zeros(n + 1)
        b[-1] = 1.0
        return np.linalg.lstsq(a, b, rcond=None)[0]

    def reset(self, rng) -> None:
        """Draw each replica's initial state from the stationary law."""
        cum = np.cumsum(self.stationary())
        u = rng.random(self.copies)
        self.current = np.minimum(np.searchsorted(cum, u, side="right"), self.n_states - 1)

    def _cumulative(self):
        if self._cum is None:
            m = self.probs[None, :] if self.kind == "iid" else self.transition
            c = np.cumsum(np.asarray(m, dtype=float), axis=1)
            c[:, -1] = 1.0
            self._cum = c
        return self._cum

    def step(self, rng) -> np.ndarray:
        """Advance one slot and return the emitted value(s)."""
        if self.current is None:
            self.reset(rng)
        cum = self._cumulative()
        u = rng.random(self.copies)
        rows = cum[0 if self.kind == "iid" else self.current]
        if rows.ndim == 1:
            rows = np.broadcast_to(rows, (self.copies, rows.size))
        self.current = (u[:, None] >= rows).sum(axis=1)
        return self.emit()

    def emit(self):
        if self.joint:
            return self.values[self.current[0]]
        return self.values[self.current]

    def block(self, rng, length: int) -> np.ndarray:
        """Emissions for the next ``length`` slots, shape (length, ...)."""
        return np.array([self.step(rng) for _ in range(length)])


def step_process(p: StateProcess, rng):
    return p.step(rng)


def _validate_process(raw: dict, name: str, width: int, per: str) -> StateProcess:
    kind = raw.get("kind", "markov")
    if kind not in ("iid", "markov"):
        raise ConfigError(f"{name}.kind", f"expected 'iid' or 'markov', got {kind!r}")
    states = tuple(str(s) for s in raw.get("states", []))
    if not states:
        raise ConfigError(f"{name}.states", "at least one state required")
    scope = raw.get("scope", per)
    values = np.asarray(raw.get("values"), dtype=float)
    if values.shape[:1] != (len(states),):
        raise ConfigError(f"{name}.values", "one value entry per state required")
    if scope == per:
        if values.ndim != 1:
            raise ConfigError(f"{name}.values", f"scope {per!r} needs one scalar per state")
        copies = width
    elif scope == "joint":
        if values.ndim == 2 and values.shape[1] != width:
            raise ConfigError(f"{name}.values", f"joint scope needs a length-{width} vector per state")
        if values.ndim > 2:
            raise ConfigError(f"{name}.values", "one scalar or vector per state")
        copies = 1
    else:
        raise ConfigError(f"{name}.scope", f"expected {per!r} or 'joint'")
    if np.any(values < 0):
        raise ConfigError(f"{name}.values", "values must be nonnegative")

    probs = trans = None
    if kind == "iid":
        probs = np.asarray(raw.get("probs", []), dtype=float)
        if probs.shape != (len(states),):
            raise ConfigError(f"{name}.probs", "one probability per state required")
        if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-12:
            raise ConfigError(f"{name}.probs", "probabilities must be nonnegative and sum to 1")
    else:
        if "transition" in raw:
            trans = np.asarray(raw["transition"], dtype=float)
        elif "switch_prob" in raw and len(states) == 2:
            q = float(raw["switch_prob"])
            trans = np.array([[1 - q, q], [q, 1 - q]])
        else:
            raise ConfigError(f"{name}.transition", "transition matrix required")
        if trans.shape != (len(states), len(states)):
            raise ConfigError(f"{name}.transition", "matrix must be square over the states")
        if np.any(trans < 0):
            raise ConfigError(f"{name}.transition", "entries must be nonnegative")
        rows = trans.sum(axis=1)
        bad = np.flatnonzero(np.abs(rows - 1.0) > 1e-12)
        if bad.size:
            raise ConfigError(f"{name}.transition",
                              f"row {int(bad[0])} sums to {rows[bad[0]]:g}, not 1")
        adj = trans > 0
        if not _irreducible(adj):
            raise ConfigError(f"{name}.transition", "chain is not irreducible")
        if _period(adj) != 1:
            raise ConfigError(f"{name}.transition", "chain is periodic")
    return StateProcess(kind=kind, states=states, values=values, probs=probs,
                        transition=trans, copies=copies, joint=scope == "joint")


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class SystemParams:
    V: float
    beta: float
    delta: float
    p_max: float
    mu_max: float
    r_max: float
    h_max: float
    d_max: int
    gamma: float
    theta: np.ndarray
    q_bound: float
    e_bound: np.ndarray


@dataclass(frozen=True, eq=False)
class NetworkConfig:
    graph: NetworkGraph
    commodities: tuple[CommoditySpec, ...]
    rate_power: RatePowerModel
    channel: dict
    energy: dict
    r_max: float
    V: float
    phase1_t: int | None
    theta_override: tuple[float, ...] | None
    raw: dict

    @property
    def dests(self) -> tuple[int, ...]:
        """Distinct destination nodes; column ``c`` of Q belongs to ``dests[c]``."""
        return tuple(sorted({k.dest for k in self.commodities}))

    @property
    def beta(self) -> float:
        return max((k.beta for k in self.commodities), default=0.0)

    def channel_process(self) -> StateProcess:
        return _validate_process(self.channel, "channel_process", self.graph.n_links, "per_link")

    def energy_process(self) -> StateProcess:
        return _validate_process(self.energy, "energy_process", self.graph.n_nodes, "per_node")

    def mean_harvest(self) -> np.ndarray:
        p = self.energy_process()
        pi = p.stationary()
        if p.values.ndim == 1:
            return np.full(self.graph.n_nodes, float(pi @ p.values))
        return pi @ p.values

    def h_max(self) -> float:
        return float(np.max(self.energy_process().values))

    def params(self, V: float | None = None) -> SystemParams:
        V = self.V if V is None else float(V)
        if not V >= 1:
            raise ConfigError("params.V", f"V must be >= 1, got {V}")
        rp = self.rate_power
        beta = self.beta
        gamma = self.r_max + self.graph.d_max * rp.mu_max
        if self.theta_override is not None:
            theta = np.asarray(self.theta_override, dtype=float)
        else:
            theta = np.full(self.graph.n_nodes, rp.delta * beta * V + rp.p_max)
        h_max = self.h_max()
        if gamma <= 0 or np.any(theta <= 0):
            raise ConfigError("params", "gamma and theta must be strictly positive")
        return SystemParams(V=V, beta=beta, delta=rp.delta, p_max=rp.p_max, mu_max=rp.mu_max,
                            r_max=self.r_max, h_max=h_max, d_max=self.graph.d_max, gamma=gamma,
                            theta=theta, q_bound=beta * V + self.r_max, e_bound=theta + h_max)


def _node(x, n_nodes: int, field_name: str) -> int:
    if not isinstance(x, int) or not 1 <= x <= n_nodes:
        raise ConfigError(field_name, f"node id {x!r} not in 1..{n_nodes}")
    return x - 1


def _build_rate_model(raw: dict, graph: NetworkGraph, channel_raw: dict) -> RatePowerModel:
    kind = raw.get("kind", "linear")
    if "p_max" not in raw:
        raise ConfigError("rate_power.p_max", "required")
    if "delta" not in raw:
        raise ConfigError("rate_power.delta", "required")
    p_max = float(raw["p_max"])
    delta = float(raw["delta"])
    if p_max <= 0 or delta <= 0:
        raise ConfigError("rate_power", "p_max and delta must be positive")
    node_of_link = graph.src
    if kind == "linear":
        levels = tuple(float(x) for x in raw.get("power_levels", [0.0, 1.0]))
        if 0.0 not in levels or any(x < 0 for x in levels):
            raise ConfigError("rate_power.power_levels", "levels must be nonnegative and include 0")
        actions = enumerate_linear_actions(graph, sorted(set(levels)), p_max)
        chan_vals = np.asarray(channel_raw.get("values", []), dtype=float)
        chan_levels = tuple(sorted(set(chan_vals.ravel().tolist())))
        mu_max = float(raw.get("mu_max", max(chan_levels, default=0.0) * max(levels)))
        model = RatePowerModel(kind=kind, actions=actions, node_of_link=node_of_link,
                               n_nodes=graph.n_nodes, p_max=p_max, mu_max=mu_max, delta=delta,
                               levels=levels, channel_levels=chan_levels)
    elif kind == "table":
        actions = np.asarray(raw.get("actions", []), dtype=float)
        rates = np.asarray(raw.get("rates", []), dtype=float)
        if actions.ndim != 2 or actions.shape[1] != graph.n_links:
            raise ConfigError("rate_power.actions", f"need a list of length-{graph.n_links} power vectors")
        if rates.ndim != 3 or rates.shape[1:] != actions.shape:
            raise ConfigError("rate_power.rates", "need one rate vector per action for every channel state")
        if np.any(actions < 0) or np.any(rates < 0):
            raise ConfigError("rate_power", "powers and rates must be nonnegative")
        order = _sort_actions(actions)
        mu_max = float(raw.get("mu_max", rates.max(initial=0.0)))
        model = RatePowerModel(kind=kind, actions=actions[order], node_of_link=node_of_link,
                               n_nodes=graph.n_nodes, p_max=p_max, mu_max=mu_max, delta=delta,
                               rate_table=rates[:, order, :])
    else:
        raise ConfigError("rate_power.kind", f"expected 'linear' or 'table', got {kind!r}")
    if np.any(model.spend > p_max + 1e-12):
        raise ConfigError("rate_power.actions", "an action exceeds p_max at some node")
    if model.n_actions == 0 or not np.any(np.all(model.actions == 0, axis=1)):
        raise ConfigError("rate_power.actions", "the all-zero action must be feasible")
    return model


def validate_and_derive(raw: dict, V: float | None = None):
    """Validate a raw configuration mapping.

    Returns ``(graph, params, config)`` where ``params`` is derived for ``V``
    (or the configured default).  Raises :class:`ConfigError` naming the
    offending field on any failure.
    """
    for sec in ("graph", "commodities", "rate_power", "channel_process", "energy_process"):
        if sec not in raw:
            raise ConfigError(sec, "missing section")
    g = raw["graph"]
    n_nodes = g.get("nodes")
    if not isinstance(n_nodes, int) or n_nodes < 1:
        raise ConfigError("graph.nodes", "positive integer node count required")
    links = []
    for i, pair in enumerate(g.get("links", [])):
        if not isinstance(pair, list) or len(pair) != 2:
            raise ConfigError(f"graph.links[{i}]", "expected [from, to]")
        a = _node(pair[0], n_nodes, f"graph.links[{i}]")
        b = _node(pair[1], n_nodes, f"graph.links[{i}]")
        if a == b:
            raise ConfigError(f"graph.links[{i}]", "self-loop")
        if (a, b) in links:
            raise ConfigError(f"graph.links[{i}]", "duplicate link")
        links.append((a, b))
    if not links:
        raise ConfigError("graph.links", "at least one link required")
    graph = NetworkGraph(n_nodes, tuple(links))

    params_raw = raw.get("params", {})
    r_max = float(params_raw.get("r_max", 1.0))
    if r_max <= 0:
        raise ConfigError("params.r_max", "must be positive")
    commodities = []
    seen = set()
    for i, k in enumerate(raw["commodities"]):
        f = f"commodities[{i}]"
        src = _node(k.get("source"), n_nodes, f + ".source")
        dst = _node(k.get("dest"), n_nodes, f + ".dest")
        if src == dst:
            raise ConfigError(f, "source equals destination")
        if (src, dst) in seen:
            raise ConfigError(f, "duplicate (source, dest) pair")
        seen.add((src, dst))
        spec = CommoditySpec(src, dst, str(k.get("utility", "log")), float(k.get("scale", 1.0)), r_max)
        if spec.utility == "log" and spec.scale <= 0:
            raise ConfigError(f + ".scale", "must be positive")
        _validate_utility(spec, f + ".utility")
        commodities.append(spec)
    if not commodities:
        raise ConfigError("commodities", "at least one commodity required")

    chan_raw = dict(raw["channel_process"])
    en_raw = dict(raw["energy_process"])
    model = _build_rate_model(raw["rate_power"], graph, chan_raw)
    if model.kind == "table" and chan_raw.get("scope") != "joint":
        raise ConfigError("channel_process.scope", "table rate models need a joint channel process")

    theta = params_raw.get("theta")
    if theta is not None:
        theta = tuple(float(x) for x in (theta if isinstance(theta, list) else [theta] * n_nodes))
        if len(theta) != n_nodes:
            raise ConfigError("params.theta", f"need {n_nodes} values")
        warnings.warn("params.theta overrides the derived perturbation; "
                      "queue and energy bounds are no longer guaranteed", stacklevel=2)
    phase1_t = params_raw.get("phase1_t")
    config = NetworkConfig(graph=graph, commodities=tuple(commodities), rate_power=model,
                           channel=chan_raw, energy=en_raw, r_max=r_max,
                           V=float(params_raw.get("V", 100.0)),
                           phase1_t=None if phase1_t is None else int(phase1_t),
                           theta_override=theta, raw=raw)
    chan = config.channel_process()
    if model.kind == "linear" and chan.joint and chan.values.ndim != 2:
        raise ConfigError("channel_process.values", "linear models need a per-link vector per joint state")
    en = config.energy_process()
    if en.joint and en.values.ndim != 2:
        raise ConfigError("energy_process.values", "joint scope needs a per-node vector per state")
    if model.kind == "table":
        idx = chan.values.astype(int)
        if np.any(idx < 0) or np.any(idx >= model.n_states) or np.any(idx != chan.values):
            raise ConfigError("channel_process.values", "table states must index rate_power.rates")
    return graph, config.params(V), config


# ---------------------------------------------------------------------------
# files


def resolve_config_path(path: str | Path) -> Path:
    """Find a config file, falling back to the bundled scenarios."""
    p = Path(path)
    for cand in (p, p.with_suffix(".toml")):
        if cand.is_file():
            return cand
    bundled = SCENARIO_DIR / (p.stem + ".toml")
    if bundled.is_file():
        return bundled
    raise ConfigError("config", f"no such file: {path}")


def load_raw(path: str | Path) -> dict:
    p = resolve_config_path(path)
    try:
        return tomllib.loads(p.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError("config", f"{p}: {exc}") from exc


def load_config(path: str | Path, V: float | None = None) -> NetworkConfig:
    return validate_and_derive(load_raw(path), V)[2]


def dumps_config(config: NetworkConfig) -> str:
    return tomli_w.dumps(config.raw)


def to_builtin(x: Any):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    return x
