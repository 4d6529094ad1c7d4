"""Energy-limited scheduling: per-slot harvesting, admission, power
allocation and routing decisions from current backlogs and energy levels.

Every decision uses the start-of-slot state.  Ties are broken toward the
smallest commodity index and, for power, toward the smallest total power and
then the lexicographically smallest action.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import CommoditySpec, NetworkConfig, RatePowerModel, SystemParams
from .queues import apply_data_dynamics, apply_energy_dynamics

BISECTION_ITERS = 60


@dataclass(frozen=True)
class Violation:
    slot: int
    kind: str
    detail: str

    def __str__(self):
        return f"slot {self.slot}: {self.kind}: {self.detail}"


class InvariantViolationError(RuntimeError):
    def __init__(self, violations, metrics=None):
        self.violations = list(violations)
        self.metrics = metrics
        first = self.violations[0]
        more = f" (+{len(self.violations) - 1} more)" if len(self.violations) > 1 else ""
        super().__init__(f"{first}{more}")


@dataclass
class SlotAction:
    harvest: np.ndarray        # e[n]
    admissions: np.ndarray     # R[n, c]
    power: np.ndarray          # P[l]
    rates: np.ndarray          # mu[l]
    alloc: np.ndarray          # mu^(c)[l]
    spend: np.ndarray          # per-node power sums
    weights: np.ndarray        # W^(c)[l]


@dataclass
class QueueState:
    Q: np.ndarray
    E: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n_nodes: int, n_commodities: int):
        return cls(np.zeros((n_nodes, n_commodities)), np.zeros(n_nodes))

    def copy(self):
        return QueueState(self.Q.copy(), self.E.copy(), self.t)


# ---------------------------------------------------------------------------
# decision rules


def harvest_decision(E, theta, h):
    """Harvest everything available while the battery is below theta."""
    return np.where(np.asarray(E) - np.asarray(theta) < 0, h, 0.0)


def admit_bisection(Q: float, V: float, deriv, r_max: float) -> float:
    """Maximize V*U(r) - Q*r on [0, r_max] for strictly concave U."""
    if V * deriv(r_max) - Q >= 0:
        return r_max
    if V * deriv(0.0) - Q <= 0:
        return 0.0
    lo, hi = 0.0, r_max
    for _ in range(BISECTION_ITERS):
        mid = 0.5 * (lo + hi)
        if V * deriv(mid) - Q > 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def admit(Q: float, V: float, commodity: CommoditySpec) -> float:
    if commodity.utility == "zero":
        return 0.0
    if Q <= 0:
        return commodity.r_max
    return min(max(V * commodity.scale / Q - 1.0, 0.0), commodity.r_max)


def admit_all(Qp, V, scales, r_max):
    """Vectorized :func:`admit` for log utilities; ``scales`` is 0 for zero utility."""
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.clip(V * scales / Qp - 1.0, 0.0, r_max)
    r = np.where(Qp <= 0, r_max, r)
    return np.where(scales > 0, r, 0.0)


def link_weights(Q, gamma, src, dst):
    """Per-commodity, per-link and best-commodity backpressure weights."""
    Wc = np.maximum(Q[src] - Q[dst] - gamma, 0.0)
    best = np.argmax(Wc, axis=1)
    W = Wc[np.arange(Wc.shape[0]), best]
    return Wc, W, best


def power_objective(model: RatePowerModel, channel, W, x):
    """G(P) for every action; ``x`` is E - theta per node."""
    xl = x[model.node_of_link]
    if model.kind == "linear":
        return model.actions @ (np.asarray(channel) * W + xl)
    return model.rate_table[int(channel)] @ W + model.actions @ xl


def allocate_power_joint(model: RatePowerModel, channel, W, x, E) -> int:
    """Index of the maximizing action by enumeration of the joint action set."""
    G = power_objective(model, channel, W, x)
    feasible = np.all(model.spend <= E, axis=1)
    G = np.where(feasible, G, -np.inf)
    return int(np.argmax(G))


def allocate_power_local(model: RatePowerModel, channel, W, x, E) -> np.ndarray:
    """Power vector maximizing G node by node (non-interfering links)."""
    local, owner, start = model.local_actions
    xl = x[model.node_of_link]
    G = local @ (np.asarray(channel) * W + xl)
    G = np.where(local @ np.ones(local.shape[1]) <= E[owner], G, -np.inf)
    seg_max = np.maximum.reduceat(G, start)
    hit = np.flatnonzero(G == seg_max[owner])
    first = hit[np.unique(owner[hit], return_index=True)[1]]
    return local[first].sum(axis=0)


def allocate_power(model: RatePowerModel, channel, W, x, E) -> np.ndarray:
    """Power vector maximizing G(P) subject to per-node spend <= E."""
    if model.separable:
        return allocate_power_local(model, channel, W, x, E)
    return model.actions[allocate_power_joint(model, channel, W, x, E)].copy()


def route_and_schedule(mu, W, best, n_commodities: int):
    """Give each link's full rate to its best commodity when its weight is positive."""
    alloc = np.zeros((mu.size, n_commodities))
    on = W > 0
    alloc[np.flatnonzero(on), best[on]] = mu[on]
    return alloc


# ---------------------------------------------------------------------------
# one slot


class EsaNetwork:
    """Precomputed arrays for running ESA on one configuration at one V."""

    def __init__(self, config: NetworkConfig, params: SystemParams):
        self.config = config
        self.params = params
        self.graph = config.graph
        self.model = config.rate_power
        self.dests = np.array(config.dests, dtype=np.intp)
        col = {d: i for i, d in enumerate(config.dests)}
        N, C = self.graph.n_nodes, len(self.dests)
        self.n_nodes, self.n_cols = N, C
        self.src, self.dst = self.graph.src, self.graph.dst
        self.pair_node = np.array([k.source for k in config.commodities], dtype=np.intp)
        self.pair_col = np.array([col[k.dest] for k in config.commodities], dtype=np.intp)
        self.scales = np.array([k.scale if k.utility == "log" else 0.0 for k in config.commodities])
        self.node_of_link_inc = self.graph.out_incidence

    def admissions(self, Q) -> np.ndarray:
        p = self.params
        r = admit_all(Q[self.pair_node, self.pair_col], p.V, self.scales, p.r_max)
        R = np.zeros((self.n_nodes, self.n_cols))
        R[self.pair_node, self.pair_col] = r
        return R

    def decide(self, Q, E, channel, h) -> SlotAction:
        p = self.params
        e = harvest_decision(E, p.theta, h)
        R = self.admissions(Q)
        Wc, W, best = link_weights(Q, p.gamma, self.src, self.dst)
        x = E - p.theta
        P = allocate_power(self.model, channel, W, x, E)
        if self.model.kind == "linear":
            mu = P * channel
        else:
            mu = self.model.rate_table[int(channel)][self.model.action_index(P)]
        alloc = route_and_schedule(mu, W, best, self.n_cols)
        spend = self.node_of_link_inc @ P
        return SlotAction(e, R, P, mu, alloc, spend, Wc)

    def check_decision(self, t, E, action, out: list):
        spending = action.spend > 0
        low = spending & (E < self.params.p_max)
        if low.any():
            n = int(np.flatnonzero(low)[0])
            out.append(Violation(t, "spend_below_pmax",
                                 f"node {n + 1} spends {action.spend[n]} with E={E[n]} < P_max"))
        over = action.spend > E
        if over.any():
            n = int(np.flatnonzero(over)[0])
            out.append(Violation(t, "spend_exceeds_energy",
                                 f"node {n + 1} spends {action.spend[n]} with E={E[n]}"))

    def check_state(self, t, Q, E, out: list):
        p = self.params
        if np.any(Q < 0) or np.any(Q > p.q_bound):
            n, c = np.argwhere((Q < 0) | (Q > p.q_bound))[0]
            out.append(Violation(t, "data_bound",
                                 f"Q[{n + 1}][{self.dests[c] + 1}]={Q[n, c]} outside [0, {p.q_bound}]"))
        if np.any(E < 0) or np.any(E > p.e_bound):
            n = int(np.flatnonzero((E < 0) | (E > p.e_bound))[0])
            out.append(Violation(t, "energy_bound",
                                 f"E[{n + 1}]={E[n]} outside [0, {p.e_bound[n]}]"))

    def advance(self, Q, E, action: SlotAction):
        """Apply the queue updates for a decided action."""
        Qn, transfers, delivered = apply_data_dynamics(
            Q, action.alloc, action.admissions, self.graph, self.dests, action.weights)
        En = apply_energy_dynamics(E, action.spend, action.harvest)
        return Qn, En, transfers, delivered


def esa_step(net: EsaNetwork, state: QueueState, channel, h, violations=None):
    """Decide and apply one ESA slot.

    Checks the deterministic queue and energy bounds on the new state and
    the energy-availability conditions of the decision, appending any
    :class:`Violation` to ``violations``.
    """
    violations = [] if violations is None else violations
    action = net.decide(state.Q, state.E, channel, h)
    net.check_decision(state.t, state.E, action, violations)
    if any(v.kind == "spend_exceeds_energy" and v.slot == state.t for v in violations):
        raise InvariantViolationError(violations)
    Qn, En, transfers, delivered = net.advance(state.Q, state.E, action)
    nxt = QueueState(Qn, En, state.t + 1)
    net.check_state(nxt.t, Qn, En, violations)
    return action, nxt, transfers, delivered


__all__ = [
    "SlotAction", "QueueState", "Violation", "InvariantViolationError", "EsaNetwork",
    "harvest_decision", "admit", "admit_all", "admit_bisection", "link_weights",
    "allocate_power", "allocate_power_joint", "allocate_power_local", "power_objective",
    "route_and_schedule", "esa_step",
]
