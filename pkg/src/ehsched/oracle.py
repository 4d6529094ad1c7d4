"""Upper bound on achievable utility for small instances.

The feasible set is the stationary achievable-rate region: per channel
state, a mixture over the enumerated joint power actions; per-commodity link
flows bounded by the mixed average link rates; flow conservation at every
non-destination node; average spend at most average harvestable energy.
Utility of the average admitted rate is maximized over it with a
fully-corrective conditional-gradient method whose linear subproblem is a
sparse LP.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.optimize import linprog

from .model import ConfigError, NetworkConfig, utility_deriv, utility_value


class InstanceTooLarge(ValueError):
    pass


@dataclass
class OracleResult:
    bound: float          # certified: value + final duality gap
    value: float          # utility of the best rate vector found
    rates: np.ndarray     # per-commodity average admitted rates
    gap: float
    iterations: int

    @property
    def per_commodity(self) -> list[float]:
        return self.rates.tolist()


def channel_states(config: NetworkConfig, max_states: int = 4096):
    """Joint channel states as (probabilities, list of emissions)."""
    proc = config.channel_process()
    pi = proc.stationary()
    if proc.joint:
        return pi, [proc.values[i] for i in range(proc.n_states)]
    n = proc.n_states ** proc.copies
    if n > max_states:
        raise InstanceTooLarge(f"{n} joint channel states exceed the cap of {max_states}")
    probs, emits = [], []
    for combo in itertools.product(range(proc.n_states), repeat=proc.copies):
        probs.append(float(np.prod(pi[list(combo)])))
        emits.append(proc.values[list(combo)])
    return np.array(probs), emits


def _utility(config, r):
    return sum(float(utility_value(k, min(max(x, 0.0), k.r_max)))
               for k, x in zip(config.commodities, r))


def _grad(config, r):
    return np.array([float(utility_deriv(k, min(max(x, 0.0), k.r_max)))
                     for k, x in zip(config.commodities, r)])


class _RateRegion:
    """Linear maximization over the stationary achievable-rate region."""

    def __init__(self, config: NetworkConfig, action_cap: int):
        model = config.rate_power
        if model.n_actions > action_cap:
            raise InstanceTooLarge(f"{model.n_actions} joint actions exceed the cap of {action_cap}")
        graph = config.graph
        dests = config.dests
        col = {d: i for i, d in enumerate(dests)}
        pi, emits = channel_states(config)
        n_s, n_a, n_l, n_c = len(pi), model.n_actions, graph.n_links, len(dests)
        n_k = len(config.commodities)
        n_n = graph.n_nodes
        self.n_k = n_k
        n_lam = n_s * n_a
        lam0, f0 = n_k, n_k + n_lam
        n_var = f0 + n_l * n_c

        rows, cols, vals, b_ub = [], [], [], []
        r = 0
        # link capacity: sum_c f[l,c] <= sum_s pi_s sum_a lam[s,a] mu_l(s,a)
        avg_rate = np.stack([pi[s] * model.rate_matrix(emits[s]) for s in range(n_s)])  # (S,A,L)
        for l in range(n_l):
            for c in range(n_c):
                rows.append(r); cols.append(f0 + l * n_c + c); vals.append(1.0)
            coef = -avg_rate[:, :, l].ravel()
            nz = np.flatnonzero(coef)
            rows.extend([r] * nz.size); cols.extend((lam0 + nz).tolist()); vals.extend(coef[nz].tolist())
            b_ub.append(0.0)
            r += 1
        # flow conservation at every (n, c) with n != dest
        for n in range(n_n):
            for c, d in enumerate(dests):
                if n == d:
                    continue
                for k, spec in enumerate(config.commodities):
                    if spec.source == n and spec.dest == d:
                        rows.append(r); cols.append(k); vals.append(1.0)
                for l in graph.in_links[n]:
                    rows.append(r); cols.append(f0 + l * n_c + c); vals.append(1.0)
                for l in graph.out_links[n]:
                    rows.append(r); cols.append(f0 + l * n_c + c); vals.append(-1.0)
                b_ub.append(0.0)
                r += 1
        # energy balance per node
        spend = model.spend  # (A, N)
        h_bar = config.mean_harvest()
        for n in range(n_n):
            coef = (pi[:, None] * spend[None, :, n]).ravel()
            nz = np.flatnonzero(coef)
            rows.extend([r] * nz.size); cols.extend((lam0 + nz).tolist()); vals.extend(coef[nz].tolist())
            b_ub.append(float(h_bar[n]))
            r += 1
        self.A_ub = sparse.csr_matrix((vals, (rows, cols)), shape=(r, n_var))
        self.b_ub = np.array(b_ub)
        eq_rows = np.repeat(np.arange(n_s), n_a)
        self.A_eq = sparse.csr_matrix((np.ones(n_lam), (eq_rows, lam0 + np.arange(n_lam))),
                                      shape=(n_s, n_var))
        self.b_eq = np.ones(n_s)
        bounds = [(0.0, spec.r_max) for spec in config.commodities]
        bounds += [(0.0, None)] * n_lam
        for l in range(n_l):
            for d in dests:
                bounds.append((0.0, 0.0) if graph.links[l][0] == d else (0.0, None))
        self.bounds = bounds
        self.n_var = n_var

    def maximize(self, g: np.ndarray) -> np.ndarray:
        c = np.zeros(self.n_var)
        c[: self.n_k] = -g
        res = linprog(c, A_ub=self.A_ub, b_ub=self.b_ub, A_eq=self.A_eq, b_eq=self.b_eq,
                      bounds=self.bounds, method="highs")
        if res.status != 0:
            raise RuntimeError(f"rate-region LP failed: {res.message}")
        return np.clip(res.x[: self.n_k], 0.0, None)


def _line_search(config, x, d, hi=1.0, iters=60):
    """Maximize U(x + t d) over t in [0, hi] by bisection on the derivative."""
    if _grad(config, x + hi * d) @ d >= 0:
        return hi
    lo = 0.0
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if _grad(config, x + mid * d) @ d > 0:
            lo = mid
        else:
            hi = mid
    return lo


def _corrective(config, atoms, w, tol, max_iter=2000):
    """Re-optimize the convex weights over the current atoms (pairwise steps)."""
    A = np.array(atoms)
    for _ in range(max_iter):
        x = w @ A
        g = A @ _grad(config, x)
        toward = int(np.argmax(g))
        active = np.flatnonzero(w > 0)
        away = int(active[np.argmin(g[active])])
        if g[toward] - g[away] < tol:
            break
        d = A[toward] - A[away]
        t = _line_search(config, x, d, hi=w[away])
        w[toward] += t
        w[away] -= t
        if w[away] < 1e-15:
            w[away] = 0.0
    return w


def compute_upper_bound(config: NetworkConfig, tolerance: float = 1e-4,
                        max_iter: int = 10_000, action_cap: int = 10_000) -> OracleResult:
    """Maximize total utility over the stationary achievable-rate region.

    Stops once the conditional-gradient duality gap drops below
    ``tolerance``; ``bound`` adds the final gap to the attained value so it
    is a certified upper bound.
    """
    region = _RateRegion(config, action_cap)
    atoms = [np.zeros(region.n_k)]
    w = np.ones(1)
    x = atoms[0]
    gap = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        g = _grad(config, x)
        s = region.maximize(g)
        gap = float(g @ (s - x))
        if gap < tolerance:
            break
        atoms.append(s)
        w = np.append(w, 0.0)
        w = _corrective(config, atoms, w, tolerance / 10)
        keep = w > 0
        atoms = [a for a, k in zip(atoms, keep) if k]
        w = w[keep]
        x = w @ np.array(atoms)
    value = _utility(config, x)
    return OracleResult(bound=value + max(gap, 0.0), value=value, rates=x, gap=gap, iterations=it)


# ---------------------------------------------------------------------------
# grid brute force


def _tree_paths(config: NetworkConfig):
    graph = config.graph
    for n in range(graph.n_nodes):
        if len(graph.out_links[n]) > 1:
            raise InstanceTooLarge("brute force needs every node to have at most one out-link")
    paths = []
    for spec in config.commodities:
        path, n = [], spec.source
        while n != spec.dest:
            if n in path or not graph.out_links[n]:
                path = None
                break
            path.append(n)
            n = graph.links[graph.out_links[n][0]][1]
        paths.append(path)
    return paths


def _link_marginal(config: NetworkConfig, link: int):
    proc = config.channel_process()
    pi = proc.stationary()
    vals = proc.values[:, link] if proc.joint else proc.values
    levels = np.unique(vals)
    probs = np.array([pi[vals == v].sum() for v in levels])
    return levels, probs


def _grid(step: float, top: float) -> np.ndarray:
    k = int(np.floor(top / step + 1e-9))
    return np.arange(k + 1) * step


def node_capacity(config: NetworkConfig, node: int, grid_step: float,
                  max_points: int = 20_000_000) -> float:
    """Best average rate of a node's single out-link found on a mixture grid."""
    graph = config.graph
    model = config.rate_power
    if not graph.out_links[node]:
        return 0.0
    link = graph.out_links[node][0]
    levels, probs = _link_marginal(config, link)
    powers = np.array(sorted({p for p in model.levels if p <= model.p_max}))
    h_bar = config.mean_harvest()[node]
    nz = powers[powers > 0]
    # per channel level: weights on each nonzero power, remainder on zero power
    simplex = [w for w in itertools.product(_grid(grid_step, 1.0), repeat=nz.size)
               if sum(w) <= 1 + 1e-9]
    per_state = np.array(simplex).reshape(len(simplex), nz.size)
    n_points = len(simplex) ** levels.size
    if n_points > max_points:
        raise InstanceTooLarge(f"{n_points} mixture grid points exceed {max_points}")
    rate_s = per_state @ nz                      # mean power in a slot of this state
    best = 0.0
    # product over channel levels, vectorized over the last level
    for head in itertools.product(range(len(simplex)), repeat=levels.size - 1):
        p = sum(probs[i] * rate_s[j] for i, j in enumerate(head)) + probs[-1] * rate_s
        mu = sum(probs[i] * levels[i] * rate_s[j] for i, j in enumerate(head)) \
            + probs[-1] * levels[-1] * rate_s
        ok = p <= h_bar + 1e-12
        if ok.any():
            best = max(best, float(mu[ok].max()))
    return min(best, model.mu_max)


def brute_force_bound(config: NetworkConfig, grid_step: float = 1e-3) -> float:
    """Grid search over admission rates and per-state power mixtures.

    Supports linear rate models on graphs where every node has at most one
    out-link, at most 2 commodities and at most 4 links.  The result is a
    lower bound on the optimum within O(grid_step).
    """
    if config.rate_power.kind != "linear":
        raise InstanceTooLarge("brute force supports linear rate models only")
    if len(config.commodities) > 2 or config.graph.n_links > 4:
        raise InstanceTooLarge("brute force supports at most 2 commodities and 4 links")
    paths = _tree_paths(config)
    caps = np.array([node_capacity(config, n, grid_step) for n in range(config.graph.n_nodes)])
    axes = [_grid(grid_step, k.r_max) if p is not None else np.zeros(1)
            for k, p in zip(config.commodities, paths)]
    mesh = np.meshgrid(*axes, indexing="ij")
    load = np.zeros((config.graph.n_nodes,) + mesh[0].shape)
    for r, p in zip(mesh, paths):
        for n in p or []:
            load[n] += r
    feasible = np.all(load <= caps.reshape((-1,) + (1,) * len(mesh)) + 1e-12, axis=0)
    util = sum(utility_value(k, r) for k, r in zip(config.commodities, mesh))
    util = np.where(feasible, util, -np.inf)
    return float(util.max())


__all__ = ["OracleResult", "InstanceTooLarge", "compute_upper_bound", "brute_force_bound",
           "node_capacity", "channel_states", "ConfigError"]
