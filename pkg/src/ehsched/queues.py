"""Fluid data and energy queue dynamics.

Data backlogs are an (N, C) array: row ``n`` is a node, column ``c`` the
commodity destined for ``dests[c]``.  Energy levels are a length-N vector.
"""

from __future__ import annotations

import numpy as np

from .model import NetworkGraph


class EnergyDeficit(RuntimeError):
    """A node tried to spend more energy than it had stored."""


def apply_data_dynamics(Q, alloc, admissions, graph: NetworkGraph, dests, weights=None):
    """One slot of the data-queue recursion.

    ``alloc`` is the (L, C) per-commodity rate allocated on every link.  A
    sender short of backlog serves its outgoing links in descending
    ``weights`` order (ties to the smaller link index), each up to its
    allocation.  Departures are taken from the start-of-slot backlog before
    arrivals are added, so nothing is relayed twice in one slot.

    Returns ``(Q_next, transfers, delivered)`` where ``transfers`` is the
    (L, C) amount actually moved and ``delivered`` the per-commodity amount
    reaching its destination.
    """
    in_inc = graph.in_incidence
    transfers = actual_transfers(Q, alloc, graph, weights)
    arrivals = in_inc @ transfers
    Q_next = np.maximum(Q - graph.out_incidence @ transfers, 0.0) + arrivals + admissions
    cols = np.arange(len(dests))
    delivered = arrivals[dests, cols].copy()
    Q_next[dests, cols] = 0.0
    return Q_next, transfers, delivered


def actual_transfers(Q, alloc, graph: NetworkGraph, weights=None):
    """Amount each link really moves given the senders' backlogs."""
    out_alloc = graph.out_incidence @ alloc
    short = out_alloc > Q
    if not short.any():
        return alloc
    transfers = alloc.copy()
    for n, c in np.argwhere(short):
        links = [l for l in graph.out_links[n] if alloc[l, c] > 0]
        if weights is not None:
            links.sort(key=lambda l: (-weights[l, c], l))
        avail = Q[n, c]
        for l in links:
            t = min(avail, alloc[l, c])
            transfers[l, c] = t
            avail -= t
    return transfers


def apply_energy_dynamics(E, spend, harvest):
    """E' = E - spend + harvest, refusing to spend energy that is not there."""
    E = np.asarray(E, dtype=float)
    spend = np.asarray(spend, dtype=float)
    if np.any(spend > E):
        n = int(np.flatnonzero(spend > E)[0])
        raise EnergyDeficit(f"node {n + 1} spends {spend[n]} with only {E[n]} stored")
    return E - spend + harvest


def total_backlog(Q) -> float:
    return float(np.sum(Q))
