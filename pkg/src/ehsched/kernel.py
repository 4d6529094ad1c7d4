"""Compiled slot loops for linear (non-interfering) rate models.

These loops repeat the decision rules of :mod:`ehsched.esa` and the Phase II
updates of :mod:`ehsched.mesa` scalar by scalar, so long runs cost a few
microseconds per slot.  The array code in those modules stays the reference:
tests compare trajectories from both, and a run whose compiled loop reports a
violation is replayed through the reference path for the detailed report.

Random draws are taken in blocks with ``rng.random((B, copies))``, which
yields the same numbers as ``B`` successive ``rng.random(copies)`` calls.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .esa import EsaNetwork
from .model import StateProcess

BLOCK = 65_536
CHECKPOINT = 1000

# violation codes
V_SPEND_LOW, V_SPEND_OVER, V_DATA, V_ENERGY, V_LEMMA_DATA, V_LEMMA_ENERGY = range(1, 7)


@dataclass
class Chain:
    """Flat view of a :class:`StateProcess` for the compiled loops."""

    cum: np.ndarray       # (rows, S) cumulative transition rows; one row for iid
    markov: bool
    joint: bool
    values: np.ndarray    # (S, width)
    current: np.ndarray   # replica states

    @classmethod
    def of(cls, proc: StateProcess, width: int):
        vals = np.asarray(proc.values, dtype=float)
        vals = vals.reshape(vals.shape[0], -1) if proc.joint else vals.reshape(-1, 1)
        if proc.joint and vals.shape[1] == 1 and width > 1:
            vals = np.repeat(vals, width, axis=1)
        return cls(np.ascontiguousarray(proc._cumulative()), proc.kind == "markov", proc.joint,
                   np.ascontiguousarray(vals), proc.current.astype(np.int64))


@numba.njit(cache=True)
def _advance_chain(cum, markov, joint, values, cur, u, out):
    for i in range(cur.size):
        row = cum[cur[i]] if markov else cum[0]
        s = 0
        for j in range(row.size):
            if u[i] >= row[j]:
                s += 1
        cur[i] = s
    if joint:
        for l in range(out.size):
            out[l] = values[cur[0], l]
    else:
        for l in range(out.size):
            out[l] = values[cur[l], 0]


@numba.njit(cache=True)
def _esa_slot(Q, E, ch, h, V, gamma, theta, r_max, scales, pair_node, pair_col,
              src, dst, node_of_link, local, owner, start, out_ptr, out_idx, dests,
              in_ptr, in_idx, R, Wc, W, best, P, alloc, spend, e, transfers, Qn, En):
    """One ESA decision and queue update; fills the output arrays."""
    N, C = Q.shape
    L = src.size
    for n in range(N):
        e[n] = h[n] if E[n] - theta[n] < 0 else 0.0
    R[:, :] = 0.0
    for k in range(scales.size):
        q = Q[pair_node[k], pair_col[k]]
        if scales[k] <= 0:
            r = 0.0
        elif q <= 0:
            r = r_max
        else:
            r = min(max(V * scales[k] / q - 1.0, 0.0), r_max)
        R[pair_node[k], pair_col[k]] = r
    for l in range(L):
        b = 0
        for c in range(C):
            w = max(Q[src[l], c] - Q[dst[l], c] - gamma, 0.0)
            Wc[l, c] = w
            if w > Wc[l, b]:
                b = c
        best[l] = b
        W[l] = Wc[l, b]
    # power: per-node segment argmax, first row wins ties
    P[:] = 0.0
    for n in range(N):
        stop = start[n + 1] if n + 1 < N else local.shape[0]
        arg = -1
        gbest = 0.0
        for a in range(start[n], stop):
            g = 0.0
            s = 0.0
            for l in range(L):
                p = local[a, l]
                g += p * (ch[l] * W[l] + (E[node_of_link[l]] - theta[node_of_link[l]]))
                s += p
            if s <= E[n] and (arg < 0 or g > gbest):
                arg = a
                gbest = g
        for l in range(L):
            P[l] += local[arg, l]
    alloc[:, :] = 0.0
    for l in range(L):
        if W[l] > 0:
            alloc[l, best[l]] = P[l] * ch[l]
    for n in range(N):
        s = 0.0
        for j in range(out_ptr[n], out_ptr[n + 1]):
            s += P[out_idx[j]]
        spend[n] = s
    # transfers: a short sender serves heavier links first
    transfers[:, :] = alloc
    for n in range(N):
        for c in range(C):
            tot = 0.0
            for j in range(out_ptr[n], out_ptr[n + 1]):
                tot += alloc[out_idx[j], c]
            if tot > Q[n, c]:
                avail = Q[n, c]
                m = out_ptr[n + 1] - out_ptr[n]
                done = np.zeros(m, dtype=np.bool_)
                for _ in range(m):
                    pick = -1
                    for j in range(m):
                        l = out_idx[out_ptr[n] + j]
                        if done[j] or alloc[l, c] <= 0:
                            continue
                        if pick < 0 or Wc[l, c] > Wc[out_idx[out_ptr[n] + pick], c]:
                            pick = j
                    if pick < 0:
                        break
                    done[pick] = True
                    l = out_idx[out_ptr[n] + pick]
                    t = min(avail, alloc[l, c])
                    transfers[l, c] = t
                    avail -= t
    for n in range(N):
        for c in range(C):
            out = 0.0
            for j in range(out_ptr[n], out_ptr[n + 1]):
                out += transfers[out_idx[j], c]
            Qn[n, c] = max(Q[n, c] - out, 0.0)
    for n in range(N):
        for c in range(C):
            arr = 0.0
            for j in range(in_ptr[n], in_ptr[n + 1]):
                arr += transfers[in_idx[j], c]
            Qn[n, c] = Qn[n, c] + arr + R[n, c]
    for n in range(N):
        En[n] = E[n] - spend[n] + e[n]


@numba.njit(cache=True)
def _esa_checks(t, Q, E, spend, Qn, En, p_max, q_bound, e_bound):
    for n in range(E.size):
        if spend[n] > 0 and E[n] < p_max:
            return t, V_SPEND_LOW
        if spend[n] > E[n]:
            return t, V_SPEND_OVER
    for n in range(Qn.shape[0]):
        for c in range(Qn.shape[1]):
            if Qn[n, c] < 0 or Qn[n, c] > q_bound:
                return t + 1, V_DATA
    for n in range(En.size):
        if En[n] < 0 or En[n] > e_bound[n]:
            return t + 1, V_ENERGY
    return -1, 0


@numba.njit(cache=True)
def _record(t, Q, E, Qv, Ev, virtual, acc_q, acc_e, acc_qv, acc_ev, acc_max, tail_start,
            tail_e, tail_e2, stride, trace, trace_row):
    s = 0.0
    for n in range(Q.shape[0]):
        for c in range(Q.shape[1]):
            s += Q[n, c]
            if Q[n, c] > acc_max[0]:
                acc_max[0] = Q[n, c]
    acc_q[0] += s
    for n in range(E.size):
        acc_e[n] += E[n]
        if E[n] > acc_max[1]:
            acc_max[1] = E[n]
        if t >= tail_start:
            tail_e[n] += E[n]
            tail_e2[n] += E[n] * E[n]
    if virtual:
        s = 0.0
        for n in range(Qv.shape[0]):
            for c in range(Qv.shape[1]):
                s += Qv[n, c]
        acc_qv[0] += s
        for n in range(Ev.size):
            acc_ev[n] += Ev[n]
    if stride > 0 and t % stride == 0:
        row = trace[trace_row]
        row[0] = t
        k = 1
        for n in range(E.size):
            row[k] = E[n]
            k += 1
        for n in range(Q.shape[0]):
            for c in range(Q.shape[1]):
                row[k] = Q[n, c]
                k += 1
        if virtual:
            for n in range(Ev.size):
                row[k] = Ev[n]
                k += 1
            for n in range(Qv.shape[0]):
                for c in range(Qv.shape[1]):
                    row[k] = Qv[n, c]
                    k += 1
        return trace_row + 1
    return trace_row


@numba.njit(cache=True)
def _run_block(t0, n_slots, mode, Q, E, Qv, Ev, offQ, offE, M, lemma_rel,
               ch_u, ch_cum, ch_markov, ch_joint, ch_vals, ch_cur,
               en_u, en_cum, en_markov, en_joint, en_vals, en_cur,
               V, gamma, theta, r_max, scales, pair_node, pair_col,
               src, dst, node_of_link, local, owner, start, out_ptr, out_idx, dests,
               p_max, q_bound, e_bound, in_ptr, in_idx,
               record, acc_q, acc_e, acc_qv, acc_ev, acc_max, sum_r, delivered, drops,
               masked, tail_start, tail_e, tail_e2, stride, trace, trace_row, checkpoints):
    """Run ``n_slots`` slots.  ``mode`` 0 is plain ESA on (Q, E); mode 1 is
    MESA Phase II with virtual (Qv, Ev) driving the decisions and actual
    (Q, E) following.  Returns (first bad slot, code, trace rows used)."""
    N, C = Q.shape
    L = src.size
    K = scales.size
    ch = np.zeros(L)
    h = np.zeros(N)
    R = np.zeros((N, C))
    Wc = np.zeros((L, C))
    W = np.zeros(L)
    best = np.zeros(L, dtype=np.int64)
    P = np.zeros(L)
    alloc = np.zeros((L, C))
    spend = np.zeros(N)
    e = np.zeros(N)
    transfers = np.zeros((L, C))
    Qn = np.zeros((N, C))
    En = np.zeros(N)
    A = np.zeros((N, C))
    gone = np.zeros(L, dtype=np.bool_)
    for i in range(n_slots):
        t = t0 + i
        _advance_chain(ch_cum, ch_markov, ch_joint, ch_vals, ch_cur, ch_u[i], ch)
        _advance_chain(en_cum, en_markov, en_joint, en_vals, en_cur, en_u[i], h)
        if record:
            trace_row = _record(t, Q, E, Qv, Ev, mode == 1, acc_q, acc_e, acc_qv, acc_ev,
                                acc_max, tail_start, tail_e, tail_e2, stride, trace, trace_row)
        if mode == 0:
            _esa_slot(Q, E, ch, h, V, gamma, theta, r_max, scales, pair_node, pair_col,
                      src, dst, node_of_link, local, owner, start, out_ptr, out_idx, dests,
                      in_ptr, in_idx, R, Wc, W, best, P, alloc, spend, e, transfers, Qn, En)
            bad, code = _esa_checks(t, Q, E, spend, Qn, En, p_max, q_bound, e_bound)
            if bad >= 0:
                return bad, code, trace_row
            # arrivals at each destination are this slot's deliveries
            for l in range(L):
                for c in range(C):
                    if dst[l] == dests[c]:
                        delivered[c] += transfers[l, c]
            for c in range(C):
                Qn[dests[c], c] = 0.0
            Q[:, :] = Qn
            E[:] = En
        else:
            _esa_slot(Qv, Ev, ch, h, V, gamma, theta, r_max, scales, pair_node, pair_col,
                      src, dst, node_of_link, local, owner, start, out_ptr, out_idx, dests,
                      in_ptr, in_idx, R, Wc, W, best, P, alloc, spend, e, transfers, Qn, En)
            bad, code = _esa_checks(t, Qv, Ev, spend, Qn, En, p_max, q_bound, e_bound)
            if bad >= 0:
                return bad, code, trace_row
            for c in range(C):
                Qn[dests[c], c] = 0.0
            # actual energy
            for n in range(N):
                below = Ev[n] < offE[n]
                above = Ev[n] > offE[n] + M
                if not above and spend[n] > E[n]:
                    masked[0] += 1
                if above:
                    En_act = min(E[n] + e[n], M)
                else:
                    eh = max(e[n] - (offE[n] - Ev[n]), 0.0) if below else e[n]
                    En_act = min(max(E[n] - spend[n], 0.0) + eh, M)
                h[n] = En_act  # reuse as scratch for the new actual energy
            # actual transfers from actual backlogs
            for l in range(L):
                for c in range(C):
                    transfers[l, c] = alloc[l, c]
            for n in range(N):
                for c in range(C):
                    tot = 0.0
                    for j in range(out_ptr[n], out_ptr[n + 1]):
                        tot += alloc[out_idx[j], c]
                    if tot > Q[n, c]:
                        avail = Q[n, c]
                        m = out_ptr[n + 1] - out_ptr[n]
                        done = np.zeros(m, dtype=np.bool_)
                        for _ in range(m):
                            pick = -1
                            for j in range(m):
                                l = out_idx[out_ptr[n] + j]
                                if done[j] or alloc[l, c] <= 0:
                                    continue
                                if pick < 0 or Wc[l, c] > Wc[out_idx[out_ptr[n] + pick], c]:
                                    pick = j
                            if pick < 0:
                                break
                            done[pick] = True
                            l = out_idx[out_ptr[n] + pick]
                            tt = min(avail, alloc[l, c])
                            transfers[l, c] = tt
                            avail -= tt
            for l in range(L):
                s_node = src[l]
                gone[l] = (Ev[s_node] < offE[s_node] + p_max) or (Ev[s_node] > offE[s_node] + M)
                if gone[l]:
                    for c in range(C):
                        drops[c] += transfers[l, c]
            for n in range(N):
                for c in range(C):
                    arr = 0.0
                    for j in range(in_ptr[n], in_ptr[n + 1]):
                        if not gone[in_idx[j]]:
                            arr += transfers[in_idx[j], c]
                    A[n, c] = R[n, c] + arr
            for n in range(N):
                for c in range(C):
                    out = 0.0
                    for j in range(out_ptr[n], out_ptr[n + 1]):
                        out += transfers[out_idx[j], c]
                    a = A[n, c]
                    if Qv[n, c] < offQ[n, c]:
                        at = max(a - (offQ[n, c] - Qv[n, c]), 0.0)
                        drops[c] += a - at
                        a = at
                    A[n, c] = a
                    Q[n, c] = max(Q[n, c] - out, 0.0) + a
            for c in range(C):
                delivered[c] += A[dests[c], c]
                Q[dests[c], c] = 0.0
            for n in range(N):
                E[n] = h[n]
            Qv[:, :] = Qn
            Ev[:] = En
            # sample-path bounds of the actual queues
            for n in range(N):
                for c in range(C):
                    up = max(Qv[n, c] - offQ[n, c], 0.0) + gamma
                    slack = lemma_rel * (abs(Qv[n, c]) + abs(offQ[n, c]))
                    if Q[n, c] < 0 or Q[n, c] > up + slack:
                        return t + 1, V_LEMMA_DATA, trace_row
                lo = min(max(Ev[n] - offE[n], 0.0), M)
                slack = lemma_rel * (abs(Ev[n]) + abs(offE[n]))
                if E[n] < lo - slack or E[n] < 0 or E[n] > M:
                    return t + 1, V_LEMMA_ENERGY, trace_row
        if record:
            for k in range(K):
                sum_r[k] += R[pair_node[k], pair_col[k]]
            if (t + 1) % CHECKPOINT == 0:
                checkpoints[(t + 1) // CHECKPOINT - 1, :] = sum_r
    return -1, 0, trace_row


class CompiledNet:
    """Arrays of an :class:`EsaNetwork` laid out for the compiled loop."""

    def __init__(self, net: EsaNetwork):
        if net.model.kind != "linear":
            raise ValueError("compiled loop supports linear rate models only")
        g = net.graph
        p = net.params
        local, owner, start = net.model.local_actions
        self.net = net
        out_idx = np.array([l for n in range(g.n_nodes) for l in g.out_links[n]], dtype=np.int64)
        out_ptr = np.cumsum([0] + [len(g.out_links[n]) for n in range(g.n_nodes)]).astype(np.int64)
        in_idx = np.array([l for n in range(g.n_nodes) for l in g.in_links[n]], dtype=np.int64)
        in_ptr = np.cumsum([0] + [len(g.in_links[n]) for n in range(g.n_nodes)]).astype(np.int64)
        self.args = (
            float(p.V), float(p.gamma), np.asarray(p.theta, dtype=float), float(p.r_max),
            net.scales.astype(float), net.pair_node.astype(np.int64), net.pair_col.astype(np.int64),
            g.src.astype(np.int64), g.dst.astype(np.int64),
            net.model.node_of_link.astype(np.int64), np.ascontiguousarray(local, dtype=float),
            owner.astype(np.int64), start.astype(np.int64), out_ptr, out_idx,
            net.dests.astype(np.int64), float(p.p_max), float(p.q_bound),
            np.asarray(p.e_bound, dtype=float), in_ptr, in_idx,
        )


class LoopState:
    """Running sums filled in by the compiled loop."""

    def __init__(self, N, C, K, horizon, stride, width):
        self.acc_q = np.zeros(1)
        self.acc_e = np.zeros(N)
        self.acc_qv = np.zeros(1)
        self.acc_ev = np.zeros(N)
        self.acc_max = np.zeros(2)
        self.sum_r = np.zeros(K)
        self.delivered = np.zeros(C)
        self.drops = np.zeros(C)
        self.masked = np.zeros(1, dtype=np.int64)
        self.tail_start = horizon // 2
        self.tail_e = np.zeros(N)
        self.tail_e2 = np.zeros(N)
        self.stride = stride
        rows = (horizon + stride - 1) // stride if stride else 0
        self.trace = np.zeros((max(rows, 1), width))
        self.trace_row = 0
        self.checkpoints = np.zeros((max(horizon // CHECKPOINT, 1), K))


def run_loop(cnet: CompiledNet, mode: int, Q, E, chan: StateProcess, energy: StateProcess,
             ch_rng, en_rng, n_slots: int, record: LoopState | None,
             Qv=None, Ev=None, offQ=None, offE=None, M=0.0, lemma_rel=0.0):
    """Advance ``n_slots`` slots in place.  Processes must already be reset.

    Returns ``(bad_slot, code)``; ``bad_slot`` is -1 when every check held.
    """
    N, C = Q.shape
    L = cnet.net.graph.n_links
    chc, enc = Chain.of(chan, L), Chain.of(energy, N)
    if Qv is None:
        Qv, Ev = np.zeros((N, C)), np.zeros(N)
        offQ, offE = np.zeros((N, C)), np.zeros(N)
    rec = record if record is not None else LoopState(N, C, cnet.args[4].size, 0, 0, 1)
    t = 0
    bad, code = -1, 0
    while t < n_slots and bad < 0:
        b = min(BLOCK, n_slots - t)
        ch_u = ch_rng.random((b, chc.current.size))
        en_u = en_rng.random((b, enc.current.size))
        bad, code, rec.trace_row = _run_block(
            t, b, mode, Q, E, Qv, Ev, offQ, offE, float(M), float(lemma_rel),
            ch_u, chc.cum, chc.markov, chc.joint, chc.values, chc.current,
            en_u, enc.cum, enc.markov, enc.joint, enc.values, enc.current,
            *cnet.args, record is not None, rec.acc_q, rec.acc_e, rec.acc_qv, rec.acc_ev,
            rec.acc_max, rec.sum_r, rec.delivered, rec.drops, rec.masked, rec.tail_start,
            rec.tail_e, rec.tail_e2, rec.stride, rec.trace, rec.trace_row, rec.checkpoints)
        t += b
    chan.current = chc.current.astype(np.intp)
    energy.current = enc.current.astype(np.intp)
    return bad, code
