"""Modified ESA: small actual queues steered by offset virtual queues.

Phase I runs plain ESA to find where backlogs and energy levels settle and
keeps that point minus ``M/2`` as offsets.  Phase II runs ESA on virtual
queues started at the offsets while the actual queues, capped at ``M`` for
energy, follow the same actions with clamping and packet dropping.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .esa import EsaNetwork, InvariantViolationError, QueueState, Violation, esa_step
from .kernel import CompiledNet, LoopState, run_loop
from .metrics import Accumulator, Metrics, RunTrace
from .model import ConfigError, NetworkConfig
from .queues import actual_transfers

# The offsets are irrational, so Q̂ - 𝒬 and Ê - ℰ carry rounding error even
# when the bounds hold with equality; comparisons allow this many ulps of the
# operands and nothing more.
LEMMA_ULPS = 16
_EPS = float(np.finfo(float).eps)


def lemma_slack(a, b):
    """Rounding allowance for comparing against a bound built from ``a - b``."""
    return LEMMA_ULPS * _EPS * (np.abs(a) + np.abs(b))


def mesa_capacity(V: float, alpha_max: float | None = None) -> float:
    """Energy capacity M = 4 (ln V)^2, checked against M/2 > alpha_max."""
    if V < 1:
        raise ConfigError("V", f"must be >= 1, got {V}")
    M = 4.0 * math.log(V) ** 2
    if alpha_max is not None and not M / 2 > alpha_max:
        raise ConfigError("V", f"M/2 = {M / 2:.4g} must exceed max(P_max, h_max) = {alpha_max}")
    return M


def offsets(Qv, Ev, M):
    """Phase I offsets [x - M/2]^+ for backlogs and energy levels."""
    return np.maximum(Qv - M / 2, 0.0), np.maximum(Ev - M / 2, 0.0)


@dataclass
class MesaState:
    Qv: np.ndarray
    Ev: np.ndarray
    Q: np.ndarray
    E: np.ndarray
    off_Q: np.ndarray
    off_E: np.ndarray
    M: float
    t: int = 0
    drops: np.ndarray = field(default=None)
    masked: int = 0

    @classmethod
    def start(cls, off_Q, off_E, M):
        return cls(off_Q.copy(), off_E.copy(), np.zeros_like(off_Q), np.zeros_like(off_E),
                   off_Q, off_E, M, drops=np.zeros(off_Q.shape[1]))


def _streams(seed: int):
    ss = np.random.SeedSequence(seed)
    return [np.random.default_rng(s) for s in ss.spawn(4)]


def phase1(config: NetworkConfig, V: float, T: int, seed: int, fast: bool | None = None):
    """Run ESA for T slots from empty queues; return (off_Q, off_E, M)."""
    params = config.params(V)
    M = mesa_capacity(V, max(params.p_max, params.h_max))
    net = EsaNetwork(config, params)
    if fast is None:
        fast = config.rate_power.kind == "linear"
    _, _, ch_rng, en_rng = _streams(seed)
    chan, energy = config.channel_process(), config.energy_process()
    chan.reset(ch_rng)
    energy.reset(en_rng)
    state = QueueState.zeros(net.n_nodes, net.n_cols)
    violations = []
    if fast:
        bad, _ = run_loop(CompiledNet(net), 0, state.Q, state.E, chan, energy, ch_rng, en_rng,
                          T, None)
        if bad >= 0:
            return phase1(config, V, T, seed, fast=False)
    else:
        for _ in range(T):
            _, state, _, _ = esa_step(net, state, chan.step(ch_rng), energy.step(en_rng),
                                      violations)
    if violations:
        raise InvariantViolationError(violations)
    off_Q, off_E = offsets(state.Q, state.E, M)
    return off_Q, off_E, M


def check_lemma(net: EsaNetwork, s: MesaState, out: list):
    """Sample-path bounds tying the actual queues to the virtual ones."""
    t = s.t
    upper = np.maximum(s.Qv - s.off_Q, 0.0) + net.params.gamma
    bad = (s.Q < 0) | (s.Q > upper + lemma_slack(s.Qv, s.off_Q))
    if bad.any():
        n, c = np.argwhere(bad)[0]
        out.append(Violation(t, "lemma_data",
                             f"Q[{n + 1}][{net.dests[c] + 1}]={s.Q[n, c]} above {upper[n, c]}"))
    lower = np.minimum(np.maximum(s.Ev - s.off_E, 0.0), s.M)
    bad = (s.E < lower - lemma_slack(s.Ev, s.off_E)) | (s.E < 0) | (s.E > s.M)
    if bad.any():
        n = int(np.flatnonzero(bad)[0])
        out.append(Violation(t, "lemma_energy",
                             f"E[{n + 1}]={s.E[n]} vs lower bound {lower[n]}, capacity {s.M}"))


def phase2_step(net: EsaNetwork, s: MesaState, channel, h, violations: list):
    """One Phase II slot; returns (next state, pair admissions, delivered)."""
    p = net.params
    graph = net.graph
    action = net.decide(s.Qv, s.Ev, channel, h)
    net.check_decision(t := s.t, s.Ev, action, violations)
    Qv, Ev, _, _ = net.advance(s.Qv, s.Ev, action)
    net.check_state(t + 1, Qv, Ev, violations)

    spend, e = action.spend, action.harvest
    below = s.Ev < s.off_E
    above = s.Ev > s.off_E + s.M
    e_tilde = np.maximum(e - (s.off_E - s.Ev), 0.0)
    spends = ~above
    masked = int(np.sum(spends & (spend > s.E)))
    drained = np.maximum(s.E - spend, 0.0)
    E = np.where(above, np.minimum(s.E + e, s.M),
                 np.minimum(drained + np.where(below, e_tilde, e), s.M))

    dropping = (s.Ev < s.off_E + p.p_max) | above
    transfers = actual_transfers(s.Q, action.alloc, graph, action.weights)
    sent = transfers * ~dropping[net.src][:, None]
    tx_drop = (transfers - sent).sum(axis=0)
    A = action.admissions + graph.in_incidence @ sent
    deficit = s.off_Q - s.Qv
    A_tilde = np.where(s.Qv < s.off_Q, np.maximum(A - deficit, 0.0), A)
    entry_drop = (A - A_tilde).sum(axis=0)
    Q = np.maximum(s.Q - graph.out_incidence @ transfers, 0.0) + A_tilde
    cols = np.arange(net.n_cols)
    delivered = A_tilde[net.dests, cols].copy()
    Q[net.dests, cols] = 0.0

    nxt = MesaState(Qv, Ev, Q, E, s.off_Q, s.off_E, s.M, t + 1,
                    s.drops + tx_drop + entry_drop, s.masked + masked)
    check_lemma(net, nxt, violations)
    pair_r = action.admissions[net.pair_node, net.pair_col]
    return nxt, pair_r, delivered


@dataclass
class MesaResult:
    metrics: Metrics
    trace: RunTrace | None
    state: MesaState
    violations: list


def mesa_run(config: NetworkConfig, V: float, T: int | None, horizon: int, seed: int,
             trace_stride: int = 0, strict: bool = True, fast: bool | None = None) -> MesaResult:
    """Phase I for T slots (default 50 V), then ``horizon`` Phase II slots.

    Phase II draws channel and energy states from the same streams as an
    ESA run with the same seed; Phase I uses separate streams.
    """
    clock = time.perf_counter()
    if T is None:
        T = config.phase1_t if config.phase1_t is not None else int(round(50 * V))
    if T < 1:
        raise ConfigError("phase1_t", "must be >= 1")
    if fast is None:
        fast = config.rate_power.kind == "linear"
    off_Q, off_E, M = phase1(config, V, T, seed, fast)
    params = config.params(V)
    net = EsaNetwork(config, params)
    ch_rng, en_rng, _, _ = _streams(seed)
    chan, energy = config.channel_process(), config.energy_process()
    chan.reset(ch_rng)
    energy.reset(en_rng)

    s = MesaState.start(off_Q, off_E, M)
    acc = Accumulator(config, horizon, trace_stride, virtual=True)
    violations = []
    check_lemma(net, s, violations)
    if fast and not violations:
        rec = LoopState(net.n_nodes, net.n_cols, len(config.commodities), horizon, trace_stride,
                        len(acc.trace.columns) if acc.trace else 1)
        bad, _ = run_loop(CompiledNet(net), 1, s.Q, s.E, chan, energy, ch_rng, en_rng, horizon,
                          rec, s.Qv, s.Ev, off_Q, off_E, M, LEMMA_ULPS * _EPS)
        if bad >= 0:
            cut = min(horizon, bad + 1) if strict else horizon
            res = mesa_run(config, V, T, cut, seed, trace_stride, strict, fast=False)
            if strict or not res.violations:
                raise RuntimeError(f"compiled loop flagged slot {bad} but the reference path did not")
            return res
        acc.absorb(rec, horizon)
        s.t, s.drops, s.masked = horizon, rec.drops.copy(), int(rec.masked[0])
    else:
        for _ in range(horizon):
            acc.state(s.Q, s.E, s.Qv, s.Ev)
            s, pair_r, delivered = phase2_step(net, s, chan.step(ch_rng), energy.step(en_rng),
                                               violations)
            acc.slot(pair_r, delivered)
        acc.drops = s.drops.copy()
    metrics = acc.finish("mesa", V, seed, s.Q, violations, s.masked)
    metrics.wall_clock = time.perf_counter() - clock
    if violations and strict:
        raise InvariantViolationError(violations, metrics)
    return MesaResult(metrics, acc.trace, s, violations)
