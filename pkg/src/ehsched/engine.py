"""Seeded simulation runs, V sweeps and scaling fits."""

from __future__ import annotations

import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .kernel import CompiledNet, LoopState, run_loop
from .esa import EsaNetwork, InvariantViolationError, QueueState, esa_step
from .mesa import _streams, mesa_run
from .metrics import Accumulator, Metrics, RunTrace
from .model import NetworkConfig

DEFAULT_HORIZON = 500_000
POLICIES = ("esa", "mesa")


class RunFailed(RuntimeError):
    """A run inside a sweep failed; carries the (V, seed) that broke."""

    def __init__(self, V, seed, cause):
        self.V, self.seed, self.cause = V, seed, cause
        super().__init__(f"run V={V} seed={seed} failed: {cause}")


def esa_run(config: NetworkConfig, V: float, horizon: int, seed: int, trace_stride: int = 0,
            strict: bool = True, fast: bool | None = None):
    """Plain ESA from empty queues; returns (metrics, trace, violations).

    ``fast`` picks the compiled loop (default for linear rate models).  If
    the compiled loop flags a violation the run is repeated on the reference
    path, which reports it in full.
    """
    clock = time.perf_counter()
    params = config.params(V)
    net = EsaNetwork(config, params)
    if fast is None:
        fast = config.rate_power.kind == "linear"
    ch_rng, en_rng, _, _ = _streams(seed)
    chan, energy = config.channel_process(), config.energy_process()
    chan.reset(ch_rng)
    energy.reset(en_rng)
    state = QueueState.zeros(net.n_nodes, net.n_cols)
    acc = Accumulator(config, horizon, trace_stride)
    violations = []
    if fast:
        rec = LoopState(net.n_nodes, net.n_cols, len(config.commodities), horizon, trace_stride,
                        len(acc.trace.columns) if acc.trace else 1)
        bad, _ = run_loop(CompiledNet(net), 0, state.Q, state.E, chan, energy, ch_rng, en_rng,
                          horizon, rec)
        if bad >= 0:
            # replay on the reference path, only up to the bad slot when strict
            cut = min(horizon, bad + 1) if strict else horizon
            res = esa_run(config, V, cut, seed, trace_stride, strict, fast=False)
            if strict or not res[2]:
                raise RuntimeError(f"compiled loop flagged slot {bad} but the reference path did not")
            return res
        acc.absorb(rec, horizon)
    else:
        pair_node, pair_col = net.pair_node, net.pair_col
        for _ in range(horizon):
            acc.state(state.Q, state.E)
            action, state, _, delivered = esa_step(net, state, chan.step(ch_rng),
                                                   energy.step(en_rng), violations)
            acc.slot(action.admissions[pair_node, pair_col], delivered)
    metrics = acc.finish("esa", V, seed, state.Q, violations)
    metrics.wall_clock = time.perf_counter() - clock
    if violations and strict:
        raise InvariantViolationError(violations, metrics)
    return metrics, acc.trace, violations


def run(config: NetworkConfig, policy: str, V: float, horizon: int = DEFAULT_HORIZON,
        seed: int = 0, trace_stride: int = 0, phase1_t: int | None = None,
        strict: bool = True) -> tuple[Metrics, RunTrace | None]:
    """One deterministic run of ``policy`` ("esa" or "mesa")."""
    if horizon < 0:
        raise ValueError("horizon must be >= 0")
    if policy == "esa":
        m, trace, _ = esa_run(config, V, horizon, seed, trace_stride, strict)
        return m, trace
    if policy == "mesa":
        res = mesa_run(config, V, phase1_t, horizon, seed, trace_stride, strict)
        return res.metrics, res.trace
    raise ValueError(f"unknown policy {policy!r}; expected one of {POLICIES}")


@dataclass
class LinearFit:
    slope: float
    intercept: float
    r2: float

    def to_json(self):
        return {"slope": self.slope, "intercept": self.intercept, "r2": self.r2}


def linear_fit(x, y) -> LinearFit:
    """Least-squares line through (x, y) with its coefficient of determination."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid ** 2)) / ss_tot if ss_tot > 0 else 1.0
    return LinearFit(float(slope), float(intercept), r2)


@dataclass
class SweepResult:
    rows: list[Metrics]
    fits: dict[str, LinearFit]

    def mean_by_v(self, attr: str):
        vs = sorted({m.V for m in self.rows})
        return vs, [float(np.mean([getattr(m, attr) for m in self.rows if m.V == v])) for v in vs]


def _job(args):
    config, policy, V, horizon, seed, phase1_t = args
    try:
        return run(config, policy, V, horizon, seed, phase1_t=phase1_t)[0]
    except Exception as exc:  # re-raised with (V, seed) context by the caller
        return RunFailed(V, seed, exc)


def sweep_fits(rows: list[Metrics], policy: str) -> dict[str, LinearFit]:
    if len({m.V for m in rows}) < 2:
        return {}
    V = np.array([m.V for m in rows])
    fits = {
        "backlog_vs_V": linear_fit(V, [m.backlog for m in rows]),
        "energy_vs_V": linear_fit(V, [m.energy_avg for m in rows]),
    }
    if policy == "mesa":
        logsq = np.log(V) ** 2
        fits["backlog_vs_lnV2"] = linear_fit(logsq, [m.backlog for m in rows])
        fits["virtual_backlog_vs_V"] = linear_fit(V, [m.virtual_backlog for m in rows])
    return fits


def sweep(config: NetworkConfig, policy: str, v_list, horizon: int = DEFAULT_HORIZON,
          seeds=(0,), phase1_t: int | None = None, workers: int = 1) -> SweepResult:
    """One run per (V, seed), ordered by V then seed, plus scaling fits."""
    v_list = list(v_list)
    if not v_list:
        raise ValueError("V list must be nonempty")
    jobs = [(config, policy, float(v), horizon, int(s), phase1_t) for v in v_list for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            out = list(pool.map(_job, jobs))
    else:
        out = [_job(j) for j in jobs]
    for r in out:
        if isinstance(r, RunFailed):
            raise r
    return SweepResult(out, sweep_fits(out, policy))


def default_workers() -> int:
    return max(1, min(8, (os.cpu_count() or 1)))


__all__ = ["run", "esa_run", "sweep", "linear_fit", "LinearFit", "SweepResult", "RunFailed",
           "DEFAULT_HORIZON", "POLICIES"]
