"""Run summaries and per-slot traces."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .model import NetworkConfig, total_utility

CSV_FIELDS = ("V", "seed", "policy", "utility", "backlog", "energy_avg", "drops", "violations",
              "utility_admitted", "virtual_backlog", "admitted", "delivered", "max_q", "max_e")
UTILITY_CHECKPOINT = 1000


@dataclass
class Metrics:
    policy: str
    V: float
    seed: int
    horizon: int
    rates: list[float] = field(default_factory=list)
    utility: float = 0.0
    utility_admitted: float = 0.0
    backlog: float = 0.0
    energy_avg: float = 0.0
    energy_per_node: list[float] = field(default_factory=list)
    max_q: float = 0.0
    max_e: float = 0.0
    violations: int = 0
    admitted: float = 0.0
    delivered: float = 0.0
    drops: float = 0.0
    final_backlog: float = 0.0
    virtual_backlog: float = 0.0
    virtual_energy_avg: float = 0.0
    masked_deficits: int = 0
    energy_tail_mean: list[float] = field(default_factory=list)
    energy_tail_std: list[float] = field(default_factory=list)
    utility_path: list[tuple[int, float]] = field(default_factory=list)
    wall_clock: float = 0.0

    def row(self) -> dict:
        d = asdict(self)
        return {k: d[k] for k in CSV_FIELDS}

    def to_json(self) -> dict:
        d = asdict(self)
        d.pop("wall_clock")
        return d


@dataclass
class RunTrace:
    stride: int = 0
    columns: list[str] = field(default_factory=list)
    records: list[list[float]] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for r in self.records:
            w.writerow([repr(x) for x in r])
        return buf.getvalue()


def trace_columns(config: NetworkConfig, virtual: bool = False) -> list[str]:
    n = config.graph.n_nodes
    cols = ["t"] + [f"E{i + 1}" for i in range(n)]
    cols += [f"Q{i + 1}_{d + 1}" for i in range(n) for d in config.dests]
    if virtual:
        cols += [f"Ev{i + 1}" for i in range(n)]
        cols += [f"Qv{i + 1}_{d + 1}" for i in range(n) for d in config.dests]
    return cols


class Accumulator:
    """Running sums for time averages over slots 0..horizon-1."""

    def __init__(self, config: NetworkConfig, horizon: int, trace_stride: int = 0,
                 virtual: bool = False):
        if trace_stride < 0:
            raise ValueError("trace stride must be >= 0")
        self.config = config
        self.horizon = horizon
        n = config.graph.n_nodes
        k = len(config.commodities)
        self.sum_r = np.zeros(k)
        self.sum_q = 0.0
        self.sum_e = np.zeros(n)
        self.sum_qv = 0.0
        self.sum_ev = np.zeros(n)
        self.max_q = 0.0
        self.max_e = 0.0
        self.delivered = 0.0
        self.drops = np.zeros(len(config.dests))
        self.tail_start = horizon // 2
        self.tail_n = 0
        self.tail_e = np.zeros(n)
        self.tail_e2 = np.zeros(n)
        self.utility_path = []
        self.trace = RunTrace(trace_stride, trace_columns(config, virtual)) if trace_stride else None
        self.t = 0

    def state(self, Q, E, Qv=None, Ev=None):
        t = self.t
        self.sum_q += Q.sum()
        self.sum_e += E
        m = Q.max()
        if m > self.max_q:
            self.max_q = float(m)
        m = E.max()
        if m > self.max_e:
            self.max_e = float(m)
        if Qv is not None:
            self.sum_qv += Qv.sum()
            self.sum_ev += Ev
        if t >= self.tail_start:
            self.tail_n += 1
            self.tail_e += E
            self.tail_e2 += E * E
        if self.trace is not None and t % self.trace.stride == 0:
            rec = [t] + E.tolist() + Q.ravel().tolist()
            if Qv is not None:
                rec += Ev.tolist() + Qv.ravel().tolist()
            self.trace.records.append(rec)

    def slot(self, pair_rates, delivered, drops=None):
        self.sum_r += pair_rates
        self.delivered += float(delivered.sum())
        if drops is not None:
            self.drops += drops
        self.t += 1
        if self.t % UTILITY_CHECKPOINT == 0:
            u = total_utility(self.config.commodities, self.sum_r / self.t)
            self.utility_path.append((self.t, u))

    def absorb(self, rec, slots: int):
        """Take over the running sums of a compiled loop that ran ``slots`` slots."""
        self.t = slots
        self.sum_r = rec.sum_r.copy()
        self.sum_q = float(rec.acc_q[0])
        self.sum_e = rec.acc_e.copy()
        self.sum_qv = float(rec.acc_qv[0])
        self.sum_ev = rec.acc_ev.copy()
        self.max_q, self.max_e = float(rec.acc_max[0]), float(rec.acc_max[1])
        self.delivered = float(rec.delivered.sum())
        self.drops = rec.drops.copy()
        self.tail_n = max(slots - self.tail_start, 0)
        self.tail_e, self.tail_e2 = rec.tail_e.copy(), rec.tail_e2.copy()
        self.utility_path = [
            ((i + 1) * UTILITY_CHECKPOINT,
             total_utility(self.config.commodities, rec.checkpoints[i] / ((i + 1) * UTILITY_CHECKPOINT)))
            for i in range(slots // UTILITY_CHECKPOINT)]
        if self.trace is not None:
            self.trace.records = [[int(r[0])] + r[1:].tolist() for r in rec.trace[: rec.trace_row]]

    def finish(self, policy, V, seed, final_Q, violations, masked=0) -> Metrics:
        T = max(self.t, 1)
        commodities = self.config.commodities
        rates = self.sum_r / T
        utility_adm = total_utility(commodities, rates) if self.t else 0.0
        net_rates = rates.copy()
        if self.drops.any():
            col = {d: i for i, d in enumerate(self.config.dests)}
            cols = np.array([col[k.dest] for k in commodities])
            for c in range(len(self.drops)):
                mine = cols == c
                total = self.sum_r[mine].sum()
                if total > 0:
                    net_rates[mine] -= self.drops[c] * self.sum_r[mine] / total / T
            net_rates = np.maximum(net_rates, 0.0)
        utility = total_utility(commodities, net_rates) if self.t else 0.0
        tail = max(self.tail_n, 1)
        tail_mean = self.tail_e / tail
        tail_var = np.maximum(self.tail_e2 / tail - tail_mean ** 2, 0.0)
        e_avg = self.sum_e / T if self.t else np.zeros_like(self.sum_e)
        return Metrics(
            policy=policy, V=float(V), seed=int(seed), horizon=self.t,
            rates=rates.tolist(), utility=float(utility), utility_admitted=float(utility_adm),
            backlog=float(self.sum_q / T) if self.t else 0.0,
            energy_avg=float(e_avg.mean()), energy_per_node=e_avg.tolist(),
            max_q=self.max_q, max_e=self.max_e, violations=len(violations),
            admitted=float(self.sum_r.sum()), delivered=self.delivered,
            drops=float(self.drops.sum()), final_backlog=float(final_Q.sum()),
            virtual_backlog=float(self.sum_qv / T) if self.t else 0.0,
            virtual_energy_avg=float((self.sum_ev / T).mean()) if self.t else 0.0,
            masked_deficits=int(masked),
            energy_tail_mean=tail_mean.tolist(), energy_tail_std=np.sqrt(tail_var).tolist(),
            utility_path=self.utility_path,
        )


def metrics_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    w.writeheader()
    for m in rows:
        r = m.row()
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return buf.getvalue()


def metrics_json(rows, extra=None) -> str:
    doc = {"runs": [m.to_json() for m in rows]}
    if extra:
        doc.update(extra)
    return json.dumps(doc, indent=2, sort_keys=True)
