import math

import numpy as np
import pytest

from conftest import build, fig1_raw, line_raw, toy_raw
from ehsched.oracle import (InstanceTooLarge, brute_force_bound, channel_states,
                            compute_upper_bound, node_capacity)

# values frozen before the simulator was written
TOY_BOUND = math.log(3.0)                      # link rate 2 every slot
LINE_BOUND = 2 * math.log(1.75)                # 1.5 average capacity shared by both flows
FIG1_BOUND = 2.035522
FIG1_RATES = [0.75, 0.75, 1.5, 0.0, 0.0]


def beta_sum(cfg):
    return sum(k.beta for k in cfg.commodities)


def test_toy_bound(toy):
    res = compute_upper_bound(toy, tolerance=1e-8)
    assert res.bound == pytest.approx(TOY_BOUND, abs=1e-6)
    assert res.rates[0] == pytest.approx(2.0, abs=1e-4)


def test_line_bound(line):
    res = compute_upper_bound(line, tolerance=1e-8)
    assert res.bound == pytest.approx(LINE_BOUND, abs=1e-6)
    assert res.per_commodity == pytest.approx([0.75, 0.75], abs=1e-3)


@pytest.mark.parametrize("name", ["toy", "line"])
def test_brute_force_matches(name, request):
    cfg = request.getfixturevalue(name)
    step = 1e-3
    bf = brute_force_bound(cfg, step)
    ub = compute_upper_bound(cfg, tolerance=1e-8).bound
    assert abs(ub - bf) <= 2 * step * beta_sum(cfg)
    assert bf <= ub + 1e-9


def test_brute_force_refines_with_grid(line):
    assert brute_force_bound(line, 1e-3) >= brute_force_bound(line, 2e-3)


def test_node_capacity_under_energy_limit(line):
    # mean harvest 1 per slot; spending it all when the channel is good gives 2 * 0.5 + 1 * 0.5
    assert node_capacity(line, 0, 0.01) == pytest.approx(1.5, abs=1e-9)


def test_zero_energy_gives_zero():
    cfg = build(toy_raw(h=0.0))
    assert compute_upper_bound(cfg).bound == pytest.approx(0.0, abs=1e-9)
    assert brute_force_bound(cfg, 1e-2) == 0.0


def test_fig1_bound(fig1):
    res = compute_upper_bound(fig1, tolerance=1e-7)
    assert 1.98 <= res.bound <= 2.08
    assert res.bound == pytest.approx(FIG1_BOUND, abs=1e-5)
    assert res.per_commodity == pytest.approx(FIG1_RATES, abs=2e-3)
    assert res.gap <= 1e-7


def test_more_power_levels_never_lower_the_bound():
    raw = line_raw()
    base = compute_upper_bound(build(raw), tolerance=1e-8).bound
    raw["rate_power"]["power_levels"] = [0, 0.5, 1]
    wider = compute_upper_bound(build(raw), tolerance=1e-8).bound
    assert wider >= base - 1e-9


def test_more_energy_never_lowers_the_bound():
    lo = compute_upper_bound(build(toy_raw(h=0.5)), tolerance=1e-8).bound
    hi = compute_upper_bound(build(toy_raw(h=1.0)), tolerance=1e-8).bound
    assert hi >= lo
    assert lo == pytest.approx(math.log(2.0), abs=1e-6)


def test_action_cap(fig1):
    with pytest.raises(InstanceTooLarge, match="joint actions"):
        compute_upper_bound(fig1, action_cap=10)


def test_channel_state_cap(fig1):
    with pytest.raises(InstanceTooLarge, match="channel states"):
        channel_states(fig1, max_states=16)


def test_brute_force_refuses_branching_graph(fig1):
    with pytest.raises(InstanceTooLarge):
        brute_force_bound(fig1)


def test_channel_states_are_a_distribution(fig1, table):
    for cfg in (fig1, table):
        probs, emits = channel_states(cfg)
        assert probs.sum() == pytest.approx(1.0)
        assert len(emits) == probs.size


def test_bundled_scenario_rebuilt_from_raw_agrees():
    res = compute_upper_bound(build(fig1_raw()), tolerance=1e-6)
    assert res.bound == pytest.approx(FIG1_BOUND, abs=1e-4)
