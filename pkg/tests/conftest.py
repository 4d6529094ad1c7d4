import copy
import itertools

import numpy as np
import pytest

from ehsched.model import load_raw, validate_and_derive

TWO_STATE = [[0.7, 0.3], [0.3, 0.7]]


def fig1_raw():
    return copy.deepcopy(load_raw("paper_fig1"))


def toy_raw(h=1.0):
    """One node, one link to the sink, always-good channel, steady energy h."""
    return {
        "graph": {"nodes": 2, "links": [[1, 2]]},
        "commodities": [{"source": 1, "dest": 2, "utility": "log"}],
        "rate_power": {"kind": "linear", "power_levels": [0, 1], "p_max": 1, "delta": 2},
        "channel_process": {"kind": "iid", "states": ["G"], "probs": [1.0], "values": [2]},
        "energy_process": {"kind": "iid", "states": ["on"], "probs": [1.0], "values": [h]},
        "params": {"r_max": 3, "V": 50},
    }


def line_raw():
    """Three nodes in a line, both upstream nodes send to node 3."""
    return {
        "graph": {"nodes": 3, "links": [[1, 2], [2, 3]]},
        "commodities": [{"source": 1, "dest": 3}, {"source": 2, "dest": 3}],
        "rate_power": {"kind": "linear", "power_levels": [0, 1], "p_max": 1, "delta": 2},
        "channel_process": {"kind": "markov", "states": ["G", "B"], "transition": TWO_STATE,
                            "values": [2, 1]},
        "energy_process": {"kind": "markov", "states": ["G", "B"], "transition": TWO_STATE,
                           "values": [2, 0]},
        "params": {"r_max": 3, "V": 50},
    }


def table_raw():
    """Node 1 drives two interfering links; a table model with two channel states."""
    return {
        "graph": {"nodes": 3, "links": [[1, 2], [1, 3], [2, 3]]},
        "commodities": [{"source": 1, "dest": 3}, {"source": 1, "dest": 2}],
        "rate_power": {
            "kind": "table", "p_max": 2, "delta": 3,
            "actions": [[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0],
                        [0, 0, 1], [1, 0, 1], [0, 1, 1], [1, 1, 1]],
            "rates": [
                [[0, 0, 0], [2, 0, 0], [0, 2, 0], [1, 1, 0],
                 [0, 0, 2], [2, 0, 2], [0, 2, 2], [1, 1, 2]],
                [[0, 0, 0], [1, 0, 0], [0, 1, 0], [0.5, 0.5, 0],
                 [0, 0, 1], [1, 0, 1], [0, 1, 1], [0.5, 0.5, 1]],
            ],
        },
        "channel_process": {"kind": "markov", "scope": "joint", "states": ["G", "B"],
                            "transition": TWO_STATE, "values": [0, 1]},
        "energy_process": {"kind": "iid", "states": ["lo", "hi"], "probs": [0.5, 0.5],
                           "values": [0, 3]},
        "params": {"r_max": 2, "V": 20},
    }


def enumerate_best(model, channel, W, x, E):
    """Plain joint enumeration with the declared tie rule."""
    levels = sorted(set(model.levels)) if model.kind == "linear" else None
    if model.kind == "linear":
        cands = [np.array(p, dtype=float) for p in
                 itertools.product(levels, repeat=model.actions.shape[1])]
    else:
        cands = [a.copy() for a in model.actions]
    best, key = None, None
    for p in cands:
        spend = np.bincount(model.node_of_link, weights=p, minlength=model.n_nodes)
        if np.any(spend > model.p_max) or np.any(spend > E):
            continue
        if model.kind == "linear":
            mu = p * channel
        else:
            mu = model.rate_table[int(channel)][model.action_index(p)]
        g = float(mu @ W + p @ x[model.node_of_link])
        k = (-g, p.sum(), tuple(p))
        if key is None or k < key:
            best, key = p, k
    return best


def build(raw, V=None):
    return validate_and_derive(raw, V)[2]


@pytest.fixture(scope="session")
def fig1():
    return build(fig1_raw())


@pytest.fixture(scope="session")
def toy():
    return build(toy_raw())


@pytest.fixture(scope="session")
def line():
    return build(line_raw())


@pytest.fixture(scope="session")
def table():
    return build(table_raw())


# acceptance lines are collected here and repeated at the end of the run


def pytest_configure(config):
    config._acceptance_lines = []


@pytest.fixture(scope="session")
def acceptance_log(request):
    return request.config._acceptance_lines


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
