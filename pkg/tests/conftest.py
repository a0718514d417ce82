from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from riskflow.network import load_network, network_from_dict
from riskflow.scenarios import (RegimePerturbationSpec, build_joint_scenarios, linear_scenarios, load_scenarios,
                                read_severity_csv, sample_regime_perturbations)
from riskflow.dro import AmbiguitySpec

DATA = Path(__file__).resolve().parents[1] / "src" / "riskflow" / "data"

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def parallel_net(n_links=3, demand=10.0):
    return network_from_dict({
        "nodes": ["1", "2"],
        "links": [{"id": f"L{i + 1}", "from": "1", "to": "2", "model": "linear"} for i in range(n_links)],
        "od": [{"origin": "1", "destination": "2", "demand": demand}],
    })


@pytest.fixture(scope="session")
def toy_net():
    return load_network(DATA / "toy_network.json")


@pytest.fixture(scope="session")
def toy_scen(toy_net):
    return load_scenarios(DATA / "toy_scenarios.json", toy_net)


@pytest.fixture(scope="session")
def grid_net():
    return load_network(DATA / "grid_network.json")


@pytest.fixture(scope="session")
def grid_scen(grid_net):
    return build_joint_scenarios(grid_net, read_severity_csv(DATA / "grid_severity.csv"))


@pytest.fixture(scope="session")
def grid_raw():
    with open(DATA / "grid_network.json") as fh:
        return json.load(fh)


@pytest.fixture(scope="session")
def regime_spec(toy_scen):
    with open(DATA / "toy_regimes.json") as fh:
        rps = RegimePerturbationSpec.from_dict(json.load(fh))
    samples, radii = sample_regime_perturbations(rps)
    blocks, freqs = {}, {}
    for k, w in enumerate(rps.regimes):
        n = len(samples[w])
        blocks[w] = linear_scenarios(toy_scen.xi[k] + samples[w], np.full(n, 1.0 / n))
        freqs[w] = float(toy_scen.probs[k])
    return AmbiguitySpec.regimes(blocks, radii, freqs)


def random_linear_instance(rng, n_links=None, n_scen=None):
    """Parallel-link network with random linear scenario coefficients."""
    n_links = n_links or int(rng.integers(2, 5))
    n_scen = n_scen or int(rng.integers(2, 5))
    net = parallel_net(n_links, float(rng.uniform(2.0, 15.0)))
    xi = np.empty((n_scen, 2 * n_links))
    xi[:, 0::2] = rng.uniform(5.0, 40.0, size=(n_scen, n_links))
    xi[:, 1::2] = rng.uniform(0.1, 1.5, size=(n_scen, n_links))
    p = rng.dirichlet(np.ones(n_scen))
    return net, linear_scenarios(xi, p)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[number])
