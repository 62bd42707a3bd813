import numpy as np
import pytest

from routechoice.core import CardType, Category, ChoiceObservation, LANDUSE_DIM, Route
from routechoice.datagen import GroundTruthUtility, NetworkConfig, generate_dataset, generate_network

# criterion number -> (passed, detail); printed in the terminal summary
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:>2}: {'PASS' if ok else 'FAIL'}  {detail}")


def landuse(k=0):
    v = np.zeros(LANDUSE_DIM)
    v[k % LANDUSE_DIM] = 0.5
    return v


def make_route(ivtt=600, fare=120, walk=0, category=Category.BUS, links=None, costs=None, lu=0):
    n = category.transfers
    links = links if links is not None else (("a", "b"),)
    costs = costs if costs is not None else (1.0,) * len(links)
    return Route(ivtt, fare, walk, n, tuple(links), tuple(costs), category, landuse(lu), landuse(lu + 1),
                 landuse(lu + 2) if n else np.zeros(LANDUSE_DIM))


def make_obs(routes, chosen=0, card=CardType.ADULT, od=(0, 1)):
    return ChoiceObservation(od, routes, chosen, card)


@pytest.fixture(scope="session")
def small_network():
    return generate_network(NetworkConfig(), seed=1)


@pytest.fixture(scope="session")
def mnl_observations(small_network):
    return generate_dataset(small_network, GroundTruthUtility(), 3000, 30, seed=2)
