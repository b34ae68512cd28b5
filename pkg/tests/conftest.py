import logging

import pytest
from hypothesis import HealthCheck, settings

from storeforensics.topology import TopologySpec, build_topology

settings.register_profile(
    "default", deadline=None, suppress_health_check=[HealthCheck.too_slow], derandomize=True
)
settings.load_profile("default")


@pytest.fixture(autouse=True)
def _quiet_logs():
    logging.getLogger("storeforensics").setLevel(logging.ERROR)
    yield


MINIMAL = TopologySpec(clients=1, mds=1, data_servers=2, osds=1, lnets=4)


@pytest.fixture(scope="session")
def minimal_topo():
    return build_topology(MINIMAL)


@pytest.fixture(scope="session")
def ci_topo():
    return build_topology(TopologySpec.ci())


@pytest.fixture(scope="session")
def peta_topo():
    return build_topology(TopologySpec.petastore())
