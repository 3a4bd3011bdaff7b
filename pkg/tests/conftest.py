import logging

import pytest

from spotstore.cluster import ClusterConfig, LocalCluster

logging.getLogger("spotstore").setLevel(logging.ERROR)


@pytest.fixture
def make_cluster():
    started = []

    def make(**kw):
        c = LocalCluster(ClusterConfig(**kw)).start()
        started.append(c)
        return c

    yield make
    for c in started:
        c.close()
