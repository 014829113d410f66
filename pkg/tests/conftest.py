import pytest

from woss.cluster import LocalCluster


@pytest.fixture
def cluster():
    c = LocalCluster(nodes=4, capacity=1 << 24, chunk_size=1024)
    yield c
    c.close()


@pytest.fixture
def make_cluster():
    made = []

    def make(**kw):
        kw.setdefault("chunk_size", 1024)
        c = LocalCluster(**kw)
        made.append(c)
        return c

    yield make
    for c in made:
        c.close()
