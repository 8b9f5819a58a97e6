import random

import pytest

from dynaslide import datastore, pack


@pytest.fixture(scope="session")
def store():
    cfg = datastore.CorpusConfig(seed=101, blocks_per_city=3, records_per_block=520)
    return datastore.build_store(cfg)


@pytest.fixture(scope="session")
def small_store():
    cfg = datastore.CorpusConfig(seed=55, blocks_per_city=2, records_per_block=500)
    return datastore.build_store(cfg)


@pytest.fixture(scope="session")
def default_pack():
    return pack.load_pack()


@pytest.fixture()
def rng():
    return random.Random(0xBEEF)
