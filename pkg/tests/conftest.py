from __future__ import annotations

import itertools
from datetime import datetime, timedelta, timezone

import pytest

from prefmem.dataset import load_fixture, mock_records
from prefmem.llm_gateway import MockGateway
from prefmem.prefstore import PreferenceStore
from prefmem.taxonomy import compile_schema, load_default_taxonomy


@pytest.fixture(scope="session")
def taxonomy():
    return load_default_taxonomy()


@pytest.fixture(scope="session")
def schema(taxonomy):
    return compile_schema(taxonomy)


@pytest.fixture(scope="session")
def corpus(taxonomy):
    return load_fixture(taxonomy)


@pytest.fixture
def gateway(corpus):
    return MockGateway(mock_records(corpus.points))


def ticking_clock(start=datetime(2024, 5, 1, tzinfo=timezone.utc)):
    ticks = itertools.count()
    return lambda: start + timedelta(seconds=next(ticks))


@pytest.fixture
def memory_store(taxonomy, gateway):
    return PreferenceStore(None, taxonomy, gateway.dimension, clock=ticking_clock())
