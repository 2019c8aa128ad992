"""Shared fixtures: one small deterministic corpus reused across modules."""

import pytest

from pcfmem import datagen
from pcfmem.physics import CallCounter


@pytest.fixture(scope="session")
def small_corpus():
    """96 traces (12 per family) with queries and splits, master seed 123."""
    counter = CallCounter()
    traces = datagen.gen_corpus(96, 123, counter)
    queries = datagen.gen_queries(traces, 123, counter)
    splits = datagen.split(traces, 123)
    return {
        "traces": traces,
        "queries": queries,
        "splits": splits,
        "gen_calls": counter.total_calls,
    }


@pytest.fixture(scope="session")
def traces_by_id(small_corpus):
    return {t.id: t for t in small_corpus["traces"]}
