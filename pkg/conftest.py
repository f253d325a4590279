"""
Shared fixtures: temporary store, stub gateway, seeded service
"""

import pytest

from spark_memory.config import load_config
from spark_memory.gateway import Gateway
from spark_memory.models import CuratedInsight, ExperientialTrace, Outcome
from spark_memory.service import SparkService
from spark_memory.store import SparkStore


def no_sleep(seconds):
    return None


TOY_DOCS = [
    {
        "source": "pandas",
        "path": "api/pandas.DataFrame.groupby",
        "title": "DataFrame.groupby",
        "body": "Group a DataFrame using a mapper or by a Series of columns. "
                "`df.groupby('key').sum()` aggregates every group.",
    },
    {
        "source": "pandas",
        "path": "api/pandas.Series.dt.tz_localize",
        "title": "Series.dt.tz_localize",
        "body": "Localize tz-naive Datetime Series to a time zone. "
                "`s.dt.tz_localize('UTC')` attaches a timezone to naive timestamps.",
    },
    {
        "source": "pandas",
        "path": "api/pandas.merge",
        "title": "pandas.merge",
        "body": "Merge DataFrame objects with a database-style join. `pd.merge(left, right, on='key')`.",
    },
    {
        "source": "pandas",
        "path": "api/pandas.DataFrame.pivot_table",
        "title": "DataFrame.pivot_table",
        "body": "Create a spreadsheet-style pivot table as a DataFrame with `df.pivot_table(values, index)`.",
    },
    {
        "source": "numpy",
        "path": "reference/numpy.argsort",
        "title": "numpy.argsort",
        "body": "Returns the indices that would sort an array. `np.argsort(a, axis=-1)`.",
    },
    {
        "source": "matplotlib",
        "path": "api/matplotlib.pyplot.plot",
        "title": "pyplot.plot",
        "body": "Plot y versus x as lines and markers with `plt.plot(x, y)`.",
    },
]


@pytest.fixture
def toy_docs():
    return [dict(d) for d in TOY_DOCS]


@pytest.fixture
def store_root(tmp_path):
    return tmp_path / "store"


@pytest.fixture
def config(store_root):
    cfg = load_config(env={})
    cfg.store.root = str(store_root)
    return cfg


@pytest.fixture
def gateway(config):
    return Gateway(config.gateway, sleep=no_sleep)


@pytest.fixture
def store(store_root):
    s = SparkStore(store_root)
    yield s
    s.close()


@pytest.fixture
def service(config):
    svc = SparkService(config, sleep=no_sleep)
    yield svc
    svc.close()


@pytest.fixture
def seeded_service(service, toy_docs):
    """Service with the toy corpus ingested and indexed"""
    service.ingest_documentation(toy_docs)
    service.retrieval.refresh(background=False)
    return service


@pytest.fixture
def make_trace():
    def factory(trace_id, problem="How do I sort an array?", hindsight="use argsort",
                outcome=Outcome.NO_RECOMMENDATION_AVAILABLE, recommendation_id=None, n=0):
        return ExperientialTrace(
            trace_id=trace_id,
            timestamp=f"2025-01-01T00:00:{n % 60:02d}Z",
            problem_text=problem,
            code_context="",
            outcome=outcome,
            recommendation_id=recommendation_id,
            hindsight_feedback=hindsight,
            agent_tag="test",
        )
    return factory


@pytest.fixture
def make_insight():
    def factory(insight_id, trace_ids, lesson="use argsort", supersedes=()):
        return CuratedInsight(
            insight_id=insight_id,
            lesson_text=lesson,
            supporting_trace_ids=tuple(trace_ids),
            cluster_id=f"cl-{insight_id}",
            confidence=0.5,
            created_epoch=0,
            supersedes=tuple(supersedes),
        )
    return factory
