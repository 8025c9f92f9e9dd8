import pytest

import results_store_holder
from results_store_holder import RUNS_COLLECTION, ResultsStoreHolder, record_run


@pytest.fixture
def store(fake_db):
    ResultsStoreHolder.use(fake_db)
    yield fake_db
    ResultsStoreHolder.use(None)


def test_record_run_inserts_a_summary(store):
    run_id = record_run('train-seq', 'tiny', {'mPSI': 0.9, 'mSI': float('nan')}, {'order': 'II'})
    documents = store[RUNS_COLLECTION].documents
    assert len(documents) == 1
    document = documents[0]
    assert document['_id'] == run_id
    assert document['kind'] == 'train-seq' and document['label'] == 'tiny'
    assert document['metrics'] == {'mPSI': 0.9, 'mSI': None}
    assert document['order'] == 'II'
    assert 'created_at' in document


def test_every_run_gets_its_own_id(store):
    first = record_run('orders', 'a', {})
    second = record_run('orders', 'a', {})
    assert first != second


def test_nothing_is_recorded_without_a_database(monkeypatch):
    monkeypatch.setattr(results_store_holder, 'DB_CONNECTION_STRING', None)
    ResultsStoreHolder.use(None)
    assert not ResultsStoreHolder.enabled()
    assert record_run('train-seq', 'tiny', {'mPSI': 0.5}) is None
