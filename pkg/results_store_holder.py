from dotenv import load_dotenv
from pymongo.mongo_client import MongoClient
from pymongo.server_api import ServerApi
from datetime import datetime
import logging
import os
import uuid

from utils.report_writer import clean_json

# load environment variables:
load_dotenv()

DB_CONNECTION_STRING = os.getenv("DB_CONNECTION_STRING")
DB_NAME = os.getenv("DB_NAME")
DB_USERNAME = os.getenv("DB_USERNAME")
DB_PASSWORD = os.getenv("DB_PASSWORD")

MONGO_URI = f"mongodb+srv://{DB_USERNAME}:{DB_PASSWORD}@{DB_CONNECTION_STRING}/{DB_NAME}"

RUNS_COLLECTION = 'runs'

logger = logging.getLogger(__name__)


class ResultsStoreHolder:
    """Optional MongoDB registry of experiment runs; disabled while DB_CONNECTION_STRING is unset"""
    __db = None

    @staticmethod
    def enabled() -> bool:
        return ResultsStoreHolder.__db is not None or bool(DB_CONNECTION_STRING)

    @staticmethod
    def init():
        if ResultsStoreHolder.__db is None and DB_CONNECTION_STRING:
            try:
                # create a new client and connect to server:
                client = MongoClient(MONGO_URI, server_api=ServerApi('1'))

                # send a ping to confirm a successful connection:
                client.admin.command('ping')
                logger.info('connected to the results DB %s', DB_NAME)

                # set __db to be the connection's db:
                ResultsStoreHolder.__db = client[DB_NAME]
            except Exception as e:
                logger.warning('results DB unavailable: %s', e)
        return ResultsStoreHolder.__db

    @staticmethod
    def get_db():
        if ResultsStoreHolder.__db is None:
            ResultsStoreHolder.init()

        return ResultsStoreHolder.__db

    @staticmethod
    def use(db):
        """Swap in another database handle (None disconnects)"""
        ResultsStoreHolder.__db = db


def record_run(kind: str, label: str, metrics: dict, extra: dict | None = None) -> str | None:
    """Inserts a run summary into `runs`; returns its id, or None when no DB is configured"""
    if not ResultsStoreHolder.enabled():
        logger.debug('results DB not configured, %s run %s not recorded', kind, label)
        return None
    db = ResultsStoreHolder.get_db()
    if db is None:
        logger.warning('could not connect to the results DB, %s run %s not recorded', kind, label)
        return None

    run = {
        '_id': str(uuid.uuid4()),
        'kind': kind,
        'label': label,
        'metrics': clean_json(metrics),
        'created_at': datetime.now().isoformat(),
        **clean_json(extra or {}),
    }
    db[RUNS_COLLECTION].insert_one(run)
    logger.info('recorded %s run %s as %s', kind, label, run['_id'])
    return run['_id']
