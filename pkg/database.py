"""
Results store for training and evaluation runs, backed by SQLAlchemy or a JSON file
"""
import os
import json
import uuid
import pandas as pd
from datetime import datetime
from typing import List, Dict, Any, Optional
import logging

try:
    from sqlalchemy import create_engine, text
    from sqlalchemy.pool import StaticPool
    SQLALCHEMY_AVAILABLE = True
except ImportError:
    SQLALCHEMY_AVAILABLE = False

logger = logging.getLogger(__name__)

METRIC_FIELDS = ['name', 'asa', 'br', 'bp', 'co', 'superpixel_count', 'boundary_tolerance']


class ResultsConfig:
    """Results store configuration management"""

    def __init__(self, url: Optional[str] = None, json_path: Optional[str] = None):
        self.url = url or os.getenv('BIOSPIX_RESULTS_URL')
        self.json_path = json_path or os.getenv('BIOSPIX_RESULTS_JSON', 'biospix_results.json')

    def get_backend_type(self) -> str:
        """SQL when a URL is configured and SQLAlchemy is importable, else the JSON file"""
        if self.url and SQLALCHEMY_AVAILABLE:
            return 'sql'
        return 'json'


class SQLResultsBackend:
    """Runs and per-image metrics in two SQL tables"""

    def __init__(self, url: str):
        self.url = url
        kwargs = {'poolclass': StaticPool} if url.startswith('sqlite') else {}
        self.engine = create_engine(url, **kwargs)
        self._init_tables()

    def _init_tables(self):
        with self.engine.begin() as conn:
            conn.execute(text("""
                CREATE TABLE IF NOT EXISTS runs (
                    run_id VARCHAR(64) PRIMARY KEY,
                    kind VARCHAR(32) NOT NULL,
                    created_at VARCHAR(32) NOT NULL,
                    config TEXT,
                    summary TEXT
                )
            """))
            conn.execute(text("""
                CREATE TABLE IF NOT EXISTS run_metrics (
                    run_id VARCHAR(64) NOT NULL,
                    name VARCHAR(255) NOT NULL,
                    asa FLOAT, br FLOAT, bp FLOAT, co FLOAT,
                    superpixel_count INTEGER,
                    boundary_tolerance INTEGER
                )
            """))
        logger.info("Results tables initialized successfully")

    def record_run(self, run: Dict[str, Any]) -> None:
        with self.engine.begin() as conn:
            conn.execute(text("""
                INSERT INTO runs (run_id, kind, created_at, config, summary)
                VALUES (:run_id, :kind, :created_at, :config, :summary)
            """), {
                'run_id': run['run_id'],
                'kind': run['kind'],
                'created_at': run['created_at'],
                'config': json.dumps(run['config'], default=str),
                'summary': json.dumps(run['summary'], default=str)
            })

    def record_metrics(self, run_id: str, rows: List[Dict[str, Any]]) -> None:
        with self.engine.begin() as conn:
            for row in rows:
                conn.execute(text("""
                    INSERT INTO run_metrics (run_id, name, asa, br, bp, co, superpixel_count, boundary_tolerance)
                    VALUES (:run_id, :name, :asa, :br, :bp, :co, :superpixel_count, :boundary_tolerance)
                """), {'run_id': run_id, **row})

    def list_runs(self) -> List[Dict[str, Any]]:
        with self.engine.connect() as conn:
            result = conn.execute(text("SELECT run_id, kind, created_at, config, summary FROM runs ORDER BY created_at"))
            runs = []
            for row in result.fetchall():
                run = dict(row._mapping)
                run['config'] = json.loads(run['config'] or '{}')
                run['summary'] = json.loads(run['summary'] or '{}')
                runs.append(run)
            return runs

    def get_metrics(self, run_id: str) -> List[Dict[str, Any]]:
        with self.engine.connect() as conn:
            result = conn.execute(text("""
                SELECT name, asa, br, bp, co, superpixel_count, boundary_tolerance
                FROM run_metrics WHERE run_id = :run_id ORDER BY name
            """), {'run_id': run_id})
            return [dict(row._mapping) for row in result.fetchall()]


class JSONResultsBackend:
    """Single JSON document holding runs and metrics"""

    def __init__(self, path: str):
        self.path = path

    def _load(self) -> Dict[str, Any]:
        if os.path.exists(self.path):
            with open(self.path, 'r') as f:
                return json.load(f)
        return {'runs': [], 'metrics': {}}

    def _save(self, data: Dict[str, Any]) -> None:
        directory = os.path.dirname(self.path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        with open(self.path, 'w') as f:
            json.dump(data, f, indent=2, default=str)

    def record_run(self, run: Dict[str, Any]) -> None:
        data = self._load()
        data['runs'].append(run)
        self._save(data)

    def record_metrics(self, run_id: str, rows: List[Dict[str, Any]]) -> None:
        data = self._load()
        data['metrics'].setdefault(run_id, []).extend(rows)
        self._save(data)

    def list_runs(self) -> List[Dict[str, Any]]:
        return sorted(self._load()['runs'], key=lambda run: run['created_at'])

    def get_metrics(self, run_id: str) -> List[Dict[str, Any]]:
        return sorted(self._load()['metrics'].get(run_id, []), key=lambda row: row['name'])


class ResultsStore:
    """Unified results store; backend failures are logged, never raised"""

    def __init__(self, url: Optional[str] = None, json_path: Optional[str] = None):
        self.config = ResultsConfig(url, json_path)
        self.backend_type = self.config.get_backend_type()
        self.backend = None
        if self.backend_type == 'sql':
            try:
                self.backend = SQLResultsBackend(self.config.url)
                logger.info("Using SQL results store")
            except Exception as e:
                logger.error(f"Error opening results database: {e}; falling back to JSON")
                self.backend_type = 'json'
        if self.backend is None:
            self.backend = JSONResultsBackend(self.config.json_path)
            logger.info(f"Using JSON results store at {self.config.json_path}")

    def record_run(self, kind: str, config: Dict[str, Any], summary: Optional[Dict[str, Any]] = None) -> Optional[str]:
        """Store a run and return its id (None on failure)"""
        run = {
            'run_id': uuid.uuid4().hex,
            'kind': kind,
            'created_at': datetime.now().isoformat(),
            'config': config,
            'summary': summary or {}
        }
        try:
            self.backend.record_run(run)
            return run['run_id']
        except Exception as e:
            logger.error(f"Error recording run: {e}")
            return None

    def record_metrics(self, run_id: str, report: pd.DataFrame) -> bool:
        """Store per-image metric rows for a run"""
        try:
            rows = []
            for record in report.to_dict(orient='records'):
                row = {key: record.get(key) for key in METRIC_FIELDS}
                row['name'] = str(row['name'])
                row['superpixel_count'] = int(row['superpixel_count'])
                row['boundary_tolerance'] = int(row['boundary_tolerance'])
                for key in ('asa', 'br', 'bp', 'co'):
                    row[key] = float(row[key])
                rows.append(row)
            self.backend.record_metrics(run_id, rows)
            return True
        except Exception as e:
            logger.error(f"Error recording metrics: {e}")
            return False

    def list_runs(self) -> pd.DataFrame:
        try:
            return pd.DataFrame(self.backend.list_runs(), columns=['run_id', 'kind', 'created_at', 'config', 'summary'])
        except Exception as e:
            logger.error(f"Error listing runs: {e}")
            return pd.DataFrame()

    def get_metrics(self, run_id: str) -> pd.DataFrame:
        try:
            return pd.DataFrame(self.backend.get_metrics(run_id), columns=METRIC_FIELDS)
        except Exception as e:
            logger.error(f"Error getting metrics: {e}")
            return pd.DataFrame()

    def get_store_info(self) -> Dict[str, Any]:
        """Backend type and location"""
        return {
            'type': self.backend_type,
            'location': self.config.url if self.backend_type == 'sql' else self.config.json_path
        }
