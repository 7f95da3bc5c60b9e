import logging
import os
from contextlib import contextmanager
from pathlib import Path
from typing import Optional

from sqlalchemy import create_engine, event
from sqlalchemy.engine import Engine
from sqlalchemy.orm import declarative_base, sessionmaker

from config import OUTPUT_DIR

REGISTRY_FILE = "runs.db"

logger = logging.getLogger(__name__)


def registry_url(raw: Optional[str] = None, output_dir: str = OUTPUT_DIR) -> str:
    """Registry location: ``DATABASE_URL`` if set, else a SQLite file next to the run artifacts."""
    url = raw or f"sqlite:///{Path(output_dir) / REGISTRY_FILE}"
    # Render still hands out postgres:// URIs
    if url.startswith("postgres://"):
        url = url.replace("postgres://", "postgresql://", 1)
    return url


def make_engine(url: str) -> Engine:
    if not url.startswith("sqlite"):
        return create_engine(url, pool_pre_ping=True)
    registry = create_engine(url, connect_args={"check_same_thread": False})

    # result rows are removed with their run only when SQLite enforces foreign keys
    @event.listens_for(registry, "connect")
    def _foreign_keys(dbapi_connection, _record):
        cursor = dbapi_connection.cursor()
        cursor.execute("PRAGMA foreign_keys=ON")
        cursor.close()

    return registry


DATABASE_URL = registry_url(os.getenv("DATABASE_URL"))

engine = make_engine(DATABASE_URL)
SessionLocal = sessionmaker(autocommit=False, autoflush=False, bind=engine)
Base = declarative_base()


def init_registry(bind: Optional[Engine] = None) -> Engine:
    """Create the registry tables (and the SQLite file's directory) if missing."""
    bind = bind or engine
    database = bind.url.database
    if bind.url.get_backend_name() == "sqlite" and database and database != ":memory:":
        Path(database).parent.mkdir(parents=True, exist_ok=True)
    import models  # noqa: F401  registers the tables on Base

    Base.metadata.create_all(bind=bind)
    logger.debug("run registry ready at %s", bind.url.render_as_string(hide_password=True))
    return bind


def get_db():
    db = SessionLocal()
    try:
        yield db
    finally:
        db.close()


@contextmanager
def session_scope():
    """Commit on success, roll back on error."""
    db = SessionLocal()
    try:
        yield db
        db.commit()
    except Exception:
        db.rollback()
        raise
    finally:
        db.close()
