"""
Database configuration and session management for the run registry.

Each output directory carries its own SQLite registry; DATABASE_URL points
every run at a single shared database instead.
"""

import os
from contextlib import contextmanager
from pathlib import Path
from typing import Iterator, Optional, Union

from sqlalchemy import create_engine
from sqlalchemy.engine import Engine
from sqlalchemy.orm import Session, declarative_base, sessionmaker

REGISTRY_FILENAME = "registry.db"

# Base class for all registry models
Base = declarative_base()


def registry_url(directory: Union[str, Path]) -> str:
    """SQLite URL of the registry in an output directory, unless DATABASE_URL is set."""
    override = os.getenv("DATABASE_URL")
    if override:
        return override
    path = Path(directory).resolve() / REGISTRY_FILENAME
    return f"sqlite:///{path}"


def make_engine(url: str) -> Engine:
    """
    Create an engine for a registry URL.

    check_same_thread=False lets concurrent experiments share an in-memory
    SQLite registry in tests.
    """
    connect_args = {"check_same_thread": False} if url.startswith("sqlite") else {}
    return create_engine(url, connect_args=connect_args, echo=False)


def create_tables(engine: Engine) -> None:
    """Create all registry tables that do not exist yet."""
    # models registers its tables on Base.metadata
    import models  # noqa: F401

    Base.metadata.create_all(bind=engine)


def session_factory(engine: Engine) -> sessionmaker:
    """Session factory bound to a registry engine."""
    return sessionmaker(autocommit=False, autoflush=False, bind=engine)


def get_db(engine: Engine) -> Iterator[Session]:
    """Yield a session that is closed afterwards."""
    db = session_factory(engine)()
    try:
        yield db
    finally:
        db.close()


@contextmanager
def session_scope(engine: Engine) -> Iterator[Session]:
    """Session that commits on success and rolls back on any exception."""
    db = session_factory(engine)()
    try:
        yield db
        db.commit()
    except Exception:
        db.rollback()
        raise
    finally:
        db.close()


def open_registry(directory: Optional[Union[str, Path]]) -> Optional[Engine]:
    """Engine with tables created for an output directory, or None without one."""
    if directory is None and not os.getenv("DATABASE_URL"):
        return None
    if directory is not None:
        Path(directory).mkdir(parents=True, exist_ok=True)
    engine = make_engine(registry_url(directory or "."))
    create_tables(engine)
    return engine
