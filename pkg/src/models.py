"""
SQLAlchemy models for the run registry.

Finished training runs are recorded so that ablation groups can be summarized
across run directories.
"""
from datetime import datetime

from sqlalchemy import Column, DateTime, Float, Integer, String, create_engine
from sqlalchemy.exc import SQLAlchemyError
from sqlalchemy.orm import declarative_base, sessionmaker

from errors import StorageError

Base = declarative_base()


class Run(Base):
    """One finished training run."""
    __tablename__ = 'runs'

    id = Column(Integer, primary_key=True)
    path = Column(String(500), nullable=False, unique=True)
    group = Column(String(100), nullable=False, default='')
    architecture = Column(String(500), nullable=False)
    mode = Column(String(30), nullable=False)
    p = Column(Float, nullable=False)
    q = Column(Float, nullable=False)
    seed = Column(Integer, nullable=False)
    epochs = Column(Integer, nullable=False)
    masked_accuracy = Column(Float)
    compacted_accuracy = Column(Float)
    sparsity = Column(Float)
    alive_params = Column(Integer)
    total_params = Column(Integer)
    synops = Column(Integer)
    mean_score = Column(Float)
    created_at = Column(DateTime, default=datetime.utcnow)

    def to_dict(self):
        return {
            'id': self.id,
            'path': self.path,
            'group': self.group,
            'architecture': self.architecture,
            'mode': self.mode,
            'p': self.p,
            'q': self.q,
            'seed': self.seed,
            'epochs': self.epochs,
            'masked_accuracy': self.masked_accuracy,
            'compacted_accuracy': self.compacted_accuracy,
            'sparsity': self.sparsity,
            'alive_params': self.alive_params,
            'total_params': self.total_params,
            'connectivity': (self.alive_params / self.total_params) if self.total_params else None,
            'synops': self.synops,
            'mean_score': self.mean_score,
        }


# Engines are cached per database file
_engines = {}
_sessions = {}


def get_engine(db_path='runs.db'):
    """Get or create the engine for a registry file."""
    if db_path not in _engines:
        _engines[db_path] = create_engine(f'sqlite:///{db_path}', echo=False)
    return _engines[db_path]


def get_session(db_path='runs.db'):
    """Get a new session on a registry file."""
    if db_path not in _sessions:
        _sessions[db_path] = sessionmaker(bind=get_engine(db_path))
    return _sessions[db_path]()


def init_db(db_path='runs.db'):
    """Create the registry tables if needed."""
    try:
        engine = get_engine(db_path)
        Base.metadata.create_all(engine)
    except SQLAlchemyError as e:
        raise StorageError(f"Could not open run registry {db_path}: {e}", path=str(db_path)) from e
    return engine


def record_run(db_path, **fields):
    """Insert or replace the registry row for a run directory."""
    init_db(db_path)
    session = get_session(db_path)
    try:
        run = session.query(Run).filter_by(path=fields['path']).first()
        if run is None:
            run = Run(path=fields['path'])
            session.add(run)
        for key, value in fields.items():
            setattr(run, key, value)
        session.commit()
        return run.to_dict()
    except SQLAlchemyError as e:
        session.rollback()
        raise StorageError(f"Could not record run in {db_path}: {e}", path=str(db_path)) from e
    finally:
        session.close()


def list_runs(db_path, group=None):
    """Registered runs as dicts, optionally limited to one group."""
    init_db(db_path)
    session = get_session(db_path)
    try:
        query = session.query(Run)
        if group is not None:
            query = query.filter_by(group=group)
        return [run.to_dict() for run in query.order_by(Run.id).all()]
    finally:
        session.close()
