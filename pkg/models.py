"""Run catalog: every run, the artifacts it wrote and its tolerance gates."""
from datetime import datetime, timezone

from sqlalchemy import (Boolean, Column, DateTime, Float, ForeignKey, Integer, String, Text,
                        create_engine, select)
from sqlalchemy.orm import declarative_base, relationship, sessionmaker

from labconfig import find_catalog_url, logger

Base = declarative_base()


def _utcnow():
    return datetime.now(timezone.utc)


# ------------------ Catalog Models ------------------
class Run(Base):
    __tablename__ = 'run'
    id = Column(Integer, primary_key=True)
    kind = Column(String(40), nullable=False)
    config_name = Column(String(255), nullable=False)
    config_sha256 = Column(String(64), nullable=False)
    seed = Column(String(20), nullable=False)
    output_dir = Column(String(500), nullable=False)
    workers = Column(Integer, default=1)
    started_at = Column(DateTime, default=_utcnow)
    finished_at = Column(DateTime, nullable=True)
    exit_code = Column(Integer, nullable=True)
    status = Column(String(20), default='running')  # running, passed, failed
    artifacts = relationship('Artifact', backref='run', lazy='selectin', cascade='all, delete-orphan')
    gates = relationship('GateResult', backref='run', lazy='selectin', cascade='all, delete-orphan')

    def __repr__(self):
        return f'<Run {self.id} {self.kind} seed={self.seed}>'


class Artifact(Base):
    __tablename__ = 'artifact'
    id = Column(Integer, primary_key=True)
    run_id = Column(Integer, ForeignKey('run.id'), nullable=False)
    path = Column(String(500), nullable=False)
    kind = Column(String(40), nullable=False)
    sha256 = Column(String(64), nullable=False)

    def __repr__(self):
        return f'<Artifact {self.kind} {self.path}>'


class GateResult(Base):
    __tablename__ = 'gate_result'
    id = Column(Integer, primary_key=True)
    run_id = Column(Integer, ForeignKey('run.id'), nullable=False)
    name = Column(String(120), nullable=False)
    value = Column(Float, nullable=True)
    threshold = Column(Float, nullable=True)
    passed = Column(Boolean, nullable=False)
    detail = Column(Text, nullable=True)

    def __repr__(self):
        return f'<GateResult {self.name} passed={self.passed}>'


# ------------------ Catalog Access ------------------
def open_catalog(url=None, output_dir=None):
    """Engine and session factory for the catalog; tables are created if missing."""
    url = url or find_catalog_url(output_dir)
    engine = create_engine(url)
    Base.metadata.create_all(engine)
    return engine, sessionmaker(bind=engine, expire_on_commit=False)


def record_run(session_factory, manifest, output_dir, exit_code):
    started = datetime.fromisoformat(manifest['started'])
    finished = datetime.fromisoformat(manifest['finished'])
    with session_factory() as session:
        run = Run(kind=manifest['kind'], config_name=manifest['config_name'],
                  config_sha256=manifest['config_sha256'], seed=str(manifest["seeds"]["master_seed"]),
                  output_dir=output_dir, workers=manifest['workers'], started_at=started,
                  finished_at=finished, exit_code=exit_code,
                  status='passed' if exit_code == 0 else 'failed')
        for a in manifest['artifacts']:
            run.artifacts.append(Artifact(path=a['path'], kind=a['kind'], sha256=a['sha256']))
        for g in manifest['gates']:
            run.gates.append(GateResult(name=g['name'], value=g['value'], threshold=g['threshold'],
                                        passed=bool(g['passed']), detail=g.get('detail')))
        session.add(run)
        session.commit()
        logger.info(f"catalog_record run={run.id} kind={run.kind} artifacts={len(run.artifacts)}")
        return run.id


def runs_for_dir(session_factory, output_dir):
    with session_factory() as session:
        stmt = select(Run).where(Run.output_dir == output_dir).order_by(Run.id)
        return list(session.scalars(stmt))
