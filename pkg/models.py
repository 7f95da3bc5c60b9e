import enum
import math
from typing import Iterable, Optional

from sqlalchemy import Column, DateTime, Enum as SAEnum, Float, ForeignKey, Integer, String, Text
from sqlalchemy.orm import Session, relationship
from sqlalchemy.sql import func

from database import Base


class RunKind(str, enum.Enum):
    simulate = "simulate"
    sweep = "sweep"
    solve = "solve"


class Run(Base):
    __tablename__ = "runs"

    id = Column(Integer, primary_key=True, index=True)
    kind = Column(SAEnum(RunKind), nullable=False, index=True)
    config_hash = Column(String(64), nullable=False, index=True)
    config_json = Column(Text, default="")
    seed = Column(Integer, default=0)
    mode = Column(String(20), nullable=True)
    output_dir = Column(String(500), nullable=True)
    status = Column(String(30), default="ok")
    created_at = Column(DateTime(timezone=True), server_default=func.now())

    results = relationship("RunResult", back_populates="run", cascade="all, delete-orphan",
                           order_by="RunResult.id")


class RunResult(Base):
    __tablename__ = "run_results"

    id = Column(Integer, primary_key=True, index=True)
    run_id = Column(Integer, ForeignKey("runs.id", ondelete="CASCADE"), nullable=False)
    policy = Column(String(20), nullable=False)
    variable = Column(String(30), nullable=True)
    value = Column(Float, nullable=True)
    label = Column(String(100), nullable=True)
    mode = Column(String(20), nullable=False)
    spectral_efficiency = Column(Float, nullable=True)
    se_ci_low = Column(Float, nullable=True)
    se_ci_high = Column(Float, nullable=True)
    power_w = Column(Float, nullable=True)
    power_dbm = Column(Float, nullable=True)
    episodes = Column(Integer, default=0)
    status = Column(String(30), default="ok")

    run = relationship("Run", back_populates="results")


def _number(value) -> Optional[float]:
    if value in (None, ""):
        return None
    try:
        number = float(value)
    except (TypeError, ValueError):
        return None
    return number if math.isfinite(number) else None


def record_run(db: Session, kind: str, config, config_hash: str, rows: Iterable[dict], status: str = "ok") -> Run:
    """Store a run with one result row per CSV row."""
    run = Run(
        kind=RunKind(kind),
        config_hash=config_hash,
        config_json=config.model_dump_json(),
        seed=config.seed,
        mode=config.simulation.mode.value,
        output_dir=str(config.output_dir),
        status=status,
    )
    for row in rows:
        value = row.get("value")
        run.results.append(RunResult(
            policy=row["policy"],
            variable=row.get("variable") or None,
            value=_number(value),
            label=None if _number(value) is not None or value in (None, "") else str(value),
            mode=row["mode"],
            spectral_efficiency=_number(row.get("spectral_efficiency")),
            se_ci_low=_number(row.get("se_ci_low")),
            se_ci_high=_number(row.get("se_ci_high")),
            power_w=_number(row.get("power_w")),
            power_dbm=_number(row.get("power_dbm")),
            episodes=int(row.get("episodes") or 0),
            status=row.get("status", "ok"),
        ))
    db.add(run)
    db.commit()
    db.refresh(run)
    return run
