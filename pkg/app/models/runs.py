from datetime import datetime

from sqlalchemy import DateTime, Integer, String, func
from sqlalchemy.orm import Mapped, mapped_column, relationship

from app.database import Base


class Run(Base):
    __tablename__ = "runs"

    id: Mapped[str] = mapped_column(String(36), primary_key=True)
    command: Mapped[str] = mapped_column(String(50), nullable=False)
    status: Mapped[str] = mapped_column(String(20), nullable=False, default="running")  # running / ok / failed
    exit_code: Mapped[int | None] = mapped_column(Integer, nullable=True)
    config_digest: Mapped[str] = mapped_column(String(64), nullable=False)
    out_dir: Mapped[str] = mapped_column(String(500), nullable=False)
    started_at: Mapped[datetime] = mapped_column(DateTime, nullable=False, default=func.now())
    finished_at: Mapped[datetime | None] = mapped_column(DateTime, nullable=True)

    checkpoints: Mapped[list["CheckpointRecord"]] = relationship(back_populates="run")
    pair_results: Mapped[list["PairResult"]] = relationship(back_populates="run")
