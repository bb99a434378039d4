from sqlalchemy import Boolean, CheckConstraint, Float, ForeignKey, Integer, String
from sqlalchemy.orm import Mapped, mapped_column, relationship

from app.database import Base


class PairResult(Base):
    __tablename__ = "pair_results"

    id: Mapped[int] = mapped_column(primary_key=True, index=True)
    run_id: Mapped[str] = mapped_column(ForeignKey("runs.id"), nullable=False, index=True)
    method: Mapped[str] = mapped_column(String(50), nullable=False, default="full")
    eps_px: Mapped[float] = mapped_column(Float, nullable=False)
    tile_id: Mapped[str] = mapped_column(String(100), nullable=False)
    n_matches: Mapped[int] = mapped_column(Integer, nullable=False, default=0)
    ncm: Mapped[int] = mapped_column(Integer, nullable=False)
    rmse: Mapped[float] = mapped_column(Float, nullable=False)
    success: Mapped[bool] = mapped_column(Boolean, nullable=False)
    excluded: Mapped[bool] = mapped_column(Boolean, nullable=False)

    run: Mapped["Run"] = relationship(back_populates="pair_results")

    __table_args__ = (
        CheckConstraint('success != excluded', name='check_failure_rule'),
    )
