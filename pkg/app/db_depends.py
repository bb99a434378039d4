from contextlib import contextmanager
from typing import Iterator

from sqlalchemy.orm import Session

from app.database import SessionLocal


@contextmanager
def get_db() -> Iterator[Session]:
    """
    Сессия реестра на одну операцию: коммит при успехе, откат при ошибке, затем закрытие.
    """
    db: Session = SessionLocal()
    try:
        yield db
        db.commit()
    except Exception:
        db.rollback()
        raise
    finally:
        db.close()
