from typing import Optional

from sqlalchemy import create_engine
from sqlalchemy.engine import Engine
from sqlalchemy.orm import DeclarativeBase, sessionmaker

from app.config import DATABASE_URL


# Создаём Engine реестра запусков (по умолчанию SQLite рядом с проектом)
engine = create_engine(DATABASE_URL, echo=False)

# Настраиваем фабрику сеансов
SessionLocal = sessionmaker(bind=engine, expire_on_commit=False)


class Base(DeclarativeBase):
    pass


def init_registry(url: Optional[str] = None) -> Engine:
    """
    Подключает реестр (при необходимости к другому URL) и создаёт таблицы,
    если файл SQLite новый. Для существующих баз схему ведёт alembic.
    """
    global engine
    import app.models  # noqa: F401  регистрирует таблицы в Base.metadata

    if url is not None and url != str(engine.url):
        engine.dispose()
        engine = create_engine(url, echo=False)
        SessionLocal.configure(bind=engine)
    Base.metadata.create_all(engine)
    return engine
