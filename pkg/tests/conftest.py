import os
import tempfile
from pathlib import Path

import pytest

# окружение до импорта app.config
_TMP = Path(tempfile.mkdtemp(prefix="optsar-tests-"))
os.environ.setdefault("LOG_FILE", str(_TMP / "info.log"))
os.environ.setdefault("DATABASE_URL", f"sqlite:///{_TMP / 'runs.db'}")
os.environ.setdefault("DEVICE", "cpu")

from app.config import RunConfig, load_run_config  # noqa: E402
from app.data.synthetic import generate_synthetic_pair  # noqa: E402
from app.database import init_registry  # noqa: E402

ROOT = Path(__file__).resolve().parent.parent
TINY_CONFIG = ROOT / "configs" / "tiny.toml"


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow training checks")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def registry(tmp_path):
    """
    Отдельный SQLite-реестр на каждый тест.
    """
    return init_registry(f"sqlite:///{tmp_path / 'registry.db'}")


@pytest.fixture
def tiny_cfg(tmp_path) -> RunConfig:
    cfg = load_run_config(TINY_CONFIG)
    return cfg.model_copy(update={"out_dir": str(tmp_path / "out"), "data_dir": str(tmp_path / "data")})


@pytest.fixture(scope="session")
def pair128():
    return generate_synthetic_pair(7, size=128, tile_id="p128")


@pytest.fixture(scope="session")
def tiny_pairs():
    return [generate_synthetic_pair(100 + i, size=64, tile_id=f"tiny_{i}") for i in range(4)]
