import pytest

from audiohub.execution import Registry, load_default_registry
from audiohub.service import SessionService


@pytest.fixture(scope="session")
def default_registry() -> Registry:
    # probe=True exercises the subprocess health check exactly once per run
    return load_default_registry(probe=True)


@pytest.fixture
def service(tmp_path, default_registry) -> SessionService:
    return SessionService(tmp_path / "svc", registry=default_registry)
