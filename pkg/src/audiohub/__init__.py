"""audiohub: modality-aware dialogue orchestration over audio task executors."""

__version__ = "0.1.0"

from .core import Context, Modality, OrchestratorError, Query, Resource, Turn  # noqa: F401
from .service import SessionService  # noqa: F401
