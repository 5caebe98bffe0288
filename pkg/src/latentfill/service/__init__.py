from .app import create_app
from .config import ServiceConfig, load_config
from .engine import Engine
from .store import ArtifactStore

__all__ = ["create_app", "ServiceConfig", "load_config", "Engine", "ArtifactStore"]
