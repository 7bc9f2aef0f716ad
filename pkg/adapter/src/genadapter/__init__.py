"""Reference generation-backend service.

Speaks the pose-synthesis wire protocol (/v1/generate, /v1/caption,
/v1/health) in two modes: a stub that needs no model assets and answers
deterministically, and a model mode that fronts a real generation stack.
"""

from .config import AdapterConfig, AdapterConfigError, Mode
from .service import ModelRuntime, create_app

__all__ = ["AdapterConfig", "AdapterConfigError", "Mode", "ModelRuntime", "create_app"]
