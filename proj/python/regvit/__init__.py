"""Register-token ViT lab: the C++ core exposed to Python."""

from ._regvit import *  # noqa: F401,F403
from ._regvit import Error, ModelConfig, Params, ResizeSpec, run_cli

__all__ = [name for name in dir() if not name.startswith("_")]
