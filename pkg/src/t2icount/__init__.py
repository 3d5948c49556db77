"""Text-guided zero-shot object counting on single-step diffusion features."""
from .config import load_config
from .model import T2ICount, build_model

__version__ = "0.1.0"
__all__ = ["T2ICount", "build_model", "load_config"]
