"""Joint acoustic echo cancellation and dereverberation in the STFT domain."""
from .config import AlgorithmVariant, DraecConfig, RunConfig, StftConfig, load_config
from .core import BACKEND

__version__ = "0.1.0"
