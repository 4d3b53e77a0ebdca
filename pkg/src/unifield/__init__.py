"""Multi-domain point-cloud surface-pressure regression with flow-conditioned adapters."""
from .datasets import DomainSpec, Registry, Sample, synthetic_registry
from .model import ModelConfig, UniField, load_checkpoint, predict_chunked, save_checkpoint

__all__ = [
    "DomainSpec", "ModelConfig", "Registry", "Sample", "UniField", "load_checkpoint",
    "predict_chunked", "save_checkpoint", "synthetic_registry",
]
__version__ = "0.1.0"
