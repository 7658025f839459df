"""Backend registry for embedders, perceptual metrics and regularizers"""

from typing import Any, Dict, List, Type

from .identity import ExternalEmbedder, ToyEmbedder
from .losses import LatentL2Regularizer, NoRegularizer, ToyPerceptual
from .types import ConfigError, Embedder, PerceptualMetric, Regularizer


class BackendRegistry:
    def __init__(self):
        self._embedders: Dict[str, Type[Embedder]] = {}
        self._perceptual: Dict[str, Type[PerceptualMetric]] = {}
        self._regularizers: Dict[str, Type[Regularizer]] = {}
        self._register_default_backends()

    def _register_default_backends(self):
        """Register built-in backends"""
        self.register_embedder_type(ToyEmbedder)
        self.register_embedder_type(ExternalEmbedder)

        self.register_perceptual_type(ToyPerceptual)

        self.register_regularizer_type(NoRegularizer)
        self.register_regularizer_type(LatentL2Regularizer)

    def register_embedder_type(self, backend: Type[Embedder]):
        self._embedders[backend.get_backend_info()["type"]] = backend

    def register_perceptual_type(self, backend: Type[PerceptualMetric]):
        self._perceptual[backend.get_backend_info()["type"]] = backend

    def register_regularizer_type(self, backend: Type[Regularizer]):
        self._regularizers[backend.get_backend_info()["type"]] = backend

    def get_available_backends(self) -> Dict[str, List[Dict[str, Any]]]:
        """List registered backends per kind"""
        return {
            "embedders": [b.get_backend_info() for b in self._embedders.values()],
            "perceptual": [b.get_backend_info() for b in self._perceptual.values()],
            "regularizers": [b.get_backend_info() for b in self._regularizers.values()],
        }

    def create_embedder(self, backend_type: str, **kwargs: Any) -> Embedder:
        if backend_type not in self._embedders:
            raise ConfigError(f"Unknown embedder backend: {backend_type}")
        return self._embedders[backend_type](**kwargs)

    def create_perceptual(self, backend_type: str, **kwargs: Any) -> PerceptualMetric:
        if backend_type not in self._perceptual:
            raise ConfigError(f"Unknown perceptual backend: {backend_type}")
        return self._perceptual[backend_type](**kwargs)

    def create_regularizer(self, backend_type: str, **kwargs: Any) -> Regularizer:
        if backend_type not in self._regularizers:
            raise ConfigError(f"Unknown regularizer: {backend_type}")
        return self._regularizers[backend_type](**kwargs)


registry = BackendRegistry()
