"""Core types, errors and backend interfaces"""

from abc import ABC, abstractmethod
from typing import Any, Dict, Optional

import torch
from pydantic import BaseModel


class RestorationError(Exception):
    """Base class for data and contract errors (CLI exit code 2)"""


class ShapeError(RestorationError, ValueError):
    pass


class RangeError(RestorationError, ValueError):
    pass


class DegenerateLandmarks(RestorationError, ValueError):
    pass


class ContractViolation(RestorationError):
    pass


class ZeroEmbedding(RestorationError, ValueError):
    pass


class EmptyInput(RestorationError, ValueError):
    pass


class ManifestError(RestorationError):
    pass


class CheckpointError(RestorationError):
    pass


class ConfigError(RestorationError):
    pass


class ExternalProcessError(RestorationError):
    pass


class NonFiniteLoss(RestorationError):
    """Raised when any loss component is NaN or infinite; carries the report"""

    def __init__(self, report: Any, step: Optional[int] = None):
        self.report = report
        self.step = step
        where = f" at step {step}" if step is not None else ""
        super().__init__(f"Non-finite loss{where}: {report}")


class CommandResult(BaseModel):
    success: bool
    message: Optional[str] = None
    error: Optional[str] = None
    exit_code: int = 0
    outputs: Dict[str, Any] = {}


class RowResult(BaseModel):
    row_id: str
    success: bool
    metrics: Dict[str, float] = {}
    error: Optional[str] = None


class Embedder(ABC):
    """Face recognition feature extractor R: aligned face -> R^d"""

    dim: int = 128
    differentiable: bool = False

    @abstractmethod
    def embed(self, faces: torch.Tensor) -> torch.Tensor:
        """Map (B, 3, S, S) aligned faces to (B, d) embeddings"""
        pass

    @classmethod
    @abstractmethod
    def get_backend_info(cls) -> Dict[str, Any]:
        """Get backend metadata"""
        pass


class PerceptualMetric(ABC):
    """Full-reference perceptual distance between two image batches"""

    @abstractmethod
    def distance(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        """Batch-mean distance as a 0-dim tensor"""
        pass

    @classmethod
    @abstractmethod
    def get_backend_info(cls) -> Dict[str, Any]:
        pass


class Regularizer(ABC):
    """The L_reg term of the training objective"""

    @abstractmethod
    def __call__(self, latent: Optional[torch.Tensor]) -> torch.Tensor:
        pass

    @classmethod
    @abstractmethod
    def get_backend_info(cls) -> Dict[str, Any]:
        pass
