"""Training configuration for the learned correction."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Any, Mapping

__all__ = ["TrainConfig"]


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for both training stages plus inference defaults.

    ``crop`` of 0 trains on full images; a positive value takes random
    square crops of that size (must not exceed the dataset image size,
    checked when the data is loaded).  ``mask_weight`` adds extra L1
    weight inside the anatomy mask on top of the uniform term; the
    balance is a free choice, 1.0 (mask pixels count double) by default.
    ``strength`` is the fraction of the diffusion schedule used at
    inference when refining the coarse output.
    """

    manifest_path: str
    artifact_path: str
    epochs: int = 60
    batch_size: int = 8
    lr: float = 2e-3
    crop: int = 0
    mask_weight: float = 1.0
    diffusion_steps: int = 50
    strength: float = 0.1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.crop < 0:
            raise ValueError(f"crop must be >= 0, got {self.crop}")
        if self.mask_weight < 0:
            raise ValueError(f"mask_weight must be >= 0, got {self.mask_weight}")
        if self.diffusion_steps < 1:
            raise ValueError(
                f"diffusion_steps must be >= 1, got {self.diffusion_steps}"
            )
        if not 0.0 <= self.strength <= 1.0:
            raise ValueError(f"strength must be in [0, 1], got {self.strength}")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**dict(d))
