"""Serialized model bundle: weights, config snapshot, dataset identity."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import torch

from .config import TrainConfig

__all__ = ["ArtifactError", "ModelArtifact", "manifest_sha256",
           "save_artifact", "load_artifact"]

ARTIFACT_FORMAT = "epiwarp-neural-artifact"
ARTIFACT_VERSION = 1


class ArtifactError(ValueError):
    """A model artifact file is missing, corrupt, or incompatible."""


def manifest_sha256(manifest_path: str | Path) -> str:
    """Identity of the dataset a model was trained on: file digest."""
    return hashlib.sha256(Path(manifest_path).read_bytes()).hexdigest()


@dataclass
class ModelArtifact:
    """Everything needed to rerun inference exactly.

    ``diffusion_state`` is None after the coarse stage only.
    ``image_hw`` pins the training geometry; inference on any other
    shape is refused.
    """

    config: TrainConfig
    manifest_hash: str
    image_hw: tuple[int, int]
    spacing_mm: tuple[float, float]
    width: int
    coarse_state: dict
    diffusion_state: dict | None = None
    coarse_losses: list[float] | None = None
    diffusion_losses: list[float] | None = None

    @property
    def has_diffusion(self) -> bool:
        return self.diffusion_state is not None


def save_artifact(art: ModelArtifact, path: str | Path) -> None:
    payload = {
        "format": ARTIFACT_FORMAT,
        "format_version": ARTIFACT_VERSION,
        "config": art.config.to_dict(),
        "manifest_sha256": art.manifest_hash,
        "image_hw": list(art.image_hw),
        "spacing_mm": list(art.spacing_mm),
        "width": art.width,
        "coarse_state": art.coarse_state,
        "diffusion_state": art.diffusion_state,
        "coarse_losses": list(art.coarse_losses or []),
        "diffusion_losses": list(art.diffusion_losses or []),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_artifact(path: str | Path) -> ModelArtifact:
    path = Path(path)
    if not path.exists():
        raise ArtifactError(f"artifact {path} does not exist")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise ArtifactError(f"artifact {path} is not loadable: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != ARTIFACT_FORMAT:
        raise ArtifactError(f"artifact {path} has an unrecognized layout")
    if payload.get("format_version") != ARTIFACT_VERSION:
        raise ArtifactError(
            f"artifact version {payload.get('format_version')} unsupported "
            f"(expected {ARTIFACT_VERSION})"
        )
    try:
        return ModelArtifact(
            config=TrainConfig.from_dict(payload["config"]),
            manifest_hash=str(payload["manifest_sha256"]),
            image_hw=tuple(payload["image_hw"]),
            spacing_mm=tuple(payload["spacing_mm"]),
            width=int(payload["width"]),
            coarse_state=payload["coarse_state"],
            diffusion_state=payload["diffusion_state"],
            coarse_losses=[float(v) for v in payload["coarse_losses"]],
            diffusion_losses=[float(v) for v in payload["diffusion_losses"]],
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ArtifactError(f"artifact {path} is incomplete: {exc}") from exc
