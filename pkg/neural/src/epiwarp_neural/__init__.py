"""Learned inverse for EPI distortion: coarse CNN + diffusion refinement.

Companion package to ``epiwarp``.  It trains on datasets produced by
``epiwarp make-dataset``, reads and writes only the epiwarp raster and
manifest formats, and emits corrected images that ``epiwarp evaluate``
scores under the method label ``neural``.
"""

from .artifact import ArtifactError, ModelArtifact, load_artifact, save_artifact
from .config import TrainConfig
from .data import ADC_SCALE, load_inference_inputs, load_training_split
from .diffusion import NoiseSchedule
from .infer import Corrector, InferResult, infer_split
from .nets import CoarseNet, DenoiseNet, param_count
from .train import train_coarse, train_diffusion

__all__ = [
    "ADC_SCALE",
    "ArtifactError",
    "CoarseNet",
    "Corrector",
    "DenoiseNet",
    "InferResult",
    "ModelArtifact",
    "NoiseSchedule",
    "TrainConfig",
    "infer_split",
    "load_artifact",
    "load_inference_inputs",
    "load_training_split",
    "param_count",
    "save_artifact",
    "train_coarse",
    "train_diffusion",
]
