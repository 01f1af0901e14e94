"""Dataset access for training and inference.

All data comes in through the epiwarp raster/manifest formats; nothing
here reads pipeline internals.  Images are stacked into channel-first
float32 arrays in "network space": DWI signals pass through unchanged
(they are O(1) already) and ADC maps are multiplied by ``ADC_SCALE`` so
both target channels have comparable magnitude.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from epiwarp.imgio import Image2D, read_image, read_manifest

__all__ = [
    "ADC_SCALE",
    "SampleArrays",
    "load_training_split",
    "load_inference_inputs",
]

# 1.0 in network space corresponds to 2e-3 mm^2/s, the middle of the
# physiologic range, so ADC targets land in roughly [0, 2.5].
ADC_SCALE = 500.0

_TRAIN_ROLES = (
    "distorted/b50", "distorted/adc", "clean/t2w",
    "clean/b50", "clean/adc", "clean/mask",
)
_INFER_ROLES = ("distorted/b50", "distorted/adc", "clean/t2w")


@dataclass
class SampleArrays:
    """One sample in network space.

    ``x`` stacks (distorted b50, distorted adc, t2w); ``y`` stacks the
    clean (b50, adc) targets and is None for inference inputs, as is
    ``mask``.  ``spacing_mm`` carries the raster geometry through to the
    outputs.
    """

    sample_id: str
    x: np.ndarray
    y: np.ndarray | None
    mask: np.ndarray | None
    spacing_mm: tuple[float, float]


def _read_roles(manifest_dir: Path, files: dict[str, str],
                roles: tuple[str, ...]) -> dict[str, Image2D]:
    out = {}
    for role in roles:
        if role not in files:
            raise ValueError(f"sample is missing role {role!r}")
        out[role] = read_image(manifest_dir / files[role])
    return out


def _stack(images: list[Image2D], scales: list[float]) -> np.ndarray:
    planes = [img.pixels.astype(np.float32) * np.float32(s)
              for img, s in zip(images, scales)]
    return np.stack(planes, axis=0)


def load_training_split(manifest_path: str | Path,
                        split: str = "train") -> list[SampleArrays]:
    """Load every sample of one split with inputs, targets, and mask.

    Sample order follows the manifest, independent of any parallelism
    upstream.  Raises ValueError when the split is empty or the samples
    disagree on geometry.
    """
    manifest_path = Path(manifest_path)
    manifest = read_manifest(manifest_path)
    mdir = manifest_path.parent
    samples = manifest.split_samples(split)
    if not samples:
        raise ValueError(f"manifest has no samples in split {split!r}")

    out: list[SampleArrays] = []
    shape = None
    for s in samples:
        imgs = _read_roles(mdir, s.files, _TRAIN_ROLES)
        x = _stack([imgs["distorted/b50"], imgs["distorted/adc"],
                    imgs["clean/t2w"]], [1.0, ADC_SCALE, 1.0])
        y = _stack([imgs["clean/b50"], imgs["clean/adc"]], [1.0, ADC_SCALE])
        mask = imgs["clean/mask"].pixels.astype(np.float32)[None]
        if shape is None:
            shape = x.shape
        elif x.shape != shape:
            raise ValueError(
                f"sample {s.sample_id!r} geometry {x.shape[1:]} differs "
                f"from {shape[1:]}"
            )
        out.append(SampleArrays(
            sample_id=s.sample_id, x=x, y=y, mask=mask,
            spacing_mm=imgs["distorted/b50"].spacing_mm,
        ))
    return out


def load_inference_inputs(manifest_path: str | Path, split: str = "test",
                          sample_ids: list[str] | None = None,
                          ) -> list[SampleArrays]:
    """Load inference inputs only: distorted b50/adc plus the t2w.

    Clean DWI references of the requested samples are deliberately
    never opened here; scoring against them is the evaluation CLI's
    job.
    """
    manifest_path = Path(manifest_path)
    manifest = read_manifest(manifest_path)
    mdir = manifest_path.parent
    samples = manifest.split_samples(split)
    if sample_ids is not None:
        wanted = set(sample_ids)
        samples = [s for s in samples if s.sample_id in wanted]
        missing = wanted - {s.sample_id for s in samples}
        if missing:
            raise ValueError(f"sample ids not in split {split!r}: {sorted(missing)}")
    if not samples:
        raise ValueError(f"manifest has no samples in split {split!r}")

    out = []
    for s in samples:
        imgs = _read_roles(mdir, s.files, _INFER_ROLES)
        x = _stack([imgs["distorted/b50"], imgs["distorted/adc"],
                    imgs["clean/t2w"]], [1.0, ADC_SCALE, 1.0])
        out.append(SampleArrays(
            sample_id=s.sample_id, x=x, y=None, mask=None,
            spacing_mm=imgs["distorted/b50"].spacing_mm,
        ))
    return out
