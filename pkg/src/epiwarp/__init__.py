"""Susceptibility-distortion simulation and correction for ssEPI DWI.

Forward model: a B0 off-resonance map becomes a per-pixel displacement
along the phase-encoding axis, applied by mass-conserving splatting.
Inverse methods: field-map unwarping, dual-polarity regularized least
squares, and dual-polarity field estimation, all scored with NMSE/PSNR
against the clean references of a synthetic paired dataset.
"""

from importlib import metadata as _metadata

from .correct import (
    FieldEstimate,
    IllPosedColumnError,
    RestoreOptions,
    UnwarpResult,
    estimate_field_dual_pe,
    restore_dual_pe,
    unwarp_fieldmap,
)
from .dwi import (
    DwiParams,
    LesionSpec,
    PhantomSpec,
    compute_adc,
    generate_phantom,
    random_phantom_spec,
    synth_high_b,
)
from .field import (
    DipoleSpec,
    HarmonicCoeffs,
    decompose_field,
    dipole_phantom_field,
    eval_harmonic,
    fit_harmonic,
    synthesize_field,
)
from .forward import (
    DisplacementOverflowError,
    EpiParams,
    SimulatedPair,
    compute_vdm,
    forward_splat,
    simulate_pair,
    splat_dropped_fraction,
)
from .imgio import (
    DatasetManifest,
    FormatError,
    GeometryMismatchError,
    Image2D,
    ImageInvariantError,
    ImageKind,
    ManifestError,
    PairedSample,
    PeAxis,
    export_png,
    load_pair,
    read_image,
    read_manifest,
    save_pair,
    write_image,
    write_manifest,
)
from .metrics import EvalEntry, EvalReport, field_rmse, nmse, psnr
from .pipeline import VALID_METHODS, BenchmarkConfig, make_dataset, run_benchmark

try:
    __version__ = _metadata.version("epiwarp")
except _metadata.PackageNotFoundError:  # running from a source tree
    __version__ = "0.0.0"

__all__ = [
    "__version__",
    # imgio
    "Image2D", "ImageKind", "PeAxis", "PairedSample", "DatasetManifest",
    "ImageInvariantError", "FormatError", "ManifestError",
    "GeometryMismatchError", "read_image", "write_image", "export_png",
    "read_manifest", "write_manifest", "save_pair", "load_pair",
    # field
    "HarmonicCoeffs", "DipoleSpec", "fit_harmonic", "eval_harmonic",
    "decompose_field", "synthesize_field", "dipole_phantom_field",
    # forward
    "EpiParams", "DisplacementOverflowError", "compute_vdm", "forward_splat",
    "splat_dropped_fraction", "simulate_pair", "SimulatedPair",
    # dwi
    "DwiParams", "PhantomSpec", "LesionSpec", "compute_adc", "synth_high_b",
    "generate_phantom", "random_phantom_spec",
    # correct
    "RestoreOptions", "UnwarpResult", "FieldEstimate", "IllPosedColumnError",
    "unwarp_fieldmap", "restore_dual_pe", "estimate_field_dual_pe",
    # metrics
    "nmse", "psnr", "field_rmse", "EvalEntry", "EvalReport",
    # pipeline
    "BenchmarkConfig", "VALID_METHODS", "make_dataset", "run_benchmark",
]
