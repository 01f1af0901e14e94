"""On-disk data model and I/O plumbing shared by every other module.

A raster is stored as a pair of files with a common stem: ``<stem>.json``
holds the header (geometry, pixel kind, phase-encoding axis) and
``<stem>.bin`` holds the payload as little-endian float32, row-major.
The format is deliberately trivial so any component, in any language,
can reproduce it bit-exactly.  PNG export exists for human inspection
only and is lossy (8-bit, min-max windowed).

A dataset manifest is a JSON document indexing a tree of paired-sample
directories; every path it references is relative to the manifest's own
directory.  Manifest field names are part of the format contract.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Mapping

import numpy as np

__all__ = [
    "ImageKind",
    "PeAxis",
    "Image2D",
    "PairedSample",
    "DatasetManifest",
    "ImageInvariantError",
    "FormatError",
    "ManifestError",
    "GeometryMismatchError",
    "write_image",
    "read_image",
    "export_png",
    "write_manifest",
    "read_manifest",
    "save_pair",
    "load_pair",
    "PAIR_ROLES",
]

MANIFEST_VERSION = "1"

#: Canonical in-plane field of view in mm (256 px at 0.56 mm spacing).
FOV_MM = 143.36


class ImageKind(str, Enum):
    """Semantic pixel kind of a raster."""

    DWI_B50 = "dwi_b50"
    DWI_B1400 = "dwi_b1400"
    ADC = "adc"
    T2W = "t2w"
    FIELD_HZ = "field_hz"
    VDM_PX = "vdm_px"
    MASK = "mask"


class PeAxis(str, Enum):
    """Image axis along which phase-encoding displacement acts.

    ``ROW`` shifts pixels across rows (axis 0), ``COL`` across columns
    (axis 1).
    """

    ROW = "row"
    COL = "col"

    @property
    def index(self) -> int:
        return 0 if self is PeAxis.ROW else 1


class ImageInvariantError(ValueError):
    """An Image2D violates one of its invariants."""


class FormatError(ValueError):
    """A sidecar/payload pair is missing, corrupt, or inconsistent."""


class ManifestError(ValueError):
    """A dataset manifest is invalid or references missing files."""


class GeometryMismatchError(ValueError):
    """Two rasters that must share geometry do not."""


@dataclass
class Image2D:
    """A 2D scalar raster with pixel spacing and a semantic kind.

    ``pixels`` is a row-major float32 array of shape (height, width).
    ``pe_axis`` is only meaningful for distorted rasters and
    displacement maps; it is required for kind ``vdm_px``.
    """

    pixels: np.ndarray
    kind: ImageKind
    spacing_mm: tuple[float, float] = (1.0, 1.0)
    pe_axis: PeAxis | None = None

    def __post_init__(self) -> None:
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        self.kind = ImageKind(self.kind)
        self.spacing_mm = (float(self.spacing_mm[0]), float(self.spacing_mm[1]))
        if self.pe_axis is not None:
            self.pe_axis = PeAxis(self.pe_axis)

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    def validate(self) -> "Image2D":
        """Check all invariants, raising ImageInvariantError on the first hit."""
        if self.pixels.ndim != 2:
            raise ImageInvariantError(
                f"pixels must be 2D, got shape {self.pixels.shape}"
            )
        if self.width <= 0 or self.height <= 0:
            raise ImageInvariantError(
                f"degenerate geometry {self.width}x{self.height}"
            )
        if not np.all(np.isfinite(self.pixels)):
            bad = int(np.count_nonzero(~np.isfinite(self.pixels)))
            raise ImageInvariantError(
                f"{bad} non-finite pixel(s) in {self.kind.value} image"
            )
        if self.kind is ImageKind.ADC and np.any(self.pixels < 0):
            raise ImageInvariantError("adc image contains negative values")
        if self.kind is ImageKind.MASK:
            vals = np.unique(self.pixels)
            if not np.all(np.isin(vals, (0.0, 1.0))):
                raise ImageInvariantError(
                    f"mask image contains values other than 0/1: {vals[:8]}"
                )
        if self.kind is ImageKind.VDM_PX and self.pe_axis is None:
            raise ImageInvariantError("vdm_px image requires pe_axis")
        return self

    def same_geometry(self, other: "Image2D") -> bool:
        return (
            self.pixels.shape == other.pixels.shape
            and self.spacing_mm == other.spacing_mm
        )

    def with_pixels(self, pixels: np.ndarray, kind: ImageKind | None = None,
                    pe_axis: PeAxis | None | str = "keep") -> "Image2D":
        """New image sharing this one's geometry metadata."""
        pe = self.pe_axis if pe_axis == "keep" else pe_axis
        return Image2D(
            pixels=np.asarray(pixels, dtype=np.float32),
            kind=self.kind if kind is None else kind,
            spacing_mm=self.spacing_mm,
            pe_axis=pe,
        )


def require_same_geometry(*images: Image2D) -> None:
    ref = images[0]
    for img in images[1:]:
        if not ref.same_geometry(img):
            raise GeometryMismatchError(
                f"geometry mismatch: {ref.pixels.shape}/{ref.spacing_mm} vs "
                f"{img.pixels.shape}/{img.spacing_mm}"
            )


def _stem(path: str | Path) -> Path:
    p = Path(path)
    if p.suffix in (".json", ".bin"):
        p = p.with_suffix("")
    return p


def write_image(img: Image2D, path: str | Path) -> None:
    """Write ``<path>.json`` + ``<path>.bin`` (little-endian f32, row-major).

    The image is validated first; nothing is written on invariant
    violation.  A write followed by :func:`read_image` round-trips
    bit-exactly.
    """
    img.validate()
    stem = _stem(path)
    header = {
        "width": img.width,
        "height": img.height,
        "dtype": "f32",
        "order": "row-major",
        "spacing_mm": [img.spacing_mm[0], img.spacing_mm[1]],
        "kind": img.kind.value,
        "pe_axis": img.pe_axis.value if img.pe_axis is not None else None,
    }
    payload = np.ascontiguousarray(img.pixels, dtype="<f4").tobytes()
    stem.with_suffix(".json").write_text(json.dumps(header, indent=2) + "\n")
    stem.with_suffix(".bin").write_bytes(payload)


def read_image(path: str | Path) -> Image2D:
    """Read a raster written by :func:`write_image`.

    Raises FormatError on missing files, header/payload length mismatch,
    unknown kind, or non-finite pixel values.
    """
    stem = _stem(path)
    sidecar = stem.with_suffix(".json")
    payload_path = stem.with_suffix(".bin")
    if not sidecar.exists():
        raise FormatError(f"missing sidecar {sidecar}")
    if not payload_path.exists():
        raise FormatError(f"missing payload {payload_path}")
    try:
        header = json.loads(sidecar.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"unparseable sidecar {sidecar}: {exc}") from exc

    for key in ("width", "height", "dtype", "order", "spacing_mm", "kind"):
        if key not in header:
            raise FormatError(f"sidecar {sidecar} missing field '{key}'")
    if header["dtype"] != "f32":
        raise FormatError(f"unsupported dtype {header['dtype']!r} in {sidecar}")
    if header["order"] != "row-major":
        raise FormatError(f"unsupported order {header['order']!r} in {sidecar}")
    try:
        kind = ImageKind(header["kind"])
    except ValueError:
        raise FormatError(
            f"unknown kind {header['kind']!r} in {sidecar}; valid kinds: "
            f"{sorted(k.value for k in ImageKind)}"
        ) from None
    pe_axis = header.get("pe_axis")
    if pe_axis is not None:
        try:
            pe_axis = PeAxis(pe_axis)
        except ValueError:
            raise FormatError(f"unknown pe_axis {pe_axis!r} in {sidecar}") from None

    width, height = int(header["width"]), int(header["height"])
    raw = payload_path.read_bytes()
    expected = width * height * 4
    if len(raw) != expected:
        raise FormatError(
            f"payload {payload_path} has {len(raw)} bytes, header implies {expected}"
        )
    pixels = np.frombuffer(raw, dtype="<f4").reshape(height, width)
    if not np.all(np.isfinite(pixels)):
        raise FormatError(f"non-finite pixel values in {payload_path}")
    img = Image2D(
        pixels=pixels.copy(),
        kind=kind,
        spacing_mm=(float(header["spacing_mm"][0]), float(header["spacing_mm"][1])),
        pe_axis=pe_axis,
    )
    return img.validate()


def export_png(img: Image2D, path: str | Path) -> None:
    """Lossy 8-bit export for human inspection (min-max windowed)."""
    from PIL import Image as PILImage

    px = img.pixels.astype(np.float64)
    lo, hi = float(px.min()), float(px.max())
    if hi > lo:
        px = (px - lo) / (hi - lo)
    else:
        px = np.zeros_like(px)
    PILImage.fromarray((px * 255.0 + 0.5).astype(np.uint8), mode="L").save(str(path))


# --------------------------------------------------------------------------
# Paired samples and manifests
# --------------------------------------------------------------------------

#: Image roles inside a paired-sample directory, in on-disk layout order.
PAIR_ROLES = (
    "clean/b50",
    "clean/b1400",
    "clean/adc",
    "clean/t2w",
    "clean/mask",
    "distorted/b50",
    "distorted/b1400",
    "distorted/adc",
    "truth/field_hz",
    "truth/vdm_px",
)


@dataclass
class PairedSample:
    """One clean/distorted training pair as indexed by a manifest.

    ``files`` maps a role (see PAIR_ROLES) to a raster stem relative to
    the manifest directory; ``epi_params`` carries the acquisition
    parameters the distortion was simulated with.
    """

    sample_id: str
    dir: str
    phantom_id: str
    slice_index: int
    split: str
    seed: int
    epi_params: Any  # forward.EpiParams; kept loose to avoid an import cycle
    dropped_fraction: float
    files: dict[str, str] = field(default_factory=dict)

    def to_record(self) -> dict:
        from .forward import EpiParams

        params = self.epi_params
        if isinstance(params, EpiParams):
            params = params.to_dict()
        return {
            "sample_id": self.sample_id,
            "dir": self.dir,
            "phantom_id": self.phantom_id,
            "slice_index": self.slice_index,
            "split": self.split,
            "seed": self.seed,
            "epi_params": params,
            "dropped_fraction": self.dropped_fraction,
            "files": dict(self.files),
        }

    @classmethod
    def from_record(cls, rec: Mapping[str, Any]) -> "PairedSample":
        from .forward import EpiParams

        return cls(
            sample_id=str(rec["sample_id"]),
            dir=str(rec["dir"]),
            phantom_id=str(rec["phantom_id"]),
            slice_index=int(rec["slice_index"]),
            split=str(rec["split"]),
            seed=int(rec["seed"]),
            epi_params=EpiParams.from_dict(rec["epi_params"]),
            dropped_fraction=float(rec["dropped_fraction"]),
            files={str(k): str(v) for k, v in rec["files"].items()},
        )


@dataclass
class DatasetManifest:
    """Index of a synthesized dataset directory."""

    version: str = MANIFEST_VERSION
    samples: list[PairedSample] = field(default_factory=list)
    rng_seed: int = 0
    epi_params_used: list = field(default_factory=list)
    created_by: str = ""

    def validate(self) -> "DatasetManifest":
        seen: set[str] = set()
        for s in self.samples:
            if s.sample_id in seen:
                raise ManifestError(f"duplicate sample id {s.sample_id!r}")
            seen.add(s.sample_id)
            if s.split not in ("train", "val", "test"):
                raise ManifestError(
                    f"sample {s.sample_id!r} has unknown split {s.split!r}"
                )
        if not (0 <= int(self.rng_seed) < 2**64):
            raise ManifestError(f"rng_seed {self.rng_seed} outside u64 range")
        return self

    def split_samples(self, split: str) -> list[PairedSample]:
        return [s for s in self.samples if s.split == split]


def write_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    """Write a manifest as human-readable JSON. Validates first."""
    manifest.validate()
    from .forward import EpiParams

    params_used = [
        p.to_dict() if isinstance(p, EpiParams) else dict(p)
        for p in manifest.epi_params_used
    ]
    doc = {
        "version": manifest.version,
        "created_by": manifest.created_by,
        "rng_seed": int(manifest.rng_seed),
        "epi_params_used": params_used,
        "samples": [s.to_record() for s in manifest.samples],
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def read_manifest(path: str | Path, check_files: bool = True) -> DatasetManifest:
    """Read and validate a manifest.

    With ``check_files`` (the default) every raster stem referenced by a
    sample must exist (both sidecar and payload) relative to the
    manifest directory.
    """
    from .forward import EpiParams

    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise ManifestError(f"manifest {path} does not exist") from None
    except json.JSONDecodeError as exc:
        raise ManifestError(f"unparseable manifest {path}: {exc}") from exc

    version = str(doc.get("version", ""))
    if version != MANIFEST_VERSION:
        raise ManifestError(
            f"manifest version {version!r} not supported (expected {MANIFEST_VERSION!r})"
        )
    manifest = DatasetManifest(
        version=version,
        samples=[PairedSample.from_record(r) for r in doc["samples"]],
        rng_seed=int(doc["rng_seed"]),
        epi_params_used=[EpiParams.from_dict(p) for p in doc["epi_params_used"]],
        created_by=str(doc.get("created_by", "")),
    )
    manifest.validate()
    if check_files:
        base = path.parent
        for s in manifest.samples:
            for role, rel in s.files.items():
                stem = base / rel
                for suffix in (".json", ".bin"):
                    if not stem.with_suffix(suffix).exists():
                        raise ManifestError(
                            f"sample {s.sample_id}: dangling path "
                            f"{rel}{suffix} (role {role})"
                        )
    return manifest


def save_pair(sample_dir: str | Path, images: Mapping[str, Image2D],
              params_record: Mapping[str, Any]) -> dict[str, str]:
    """Write a paired-sample directory.

    ``images`` maps roles (a subset of PAIR_ROLES) to rasters; a
    ``params.json`` with the acquisition metadata is written alongside.
    Returns role -> stem paths relative to ``sample_dir``'s parent-of-parent
    caller responsibility; here they are relative to ``sample_dir``.
    """
    sample_dir = Path(sample_dir)
    files: dict[str, str] = {}
    for role in PAIR_ROLES:
        if role not in images:
            continue
        rel = role  # directory layout mirrors the role names
        stem = sample_dir / rel
        stem.parent.mkdir(parents=True, exist_ok=True)
        write_image(images[role], stem)
        files[role] = rel
    (sample_dir / "params.json").write_text(
        json.dumps(dict(params_record), indent=2) + "\n"
    )
    return files


def load_pair(sample_dir: str | Path,
              roles: Iterable[str] | None = None) -> dict[str, Image2D]:
    """Load rasters of a paired-sample directory, keyed by role."""
    sample_dir = Path(sample_dir)
    out: dict[str, Image2D] = {}
    for role in (PAIR_ROLES if roles is None else roles):
        stem = sample_dir / role
        if stem.with_suffix(".json").exists():
            out[role] = read_image(stem)
    return out
