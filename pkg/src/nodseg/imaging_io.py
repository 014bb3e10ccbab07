"""Volume and dataset I/O.

Reads MetaImage (.mhd/.raw) CT volumes and LUNA16-style annotation CSVs,
and persists the preprocessed 2D patch dataset as raw little-endian
float32 images + uint8 masks next to a JSON manifest.

All arrays use (Z, Y, X) axis order; annotation coordinates arrive as
(X, Y, Z) world millimetres and are reordered at ingestion.
"""
from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, IntegrityError, TruncationError
from .roi_pipeline import SlicePatch

logger = logging.getLogger(__name__)

MANIFEST_VERSION = 1
MANIFEST_NAME = "manifest.json"

# MetaImage element types we accept (uncompressed, single component).
_ELEMENT_DTYPES = {
    "MET_CHAR": np.int8,
    "MET_UCHAR": np.uint8,
    "MET_SHORT": np.int16,
    "MET_USHORT": np.uint16,
    "MET_INT": np.int32,
    "MET_UINT": np.uint32,
    "MET_FLOAT": np.float32,
    "MET_DOUBLE": np.float64,
}

_REQUIRED_HEADER_KEYS = ("DimSize", "ElementSpacing", "ElementType", "ElementDataFile")
_ANNOTATION_COLUMNS = ("seriesuid", "coordX", "coordY", "coordZ", "diameter_mm")


@dataclass
class ScanVolume:
    """A 3D CT volume with voxel spacing and world origin in mm, (Z,Y,X) order."""

    voxels: np.ndarray
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float]
    series_id: str

    def __post_init__(self):
        if self.voxels.ndim != 3 or min(self.voxels.shape) < 1:
            raise ValueError(f"voxels must be a non-empty 3D array, got shape {self.voxels.shape}")
        if any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing components must be > 0, got {self.spacing}")


@dataclass(frozen=True)
class NoduleAnnotation:
    """One merged nodule annotation: world-mm centre in (Z,Y,X) order and diameter."""

    series_id: str
    center_world: tuple[float, float, float]
    diameter: float

    def __post_init__(self):
        if self.diameter <= 0:
            raise ValueError(f"diameter must be > 0, got {self.diameter}")


@dataclass
class ManifestEntry:
    image_path: str
    mask_path: str
    class_label: int
    lesion_id: str
    patient_id: str
    fold: int | None
    spacing_yx: tuple[float, float]


@dataclass
class PatchManifest:
    """Index of a patch dataset directory; see write_patch_dataset for the layout."""

    entries: list[ManifestEntry] = field(default_factory=list)
    patch_height: int = 128
    patch_width: int = 128
    version: int = MANIFEST_VERSION

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "patch_height": self.patch_height,
            "patch_width": self.patch_width,
            "entries": [
                {
                    "image_path": e.image_path,
                    "mask_path": e.mask_path,
                    "class_label": e.class_label,
                    "lesion_id": e.lesion_id,
                    "patient_id": e.patient_id,
                    "fold": e.fold,
                    "spacing_yx": list(e.spacing_yx),
                }
                for e in self.entries
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PatchManifest":
        try:
            entries = [
                ManifestEntry(
                    image_path=e["image_path"],
                    mask_path=e["mask_path"],
                    class_label=int(e["class_label"]),
                    lesion_id=e["lesion_id"],
                    patient_id=e["patient_id"],
                    fold=None if e["fold"] is None else int(e["fold"]),
                    spacing_yx=(float(e["spacing_yx"][0]), float(e["spacing_yx"][1])),
                )
                for e in d["entries"]
            ]
            return cls(
                entries=entries,
                patch_height=int(d["patch_height"]),
                patch_width=int(d["patch_width"]),
                version=int(d["version"]),
            )
        except (KeyError, TypeError, IndexError) as exc:
            raise IntegrityError(f"malformed manifest: {exc}") from exc


def _parse_vector(value: str, n: int, key: str) -> tuple[float, ...]:
    parts = value.split()
    if len(parts) != n:
        raise FormatError(f"{key} must have {n} components, got {value!r}")
    try:
        return tuple(float(p) for p in parts)
    except ValueError as exc:
        raise FormatError(f"cannot parse {key} = {value!r}") from exc


def read_metaimage(path: str | Path) -> ScanVolume:
    """Read an uncompressed MetaImage volume (.mhd header + companion raw file).

    Spacing and origin are taken from ElementSpacing/Offset and reordered
    from the header's (X,Y,Z) to (Z,Y,X); voxels are converted to float32.
    Compressed or embedded (LOCAL/LIST) data is rejected.
    """
    path = Path(path)
    header: dict[str, str] = {}
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line or "=" not in line:
            continue
        key, _, value = line.partition("=")
        header[key.strip()] = value.strip()

    for key in _REQUIRED_HEADER_KEYS:
        if key not in header:
            raise FormatError(f"{path.name}: missing required header key {key}")

    if header.get("CompressedData", "False").lower() == "true":
        raise FormatError(f"{path.name}: compressed MetaImage is not supported")

    ndims = int(header.get("NDims", "3"))
    if ndims != 3:
        raise FormatError(f"{path.name}: expected NDims = 3, got {ndims}")

    dim_xyz = tuple(int(v) for v in _parse_vector(header["DimSize"], 3, "DimSize"))
    spacing_xyz = _parse_vector(header["ElementSpacing"], 3, "ElementSpacing")
    offset_xyz = (
        _parse_vector(header["Offset"], 3, "Offset") if "Offset" in header else (0.0, 0.0, 0.0)
    )
    if any(s <= 0 for s in spacing_xyz):
        raise FormatError(f"{path.name}: non-positive ElementSpacing {spacing_xyz}")

    elem_type = header["ElementType"]
    if elem_type not in _ELEMENT_DTYPES:
        raise FormatError(f"{path.name}: unsupported ElementType {elem_type}")
    dtype = np.dtype(_ELEMENT_DTYPES[elem_type])

    data_file = header["ElementDataFile"]
    if data_file.upper() in ("LOCAL", "LIST"):
        raise FormatError(f"{path.name}: ElementDataFile {data_file} is not supported")
    raw_path = path.parent / data_file
    if not raw_path.exists():
        raise FormatError(f"{path.name}: companion raw file {data_file} not found")

    big_endian = (
        header.get("ElementByteOrderMSB", header.get("BinaryDataByteOrderMSB", "False")).lower()
        == "true"
    )
    if big_endian:
        dtype = dtype.newbyteorder(">")

    raw = raw_path.read_bytes()
    expected = int(np.prod(dim_xyz)) * dtype.itemsize
    if len(raw) != expected:
        raise TruncationError(
            f"{raw_path.name}: expected {expected} bytes for DimSize {dim_xyz}, got {len(raw)}"
        )

    # Raw data is x-fastest; reshape to (Z, Y, X).
    voxels = np.frombuffer(raw, dtype=dtype).reshape(dim_xyz[::-1]).astype(np.float32)
    return ScanVolume(
        voxels=voxels,
        spacing=spacing_xyz[::-1],
        origin=offset_xyz[::-1],
        series_id=path.stem,
    )


def write_metaimage(volume: ScanVolume, path: str | Path) -> None:
    """Write a volume as an uncompressed MET_FLOAT .mhd/.raw pair (little-endian)."""
    path = Path(path)
    raw_name = path.stem + ".raw"
    z, y, x = volume.voxels.shape
    sz, sy, sx = volume.spacing
    oz, oy, ox = volume.origin
    header = "\n".join(
        [
            "ObjectType = Image",
            "NDims = 3",
            "BinaryData = True",
            "BinaryDataByteOrderMSB = False",
            "CompressedData = False",
            f"DimSize = {x} {y} {z}",
            f"ElementSpacing = {sx} {sy} {sz}",
            f"Offset = {ox} {oy} {oz}",
            "ElementType = MET_FLOAT",
            f"ElementDataFile = {raw_name}",
        ]
    )
    path.write_text(header + "\n")
    data = np.ascontiguousarray(volume.voxels, dtype="<f4")
    (path.parent / raw_name).write_bytes(data.tobytes())


def read_annotations(path: str | Path) -> list[NoduleAnnotation]:
    """Read a merged annotation CSV (seriesuid, coordX/Y/Z, diameter_mm).

    World coordinates are reordered to (Z,Y,X). Rows with unparsable fields
    or non-positive diameters are rejected with a logged warning count;
    a missing column raises FormatError.
    """
    import csv

    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise FormatError(f"{path.name}: empty annotation file")
        missing = [c for c in _ANNOTATION_COLUMNS if c not in reader.fieldnames]
        if missing:
            raise FormatError(f"{path.name}: missing columns {missing}")

        annotations: list[NoduleAnnotation] = []
        rejected = 0
        for row_no, row in enumerate(reader, start=2):
            try:
                cx, cy, cz = (float(row[c]) for c in ("coordX", "coordY", "coordZ"))
                diameter = float(row["diameter_mm"])
                if diameter <= 0:
                    raise ValueError(f"non-positive diameter {diameter}")
            except (ValueError, TypeError) as exc:
                logger.warning("%s line %d rejected: %s", path.name, row_no, exc)
                rejected += 1
                continue
            annotations.append(
                NoduleAnnotation(
                    series_id=row["seriesuid"],
                    center_world=(cz, cy, cx),
                    diameter=diameter,
                )
            )
    if rejected:
        logger.warning("%s: rejected %d of %d rows", path.name, rejected, rejected + len(annotations))
    return annotations


def _slug(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]+", "-", name)


def write_patch_dataset(patches: list[SlicePatch], out_dir: str | Path) -> PatchManifest:
    """Persist patches as raw files plus manifest.json; entry order = input order.

    Images are little-endian float32 row-major ({lesion}_{slice}.img), masks
    one byte per pixel in {0,1} ({lesion}_{slice}.msk). All patches must be
    128x128.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    manifest = PatchManifest(patch_height=128, patch_width=128)
    counters: dict[str, int] = {}
    for patch in patches:
        if patch.image.shape != (128, 128) or patch.mask.shape != (128, 128):
            raise ValueError(
                f"patch {patch.lesion_id}: expected 128x128, got {patch.image.shape}"
            )
        patch.validate()
        k = counters.get(patch.lesion_id, 0)
        counters[patch.lesion_id] = k + 1
        stem = f"{_slug(patch.lesion_id)}_{k:03d}"
        image_name, mask_name = stem + ".img", stem + ".msk"
        (out_dir / image_name).write_bytes(
            np.ascontiguousarray(patch.image, dtype="<f4").tobytes()
        )
        (out_dir / mask_name).write_bytes(
            np.ascontiguousarray(patch.mask, dtype=np.uint8).tobytes()
        )
        manifest.entries.append(
            ManifestEntry(
                image_path=image_name,
                mask_path=mask_name,
                class_label=patch.class_label,
                lesion_id=patch.lesion_id,
                patient_id=patch.patient_id,
                fold=patch.fold,
                spacing_yx=tuple(patch.spacing_yx),
            )
        )

    (out_dir / MANIFEST_NAME).write_text(json.dumps(manifest.to_dict(), indent=2))
    return manifest


def load_patch_dataset(in_dir: str | Path) -> tuple[PatchManifest, list[SlicePatch]]:
    """Load a patch dataset, checking byte-length and label invariants per entry."""
    in_dir = Path(in_dir)
    manifest_path = in_dir / MANIFEST_NAME
    if not manifest_path.exists():
        raise IntegrityError(f"{manifest_path} not found")
    manifest = PatchManifest.from_dict(json.loads(manifest_path.read_text()))

    h, w = manifest.patch_height, manifest.patch_width
    patches: list[SlicePatch] = []
    for entry in manifest.entries:
        image_path, mask_path = in_dir / entry.image_path, in_dir / entry.mask_path
        for p, nbytes in ((image_path, 4 * h * w), (mask_path, h * w)):
            if not p.exists():
                raise IntegrityError(f"entry {entry.image_path}: missing file {p.name}")
            if p.stat().st_size != nbytes:
                raise IntegrityError(
                    f"entry {entry.image_path}: {p.name} has {p.stat().st_size} bytes, expected {nbytes}"
                )
        image = np.frombuffer(image_path.read_bytes(), dtype="<f4").reshape(h, w)
        mask = np.frombuffer(mask_path.read_bytes(), dtype=np.uint8).reshape(h, w)
        if not np.isin(mask, (0, 1)).all():
            raise IntegrityError(f"entry {entry.mask_path}: mask values outside {{0,1}}")
        if entry.class_label != int(mask.any()):
            raise IntegrityError(
                f"entry {entry.image_path}: class_label {entry.class_label} "
                f"disagrees with mask positive count {int(mask.sum())}"
            )
        patches.append(
            SlicePatch(
                image=image.astype(np.float32),
                mask=mask,
                class_label=entry.class_label,
                lesion_id=entry.lesion_id,
                patient_id=entry.patient_id,
                fold=entry.fold,
                spacing_yx=entry.spacing_yx,
            )
        )
    return manifest, patches
