"""ROI extraction and slice-dataset construction.

Turns annotated volumes into the balanced, normalized, fold-assigned set of
128x128 slice patches the model trains on. All randomness flows through an
explicit numpy Generator.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from .errors import ConfigurationError, PlacementError

if TYPE_CHECKING:
    from .imaging_io import NoduleAnnotation, ScanVolume


@dataclass
class SlicePatch:
    """One normalized image slice with its mask, label and provenance."""

    image: np.ndarray  # (H, W) float32 in [0, 1]
    mask: np.ndarray  # (H, W) uint8 in {0, 1}
    class_label: int
    lesion_id: str
    patient_id: str
    fold: int | None = None
    spacing_yx: tuple[float, float] = (1.0, 1.0)

    def validate(self) -> None:
        if self.image.shape != self.mask.shape:
            raise ValueError(f"{self.lesion_id}: image/mask shape mismatch")
        if self.image.min() < 0.0 or self.image.max() > 1.0:
            raise ValueError(f"{self.lesion_id}: image values outside [0, 1]")
        if not np.isin(self.mask, (0, 1)).all():
            raise ValueError(f"{self.lesion_id}: mask values outside {{0, 1}}")
        if self.class_label != int(self.mask.any()):
            raise ValueError(f"{self.lesion_id}: class_label disagrees with mask")


@dataclass(frozen=True)
class RoiGeometry:
    """Placement of an extracted ROI stack inside its source volume."""

    origin: tuple[float, float, float]  # volume origin, mm (Z,Y,X)
    spacing: tuple[float, float, float]  # mm per voxel (Z,Y,X)
    volume_shape: tuple[int, int, int]
    z_indices: tuple[int, ...]  # absolute volume slice indices
    y0: int  # window top-left in volume coordinates (may be negative)
    x0: int
    height: int
    width: int


@dataclass
class ROIStack:
    """All slices cropped around one lesion; shares lesion/patient identity."""

    slices: list[SlicePatch]
    center_voxel: tuple[int, int, int]
    geometry: RoiGeometry


def normalize_intensity(field: np.ndarray, i_min: float, i_max: float) -> np.ndarray:
    """Map intensities affinely so [i_min, i_max] lands on [0, 1], clamping outside."""
    if i_max <= i_min:
        raise ValueError(f"i_max ({i_max}) must be greater than i_min ({i_min})")
    scaled = (np.asarray(field, dtype=np.float32) - i_min) / (i_max - i_min)
    return np.clip(scaled, 0.0, 1.0).astype(np.float32)


def synthesize_sphere_mask(ann: "NoduleAnnotation", geom: RoiGeometry) -> list[np.ndarray]:
    """Rasterize the annotation sphere onto each slice of an ROI window.

    A pixel is positive iff it lies inside the volume and its world-space
    distance to the annotation centre is at most diameter/2. Anisotropic
    spacing therefore yields an elliptical pixel footprint.
    """
    radius = ann.diameter / 2.0
    oz, oy, ox = geom.origin
    sz, sy, sx = geom.spacing
    cz, cy, cx = ann.center_world

    ys = oy + (geom.y0 + np.arange(geom.height, dtype=np.float64)) * sy
    xs = ox + (geom.x0 + np.arange(geom.width, dtype=np.float64)) * sx
    dy2 = (ys - cy) ** 2
    dx2 = (xs - cx) ** 2
    in_y = (geom.y0 + np.arange(geom.height) >= 0) & (geom.y0 + np.arange(geom.height) < geom.volume_shape[1])
    in_x = (geom.x0 + np.arange(geom.width) >= 0) & (geom.x0 + np.arange(geom.width) < geom.volume_shape[2])
    inside_plane = in_y[:, None] & in_x[None, :]

    masks = []
    for z in geom.z_indices:
        dz2 = (oz + z * sz - cz) ** 2
        dist2 = dz2 + dy2[:, None] + dx2[None, :]
        masks.append(((dist2 <= radius**2) & inside_plane).astype(np.uint8))
    return masks


def extract_roi(
    volume: "ScanVolume",
    ann: "NoduleAnnotation",
    half_depth_mm: float = 5.0,
    patch_size: int = 128,
    lesion_id: str | None = None,
) -> ROIStack:
    """Crop a patch_size^2 in-plane window around the annotation centroid.

    The window is centred on the rounded voxel position of the world centre
    and zero-padded where it crosses the volume border. Slices span
    +-max(half_depth_mm, diameter/2) along Z (clipped to the volume, at
    least the central slice). Image intensities are copied as-is, so pass a
    normalized volume when building training data; masks come from
    synthesize_sphere_mask.
    """
    if ann.series_id != volume.series_id:
        raise ValueError(f"annotation series {ann.series_id} does not match volume {volume.series_id}")

    spacing = np.asarray(volume.spacing, dtype=np.float64)
    origin = np.asarray(volume.origin, dtype=np.float64)
    center = np.rint((np.asarray(ann.center_world) - origin) / spacing).astype(int)
    shape = volume.voxels.shape
    if any(c < 0 or c >= n for c, n in zip(center, shape)):
        raise PlacementError(
            f"centre voxel {tuple(center)} outside volume of shape {shape} ({ann.series_id})"
        )
    cz, cy, cx = (int(c) for c in center)

    half_mm = max(half_depth_mm, ann.diameter / 2.0)
    k_max = int(np.floor(half_mm / spacing[0]))
    z_indices = tuple(
        z for z in range(cz - k_max, cz + k_max + 1) if 0 <= z < shape[0]
    ) or (cz,)

    half = patch_size // 2
    y0, x0 = cy - half, cx - half
    geom = RoiGeometry(
        origin=tuple(origin),
        spacing=tuple(spacing),
        volume_shape=shape,
        z_indices=z_indices,
        y0=y0,
        x0=x0,
        height=patch_size,
        width=patch_size,
    )
    masks = synthesize_sphere_mask(ann, geom)

    ys0, ys1 = max(y0, 0), min(y0 + patch_size, shape[1])
    xs0, xs1 = max(x0, 0), min(x0 + patch_size, shape[2])
    if lesion_id is None:
        lesion_id = f"{ann.series_id}-z{cz}y{cy}x{cx}"

    slices = []
    for z, mask in zip(z_indices, masks):
        image = np.zeros((patch_size, patch_size), dtype=np.float32)
        image[ys0 - y0 : ys1 - y0, xs0 - x0 : xs1 - x0] = volume.voxels[z, ys0:ys1, xs0:xs1]
        slices.append(
            SlicePatch(
                image=image,
                mask=mask,
                class_label=int(mask.any()),
                lesion_id=lesion_id,
                patient_id=volume.series_id,
                spacing_yx=(float(spacing[1]), float(spacing[2])),
            )
        )
    return ROIStack(slices=slices, center_voxel=(cz, cy, cx), geometry=geom)


def build_slice_dataset(
    stacks: list[ROIStack],
    keep_ratio: float = 1.0,
    k_folds: int = 5,
    seed: int = 0,
) -> list[SlicePatch]:
    """Balance empty slices against nodule slices and assign folds by lesion.

    Keeps every nodule-bearing slice plus the round(keep_ratio * n_nodule)
    empty slices closest to the nodule span (nearest-first). Lesions are
    shuffled with the seed and dealt round-robin into k_folds folds, so a
    lesion never spans folds; rerunning with identical inputs is identical.
    """
    if k_folds < 2:
        raise ConfigurationError(f"k_folds must be >= 2, got {k_folds}")
    if keep_ratio < 0:
        raise ConfigurationError(f"keep_ratio must be >= 0, got {keep_ratio}")

    kept_per_lesion: dict[str, list[SlicePatch]] = {}
    for stack in stacks:
        if not stack.slices:
            continue
        lesion_id = stack.slices[0].lesion_id
        nodule_idx = [i for i, p in enumerate(stack.slices) if p.class_label == 1]
        empty_idx = [i for i, p in enumerate(stack.slices) if p.class_label == 0]
        if nodule_idx:
            lo, hi = min(nodule_idx), max(nodule_idx)
            n_keep = int(round(keep_ratio * len(nodule_idx)))
            by_distance = sorted(empty_idx, key=lambda i: (max(lo - i, i - hi, 0), i))
            kept = sorted(nodule_idx + by_distance[:n_keep])
        else:
            kept = []
        if kept:
            kept_per_lesion.setdefault(lesion_id, []).extend(stack.slices[i] for i in kept)

    lesion_ids = list(kept_per_lesion)
    if len(lesion_ids) < k_folds:
        raise ConfigurationError(
            f"need at least {k_folds} lesions for {k_folds} folds, got {len(lesion_ids)}"
        )

    rng = np.random.default_rng(seed)
    order = rng.permutation(len(lesion_ids))
    fold_of = {lesion_ids[j]: int(pos % k_folds) for pos, j in enumerate(order)}

    dataset = []
    for lesion_id in lesion_ids:
        for patch in kept_per_lesion[lesion_id]:
            patch.fold = fold_of[lesion_id]
            patch.validate()
            dataset.append(patch)
    return dataset


def augment_flip(patch: SlicePatch, rng: np.random.Generator) -> SlicePatch:
    """Flip image and mask together, horizontally and vertically with p=0.5 each."""
    image, mask = patch.image, patch.mask
    if rng.random() < 0.5:
        image, mask = image[:, ::-1], mask[:, ::-1]
    if rng.random() < 0.5:
        image, mask = image[::-1, :], mask[::-1, :]
    return dataclasses.replace(patch, image=np.ascontiguousarray(image), mask=np.ascontiguousarray(mask))
