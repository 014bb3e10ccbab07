"""Shared fixtures-as-functions for the test suite: tiny models, toy patches."""
import numpy as np

from nodseg.network import ModelConfig
from nodseg.roi_pipeline import SlicePatch
from nodseg.std_activation import STDParams


def tiny_model_config(**overrides) -> ModelConfig:
    """A model small enough for single-core CI, same topology as the default."""
    base = dict(
        encoder_widths=(4, 6, 8, 8, 8),
        decoder_widths=(8, 6, 4, 4),
        classifier_base_width=2,
        classifier_blocks=(1, 1, 1, 1),
        aspp_rates=(1, 2),
        std=STDParams(iters=2),
    )
    base.update(overrides)
    return ModelConfig(**base)


def disc_mask(size: int, center, radius: float) -> np.ndarray:
    yy, xx = np.mgrid[:size, :size]
    return (((yy - center[0]) ** 2 + (xx - center[1]) ** 2) <= radius**2).astype(np.uint8)


def disc_patch(
    rng,
    size: int = 32,
    lesion_id: str = "lesion-1",
    fold=0,
    positive: bool = True,
    spacing=(0.7, 0.7),
) -> SlicePatch:
    """A toy patch: bright disc on a dark, slightly noisy background."""
    if positive:
        center = rng.integers(size // 4, 3 * size // 4, size=2)
        mask = disc_mask(size, center, rng.uniform(3, size // 5))
    else:
        mask = np.zeros((size, size), dtype=np.uint8)
    noise = rng.normal(0.0, 0.03, (size, size))
    image = np.clip(mask * 0.6 + 0.2 + noise, 0.0, 1.0).astype(np.float32)
    return SlicePatch(
        image=image,
        mask=mask,
        class_label=int(mask.any()),
        lesion_id=lesion_id,
        patient_id=f"pat-{lesion_id}",
        fold=fold,
        spacing_yx=spacing,
    )


def toy_dataset(rng, n_lesions: int = 2, slices_per_lesion: int = 2, size: int = 32, k_folds: int = 2):
    patches = []
    for lesion in range(n_lesions):
        for _ in range(slices_per_lesion):
            patches.append(
                disc_patch(rng, size=size, lesion_id=f"L{lesion}", fold=lesion % k_folds)
            )
    return patches
