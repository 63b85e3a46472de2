"""ctrlvdiff: a desk-scale unified multimodal video diffusion system.

One model both generates video from any subset of eight per-pixel
modalities (rgb, depth, normal, albedo, roughness, metallic,
segmentation, canny edges) and recovers all of them from rgb alone.
Training assigns each modality a per-sample role (condition / none /
noisy) and supervises only the noisy ones; data comes from a built-in
analytic renderer with exact cross-modal alignment.
"""

from .registry import (
    MODALITY_NAMES,
    NUM_MODALITIES,
    PALETTE_SIZE,
    ModalityTensor,
    from_color_space,
    palette_color,
    to_color_space,
)

__version__ = "0.1.0"

__all__ = [
    "MODALITY_NAMES",
    "NUM_MODALITIES",
    "PALETTE_SIZE",
    "ModalityTensor",
    "from_color_space",
    "palette_color",
    "to_color_space",
    "__version__",
]
