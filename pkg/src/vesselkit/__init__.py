"""vesselkit: volumetric vessel segmentation toolkit.

Pipeline stages: NIfTI volume I/O, multiscale Hessian vesselness
enhancement, 3D patch handling, an attention-gated U-Net on a minimal
reverse-mode tensor engine, Tversky-loss training, and a full evaluation
metric suite. Synthetic tube phantoms provide desk-scale datasets with
exact ground truth.
"""

from .volume import Volume3D, normalize_intensity, read_nifti, write_nifti

__version__ = "0.1.0"

__all__ = [
    "Volume3D",
    "read_nifti",
    "write_nifti",
    "normalize_intensity",
    "__version__",
]
