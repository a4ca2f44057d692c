"""3D patch sampling, sliding-window tiling, and overlap-aware stitching.

Training uses seeded random patches with a foreground quota; inference
tiles volumes on a deterministic grid whose last patch per axis is clamped
to the boundary, and overlapping predictions are averaged back into a full
volume.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import FormatError, SamplingError, ShapeError
from .volume import Volume3D, read_nifti, write_nifti


@dataclass(frozen=True)
class PatchGrid:
    """Deterministic tiling plan mapping patch origins onto a volume."""

    volume_dims: tuple[int, int, int]
    patch_size: tuple[int, int, int]
    stride: tuple[int, int, int]
    origins: tuple[tuple[int, int, int], ...]

    def __len__(self):
        return len(self.origins)


class SampledPatch(NamedTuple):
    """An (image, label) patch pair plus the corner it was cut from."""

    image: np.ndarray
    label: np.ndarray
    origin: tuple[int, int, int]


def _as_triple(value) -> tuple[int, int, int]:
    if np.isscalar(value):
        return (int(value),) * 3
    t = tuple(int(x) for x in value)
    if len(t) != 3:
        raise ShapeError(f"expected a scalar or 3 components, got {value!r}")
    return t


def make_grid(volume_dims, patch_size, stride) -> PatchGrid:
    """Regular lattice of patch origins covering every voxel.

    Origins advance by stride per axis; one final origin per axis is
    clamped to volume_dim - patch_size so the boundary is covered.
    """
    dims = _as_triple(volume_dims)
    patch = _as_triple(patch_size)
    step = _as_triple(stride)
    for d, p, s in zip(dims, patch, step):
        if p > d:
            raise ShapeError(f"patch size {patch} exceeds volume dims {dims}")
        if not 0 < s <= p:
            raise ShapeError(f"stride {step} must satisfy 0 < stride <= patch size {patch}")
    per_axis = []
    for d, p, s in zip(dims, patch, step):
        starts = list(range(0, d - p + 1, s))
        if starts[-1] != d - p:
            starts.append(d - p)
        per_axis.append(starts)
    origins = tuple(
        (x, y, z) for x in per_axis[0] for y in per_axis[1] for z in per_axis[2]
    )
    return PatchGrid(dims, patch, step, origins)


def extract_patch(data: np.ndarray, origin, patch_size) -> np.ndarray:
    ox, oy, oz = origin
    px, py, pz = _as_triple(patch_size)
    return data[ox : ox + px, oy : oy + py, oz : oz + pz]


def extract_patches(data: np.ndarray, grid: PatchGrid) -> list[np.ndarray]:
    """Cut one patch per grid origin (views, not copies)."""
    if tuple(data.shape) != grid.volume_dims:
        raise ShapeError(f"data shape {data.shape} does not match grid dims {grid.volume_dims}")
    return [extract_patch(data, o, grid.patch_size) for o in grid.origins]


def stitch(grid: PatchGrid, patch_outputs, spacing=(1.0, 1.0, 1.0)) -> Volume3D:
    """Average overlapping patch predictions back into a full volume.

    Each voxel's value is the arithmetic mean of every patch prediction
    covering it.
    """
    if len(patch_outputs) != len(grid.origins):
        raise ShapeError(
            f"got {len(patch_outputs)} patch outputs for {len(grid.origins)} grid origins"
        )
    acc = np.zeros(grid.volume_dims, dtype=np.float64)
    count = np.zeros(grid.volume_dims, dtype=np.int32)
    px, py, pz = grid.patch_size
    for origin, patch in zip(grid.origins, patch_outputs):
        patch = np.asarray(patch)
        if tuple(patch.shape) != grid.patch_size:
            raise ShapeError(f"patch shape {patch.shape} does not match {grid.patch_size}")
        ox, oy, oz = origin
        acc[ox : ox + px, oy : oy + py, oz : oz + pz] += patch
        count[ox : ox + px, oy : oy + py, oz : oz + pz] += 1
    out = (acc / count).astype(np.float32)
    return Volume3D(np.clip(out, 0.0, 1.0), spacing, "probability")


def sample_random_patches(
    v: Volume3D,
    labels: Volume3D,
    n: int,
    size,
    seed: int,
    fg_fraction: float = 0.5,
    max_attempts_per_patch: int = 1000,
) -> list[SampledPatch]:
    """Draw n seeded random patch pairs with a vessel-containing quota.

    At least ceil(fg_fraction * n) of the returned patches contain a
    foreground voxel, found by rejection sampling; identical inputs give
    identical output. Raises SamplingError when the quota cannot be met
    within the attempt budget.
    """
    size = _as_triple(size)
    if labels.kind != "binary-mask":
        raise ShapeError(f"labels must be a binary-mask volume, got kind {labels.kind!r}")
    if v.dims != labels.dims:
        raise ShapeError(f"volume dims {v.dims} differ from label dims {labels.dims}")
    if any(p > d for p, d in zip(size, v.dims)):
        raise ShapeError(f"patch size {size} exceeds volume dims {v.dims}")
    if not 0.0 <= fg_fraction <= 1.0:
        raise SamplingError(f"fg_fraction must be in [0, 1], got {fg_fraction}")

    rng = np.random.default_rng(seed)
    high = [d - p + 1 for d, p in zip(v.dims, size)]
    need_fg = math.ceil(fg_fraction * n)
    out: list[SampledPatch] = []
    for i in range(n):
        want_fg = i < need_fg
        attempts = 0
        while True:
            origin = tuple(int(rng.integers(0, h)) for h in high)
            lbl = extract_patch(labels.data, origin, size)
            if not want_fg or lbl.any():
                break
            attempts += 1
            if attempts >= max_attempts_per_patch:
                raise SamplingError(
                    f"no foreground patch found in {max_attempts_per_patch} attempts; "
                    f"labels may be empty"
                )
        img = extract_patch(v.data, origin, size)
        out.append(SampledPatch(img.copy(), lbl.astype(np.uint8), origin))
    return out


def save_patch_dataset(out_dir, patches: list[SampledPatch], spacing=(1.0, 1.0, 1.0)) -> Path:
    """Persist patch pairs as NIfTI files plus a plain-text manifest.

    Manifest line format: image file <TAB> label file <TAB> x,y,z origin.
    Returns the manifest path.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, p in enumerate(patches):
        img_name = f"patch_{i:04d}.nii.gz"
        lbl_name = f"label_{i:04d}.nii.gz"
        write_nifti(Volume3D(p.image, spacing, "intensity"), out_dir / img_name)
        write_nifti(Volume3D(p.label.astype(np.float32), spacing, "binary-mask"), out_dir / lbl_name)
        lines.append(f"{img_name}\t{lbl_name}\t{p.origin[0]},{p.origin[1]},{p.origin[2]}")
    manifest = out_dir / "patches.manifest"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def load_patch_dataset(manifest_path) -> list[SampledPatch]:
    """Read back a patch dataset written by save_patch_dataset."""
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    out = []
    for lineno, line in enumerate(manifest_path.read_text().splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise FormatError(f"{manifest_path}:{lineno}: expected 3 tab-separated fields")
        img = read_nifti(base / parts[0])
        lbl = read_nifti(base / parts[1], kind="binary-mask")
        origin = tuple(int(x) for x in parts[2].split(","))
        out.append(SampledPatch(img.data, lbl.data.astype(np.uint8), origin))
    return out
