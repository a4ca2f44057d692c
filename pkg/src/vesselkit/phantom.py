"""Synthetic vascular phantoms with exact ground truth.

Tubes are swept along parametric centerlines (polylines, helices, and
bifurcations built from joined polylines) with linearly varying radii.
The truth mask is the union of voxels within the local radius of any
centerline, computed from exact point-to-segment distances in mm; the
intensity volume is the mask contrast-blended, blurred, and noised from a
seeded generator, so every dataset is reproducible byte for byte.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import DomainError, FormatError
from .volume import Volume3D, write_nifti


@dataclass(frozen=True)
class Curve:
    """Polyline centerline (points in mm) with start/end tube radii."""

    points: np.ndarray
    radius_start: float
    radius_end: float

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) < 2:
            raise DomainError(f"curve needs at least 2 points of 3 coords, got {pts.shape}")
        object.__setattr__(self, "points", pts)
        if self.radius_start <= 0 or self.radius_end <= 0:
            raise DomainError("tube radii must be positive")

    def max_radius(self) -> float:
        return max(self.radius_start, self.radius_end)


def make_line(start, end, radius_start: float, radius_end: float | None = None) -> Curve:
    if radius_end is None:
        radius_end = radius_start
    return Curve(np.array([start, end], dtype=np.float64), radius_start, radius_end)


def make_helix(center, axis_length: float, coil_radius: float, pitch: float,
               tube_radius: float, n_points: int = 96, phase: float = 0.0) -> Curve:
    """Helix around the z axis through center, sampled as a polyline."""
    turns = axis_length / pitch if pitch > 0 else 1.0
    t = np.linspace(0.0, 1.0, n_points)
    ang = phase + 2.0 * np.pi * turns * t
    cx, cy, cz = center
    pts = np.stack(
        [cx + coil_radius * np.cos(ang), cy + coil_radius * np.sin(ang),
         cz - axis_length / 2.0 + axis_length * t],
        axis=1,
    )
    return Curve(pts, tube_radius, tube_radius)


def make_bifurcation(root, fork, branch_a, branch_b, radius_root: float,
                     radius_branch: float) -> list[Curve]:
    """A parent tube splitting into two thinner children at a shared point."""
    parent = make_line(root, fork, radius_root, radius_root)
    child_a = make_line(fork, branch_a, radius_branch, radius_branch)
    child_b = make_line(fork, branch_b, radius_branch, radius_branch)
    return [parent, child_a, child_b]


@dataclass(frozen=True)
class PhantomSpec:
    """Everything needed to generate one phantom deterministically."""

    dims: tuple[int, int, int]
    curves: tuple[Curve, ...]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    foreground: float = 0.8
    background: float = 0.2
    blur_sigma_mm: float = 0.5
    noise_std: float = 0.1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "curves", tuple(self.curves))
        if len(self.curves) == 0:
            raise DomainError("phantom needs at least one curve")
        extent = [(d - 1) * s for d, s in zip(self.dims, self.spacing)]
        max_r = max(c.max_radius() for c in self.curves)
        if max_r >= min(extent) / 4.0:
            raise DomainError(
                f"tube radius {max_r} mm too large for volume extent {extent} mm"
            )
        for c in self.curves:
            lo = c.points.min(axis=0)
            hi = c.points.max(axis=0)
            if (lo < 0.0).any() or (hi > np.asarray(extent)).any():
                raise DomainError(
                    f"curve leaves the volume: bounds [{lo}, {hi}] vs extent {extent}"
                )


def _segment_distance_field(points_mm: np.ndarray, a, b, ra, rb):
    """Distance from every voxel to segment ab, and the local radius there."""
    ab = b - a
    ab2 = float(ab @ ab)
    rel = points_mm - a
    if ab2 == 0.0:
        t = np.zeros(points_mm.shape[:-1])
    else:
        t = np.clip((rel @ ab) / ab2, 0.0, 1.0)
    closest = a + t[..., None] * ab
    dist = np.linalg.norm(points_mm - closest, axis=-1)
    return dist, ra + t * (rb - ra)


def point_to_segment_distance(p, a, b) -> float:
    """Scalar reference used to validate the vectorized field (oracle path)."""
    p, a, b = (np.asarray(v, dtype=np.float64) for v in (p, a, b))
    ab = b - a
    ab2 = float(ab @ ab)
    if ab2 == 0.0:
        return float(np.linalg.norm(p - a))
    t = min(1.0, max(0.0, float((p - a) @ ab) / ab2))
    return float(np.linalg.norm(p - (a + t * ab)))


def _curve_segment_radii(curve: Curve):
    pts = curve.points
    seg_len = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    total = seg_len.sum()
    if total == 0.0:
        raise DomainError("curve has zero length")
    ends = np.concatenate([[0.0], np.cumsum(seg_len)]) / total
    radii = curve.radius_start + ends * (curve.radius_end - curve.radius_start)
    return pts, radii


def rasterize_mask(spec: PhantomSpec) -> np.ndarray:
    """Exact union-of-tubes occupancy over voxel centers.

    Each segment only touches voxels inside its bounding box plus the
    local radius, so distances are evaluated on that window alone.
    """
    axes = [np.arange(d) * s for d, s in zip(spec.dims, spec.spacing)]
    spacing = np.asarray(spec.spacing)
    mask = np.zeros(spec.dims, dtype=bool)
    for curve in spec.curves:
        pts, radii = _curve_segment_radii(curve)
        for i in range(len(pts) - 1):
            a, b = pts[i], pts[i + 1]
            r = max(radii[i], radii[i + 1])
            lo_mm = np.minimum(a, b) - r
            hi_mm = np.maximum(a, b) + r
            lo = np.maximum(np.floor(lo_mm / spacing).astype(int), 0)
            hi = np.minimum(np.ceil(hi_mm / spacing).astype(int) + 1, spec.dims)
            if (lo >= hi).any():
                continue
            window = np.stack(
                np.meshgrid(*(ax[l:h] for ax, l, h in zip(axes, lo, hi)), indexing="ij"),
                axis=-1,
            )
            dist, local_r = _segment_distance_field(window, a, b, radii[i], radii[i + 1])
            mask[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] |= dist <= local_r
    return mask


def generate_phantom(spec: PhantomSpec) -> tuple[Volume3D, Volume3D]:
    """Render (intensity, truth-mask) volumes for one spec."""
    mask = rasterize_mask(spec)
    img = np.where(mask, spec.foreground, spec.background).astype(np.float64)
    if spec.blur_sigma_mm > 0:
        sig_vox = [spec.blur_sigma_mm / s for s in spec.spacing]
        img = gaussian_filter(img, sig_vox, mode="reflect")
    if spec.noise_std > 0:
        rng = np.random.default_rng(spec.seed)
        img = img + rng.normal(0.0, spec.noise_std, size=img.shape)
    return (
        Volume3D(img.astype(np.float32), spec.spacing, "intensity"),
        Volume3D(mask.astype(np.float32), spec.spacing, "binary-mask"),
    )


# ---------------------------------------------------------------------------
# dataset generation

@dataclass(frozen=True)
class DatasetRanges:
    """Sampling ranges for randomized phantom datasets."""

    dims: tuple[int, int, int] = (48, 48, 48)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    curves_min: int = 1
    curves_max: int = 4
    radius_mm: tuple[float, float] = (1.0, 4.0)
    noise_std: tuple[float, float] = (0.05, 0.15)
    blur_sigma_mm: float = 0.5
    max_foreground_fraction: float = 0.05
    splits: tuple[float, float, float] = (0.8, 0.1, 0.1)


def _random_spec(rng: np.random.Generator, ranges: DatasetRanges, seed: int) -> PhantomSpec:
    """One randomized spec; redraws radii until the mask is sparse enough."""
    extent = np.array([(d - 1) * s for d, s in zip(ranges.dims, ranges.spacing)])
    margin = ranges.radius_mm[1] + 1.0

    def rand_point():
        return rng.uniform(margin, extent - margin)

    for attempt in range(50):
        shrink = 0.85**attempt
        n_curves = int(rng.integers(ranges.curves_min, ranges.curves_max + 1))
        curves: list[Curve] = []
        while len(curves) < n_curves:
            r = rng.uniform(*ranges.radius_mm) * shrink
            r = max(r, ranges.radius_mm[0] * 0.5)
            kind = rng.integers(0, 3)
            if kind == 0:  # straight or tapered line
                r2 = r * rng.uniform(0.6, 1.0)
                curves.append(make_line(rand_point(), rand_point(), r, r2))
            elif kind == 1:  # helix
                axis_len = float(rng.uniform(0.4, 0.8) * extent[2])
                coil_r = float(rng.uniform(3.0, max(4.0, extent[0] / 5.0)))
                center = (extent / 2.0) + rng.uniform(-4.0, 4.0, size=3)
                center[2] = extent[2] / 2.0
                pitch = float(rng.uniform(axis_len / 3.0, axis_len))
                helix = make_helix(center, axis_len, coil_r, pitch, r,
                                   phase=float(rng.uniform(0, 2 * np.pi)))
                pts = np.clip(helix.points, margin, extent - margin)
                curves.append(Curve(pts, r, r))
            else:  # bifurcation counts as one vessel tree
                root, fork = rand_point(), rand_point()
                curves.extend(
                    make_bifurcation(root, fork, rand_point(), rand_point(), r, r * 0.7)
                )
        spec = PhantomSpec(
            dims=ranges.dims,
            curves=tuple(curves),
            spacing=ranges.spacing,
            blur_sigma_mm=ranges.blur_sigma_mm,
            noise_std=float(rng.uniform(*ranges.noise_std)),
            seed=seed,
        )
        frac = rasterize_mask(spec).mean()
        if 0.0 < frac < ranges.max_foreground_fraction:
            return spec
    raise DomainError("could not draw a sparse phantom within the attempt budget")


def generate_dataset(out_dir, n_volumes: int, seed: int,
                     ranges: DatasetRanges | None = None) -> Path:
    """Write n phantom NIfTI pairs plus a manifest with train/val/test splits.

    Split sizes follow the configured proportions (0.8/0.1/0.1 by default,
    rounded, with every split nonempty when n allows). Returns the
    manifest path.
    """
    if n_volumes < 1:
        raise DomainError(f"need at least one volume, got {n_volumes}")
    if ranges is None:
        ranges = DatasetRanges()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)

    n_val = max(1, round(ranges.splits[1] * n_volumes)) if n_volumes >= 3 else 0
    n_test = max(1, round(ranges.splits[2] * n_volumes)) if n_volumes >= 3 else 0
    n_train = n_volumes - n_val - n_test
    split_names = ["train"] * n_train + ["val"] * n_val + ["test"] * n_test

    lines = []
    for i, split in enumerate(split_names):
        spec = _random_spec(rng, ranges, seed=seed * 100003 + i)
        img, mask = generate_phantom(spec)
        img_name = f"vol_{i:03d}.nii.gz"
        mask_name = f"seg_{i:03d}.nii.gz"
        write_nifti(img, out_dir / img_name)
        write_nifti(mask, out_dir / mask_name)
        lines.append(f"{img_name}\t{mask_name}\t{split}")
    manifest = out_dir / "dataset.manifest"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def load_manifest(manifest_path) -> dict[str, list[tuple[Path, Path]]]:
    """Parse a dataset manifest into split -> [(image path, mask path)]."""
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    out: dict[str, list[tuple[Path, Path]]] = {"train": [], "val": [], "test": []}
    for lineno, line in enumerate(manifest_path.read_text().splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3 or parts[2] not in out:
            raise FormatError(f"{manifest_path}:{lineno}: malformed manifest line {line!r}")
        out[parts[2]].append((base / parts[0], base / parts[1]))
    return out
