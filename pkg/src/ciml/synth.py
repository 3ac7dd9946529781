"""Synthetic multimodal volumes with nested ellipsoidal regions.

Each region has one "sensitive" modality whose intensity step across the
region boundary is ``factor`` times the step in every other modality, which
mimics the modality/region sensitivity that motivates task decomposition.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy import ndimage

from .config import RegionId, TaskAssignment, VolumeSample, brats_assignment, region_member
from .data_io import DatasetManifest, write_dataset

MAX_ATTEMPTS = 200


class GenerationError(RuntimeError):
    pass


def default_layout(n_modalities: int, n_regions: int) -> TaskAssignment:
    """BraTS-like naming for 4 modalities / 3 regions, generic names otherwise."""
    if (n_modalities, n_regions) == (4, 3):
        return brats_assignment()
    if n_modalities < n_regions:
        raise ValueError("need at least as many modalities as regions for a covering assignment")
    mods = [f"M{i}" for i in range(n_modalities)]
    regions = {f"R{j + 1}": j + 1 for j in range(n_regions)}
    targets = {m: [f"R{i % n_regions + 1}"] for i, m in enumerate(mods)}
    return TaskAssignment.from_names(mods, regions, targets)


def default_owners(assignment: TaskAssignment) -> dict[str, str]:
    """Sensitive modality per region: the first primary modality (in order) that targets it."""
    return {r.name: assignment.owners(r)[0].name for r in assignment.regions}


def _ellipsoid(shape, center, radii, rotation) -> np.ndarray:
    grids = np.meshgrid(*[np.arange(s) + 0.5 for s in shape], indexing="ij")
    pts = np.stack([g - c for g, c in zip(grids, center)], axis=-1) @ rotation
    return np.sum((pts / np.asarray(radii)) ** 2, axis=-1) <= 1.0


def _random_rotation(rng: np.random.Generator, d: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(d, d)))
    return q * np.sign(np.diag(r))


def nested_regions(rng: np.random.Generator, size: int, n_regions: int, d: int = 3,
                   margin: int | None = None) -> list[np.ndarray]:
    """Boolean masks, outermost first; each lies inside the previous one eroded by ``margin``.

    The default margin is ``size // 16`` voxels (at least one).
    """
    margin = max(1, size // 16) if margin is None else margin
    shape = (size,) * d
    struct = ndimage.generate_binary_structure(d, 1)
    for _ in range(MAX_ATTEMPTS):
        radii = rng.uniform(0.22, 0.34, size=d) * size
        center = size / 2 + rng.uniform(-0.1, 0.1, size=d) * size
        masks = [_ellipsoid(shape, center, radii, _random_rotation(rng, d))]
        ok = True
        for _ in range(1, n_regions):
            parent = ndimage.binary_erosion(masks[-1], struct, iterations=margin)
            if parent.sum() < 8:
                ok = False
                break
            radii = radii * rng.uniform(0.5, 0.7, size=d)
            idx = np.argwhere(parent)
            center = idx[rng.integers(len(idx))] + 0.5
            child = _ellipsoid(shape, center, radii, _random_rotation(rng, d)) & parent
            if child.sum() < 4:
                ok = False
                break
            masks.append(child)
        if ok:
            return masks
    raise GenerationError(f"could not fit {n_regions} nested regions in a {size}^{d} volume")


def contrast_matrix(modalities: Sequence[str], regions: Sequence[RegionId], owners: Mapping[str, str],
                    high: float = 1.0, factor: float = 3.0) -> np.ndarray:
    """Intensity step per (modality, region); the owner gets ``high``, others ``high / factor``."""
    c = np.full((len(modalities), len(regions)), high / factor)
    for j, r in enumerate(regions):
        c[list(modalities).index(owners[r.name]), j] = high
    return c


def synth_case(rng: np.random.Generator, case_id: str, size: int, assignment: TaskAssignment,
               owners: Mapping[str, str] | None = None, noise_std: float = 0.3, factor: float = 3.0,
               d: int = 3) -> VolumeSample:
    regions = assignment.regions
    modalities = [m.name for m in assignment.modalities]
    owners = owners or default_owners(assignment)
    masks = nested_regions(rng, size, len(regions), d)
    label = np.zeros(masks[0].shape, dtype=np.int64)
    for r, m in zip(regions, masks):
        label[m] = r.class_index
    c = contrast_matrix(modalities, regions, owners, factor=factor)
    volumes = {}
    for i, name in enumerate(modalities):
        clean = sum(c[i, j] * m for j, m in enumerate(masks))
        volumes[name] = (clean + rng.normal(0.0, noise_std, size=label.shape)).astype(np.float32)
    return VolumeSample(case_id, volumes, label, (1.0,) * d)


def synth_dataset(n_cases: int, size: int, assignment: TaskAssignment, seed: int,
                  owners: Mapping[str, str] | None = None, noise_std: float = 0.3,
                  factor: float = 3.0) -> list[VolumeSample]:
    if size < 16 or size % 16:
        raise ValueError(f"size must be a multiple of 16 and >= 16, got {size}")
    rng = np.random.default_rng(seed)
    return [synth_case(rng, f"case{i:04d}", size, assignment, owners, noise_std, factor)
            for i in range(n_cases)]


def generate_synthetic_volumes(root: str | Path, n_cases: int, size: int, n_modalities: int = 4,
                               n_regions: int = 3, seed: int = 0, noise_std: float = 0.3,
                               factor: float = 3.0) -> DatasetManifest:
    assignment = default_layout(n_modalities, n_regions)
    cases = synth_dataset(n_cases, size, assignment, seed, noise_std=noise_std, factor=factor)
    return write_dataset(root, cases, assignment.regions, nested=True)


def boundary_contrast(sample: VolumeSample, region: RegionId, nested: bool = True) -> dict[str, float]:
    """Mean intensity just inside the region boundary minus just outside it, per modality."""
    inside = region_member(sample.mask, region, nested)
    struct = ndimage.generate_binary_structure(inside.ndim, 1)
    inner = inside & ~ndimage.binary_erosion(inside, struct)
    outer = ndimage.binary_dilation(inside, struct) & ~inside
    return {name: float(v[inner].mean() - v[outer].mean()) for name, v in sample.volumes.items()}
