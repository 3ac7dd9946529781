"""Grad-CAM maps of the complementary latents and per-modality contribution weights."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .blocks import CIMLModel
from .config import RegionId

RAMP = ("#08306b", "#6baed6", "#ffff33")  # dark blue -> light blue -> yellow


class UndefinedWeights(ValueError):
    pass


class EmptyRegion(ValueError):
    pass


def gradcam_alpha(features: torch.Tensor, score: torch.Tensor, channel_dim: int = 0) -> torch.Tensor:
    """alpha_c = mean over voxels of d score / d A_c.

    ``features`` must be the tensor that entered the graph (not a view taken
    afterwards); its channel axis is ``channel_dim`` and every other axis is averaged.
    """
    if not features.requires_grad:
        raise ValueError("feature maps are detached from the graph; gradients are unavailable")
    grad = None
    if score.requires_grad:
        (grad,) = torch.autograd.grad(score, features, retain_graph=True, allow_unused=True)
    if grad is None:
        return torch.zeros(features.shape[channel_dim], dtype=features.dtype)
    return grad.movedim(channel_dim, 0).reshape(features.shape[channel_dim], -1).mean(dim=1)


def gradcam_heatmap(features: torch.Tensor, alpha: torch.Tensor) -> torch.Tensor:
    """zeta = ReLU(sum_c alpha_c A_c)."""
    if alpha.shape != features.shape[:1]:
        raise ValueError(f"{alpha.numel()} weights for {features.shape[0]} channels")
    weights = alpha.reshape((-1,) + (1,) * (features.dim() - 1))
    return torch.relu((weights * features).sum(dim=0))


@dataclass
class HeatmapStack:
    segmentor: str
    auxiliary: str
    region: RegionId
    zeta: np.ndarray
    alpha: np.ndarray

    def __post_init__(self):
        if np.any(self.zeta < 0):
            raise ValueError("heatmap must be non-negative")

    @property
    def mass(self) -> float:
        return float(self.zeta.sum())


def complementary_weights(stacks: Sequence[HeatmapStack]) -> dict[str, float]:
    """Mass share of each auxiliary modality's heatmap for one region."""
    if not stacks:
        raise UndefinedWeights("no heatmaps given")
    total = sum(s.mass for s in stacks)
    if total <= 0:
        raise UndefinedWeights(f"total heatmap mass is zero for region {stacks[0].region.name}")
    return {s.auxiliary: s.mass / total for s in stacks}


def normalize_jointly(stacks: Sequence[HeatmapStack]) -> list[HeatmapStack]:
    """Scale all maps of one figure by their common maximum."""
    peak = max((float(s.zeta.max()) for s in stacks if s.zeta.size), default=0.0)
    if peak <= 0:
        return list(stacks)
    return [HeatmapStack(s.segmentor, s.auxiliary, s.region, s.zeta / peak, s.alpha) for s in stacks]


def default_segmentor(model: CIMLModel, auxiliary: str, region: RegionId) -> str:
    """First segmentor (other than ``auxiliary``) whose targets include ``region``."""
    for m in model.config.assignment.owners(region):
        if m.name != auxiliary:
            return m.name
    raise ValueError(f"no segmentor other than {auxiliary} targets {region.name}")


def segmentor_cams(model: CIMLModel, inputs: Mapping[str, torch.Tensor], segmentor: str,
                   region: RegionId) -> list[HeatmapStack]:
    """Heatmaps for every auxiliary message of ``segmentor`` w.r.t. its local class for ``region``.

    The tap is the shallowest-stage latent of each incoming message before it
    is aligned and summed, so each auxiliary modality gets its own map.
    ``inputs`` holds one patch per modality, shaped [1, 1, *patch].
    """
    assignment = model.config.assignment
    targets = assignment.targets(segmentor)
    if region not in targets:
        raise ValueError(f"segmentor {segmentor} does not target {region.name}")
    seg = model.segmentor[segmentor]
    if not seg.use_cig:
        raise ValueError("model has no complementary latents (CIG disabled)")
    k = targets.index(region) + 1
    was = model.training
    model.eval()
    try:
        with torch.enable_grad():
            encoded = {n: model.segmentor[n].encode(inputs[n]) for n in model.names}
            peers = model.peers(segmentor)
            out = seg.decode(*encoded[segmentor], [encoded[p][1] for p in peers], noise="mean")
            logits = out.logits[0]
            predicted = logits.argmax(dim=0) == k
            if not predicted.any():
                raise EmptyRegion(f"no voxel predicted as {region.name} by segmentor {segmentor}")
            score = logits[k][predicted].sum()
            shallow = out.stage_latents[-1]
            stacks = []
            for peer, latent in zip(peers, shallow):
                alpha = gradcam_alpha(latent.kappa, score, channel_dim=1)
                zeta = gradcam_heatmap(latent.kappa[0].detach(), alpha)
                zeta = F.interpolate(zeta[None, None], size=logits.shape[1:], mode="nearest")[0, 0]
                stacks.append(HeatmapStack(segmentor, peer, region, zeta.double().numpy(),
                                           alpha.double().numpy()))
    finally:
        model.train(was)
    return stacks


def extract_complementary_cam(model: CIMLModel, inputs: Mapping[str, torch.Tensor], auxiliary: str,
                              region: RegionId, segmentor: str | None = None) -> HeatmapStack:
    segmentor = segmentor or default_segmentor(model, auxiliary, region)
    for s in segmentor_cams(model, inputs, segmentor, region):
        if s.auxiliary == auxiliary:
            return s
    raise ValueError(f"{auxiliary} does not send messages to {segmentor}")


def region_crop(volumes: Mapping[str, np.ndarray], mask: np.ndarray, region: RegionId, patch: int,
                nested: bool = True, dtype: torch.dtype = torch.float32) -> dict[str, torch.Tensor]:
    """Patch-sized crop centred on the region's centroid, as model inputs."""
    from .config import region_member

    inside = np.argwhere(region_member(mask, region, nested))
    if not len(inside):
        raise EmptyRegion(f"region {region.name} is absent from the case")
    centre = inside.mean(axis=0).round().astype(int)
    window = tuple(slice(int(np.clip(c - patch // 2, 0, s - patch)), int(np.clip(c - patch // 2, 0, s - patch)) + patch)
                   for c, s in zip(centre, mask.shape))
    return {n: torch.from_numpy(np.ascontiguousarray(v[window]))[None, None].to(dtype) for n, v in volumes.items()}


def weight_table(model: CIMLModel, cases: Sequence, segmentor: str, region: RegionId) -> dict[str, float]:
    """Per-case weights averaged over ``cases`` (PreparedCase-like: ``volumes``, ``mask``).

    Cases where the region is not predicted, or all maps are zero, are skipped.
    """
    patch = model.config.architecture.patch_size
    nested = model.config.assignment.nested
    rows = []
    for case in cases:
        inputs = region_crop(case.volumes, case.mask, region, patch, nested,
                             next(model.parameters()).dtype)
        try:
            rows.append(complementary_weights(segmentor_cams(model, inputs, segmentor, region)))
        except (EmptyRegion, UndefinedWeights):
            continue
    if not rows:
        raise UndefinedWeights(f"weights undefined on every case for {segmentor}/{region.name}")
    return {m: float(np.mean([r[m] for r in rows])) for m in rows[0]}


def write_weights_json(path: str | Path, tables: Mapping[str, Mapping[str, Mapping[str, float]]],
                       n_cases: int) -> None:
    """``tables[segmentor][region][auxiliary] = weight``, averaged over ``n_cases`` cases."""
    payload = {"averaged_over_cases": n_cases, "weights": tables}
    Path(path).write_text(json.dumps(payload, indent=2))


def _ramp():
    from matplotlib.colors import LinearSegmentedColormap

    return LinearSegmentedColormap.from_list("ciml_ramp", RAMP)


def _mid_slice(a: np.ndarray) -> np.ndarray:
    return a[a.shape[0] // 2] if a.ndim == 3 else a


def save_overlays(path: str | Path, image: np.ndarray, stacks: Sequence[HeatmapStack]) -> None:
    """One panel per auxiliary modality: mid-slice image with its jointly normalised heatmap."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    stacks = normalize_jointly(stacks)
    fig, axes = plt.subplots(1, len(stacks), figsize=(3 * len(stacks), 3), squeeze=False)
    for ax, s in zip(axes[0], stacks):
        ax.imshow(_mid_slice(image), cmap="gray")
        ax.imshow(_mid_slice(s.zeta), cmap=_ramp(), vmin=0, vmax=1, alpha=0.6)
        ax.set_title(f"{s.auxiliary} -> {s.segmentor} ({s.region.name})", fontsize=8)
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=80)
    plt.close(fig)


def save_weight_bars(path: str | Path, table: Mapping[str, Mapping[str, float]], title: str = "") -> None:
    """Grouped bars: one group per region, one bar per auxiliary modality."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    regions = list(table)
    modalities = sorted({m for r in regions for m in table[r]})
    width = 0.8 / max(1, len(modalities))
    fig, ax = plt.subplots(figsize=(1.5 + 1.5 * len(regions), 3))
    for i, m in enumerate(modalities):
        xs = np.arange(len(regions)) + i * width
        ax.bar(xs, [table[r].get(m, 0.0) for r in regions], width, label=m)
    ax.set_xticks(np.arange(len(regions)) + width * (len(modalities) - 1) / 2)
    ax.set_xticklabels(regions)
    ax.set_ylabel("weight")
    ax.set_ylim(0, 1)
    ax.legend(fontsize=8)
    if title:
        ax.set_title(title, fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=80)
    plt.close(fig)
