"""Joint training of all segmentors with message passing, plus tiled inference."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .blocks import CIMLModel, save_checkpoint
from .config import ExperimentConfig, TaskAssignment, VolumeSample, local_labels, poly_lr
from .losses import ciml_total_loss
from .metrics import RegionReport, ensemble_regions, evaluate_case

log = logging.getLogger(__name__)

FOREGROUND_PROB = 0.5


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class PreparedCase:
    """Per-case z-scored volumes and every segmentor's local label map."""

    case_id: str
    volumes: dict[str, np.ndarray]
    labels: dict[str, np.ndarray]
    mask: np.ndarray
    foreground: np.ndarray  # (n, ndim) voxel indices with mask > 0


def zscore(volume: np.ndarray) -> np.ndarray:
    std = volume.std()
    return ((volume - volume.mean()) / (std if std > 0 else 1.0)).astype(np.float32)


def prepare_case(sample: VolumeSample, assignment: TaskAssignment) -> PreparedCase:
    names = [m.name for m in assignment.modalities]
    missing = set(names) - set(sample.volumes)
    if missing:
        raise ValueError(f"case {sample.case_id}: missing modalities {sorted(missing)}")
    sample.check_labels(max(r.class_index for r in assignment.regions) + 1)
    return PreparedCase(
        sample.case_id,
        {n: zscore(sample.volumes[n]) for n in names},
        {n: local_labels(sample.mask, assignment.targets(n), assignment.nested) for n in names},
        sample.mask,
        np.argwhere(sample.mask > 0),
    )


def _crop_origin(shape, patch: int, rng: np.random.Generator, center=None) -> tuple[int, ...]:
    if any(s < patch for s in shape):
        raise ValueError(f"volume {shape} is smaller than the patch size {patch}")
    if center is None:
        return tuple(int(rng.integers(0, s - patch + 1)) for s in shape)
    return tuple(int(np.clip(c - patch // 2, 0, s - patch)) for c, s in zip(center, shape))


def _augment(arrays: list[np.ndarray], rng: np.random.Generator) -> list[np.ndarray]:
    ndim = arrays[0].ndim
    for axis in range(ndim):
        if rng.random() < 0.5:
            arrays = [np.flip(a, axis) for a in arrays]
    axes = tuple(rng.choice(ndim, size=2, replace=False))
    k = int(rng.integers(4))
    return [np.ascontiguousarray(np.rot90(a, k, axes)) for a in arrays]


def sample_batch(cases: Sequence[PreparedCase], patch: int, batch: int, rng: np.random.Generator,
                 augment: bool = True) -> tuple[dict[str, torch.Tensor], dict[str, torch.Tensor]]:
    """Random crops; each crop is centred on a foreground voxel with probability 1/2."""
    names = list(cases[0].volumes)
    inputs = {n: [] for n in names}
    targets = {n: [] for n in names}
    for _ in range(batch):
        case = cases[int(rng.integers(len(cases)))]
        center = None
        if len(case.foreground) and rng.random() < FOREGROUND_PROB:
            center = case.foreground[int(rng.integers(len(case.foreground)))]
        origin = _crop_origin(case.mask.shape, patch, rng, center)
        window = tuple(slice(o, o + patch) for o in origin)
        arrays = [case.volumes[n][window] for n in names] + [case.labels[n][window] for n in names]
        if augment:
            arrays = _augment(arrays, rng)
        for i, n in enumerate(names):
            inputs[n].append(arrays[i])
            targets[n].append(arrays[len(names) + i])
    return ({n: torch.from_numpy(np.stack(v)[:, None].copy()) for n, v in inputs.items()},
            {n: torch.from_numpy(np.stack(v).copy()) for n, v in targets.items()})


@dataclass
class TrainState:
    config: ExperimentConfig
    model: CIMLModel
    optimizer: torch.optim.Optimizer
    rng: np.random.Generator
    generator: torch.Generator
    epoch_id: int = 0
    iteration: int = 0
    history: list[dict] = field(default_factory=list)


def init_state(config: ExperimentConfig, seed: int | None = None,
               dtype: torch.dtype = torch.float32) -> TrainState:
    seed = config.training.seed if seed is None else seed
    torch.manual_seed(seed)
    model = CIMLModel(config).to(dtype)
    t = config.training
    optimizer = torch.optim.Adam(model.parameters(), lr=t.initial_lr, betas=t.adam_betas,
                                 weight_decay=t.weight_decay)
    generator = torch.Generator().manual_seed(seed)
    return TrainState(config, model, optimizer, np.random.default_rng(seed), generator)


def train_epoch(state: TrainState, cases: Sequence[PreparedCase], log_file=None,
                augment: bool = True) -> list[dict]:
    """One epoch of joint training; the learning rate is fixed at ``poly_lr(epoch_id)``."""
    if not cases:
        raise ValueError("empty training set")
    cfg, t = state.config, state.config.training
    lr = poly_lr(t.initial_lr, state.epoch_id, t.max_epoch)
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    state.model.train()
    dtype = next(state.model.parameters()).dtype
    records = []
    for it in range(t.iterations_per_epoch):
        inputs, targets = sample_batch(cases, cfg.architecture.patch_size, t.batch_size, state.rng, augment)
        inputs = {n: x.to(dtype) for n, x in inputs.items()}
        outputs = state.model(inputs, noise="sample", generator=state.generator)
        parts, total = ciml_total_loss(outputs, targets, t.beta_kl)
        for name, part in parts.items():
            bad = part.first_nonfinite()
            if bad:
                raise TrainingDiverged(f"non-finite {bad} loss in segmentor {name} "
                                       f"(epoch {state.epoch_id}, iteration {it})")
        state.optimizer.zero_grad(set_to_none=True)
        total.backward()
        state.optimizer.step()
        record = {"epoch": state.epoch_id, "iter": it, "lr": state.optimizer.param_groups[0]["lr"],
                  "segmentors": {n: p.as_dict() for n, p in parts.items()}}
        records.append(record)
        if log_file is not None:
            log_file.write(json.dumps(record) + "\n")
        state.iteration += 1
    if log_file is not None:
        log_file.flush()
    state.history.extend(records)
    state.epoch_id += 1
    return records


def fit(state: TrainState, cases: Sequence[PreparedCase], out_dir: str | Path | None = None,
        epochs: int | None = None, on_epoch: Callable[[TrainState, list[dict]], None] | None = None,
        augment: bool = True) -> TrainState:
    """Train up to ``max_epoch`` (or ``epochs`` more), logging to ``out_dir/train_log.jsonl``."""
    t = state.config.training
    stop = t.max_epoch if epochs is None else min(t.max_epoch, state.epoch_id + epochs)
    out = Path(out_dir) if out_dir is not None else None
    fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        fh = open(out / "train_log.jsonl", "a")
    try:
        while state.epoch_id < stop:
            records = train_epoch(state, cases, fh, augment)
            mean_total = np.mean([sum(s["total"] for s in r["segmentors"].values()) for r in records])
            log.info("epoch %d lr %.3g loss %.4f", state.epoch_id - 1, records[0]["lr"], mean_total)
            if on_epoch is not None:
                on_epoch(state, records)
            if out is not None and t.checkpoint_every and state.epoch_id % t.checkpoint_every == 0:
                save_checkpoint(out / f"epoch_{state.epoch_id:04d}.ckpt", state.model,
                                {"epoch": state.epoch_id})
    finally:
        if fh is not None:
            fh.close()
    if out is not None:
        save_checkpoint(out / "model.ckpt", state.model, {"epoch": state.epoch_id})
    return state


# -- inference ----------------------------------------------------------------

def _tile_starts(extent: int, patch: int, stride: int) -> list[int]:
    starts = list(range(0, extent - patch + 1, stride))
    if starts[-1] != extent - patch:
        starts.append(extent - patch)
    return starts


@torch.no_grad()
def predict_volume(model: CIMLModel, volumes: dict[str, np.ndarray], overlap: float = 0.5,
                   batch: int = 8) -> dict[str, np.ndarray]:
    """Sliding-window softmax per segmentor using posterior-mean latents."""
    cfg = model.config.architecture
    patch = cfg.patch_size
    shape = next(iter(volumes.values())).shape
    if any(s < patch for s in shape):
        raise ValueError(f"volume {shape} is smaller than the patch size {patch}")
    stride = max(1, int(round(patch * (1 - overlap))))
    grids = np.meshgrid(*[_tile_starts(s, patch, stride) for s in shape], indexing="ij")
    origins = np.stack([g.ravel() for g in grids], axis=1)
    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    acc = {n: np.zeros((model.segmentor[n].cfg.out_channels,) + shape) for n in model.names}
    count = np.zeros(shape)
    try:
        for i in range(0, len(origins), batch):
            chunk = origins[i:i + batch]
            windows = [tuple(slice(o, o + patch) for o in org) for org in chunk]
            inputs = {n: torch.from_numpy(np.stack([volumes[n][w] for w in windows])[:, None]).to(dtype)
                      for n in model.names}
            outputs = model(inputs, noise="mean")
            for n, out in outputs.items():
                probs = torch.softmax(out.logits, dim=1).double().numpy()
                for j, w in enumerate(windows):
                    acc[n][(slice(None),) + w] += probs[j]
            for w in windows:
                count[w] += 1
    finally:
        model.train(was_training)
    return {n: a / count for n, a in acc.items()}


def predict_labels(model: CIMLModel, case: PreparedCase) -> np.ndarray:
    probs = predict_volume(model, case.volumes)
    return ensemble_regions(probs, model.config.assignment)


def evaluate(model: CIMLModel, cases: Sequence[PreparedCase],
             spacing: Sequence[float] | None = None) -> list[RegionReport]:
    assignment = model.config.assignment
    reports = []
    for case in cases:
        pred = predict_labels(model, case)
        reports.extend(evaluate_case(case.case_id, pred, case.mask, assignment.regions,
                                     assignment.nested, spacing))
    return reports


def background_baseline(cases: Sequence[PreparedCase], assignment: TaskAssignment) -> list[RegionReport]:
    """Scores of the trivial all-background prediction."""
    reports = []
    for case in cases:
        reports.extend(evaluate_case(case.case_id, np.zeros_like(case.mask), case.mask,
                                     assignment.regions, assignment.nested))
    return reports
