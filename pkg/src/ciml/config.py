"""Configuration and shared domain types.

Everything here is an immutable value: task decomposition (which modality
owns which target regions), network and training hyperparameters, and the
in-memory container for one multimodal case.
"""

from __future__ import annotations

import json
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Mapping

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib


class ConfigError(ValueError):
    """Invalid configuration value or file."""


@dataclass(frozen=True, order=True)
class ModalityId:
    name: str
    index: int


@dataclass(frozen=True)
class RegionId:
    name: str
    class_index: int

    def __post_init__(self):
        if self.class_index < 1:
            raise ConfigError(f"region {self.name}: class index 0 is reserved for background")

    def __lt__(self, other: "RegionId") -> bool:
        # sorted region lists run from outermost to most specific
        return (self.class_index, self.name) < (other.class_index, other.name)


@dataclass(frozen=True)
class TaskAssignment:
    """Expert-supplied mapping from each primary modality to its target regions.

    ``nested`` declares that regions with a larger class index lie inside the
    ones with a smaller index (ET inside TC inside WT for brain tumours); the
    label mask then stores the most specific region of each voxel.
    """

    entries: tuple[tuple[ModalityId, frozenset[RegionId]], ...]
    nested: bool = True

    @property
    def modalities(self) -> list[ModalityId]:
        return [m for m, _ in self.entries]

    @property
    def regions(self) -> list[RegionId]:
        return sorted({r for _, rs in self.entries for r in rs})

    def targets(self, modality: ModalityId | str) -> list[RegionId]:
        name = modality if isinstance(modality, str) else modality.name
        for m, rs in self.entries:
            if m.name == name:
                return sorted(rs)
        raise KeyError(name)

    def owners(self, region: RegionId | str) -> list[ModalityId]:
        name = region if isinstance(region, str) else region.name
        return [m for m, rs in self.entries if any(r.name == name for r in rs)]

    def modality(self, name: str) -> ModalityId:
        for m in self.modalities:
            if m.name == name:
                return m
        raise KeyError(name)

    @classmethod
    def from_names(cls, modalities: Iterable[str], regions: Mapping[str, int],
                   targets: Mapping[str, Iterable[str]], nested: bool = True) -> "TaskAssignment":
        mods = [ModalityId(n, i) for i, n in enumerate(modalities)]
        by_name = {n: RegionId(n, int(c)) for n, c in regions.items()}
        entries = []
        for m in mods:
            names = targets.get(m.name, ())
            unknown = [n for n in names if n not in by_name]
            if unknown:
                raise ConfigError(f"modality {m.name}: unknown regions {unknown}")
            entries.append((m, frozenset(by_name[n] for n in names)))
        extra = set(targets) - {m.name for m in mods}
        if extra:
            raise ConfigError(f"targets given for unknown modalities {sorted(extra)}")
        return cls(tuple(entries), nested)


def brats_assignment() -> TaskAssignment:
    """Default brain-tumour decomposition (FLAIR->WT, T1->TC, T2->WT+TC, T1CE->TC+ET)."""
    return TaskAssignment.from_names(
        ["FLAIR", "T1", "T2", "T1CE"],
        {"WT": 1, "TC": 2, "ET": 3},
        {"FLAIR": ["WT"], "T1": ["TC"], "T2": ["WT", "TC"], "T1CE": ["TC", "ET"]},
    )


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[str, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok


def validate_assignment(assignment: TaskAssignment, regions: Iterable[RegionId]) -> ValidationReport:
    """Check the decomposition invariants and list every violation found."""
    problems = []
    regions = list(regions)
    names = [m.name for m in assignment.modalities]
    indices = sorted(m.index for m in assignment.modalities)
    for dup in sorted({n for n in names if names.count(n) > 1}):
        problems.append(f"modality {dup} appears more than once as a primary")
    if indices != list(range(len(indices))):
        problems.append(f"modality indices {indices} are not unique and contiguous from 0")
    class_ids = [r.class_index for r in regions]
    if len(set(class_ids)) != len(class_ids):
        problems.append("region class indices are not unique")
    for m, rs in assignment.entries:
        if not rs:
            problems.append(f"modality {m.name} has no target regions")
        for r in sorted(rs):
            if r not in regions:
                problems.append(f"modality {m.name} targets unknown region {r.name}")
    covered = {r for _, rs in assignment.entries for r in rs}
    for r in sorted(regions):
        if r not in covered:
            problems.append(f"region {r.name} uncovered")
    return ValidationReport(tuple(problems))


@dataclass(frozen=True)
class ArchitectureConfig:
    patch_size: int = 64
    base_filters: int = 24
    message_count: int = 3
    out_channels: int = 2
    spatial_dims: int = 3
    norm_kind: str = "instance"
    use_cig: bool = True

    def __post_init__(self):
        if self.patch_size < 16 or self.patch_size % 16:
            raise ConfigError(f"patch_size must be a positive multiple of 16, got {self.patch_size}")
        if self.base_filters < 1:
            raise ConfigError("base_filters must be >= 1")
        if self.spatial_dims not in (2, 3):
            raise ConfigError("spatial_dims must be 2 or 3")
        if self.norm_kind not in ("batch", "instance"):
            raise ConfigError(f"norm_kind must be 'batch' or 'instance', got {self.norm_kind!r}")
        if self.out_channels < 2:
            raise ConfigError("out_channels must include background and at least one region")
        if self.message_count < 0:
            raise ConfigError("message_count must be >= 0")
        if self.use_cig and self.message_count == 0:
            raise ConfigError("CIG needs at least one message; set use_cig=false for K=0")

    def stage_channels(self, stage: int) -> int:
        """Channels of encoder stage ``stage`` (1..4)."""
        return self.base_filters * 2 ** (stage - 1)

    def stage_extent(self, stage: int) -> int:
        return self.patch_size // 2 ** stage


@dataclass(frozen=True)
class TrainConfig:
    initial_lr: float = 1e-4
    max_epoch: int = 500
    iterations_per_epoch: int = 100
    batch_size: int = 2
    weight_decay: float = 3e-5
    adam_betas: tuple[float, float] = (0.9, 0.999)
    beta_kl: float = 0.5
    seed: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        if not self.initial_lr > 0:
            raise ConfigError("initial_lr must be positive")
        if self.max_epoch < 1 or self.iterations_per_epoch < 1 or self.batch_size < 1:
            raise ConfigError("max_epoch, iterations_per_epoch and batch_size must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        if len(self.adam_betas) != 2 or not all(0 < b < 1 for b in self.adam_betas):
            raise ConfigError("adam_betas must be two values in (0, 1)")
        if self.beta_kl < 0:
            raise ConfigError("beta_kl must be non-negative")
        object.__setattr__(self, "adam_betas", tuple(float(b) for b in self.adam_betas))


@dataclass
class VolumeSample:
    """One co-registered multimodal case; every modality shares ``mask``."""

    case_id: str
    volumes: dict[str, np.ndarray]
    mask: np.ndarray
    spacing: tuple[float, ...] | None = None

    def __post_init__(self):
        shapes = {name: v.shape for name, v in self.volumes.items()}
        if not shapes:
            raise ValueError(f"case {self.case_id}: no modalities")
        if any(s != self.mask.shape for s in shapes.values()):
            raise ValueError(f"case {self.case_id}: modality shapes {shapes} differ from mask {self.mask.shape}")
        if self.mask.size and self.mask.min() < 0:
            raise ValueError(f"case {self.case_id}: negative mask label")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.mask.shape

    def check_labels(self, n_classes: int) -> None:
        if self.mask.size and int(self.mask.max()) >= n_classes:
            raise ValueError(f"case {self.case_id}: mask label {int(self.mask.max())} >= {n_classes}")


def region_member(mask: np.ndarray, region: RegionId, nested: bool = True) -> np.ndarray:
    """Boolean map of voxels inside ``region`` given a most-specific-label mask."""
    if nested:
        return mask >= region.class_index
    return mask == region.class_index


def local_labels(mask: np.ndarray, targets: Iterable[RegionId], nested: bool = True) -> np.ndarray:
    """Remap a global mask into one segmentor's label space (0 = background, i = i-th target).

    Targets are visited from outermost to most specific, so where regions
    overlap the most specific one wins.
    """
    out = np.zeros(mask.shape, dtype=np.int64)
    for i, region in enumerate(sorted(targets), start=1):
        out[region_member(mask, region, nested)] = i
    return out


def poly_lr(initial_lr: float, epoch_id: int, max_epoch: int, exponent: float = 0.9) -> float:
    """Polynomial decay: ``initial_lr * (1 - epoch_id / max_epoch) ** 0.9``."""
    if max_epoch <= 0:
        raise ValueError("max_epoch must be positive")
    if not 0 <= epoch_id <= max_epoch:
        raise ValueError(f"epoch_id {epoch_id} outside [0, {max_epoch}]")
    return initial_lr * (1.0 - epoch_id / max_epoch) ** exponent


# -- config files -----------------------------------------------------------

_SECTIONS = {"assignment", "architecture", "training"}
_ASSIGNMENT_KEYS = {"modalities", "regions", "targets", "nested"}
_ARCH_KEYS = {"patch_size", "base_filters", "spatial_dims", "norm_kind", "use_cig"}
_TRAIN_KEYS = {f for f in TrainConfig.__dataclass_fields__}


@dataclass(frozen=True)
class ExperimentConfig:
    assignment: TaskAssignment
    architecture: ArchitectureConfig
    training: TrainConfig = field(default_factory=TrainConfig)

    def segmentor_architecture(self, modality: ModalityId | str) -> ArchitectureConfig:
        """Per-segmentor config: K = T - 1 messages, O = 1 + |targets| outputs."""
        n_targets = len(self.assignment.targets(modality))
        k = len(self.assignment.entries) - 1 if self.architecture.use_cig else 0
        return replace(self.architecture, message_count=k, out_channels=1 + n_targets)


def _check_keys(section: str, given: Mapping[str, Any], allowed: set[str]) -> None:
    unknown = sorted(set(given) - allowed)
    if unknown:
        raise ConfigError(f"[{section}] unknown keys: {', '.join(unknown)}")


def parse_config(data: Mapping[str, Any]) -> ExperimentConfig:
    _check_keys("top level", data, _SECTIONS)
    if "assignment" not in data:
        raise ConfigError("missing [assignment] section")
    a = data["assignment"]
    _check_keys("assignment", a, _ASSIGNMENT_KEYS)
    for key in ("modalities", "regions", "targets"):
        if key not in a:
            raise ConfigError(f"[assignment] missing key {key}")
    assignment = TaskAssignment.from_names(a["modalities"], a["regions"], a["targets"],
                                           bool(a.get("nested", True)))
    report = validate_assignment(assignment, [RegionId(n, int(c)) for n, c in a["regions"].items()])
    if not report.ok:
        raise ConfigError("; ".join(report.violations))

    arch = dict(data.get("architecture", {}))
    _check_keys("architecture", arch, _ARCH_KEYS)
    use_cig = bool(arch.get("use_cig", True)) and len(assignment.entries) > 1
    arch["use_cig"] = use_cig
    # K and O are derived per segmentor; these placeholders only need to be valid
    architecture = ArchitectureConfig(message_count=1 if use_cig else 0, out_channels=2, **arch)

    train = dict(data.get("training", {}))
    _check_keys("training", train, _TRAIN_KEYS)
    if "adam_betas" in train:
        train["adam_betas"] = tuple(train["adam_betas"])
    return ExperimentConfig(assignment, architecture, TrainConfig(**train))


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    if path.suffix == ".json":
        data = json.loads(path.read_text())
    elif path.suffix == ".toml":
        data = tomllib.loads(path.read_text())
    else:
        raise ConfigError(f"unsupported config format {path.suffix!r} (use .json or .toml)")
    try:
        return parse_config(data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def config_to_dict(cfg: ExperimentConfig) -> dict[str, Any]:
    a = cfg.assignment
    return {
        "assignment": {
            "modalities": [m.name for m in a.modalities],
            "regions": {r.name: r.class_index for r in a.regions},
            "targets": {m.name: [r.name for r in sorted(rs)] for m, rs in a.entries},
            "nested": a.nested,
        },
        "architecture": {
            "patch_size": cfg.architecture.patch_size,
            "base_filters": cfg.architecture.base_filters,
            "spatial_dims": cfg.architecture.spatial_dims,
            "norm_kind": cfg.architecture.norm_kind,
            "use_cig": cfg.architecture.use_cig,
        },
        "training": {
            **{k: getattr(cfg.training, k) for k in _TRAIN_KEYS},
            "adam_betas": list(cfg.training.adam_betas),
        },
    }

