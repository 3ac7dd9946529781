"""On-disk dataset format.

Layout under a dataset root::

    manifest.json
    cases/<case_id>/<modality>.raw   little-endian float32
    cases/<case_id>/<modality>.json  sidecar {shape, dtype, axis_order, sha256}
    cases/<case_id>/mask.raw         uint8 labels (+ mask.json)

All writes go through a temporary file and an atomic rename.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .config import RegionId, VolumeSample

AXIS_ORDER = {2: "yx", 3: "zyx"}
MASK_NAME = "mask"


class DataError(OSError):
    """Unreadable or inconsistent dataset file."""


def atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_array(path: Path, array: np.ndarray, dtype: str) -> None:
    """Write raw bytes plus a JSON sidecar next to them (``x.raw`` -> ``x.json``)."""
    raw = np.ascontiguousarray(array).astype(dtype, copy=False).tobytes()
    sidecar = {
        "shape": list(array.shape),
        "dtype": dtype,
        "axis_order": AXIS_ORDER.get(array.ndim, "".join(f"a{i}" for i in range(array.ndim))),
        "sha256": hashlib.sha256(raw).hexdigest(),
    }
    atomic_write(path, raw)
    atomic_write(path.with_suffix(".json"), json.dumps(sidecar, indent=2).encode())


def read_array(path: Path) -> np.ndarray:
    side_path = path.with_suffix(".json")
    try:
        sidecar = json.loads(side_path.read_text())
    except FileNotFoundError:
        raise DataError(f"{side_path}: missing sidecar") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{side_path}: invalid JSON ({exc})") from None
    for key in ("shape", "dtype", "sha256"):
        if key not in sidecar:
            raise DataError(f"{side_path}: missing field '{key}'")
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise DataError(f"{path}: missing data file") from None
    if hashlib.sha256(raw).hexdigest() != sidecar["sha256"]:
        raise DataError(f"{path}: checksum mismatch")
    try:
        dtype = np.dtype(sidecar["dtype"])
    except TypeError:
        raise DataError(f"{side_path}: bad field 'dtype' ({sidecar['dtype']!r})") from None
    shape = sidecar["shape"]
    if (not isinstance(shape, list) or not all(isinstance(s, int) and s >= 0 for s in shape)
            or int(np.prod(shape)) * dtype.itemsize != len(raw)):
        raise DataError(f"{side_path}: field 'shape' {shape} does not match {len(raw)} bytes of {dtype}")
    return np.frombuffer(raw, dtype=dtype).reshape(shape).copy()


def write_case(case: VolumeSample, root: str | Path) -> dict:
    """Store one case under ``root/cases/<case_id>`` and return its manifest entry."""
    root = Path(root)
    rel = Path("cases") / case.case_id
    files = {}
    for name, vol in case.volumes.items():
        write_array(root / rel / f"{name}.raw", vol, "<f4")
        files[name] = str(rel / f"{name}.raw")
    if case.mask.size and (case.mask.min() < 0 or case.mask.max() > 255):
        raise DataError(f"case {case.case_id}: mask labels do not fit in uint8")
    write_array(root / rel / f"{MASK_NAME}.raw", case.mask, "u1")
    files[MASK_NAME] = str(rel / f"{MASK_NAME}.raw")
    return {"case_id": case.case_id, "files": files}


def read_case(entry: dict, root: str | Path, spacing: Sequence[float] | None = None) -> VolumeSample:
    root = Path(root)
    files = dict(entry["files"])
    mask = read_array(root / files.pop(MASK_NAME))
    volumes = {name: read_array(root / p) for name, p in files.items()}
    for name, v in volumes.items():
        if v.shape != mask.shape:
            raise DataError(f"{root / files[name]}: shape {v.shape} differs from mask {mask.shape}")
    return VolumeSample(entry["case_id"], volumes, mask.astype(np.int64),
                        tuple(spacing) if spacing is not None else None)


@dataclass
class DatasetManifest:
    root: Path
    modalities: list[str]
    regions: list[RegionId]
    cases: list[dict] = field(default_factory=list)
    spacing: tuple[float, ...] = (1.0, 1.0, 1.0)
    nested: bool = True

    def to_json(self) -> dict:
        return {
            "modalities": self.modalities,
            "regions": {r.name: r.class_index for r in self.regions},
            "nested": self.nested,
            "spacing": list(self.spacing),
            "cases": self.cases,
        }

    def save(self) -> None:
        atomic_write(self.root / "manifest.json", json.dumps(self.to_json(), indent=2).encode())

    @classmethod
    def load(cls, root: str | Path) -> "DatasetManifest":
        root = Path(root)
        path = root / "manifest.json"
        if not path.is_file():
            raise DataError(f"{path}: manifest not found")
        try:
            data = json.loads(path.read_text())
            regions = [RegionId(n, int(c)) for n, c in data["regions"].items()]
            return cls(root, list(data["modalities"]), sorted(regions), list(data["cases"]),
                       tuple(float(s) for s in data.get("spacing", (1.0, 1.0, 1.0))),
                       bool(data.get("nested", True)))
        except (KeyError, json.JSONDecodeError, ValueError) as exc:
            raise DataError(f"{path}: malformed manifest ({exc})") from None

    def validate(self) -> None:
        """Every referenced file exists and matches its sidecar; names are unique."""
        if len(set(self.modalities)) != len(self.modalities):
            raise DataError(f"{self.root}: duplicate modality names")
        if len({r.name for r in self.regions}) != len(self.regions):
            raise DataError(f"{self.root}: duplicate region names")
        n_classes = max((r.class_index for r in self.regions), default=0) + 1
        ids = [c["case_id"] for c in self.cases]
        if len(set(ids)) != len(ids):
            raise DataError(f"{self.root}: duplicate case ids")
        for entry in self.cases:
            missing = set(self.modalities) - set(entry["files"])
            if missing:
                raise DataError(f"{self.root}: case {entry['case_id']} lacks {sorted(missing)}")
            case = read_case(entry, self.root)
            if len(case.spacing or self.spacing) != case.mask.ndim:
                raise DataError(f"{self.root}: spacing {self.spacing} does not match {case.mask.ndim}-d case")
            if case.mask.size and case.mask.max() >= n_classes:
                raise DataError(f"{self.root / entry['files'][MASK_NAME]}: label {case.mask.max()} >= {n_classes}")

    def read(self, case_id: str) -> VolumeSample:
        for entry in self.cases:
            if entry["case_id"] == case_id:
                return read_case(entry, self.root, self.spacing)
        raise KeyError(case_id)

    def __iter__(self) -> Iterator[VolumeSample]:
        for entry in self.cases:
            yield read_case(entry, self.root, self.spacing)

    def __len__(self) -> int:
        return len(self.cases)


def write_dataset(root: str | Path, cases: Sequence[VolumeSample], regions: Sequence[RegionId],
                  spacing: Sequence[float] | None = None, nested: bool = True) -> DatasetManifest:
    root = Path(root)
    if not cases:
        raise ValueError("no cases to write")
    modalities = list(cases[0].volumes)
    spacing = tuple(spacing or (1.0,) * cases[0].mask.ndim)
    manifest = DatasetManifest(root, modalities, sorted(regions), [], spacing, nested)
    for case in cases:
        manifest.cases.append(write_case(case, root))
    manifest.save()
    return manifest
