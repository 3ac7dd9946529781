"""ShapeComposition: predict the union of a triangle and an ellipse from two "modalities".

The primary image holds one shape and the auxiliary image the other. A
two-pathway model extracts a Gaussian latent from the auxiliary image (seeing
the primary features only without gradient) and the predictor combines it
with the primary features. If redundancy filtering works, the latent is
concentrated where the auxiliary shape is not already covered by the primary.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .blocks import (SIGMA_FLOOR, ConvNormAct, GaussianLatent, load_archive, load_into, reparameterize,
                     save_archive)
from .config import RegionId, VolumeSample, poly_lr
from .data_io import DatasetManifest, read_case, write_dataset
from .losses import ce_loss, gaussian_kl_to_standard, soft_dice_loss
from .metrics import dice_score

MIN_FRACTION = 0.05
MAX_ATTEMPTS = 1000
UNION = RegionId("union", 1)


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class ShapePair:
    primary: np.ndarray  # bool [H, W]
    auxiliary: np.ndarray
    primary_kind: str  # "triangle" or "ellipse"

    @property
    def union(self) -> np.ndarray:
        return self.primary | self.auxiliary

    @property
    def overlap(self) -> np.ndarray:
        return self.primary & self.auxiliary

    @property
    def aux_exclusive(self) -> np.ndarray:
        return self.auxiliary & ~self.primary


def _pixel_centres(size: int) -> tuple[np.ndarray, np.ndarray]:
    return np.meshgrid(np.arange(size) + 0.5, np.arange(size) + 0.5, indexing="ij")


def fill_triangle(size: int, vertices: np.ndarray) -> np.ndarray:
    """Pixels whose centre lies inside the triangle (rows, cols) ``vertices``."""
    y, x = _pixel_centres(size)
    signs = []
    for i in range(3):
        (y0, x0), (y1, x1) = vertices[i], vertices[(i + 1) % 3]
        signs.append((x1 - x0) * (y - y0) - (y1 - y0) * (x - x0))
    signs = np.stack(signs)
    return np.all(signs >= 0, axis=0) | np.all(signs <= 0, axis=0)


def fill_ellipse(size: int, center, axes, angle: float) -> np.ndarray:
    y, x = _pixel_centres(size)
    dy, dx = y - center[0], x - center[1]
    c, s = np.cos(angle), np.sin(angle)
    u, v = c * dx + s * dy, -s * dx + c * dy
    return (u / axes[0]) ** 2 + (v / axes[1]) ** 2 <= 1.0


def _random_pair(rng: np.random.Generator, size: int) -> tuple[np.ndarray, np.ndarray]:
    margin = 0.08 * size
    tri = fill_triangle(size, rng.uniform(margin, size - margin, size=(3, 2)))
    center = rng.uniform(0.3 * size, 0.7 * size, size=2)
    axes = rng.uniform(0.12 * size, 0.3 * size, size=2)
    ell = fill_ellipse(size, center, axes, rng.uniform(0, np.pi))
    return tri, ell


def acceptable(a: np.ndarray, b: np.ndarray, min_fraction: float = MIN_FRACTION) -> bool:
    need = min_fraction * a.size
    return (a & b).sum() >= need and (a & ~b).sum() >= need and (b & ~a).sum() >= need


def generate_dataset(n: int, image_size: int = 64, seed: int = 0) -> list[ShapePair]:
    """``n`` pairs; even-indexed pairs use the triangle as primary, odd ones the ellipse."""
    if n < 1:
        raise ValueError("n must be at least 1")
    if image_size < 32:
        raise ValueError("image_size must be at least 32")
    rng = np.random.default_rng(seed)
    pairs = []
    for i in range(n):
        for _ in range(MAX_ATTEMPTS):
            tri, ell = _random_pair(rng, image_size)
            if acceptable(tri, ell):
                break
        else:
            raise GenerationError(f"pair {i}: no acceptable shapes after {MAX_ATTEMPTS} attempts")
        pairs.append(ShapePair(tri, ell, "triangle") if i % 2 == 0 else ShapePair(ell, tri, "ellipse"))
    return pairs


def split(pairs: Sequence[ShapePair], test_fraction: float = 0.1) -> tuple[list[ShapePair], list[ShapePair]]:
    n_test = max(1, int(round(len(pairs) * test_fraction)))
    return list(pairs[:-n_test]), list(pairs[-n_test:])


def pair_to_sample(pair: ShapePair, case_id: str) -> VolumeSample:
    volumes = {"primary": pair.primary.astype(np.float32), "auxiliary": pair.auxiliary.astype(np.float32)}
    return VolumeSample(case_id, volumes, pair.union.astype(np.int64), (1.0, 1.0))


def sample_to_pair(sample: VolumeSample, primary_kind: str = "") -> ShapePair:
    pair = ShapePair(sample.volumes["primary"] > 0.5, sample.volumes["auxiliary"] > 0.5, primary_kind)
    if not np.array_equal(pair.union, sample.mask > 0):
        raise ValueError(f"case {sample.case_id}: stored union does not match its shapes")
    return pair


# -- model ----------------------------------------------------------------------

@dataclass(frozen=True)
class DemoConfig:
    image_size: int = 64
    features: int = 8
    latent_channels: int = 4
    depth: int = 2
    norm_kind: str = "instance"


def _stack(cin: int, cout: int, depth: int, norm: str) -> nn.Sequential:
    return nn.Sequential(*[ConvNormAct(cin if i == 0 else cout, cout, 2, norm=norm) for i in range(depth)])


@dataclass
class DemoOutput:
    logits: torch.Tensor
    latent: GaussianLatent


class ShapeDemoModel(nn.Module):
    """Two encoders, a complementary path producing (mu, sigma) at image resolution, and a predictor."""

    def __init__(self, cfg: DemoConfig = DemoConfig()):
        super().__init__()
        self.cfg = cfg
        f, z, depth, norm = cfg.features, cfg.latent_channels, cfg.depth, cfg.norm_kind
        self.encoder_primary = _stack(1, f, depth, norm)
        self.encoder_aux = _stack(1, f, depth, norm)
        self.fuse = _stack(2 * f, f, depth, norm)
        self.mu = nn.Conv2d(f, z, 1)
        self.sigma = nn.Conv2d(f, z, 1)
        self.predict = nn.Sequential(_stack(f + z, f, depth, norm), nn.Conv2d(f, 2, 1))

    def forward(self, primary: torch.Tensor, auxiliary: torch.Tensor, noise="sample",
                generator: torch.Generator | None = None) -> DemoOutput:
        fp = self.encoder_primary(primary)
        fa = self.encoder_aux(auxiliary)
        h = self.fuse(torch.cat([fp.detach(), fa], dim=1))
        mu = self.mu(h)
        sigma = F.softplus(self.sigma(h)) + SIGMA_FLOOR
        if isinstance(noise, torch.Tensor):
            if noise.shape != mu.shape:
                raise ValueError(f"noise shape {tuple(noise.shape)} does not match latent {tuple(mu.shape)}")
            eps = noise
        elif noise == "mean":
            eps = None
        elif noise == "sample":
            eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype)
        else:
            raise ValueError(f"unknown noise mode {noise!r}")
        kappa = reparameterize(mu, sigma, eps)
        logits = self.predict(torch.cat([fp, kappa], dim=1))
        return DemoOutput(logits, GaussianLatent(mu, sigma, kappa, eps))


def build_demo_model(cfg: DemoConfig = DemoConfig(), seed: int = 0) -> ShapeDemoModel:
    torch.manual_seed(seed)
    return ShapeDemoModel(cfg)


def to_tensors(pairs: Sequence[ShapePair]) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    p = torch.from_numpy(np.stack([x.primary for x in pairs])[:, None].astype(np.float32))
    a = torch.from_numpy(np.stack([x.auxiliary for x in pairs])[:, None].astype(np.float32))
    y = torch.from_numpy(np.stack([x.union for x in pairs]).astype(np.int64))
    return p, a, y


# -- training -------------------------------------------------------------------

@dataclass(frozen=True)
class DemoTrainConfig:
    epochs: int = 100
    iterations_per_epoch: int = 5
    batch_size: int = 32
    initial_lr: float = 3e-3
    weight_decay: float = 3e-5
    beta_kl: float = 0.5
    seed: int = 0


def demo_losses(out: DemoOutput, target: torch.Tensor) -> dict[str, torch.Tensor]:
    return {"ce": ce_loss(out.logits, target), "dice": soft_dice_loss(out.logits, target),
            "kl": gaussian_kl_to_standard(out.latent)}


def train_demo(model: ShapeDemoModel, pairs: Sequence[ShapePair], cfg: DemoTrainConfig,
               on_epoch=None) -> list[dict]:
    """Adam with poly decay; returns one record per epoch with mean loss terms."""
    if not pairs:
        raise ValueError("no training pairs")
    p_all, a_all, y_all = to_tensors(pairs)
    rng = np.random.default_rng(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.initial_lr, weight_decay=cfg.weight_decay)
    history = []
    model.train()
    for epoch in range(cfg.epochs):
        lr = poly_lr(cfg.initial_lr, epoch, cfg.epochs)
        for g in opt.param_groups:
            g["lr"] = lr
        sums = {"ce": 0.0, "dice": 0.0, "kl": 0.0}
        for _ in range(cfg.iterations_per_epoch):
            idx = torch.from_numpy(rng.choice(len(pairs), size=min(cfg.batch_size, len(pairs)), replace=False))
            out = model(p_all[idx], a_all[idx], "sample", gen)
            terms = demo_losses(out, y_all[idx])
            loss = terms["ce"] + terms["dice"] + cfg.beta_kl * terms["kl"]
            if not torch.isfinite(loss):
                bad = next(k for k, v in terms.items() if not torch.isfinite(v))
                raise FloatingPointError(f"non-finite {bad} loss at epoch {epoch}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            for k, v in terms.items():
                sums[k] += float(v.detach()) / cfg.iterations_per_epoch
        record = {"epoch": epoch, "lr": lr, **sums}
        history.append(record)
        if on_epoch is not None:
            on_epoch(record)
    return history


# -- evaluation -----------------------------------------------------------------

@torch.no_grad()
def predict(model: ShapeDemoModel, pairs: Sequence[ShapePair], batch: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Hard union predictions and posterior-mean latents ``mu`` for every pair."""
    was = model.training
    model.eval()
    preds, mus = [], []
    try:
        for i in range(0, len(pairs), batch):
            p, a, _ = to_tensors(pairs[i:i + batch])
            out = model(p, a, "mean")
            preds.append(out.logits.argmax(1).numpy().astype(bool))
            mus.append(out.latent.mu.numpy())
    finally:
        model.train(was)
    return np.concatenate(preds), np.concatenate(mus)


@torch.no_grad()
def training_loss(model: ShapeDemoModel, pairs: Sequence[ShapePair]) -> float:
    """Deterministic CE + Dice over ``pairs`` (posterior-mean latent)."""
    was = model.training
    model.eval()
    try:
        p, a, y = to_tensors(pairs)
        terms = demo_losses(model(p, a, "mean"), y)
    finally:
        model.train(was)
    return float(terms["ce"] + terms["dice"])


def complementary_map(mu: np.ndarray) -> np.ndarray:
    """Mean |mu| over latent channels, min-max normalised to [0, 1]."""
    m = np.abs(mu).mean(axis=0)
    lo, hi = m.min(), m.max()
    if hi <= 0:
        raise ValueError("complementary map is identically zero; localization undefined")
    return (m - lo) / (hi - lo) if hi > lo else m / hi


def localization_score(cmap: np.ndarray, pair: ShapePair) -> float:
    """Share of map mass in the auxiliary-exclusive region versus the primary region."""
    excl = float(cmap[pair.aux_exclusive].sum())
    prim = float(cmap[pair.primary].sum())
    if excl + prim <= 0:
        raise ValueError("no map mass inside the auxiliary-exclusive or primary regions")
    return excl / (excl + prim)


def evaluate_localization(model: ShapeDemoModel, pairs: Sequence[ShapePair]) -> float:
    _, mus = predict(model, pairs)
    return float(np.mean([localization_score(complementary_map(mu), pr) for mu, pr in zip(mus, pairs)]))


def union_dice(model: ShapeDemoModel, pairs: Sequence[ShapePair]) -> float:
    preds, _ = predict(model, pairs)
    return float(np.mean([dice_score(pr, p.union) for pr, p in zip(preds, pairs)]))


def latent_stats(model: ShapeDemoModel, pairs: Sequence[ShapePair]) -> dict[str, float]:
    """Mean KL, |mu| and |sigma - 1| of the complementary latent over ``pairs``."""
    was = model.training
    model.eval()
    try:
        with torch.no_grad():
            p, a, _ = to_tensors(pairs)
            lat = model(p, a, "mean").latent
    finally:
        model.train(was)
    return {"kl": float(gaussian_kl_to_standard(lat)), "mean_abs_mu": float(lat.mu.abs().mean()),
            "mean_abs_sigma_dev": float((lat.sigma - 1).abs().mean())}


def export_figure(model: ShapeDemoModel, pairs: Sequence[ShapePair], path: str | Path) -> None:
    """Rows of (primary, auxiliary, prediction, ground truth, complementary map)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    preds, mus = predict(model, pairs)
    titles = ["primary", "auxiliary", "prediction", "ground truth", "complementary"]
    fig, axes = plt.subplots(len(pairs), 5, figsize=(10, 2 * len(pairs)), squeeze=False)
    for row, (pair, pred, mu) in enumerate(zip(pairs, preds, mus)):
        panels = [pair.primary, pair.auxiliary, pred, pair.union, complementary_map(mu)]
        for col, img in enumerate(panels):
            ax = axes[row, col]
            ax.imshow(img, cmap="viridis" if col == 4 else "gray", vmin=0, vmax=1)
            ax.set_xticks([])
            ax.set_yticks([])
            if row == 0:
                ax.set_title(titles[col], fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=80)
    plt.close(fig)


# -- persistence ----------------------------------------------------------------

def save_pairs(root: str | Path, pairs: Sequence[ShapePair]):
    samples = [pair_to_sample(p, f"pair{i:04d}") for i, p in enumerate(pairs)]
    manifest = write_dataset(root, samples, [UNION], spacing=(1.0, 1.0))
    for entry, pair in zip(manifest.cases, pairs):
        entry["primary_kind"] = pair.primary_kind
    manifest.save()
    return manifest


def load_pairs(root: str | Path) -> list[ShapePair]:
    manifest = DatasetManifest.load(root)
    return [sample_to_pair(read_case(e, manifest.root), e.get("primary_kind", "")) for e in manifest.cases]


def save_demo_model(path: str | Path, model: ShapeDemoModel, extra: dict | None = None) -> None:
    save_archive(path, model.state_dict(), {"demo_config": asdict(model.cfg), "extra": extra or {}})


def load_demo_model(path: str | Path) -> tuple[ShapeDemoModel, dict]:
    arrays, meta = load_archive(path)
    if "demo_config" not in meta:
        raise ValueError(f"{path}: not a ShapeComposition checkpoint")
    model = ShapeDemoModel(DemoConfig(**meta["demo_config"]))
    load_into(model, arrays, path)
    return model, meta.get("extra", {})
