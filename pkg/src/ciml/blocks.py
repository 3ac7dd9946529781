"""Segmentor network: message-generating encoder, CIG gates and predictor.

Shapes follow the four-stage layout: encoder stage ``s`` (1..4) emits a
``(P / 2**s)``-extent map with ``C * 2**(s-1)`` channels, and that map is both
the skip connection and the message exported to the other segmentors.

Decoder wiring (channel counts in units of C)::

    x   = cat(enc4, comp4)                         # P/16, 16
    up1 = conv(cat(tconv(x), enc3, comp3))         # P/8,  8+4+4 -> 8
    up2 = conv(cat(tconv(up1), enc2, comp2))       # P/4,  4+2+2 -> 4
    up3 = conv(cat(tconv(up2), enc1, comp1))       # P/2,  2+1+1 -> 2
    up4 = conv(cat(tconv(up3), enc0))              # P,    1+1   -> 1
    logits = out(up4)                              # P,    O

where ``compS`` is the CIG output at stage S and ``enc0`` is the full
resolution feature of the first encoder block.
"""

from __future__ import annotations

import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ArchitectureConfig, ExperimentConfig, config_to_dict, parse_config

NEG_SLOPE = 0.01
SIGMA_FLOOR = 1e-6

Noise = Union[str, Sequence[Sequence[torch.Tensor]]]


def _conv(d: int):
    return nn.Conv2d if d == 2 else nn.Conv3d


def _tconv(d: int):
    return nn.ConvTranspose2d if d == 2 else nn.ConvTranspose3d


class InstanceNorm(nn.Module):
    """Affine per-sample, per-channel normalisation over the spatial axes.

    Unlike ``nn.InstanceNorm*d`` it accepts single-voxel maps (stage 4 at P=16),
    where the normalised value is 0 and the output is the bias.
    """

    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x):
        dims = tuple(range(2, x.dim()))
        mean = x.mean(dim=dims, keepdim=True)
        var = x.var(dim=dims, keepdim=True, unbiased=False)
        shape = (1, -1) + (1,) * len(dims)
        return (x - mean) / torch.sqrt(var + self.eps) * self.weight.view(shape) + self.bias.view(shape)


def make_norm(kind: str, channels: int, d: int) -> nn.Module:
    if kind == "batch":
        return (nn.BatchNorm2d if d == 2 else nn.BatchNorm3d)(channels)
    return InstanceNorm(channels)


def reparameterize(mu: torch.Tensor, sigma: torch.Tensor, eps: torch.Tensor | None) -> torch.Tensor:
    """kappa = mu + sigma * eps; the posterior mean when ``eps`` is None."""
    return mu if eps is None else mu + sigma * eps


class ConvNormAct(nn.Module):
    def __init__(self, cin, cout, d, kernel=3, stride=1, norm="instance", act="lrelu", transpose=False):
        super().__init__()
        if transpose:
            self.conv = _tconv(d)(cin, cout, kernel, stride=2, padding=1, output_padding=1)
        else:
            self.conv = _conv(d)(cin, cout, kernel, stride=stride, padding=kernel // 2)
        self.norm = make_norm(norm, cout, d)
        self.act = nn.LeakyReLU(NEG_SLOPE) if act == "lrelu" else nn.Sigmoid()

    def forward(self, x):
        return self.act(self.norm(self.conv(x)))


@dataclass
class MessageBundle:
    """Encoder stage outputs 1..4, exported as messages to the other segmentors."""

    stages: list[torch.Tensor]

    def __post_init__(self):
        if len(self.stages) != 4:
            raise ValueError(f"a message bundle has 4 stages, got {len(self.stages)}")

    def check(self, cfg: ArchitectureConfig, batch: int | None = None) -> None:
        for s, t in enumerate(self.stages, start=1):
            want = (cfg.stage_channels(s),) + (cfg.stage_extent(s),) * cfg.spatial_dims
            if tuple(t.shape[1:]) != want or (batch is not None and t.shape[0] != batch):
                raise ValueError(f"message stage {s}: shape {tuple(t.shape)} does not match {want}")

    def detach(self) -> "MessageBundle":
        return MessageBundle([t.detach() for t in self.stages])


@dataclass
class GaussianLatent:
    mu: torch.Tensor
    sigma: torch.Tensor
    kappa: torch.Tensor
    eps: torch.Tensor | None = None


@dataclass
class SegmentorOutput:
    logits: torch.Tensor
    latents: list[GaussianLatent] = field(default_factory=list)
    attention_maps: list[torch.Tensor] = field(default_factory=list)
    messages: MessageBundle | None = None
    # per CIG stage (deepest first), per message: the latent before channel alignment
    stage_latents: list[list[GaussianLatent]] = field(default_factory=list)


class DownStage(nn.Module):
    def __init__(self, cin, cout, d, norm):
        super().__init__()
        self.block = ConvNormAct(cin, cout, d, norm=norm)
        # "dilated" downsampling: stride 2, dilation 1 (the halving is what the shapes require)
        self.down = ConvNormAct(cout, cout, d, stride=2, norm=norm)

    def forward(self, x):
        full = self.block(x)
        return full, self.down(full)


class Encoder(nn.Module):
    """Message generator: four conv + strided-conv stages."""

    def __init__(self, cfg: ArchitectureConfig, in_channels: int = 1):
        super().__init__()
        self.cfg = cfg
        d, c = cfg.spatial_dims, cfg.base_filters
        chans = [in_channels] + [c * 2 ** i for i in range(4)]
        self.down1 = DownStage(chans[0], chans[1], d, cfg.norm_kind)
        self.down2 = DownStage(chans[1], chans[2], d, cfg.norm_kind)
        self.down3 = DownStage(chans[2], chans[3], d, cfg.norm_kind)
        self.down4 = DownStage(chans[3], chans[4], d, cfg.norm_kind)

    def forward(self, patch: torch.Tensor) -> tuple[torch.Tensor, MessageBundle]:
        cfg = self.cfg
        want = (cfg.patch_size,) * cfg.spatial_dims
        if patch.dim() != cfg.spatial_dims + 2 or tuple(patch.shape[2:]) != want:
            raise ValueError(f"patch shape {tuple(patch.shape)} does not match [N, 1, {want}]")
        full, s1 = self.down1(patch)
        _, s2 = self.down2(s1)
        _, s3 = self.down3(s2)
        _, s4 = self.down4(s3)
        return full, MessageBundle([s1, s2, s3, s4])


class CIGAttention(nn.Module):
    """Cross-modal spatial attention: K gates in (0, 1) from K+1 channel-pooled inputs."""

    def __init__(self, k: int, d: int, norm: str):
        super().__init__()
        if k < 1:
            raise ValueError("CIG attention needs at least one message")
        self.k = k
        self.hidden = ConvNormAct(k + 1, 4 * (k + 1), d, kernel=3, norm=norm)
        self.gate = ConvNormAct(4 * (k + 1), k, d, kernel=1, norm=norm, act="sigmoid")

    def forward(self, local: torch.Tensor, messages: Sequence[torch.Tensor]) -> torch.Tensor:
        if len(messages) != self.k:
            raise ValueError(f"expected {self.k} messages, got {len(messages)}")
        for m in messages:
            if m.shape != local.shape:
                raise ValueError(f"message shape {tuple(m.shape)} differs from local {tuple(local.shape)}")
        pooled = torch.cat([t.mean(dim=1, keepdim=True) for t in (local, *messages)], dim=1)
        return self.gate(self.hidden(pooled))


class CIGFilter(nn.Module):
    """Gate each message, map it to a Gaussian latent and add the aligned samples to the local features."""

    def __init__(self, channels: int, k: int, d: int, norm: str):
        super().__init__()
        conv = _conv(d)
        self.k = k
        self.attention = CIGAttention(k, d, norm)
        self.mu = nn.ModuleList(conv(channels, channels, 1) for _ in range(k))
        self.sigma = nn.ModuleList(conv(channels, channels, 1) for _ in range(k))
        self.align = nn.ModuleList(conv(channels, channels, 1) for _ in range(k))
        # switched off only for exact finite-difference gradient checks
        self.detach_local = True

    def forward(self, local: torch.Tensor, messages: Sequence[torch.Tensor], noise: Noise = "sample",
                generator: torch.Generator | None = None):
        # the primary features only steer the gate; no gradient reaches them through the latent path
        attn = self.attention(local.detach() if self.detach_local else local, messages)
        if not isinstance(noise, str) and len(noise) != self.k:
            raise ValueError(f"expected {self.k} noise tensors, got {len(noise)}")
        comp = local
        latents = []
        for j, m in enumerate(messages):
            gated = attn[:, j:j + 1] * m
            mu = self.mu[j](gated)
            sigma = F.softplus(self.sigma[j](gated)) + SIGMA_FLOOR
            if isinstance(noise, str):
                if noise == "mean":
                    eps = None
                elif noise == "sample":
                    eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype, device=mu.device)
                else:
                    raise ValueError(f"unknown noise mode {noise!r}")
            else:
                eps = noise[j]
                if eps.shape != mu.shape:
                    raise ValueError(f"noise shape {tuple(eps.shape)} does not match latent {tuple(mu.shape)}")
            kappa = reparameterize(mu, sigma, eps)
            latents.append(GaussianLatent(mu, sigma, kappa, eps))
            comp = comp + self.align[j](kappa)
        return comp, latents, attn


class UpStage(nn.Module):
    def __init__(self, cin, cout, cskip, d, norm):
        super().__init__()
        self.up = ConvNormAct(cin, cout, d, norm=norm, transpose=True)
        self.block = ConvNormAct(cout + cskip, cout, d, norm=norm)

    def forward(self, x, skips):
        return self.block(torch.cat([self.up(x), *skips], dim=1))


class Segmentor(nn.Module):
    def __init__(self, cfg: ArchitectureConfig):
        super().__init__()
        self.cfg = cfg
        d, c, k, norm = cfg.spatial_dims, cfg.base_filters, cfg.message_count, cfg.norm_kind
        self.use_cig = cfg.use_cig
        self.encoder = Encoder(cfg)
        if self.use_cig:
            # keyed by encoder stage: 4 is the deepest
            self.cig = nn.ModuleDict({str(s): CIGFilter(c * 2 ** (s - 1), k, d, norm) for s in (4, 3, 2, 1)})
        mult = 2 if self.use_cig else 1
        # channel counts for up-stages 1..4: (in, out, skip)
        self.ups = nn.ModuleList([
            UpStage(8 * c * mult, 8 * c, 4 * c * mult, d, norm),
            UpStage(8 * c, 4 * c, 2 * c * mult, d, norm),
            UpStage(4 * c, 2 * c, c * mult, d, norm),
            UpStage(2 * c, c, c, d, norm),
        ])
        self.out = _conv(d)(c, cfg.out_channels, 3, padding=1)

    def encode(self, patch: torch.Tensor) -> tuple[torch.Tensor, MessageBundle]:
        return self.encoder(patch)

    def decode(self, full: torch.Tensor, own: MessageBundle, incoming: Sequence[MessageBundle],
               noise: Noise | Sequence[Noise] = "sample", generator: torch.Generator | None = None) -> SegmentorOutput:
        """Run the decoder given this segmentor's encoding and the K incoming bundles.

        ``noise`` is "sample", "mean", or one list of per-message tensors per CIG
        stage ordered deepest first (stage 4, 3, 2, 1).
        """
        cfg = self.cfg
        batch = full.shape[0]
        own.check(cfg, batch)
        if len(incoming) != (cfg.message_count if self.use_cig else 0):
            raise ValueError(f"expected {cfg.message_count if self.use_cig else 0} message bundles, got {len(incoming)}")
        for b in incoming:
            b.check(cfg, batch)
        if not isinstance(noise, str) and len(noise) != 4:
            raise ValueError("fixed noise needs one entry per CIG stage")

        comps, latents, attns, per_stage = {}, [], [], []
        if self.use_cig:
            for i, s in enumerate((4, 3, 2, 1)):
                stage_noise = noise if isinstance(noise, str) else noise[i]
                msgs = [b.stages[s - 1] for b in incoming]
                comp, lat, attn = self.cig[str(s)](own.stages[s - 1], msgs, stage_noise, generator)
                comps[s] = comp
                latents.extend(lat)
                per_stage.append(lat)
                attns.append(attn)

        def skip(s):
            return [own.stages[s - 1], comps[s]] if self.use_cig else [own.stages[s - 1]]

        x = torch.cat(skip(4), dim=1)
        x = self.ups[0](x, skip(3))
        x = self.ups[1](x, skip(2))
        x = self.ups[2](x, skip(1))
        x = self.ups[3](x, [full])
        return SegmentorOutput(self.out(x), latents, attns, own, per_stage)

    def forward(self, patch: torch.Tensor, incoming: Sequence[MessageBundle] = (), noise: Noise = "sample",
                generator: torch.Generator | None = None) -> SegmentorOutput:
        full, own = self.encode(patch)
        return self.decode(full, own, incoming, noise, generator)


class CIMLModel(nn.Module):
    """One segmentor per primary modality with all-to-all message passing."""

    def __init__(self, config: ExperimentConfig):
        super().__init__()
        self.config = config
        self.names = [m.name for m in config.assignment.modalities]
        self.segmentor = nn.ModuleDict({n: Segmentor(config.segmentor_architecture(n)) for n in self.names})

    def peers(self, name: str) -> list[str]:
        return [n for n in self.names if n != name]

    def forward(self, inputs: dict[str, torch.Tensor], noise: str = "sample",
                generator: torch.Generator | None = None) -> dict[str, SegmentorOutput]:
        encoded = {n: self.segmentor[n].encode(inputs[n]) for n in self.names}
        outputs = {}
        for n in self.names:
            seg = self.segmentor[n]
            incoming = [encoded[p][1] for p in self.peers(n)] if seg.use_cig else []
            outputs[n] = seg.decode(*encoded[n], incoming, noise, generator)
        return outputs


# -- checkpoints --------------------------------------------------------------

def save_archive(path: str | Path, state: dict[str, torch.Tensor], meta: dict) -> None:
    """Zip archive: ``manifest.json`` (``meta`` plus tensor shapes) and one raw ``<f4`` file per tensor.

    Only floating-point tensors are stored. Written to a temporary file, then renamed.
    """
    path = Path(path)
    manifest = dict(meta, tensors={})
    tmp = path.with_suffix(path.suffix + ".tmp")
    with zipfile.ZipFile(tmp, "w", zipfile.ZIP_DEFLATED) as zf:
        for key, t in state.items():
            if not t.is_floating_point():
                continue
            arr = t.detach().cpu().numpy().astype("<f4")
            manifest["tensors"][key] = list(arr.shape)
            zf.writestr(key + ".f32", arr.tobytes())
        zf.writestr("manifest.json", json.dumps(manifest, indent=2))
    tmp.replace(path)


def load_archive(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
            arrays = {}
            for name, shape in manifest.pop("tensors").items():
                arrays[name] = np.frombuffer(zf.read(name + ".f32"), dtype="<f4").reshape(shape).copy()
    except (zipfile.BadZipFile, KeyError, ValueError) as exc:
        raise ValueError(f"{path}: unreadable checkpoint ({exc})") from None
    return arrays, manifest


def load_into(module: nn.Module, arrays: dict[str, np.ndarray], path: str | Path = "") -> None:
    state = module.state_dict()
    for name, arr in arrays.items():
        if name not in state:
            raise ValueError(f"{path}: unexpected tensor {name}")
        if tuple(state[name].shape) != arr.shape:
            raise ValueError(f"{path}: tensor {name} has shape {arr.shape}, expected {tuple(state[name].shape)}")
        state[name] = torch.from_numpy(arr).to(state[name].dtype)
    module.load_state_dict(state)


def save_checkpoint(path: str | Path, model: CIMLModel, extra: dict | None = None) -> None:
    save_archive(path, model.state_dict(), {"config": config_to_dict(model.config), "extra": extra or {}})


def load_checkpoint(path: str | Path, dtype: torch.dtype = torch.float32) -> tuple[CIMLModel, dict]:
    arrays, meta = load_archive(path)
    model = CIMLModel(parse_config(meta["config"])).to(dtype)
    load_into(model, arrays, path)
    return model, meta.get("extra", {})
