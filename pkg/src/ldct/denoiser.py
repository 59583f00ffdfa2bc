"""Residual UNet denoiser with a constant noise-level input channel.

Layout follows DRUNet: a head convolution, ``num_scales - 1`` encoder stages
(residual blocks, then a 2x2 stride-2 convolution), a bottleneck of residual
blocks, mirrored decoder stages (2x2 transposed convolution, then residual
blocks) fed by additive encoder skips, and a tail convolution.  No layer has
a bias and only the inner convolution of each residual block is followed by
an activation.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, DataError, ModelError
from .tomo import crop_back, mirror_pad

CHECKPOINT_MAGIC = b"LDCTCKPT"
CHECKPOINT_VERSION = 1
ACTIVATIONS = {"relu": nn.ReLU, "identity": nn.Identity}


@dataclass(frozen=True)
class DenoiserConfig:
    num_scales: int = 4
    base_channels: int = 16
    residual_blocks_per_scale: int = 2
    noise_map_value: float = 1.0
    input_multiple: int | None = None  # defaults to 2 ** num_scales
    activation: str = "relu"
    global_residual: bool = False

    def __post_init__(self):
        if self.num_scales < 1 or self.base_channels < 1 or self.residual_blocks_per_scale < 0:
            raise ConfigError("num_scales and base_channels must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.input_multiple is None:
            object.__setattr__(self, "input_multiple", 2 ** self.num_scales)
        if self.input_multiple % 2 ** (self.num_scales - 1):
            raise ConfigError("input_multiple must be divisible by the total downsampling factor")

    @property
    def channels(self):
        return [self.base_channels * 2 ** i for i in range(self.num_scales)]

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown denoiser config keys {sorted(unknown)}")
        return cls(**d)

    def fingerprint(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


PAPER_CONFIG = DenoiserConfig(base_channels=64, residual_blocks_per_scale=4)


@dataclass(frozen=True)
class Scratch:
    seed: int = 0


@dataclass(frozen=True)
class Pretrained:
    path: str


class ResBlock(nn.Module):
    def __init__(self, channels, activation):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1, bias=False)
        self.act = ACTIVATIONS[activation]()
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1, bias=False)

    def forward(self, x):
        return x + self.conv2(self.act(self.conv1(x)))


class Denoiser(nn.Module):
    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = config
        ch = config.channels
        nb = config.residual_blocks_per_scale
        act = config.activation
        self.head = nn.Conv2d(2, ch[0], 3, padding=1, bias=False)
        self.down = nn.ModuleList(
            nn.Sequential(*[ResBlock(ch[i], act) for _ in range(nb)],
                          nn.Conv2d(ch[i], ch[i + 1], 2, stride=2, bias=False))
            for i in range(config.num_scales - 1)
        )
        self.body = nn.Sequential(*[ResBlock(ch[-1], act) for _ in range(nb)])
        self.up = nn.ModuleList(
            nn.Sequential(nn.ConvTranspose2d(ch[i + 1], ch[i], 2, stride=2, bias=False),
                          *[ResBlock(ch[i], act) for _ in range(nb)])
            for i in reversed(range(config.num_scales - 1))
        )
        self.tail = nn.Conv2d(ch[0], 1, 3, padding=1, bias=False)

    def forward(self, x):
        """Network on (B, 1, H, W) tensors whose H, W are multiples of ``input_multiple``."""
        noise_map = torch.full_like(x, self.config.noise_map_value)
        h = self.head(torch.cat([x, noise_map], dim=1))
        skips = [h]
        for stage in self.down:
            h = stage(h)
            skips.append(h)
        h = self.body(h)
        for stage in self.up:
            h = stage(h + skips.pop())
        out = self.tail(h + skips.pop())
        return x + out if self.config.global_residual else out


def layer_kind(name, module):
    if isinstance(module, nn.ConvTranspose2d):
        return "transposed_conv"
    if isinstance(module, nn.Conv2d):
        return "strided_conv" if module.stride != (1, 1) else "conv"
    return type(module).__name__.lower()


def layer_table(model: Denoiser):
    """Ordered (name, kind, shape, count) for every parameter tensor."""
    modules = dict(model.named_modules())
    rows = []
    for name, p in model.named_parameters():
        owner = modules[name.rsplit(".", 1)[0]]
        rows.append({"name": name, "kind": layer_kind(name, owner),
                     "shape": list(p.shape), "count": p.numel()})
    return rows


def parameter_count(model):
    return sum(p.numel() for p in model.parameters())


def build(config: DenoiserConfig, init=Scratch(0)) -> Denoiser:
    if isinstance(init, Pretrained):
        return load_checkpoint(init.path, expected=config)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(init.seed)
        model = Denoiser(config)
    return model


def identity_model(image_multiple=None):
    """Zero-effect denoiser: global residual with a zeroed tail."""
    cfg = DenoiserConfig(num_scales=1, base_channels=1, residual_blocks_per_scale=0,
                         global_residual=True, input_multiple=image_multiple or 1)
    model = build(cfg)
    with torch.no_grad():
        for p in model.parameters():
            p.zero_()
    return model


def forward(model: Denoiser, image) -> np.ndarray:
    """Mirror-pad, run the whole image through the network, crop back."""
    return forward_batch(model, np.asarray(image)[None])[0]


def forward_batch(model: Denoiser, images, batch_size=16) -> np.ndarray:
    images = np.asarray(images)
    if not np.all(np.isfinite(images)):
        raise DataError("non-finite input image")
    padded, rec = mirror_pad(images, model.config.input_multiple)
    dtype = next(model.parameters()).dtype
    outs = []
    with torch.no_grad():
        for i in range(0, len(padded), batch_size):
            x = torch.from_numpy(np.ascontiguousarray(padded[i:i + batch_size])).to(dtype)[:, None]
            outs.append(model(x)[:, 0].numpy())
    return crop_back(np.concatenate(outs), rec).astype(images.dtype, copy=False)


def forward_tiled(model: Denoiser, image, tile):
    """Independent inference on ``tile``-sized blocks (the patch-wise scheme
    that padding replaces); kept as a negative control for seam detection."""
    image = np.asarray(image)
    out = np.empty_like(image)
    for r in range(0, image.shape[0], tile):
        for c in range(0, image.shape[1], tile):
            out[r:r + tile, c:c + tile] = forward(model, image[r:r + tile, c:c + tile])
    return out


def _header(model):
    cfg = model.config
    layers, offset = [], 0
    for row in layer_table(model):
        layers.append({**row, "offset": offset})
        offset += row["count"]
    return {"format_version": CHECKPOINT_VERSION, "config": cfg.to_dict(),
            "fingerprint": cfg.fingerprint(), "layers": layers, "total": offset}


def save_checkpoint(model: Denoiser, path):
    """JSON layer table followed by contiguous little-endian f32 slabs."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = json.dumps(_header(model), sort_keys=True).encode()
    with path.open("wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for p in model.parameters():
            fh.write(p.detach().cpu().numpy().astype("<f4").tobytes())


def read_checkpoint_header(path):
    with Path(path).open("rb") as fh:
        if fh.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
            raise ModelError(f"{path} is not a checkpoint")
        (n,) = struct.unpack("<Q", fh.read(8))
        return json.loads(fh.read(n)), len(CHECKPOINT_MAGIC) + 8 + n


def load_checkpoint(path, expected: DenoiserConfig | None = None) -> Denoiser:
    path = Path(path)
    if not path.exists():
        raise ModelError(f"checkpoint not found: {path}")
    header, start = read_checkpoint_header(path)
    config = DenoiserConfig.from_dict(header["config"])
    if config.fingerprint() != header["fingerprint"]:
        raise ModelError("checkpoint header fingerprint does not match its config")
    if expected is not None and expected.fingerprint() != header["fingerprint"]:
        raise ModelError(
            f"checkpoint config {header['config']} does not match requested {expected.to_dict()}"
        )
    model = Denoiser(config)
    raw = np.frombuffer(path.read_bytes()[start:], dtype="<f4")
    if raw.size != header["total"]:
        raise ModelError("checkpoint payload size does not match its layer table")
    table = {row["name"]: row for row in header["layers"]}
    with torch.no_grad():
        for name, p in model.named_parameters():
            row = table.get(name)
            if row is None or list(p.shape) != row["shape"]:
                raise ModelError(f"layer {name} missing or mis-shaped in checkpoint")
            slab = raw[row["offset"]: row["offset"] + row["count"]]
            p.copy_(torch.from_numpy(slab.reshape(row["shape"]).astype(np.float32)))
    return model
