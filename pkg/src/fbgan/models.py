"""Generator and dual-output U-net discriminator.

Both networks are stride-2 U-nets: every encoder stage halves the spatial
size, the decoder mirrors it with skip connections. The discriminator adds
a global head (spatial mean of the bottleneck, affine, sigmoid) next to the
per-pixel probability map decoded at input resolution. The generator squashes
its output to [-1, 1] and takes either one channel (plain image) or two
(image concatenated with a probability map fed back from the discriminator).
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import torch
import torch.nn as nn

from .errors import ValidationError


@dataclass
class GeneratorConfig:
    in_channels: int = 2
    out_channels: int = 1
    widths: tuple[int, ...] = (32, 64, 128, 256)

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if self.in_channels not in (1, 2):
            raise ValidationError(f"generator in_channels must be 1 or 2, got {self.in_channels}")
        if self.out_channels != 1:
            raise ValidationError("generator out_channels must be 1")
        if len(self.widths) < 1 or min(self.widths) < 1:
            raise ValidationError(f"widths must be positive, got {self.widths}")

    @property
    def depth(self) -> int:
        return len(self.widths)


@dataclass
class DiscriminatorConfig:
    widths: tuple[int, ...] = (32, 64, 128, 256)
    local_head: bool = True

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if len(self.widths) < 1 or min(self.widths) < 1:
            raise ValidationError(f"widths must be positive, got {self.widths}")

    @property
    def depth(self) -> int:
        return len(self.widths)


@dataclass
class DualDiscOutput:
    """Per-item global real/fake probability and, if present, the probability map."""

    global_probs: torch.Tensor  # (B,)
    prob_map: torch.Tensor | None  # (B, 1, H, W)


def validate_spatial(size: int, depth: int) -> None:
    div = 2**depth
    if size % div != 0 or size // div < 1:
        raise ValidationError(f"spatial size {size} must be a positive multiple of 2^{depth}")


def _check_input(x: torch.Tensor, expected_channels: int, depth: int) -> None:
    if x.ndim != 4:
        raise ValidationError(f"expected (N,C,H,W) input, got {tuple(x.shape)}")
    if x.shape[1] != expected_channels:
        raise ValidationError(f"expected {expected_channels} input channels, got {x.shape[1]}")
    validate_spatial(x.shape[2], depth)
    validate_spatial(x.shape[3], depth)


def _down_block(cin: int, cout: int, norm: bool) -> nn.Sequential:
    layers: list[nn.Module] = [nn.Conv2d(cin, cout, 4, stride=2, padding=1)]
    if norm:
        layers.append(nn.InstanceNorm2d(cout))
    layers.append(nn.LeakyReLU(0.2))
    return nn.Sequential(*layers)


def _up_block(cin: int, cout: int, norm: bool) -> nn.Sequential:
    layers: list[nn.Module] = [nn.ConvTranspose2d(cin, cout, 4, stride=2, padding=1)]
    if norm:
        layers.append(nn.InstanceNorm2d(cout))
    layers.append(nn.ReLU())
    return nn.Sequential(*layers)


class _UnetDecoder(nn.Module):
    """Shared decoder: upsample, concatenate the mirrored skip, repeat."""

    def __init__(self, widths, out_channels: int, norm: bool):
        super().__init__()
        ws = list(reversed(widths))
        self.ups = nn.ModuleList()
        for i in range(len(ws) - 1):
            cin = ws[i] if i == 0 else 2 * ws[i]
            self.ups.append(_up_block(cin, ws[i + 1], norm))
        head_in = widths[0] if len(widths) == 1 else 2 * widths[0]
        self.head = nn.ConvTranspose2d(head_in, out_channels, 4, stride=2, padding=1)

    def forward(self, bottleneck, skips):
        x = bottleneck
        for up in self.ups:
            x = up(x)
            x = torch.cat([x, skips.pop()], dim=1)
        return self.head(x)


class UnetGenerator(nn.Module):
    def __init__(self, config: GeneratorConfig):
        super().__init__()
        self.config = config
        self.downs = nn.ModuleList()
        c = config.in_channels
        last = config.depth - 1
        # No norm on the outermost and innermost blocks, as in the pix2pix
        # U-net; the bottleneck may be 1x1 where instance statistics vanish.
        for i, w in enumerate(config.widths):
            self.downs.append(_down_block(c, w, norm=0 < i < last))
            c = w
        self.decoder = _UnetDecoder(config.widths, config.out_channels, norm=True)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_input(x, self.config.in_channels, self.config.depth)
        skips = []
        for down in self.downs:
            x = down(x)
            skips.append(x)
        bottleneck = skips.pop()
        return torch.tanh(self.decoder(bottleneck, skips))


class UnetDiscriminator(nn.Module):
    def __init__(self, config: DiscriminatorConfig):
        super().__init__()
        self.config = config
        self.downs = nn.ModuleList()
        c = 1
        for w in config.widths:
            self.downs.append(_down_block(c, w, norm=False))
            c = w
        self.global_head = nn.Linear(config.widths[-1], 1)
        # Built after the encoder and global head so that the shared parameter
        # initialization stream is identical whether or not the local head exists.
        self.decoder = _UnetDecoder(config.widths, 1, norm=False) if config.local_head else None

    def forward(self, x: torch.Tensor) -> DualDiscOutput:
        _check_input(x, 1, self.config.depth)
        skips = []
        for down in self.downs:
            x = down(x)
            skips.append(x)
        bottleneck = skips.pop()
        g = torch.sigmoid(self.global_head(bottleneck.mean(dim=(2, 3)))).squeeze(1)
        if self.decoder is None:
            return DualDiscOutput(global_probs=g, prob_map=None)
        prob_map = torch.sigmoid(self.decoder(bottleneck, skips))
        return DualDiscOutput(global_probs=g, prob_map=prob_map)


def gan_weights_init(module: nn.Module) -> None:
    if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
        nn.init.normal_(module.weight, 0.0, 0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)


def derive_seed(seed: int, name: str) -> int:
    """Stable per-network seed so architectures share initialization streams."""
    return (int(seed) * 1000003 + zlib.crc32(name.encode())) % (2**31 - 1)


def _build_seeded(factory, seed: int | None) -> nn.Module:
    # Reseed between construction and init so that the init stream for shared
    # leading submodules does not depend on how many parameters construction drew.
    with torch.random.fork_rng(devices=[]):
        if seed is not None:
            torch.manual_seed(seed)
        net = factory()
        if seed is not None:
            torch.manual_seed(seed + 0x5EED1)
        net.apply(gan_weights_init)
    return net


def build_generator(config: GeneratorConfig, seed: int | None = None) -> UnetGenerator:
    return _build_seeded(lambda: UnetGenerator(config), seed)


def build_discriminator(config: DiscriminatorConfig, seed: int | None = None) -> UnetDiscriminator:
    return _build_seeded(lambda: UnetDiscriminator(config), seed)


def generator_forward(generator: UnetGenerator, batch: torch.Tensor) -> torch.Tensor:
    return generator(batch)


def discriminator_forward(discriminator: UnetDiscriminator, batch: torch.Tensor) -> DualDiscOutput:
    return discriminator(batch)
