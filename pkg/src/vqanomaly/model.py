"""U-Net encoder/decoder with a vector quantizer at the bottleneck."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn as nn

from .codebook import Codebook, QuantizationResult, straight_through

MODES = ("prediction", "reconstruction")


class ConfigError(ValueError):
    pass


@dataclass
class NetworkConfig:
    n: int = 5
    levels: int = 4
    base_channels: int = 64
    bottleneck_dim: int = 512
    mode: str = "prediction"
    use_codebook: bool = True
    codebook_size: int = 256
    channels: int = 3

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.mode == "prediction" and self.n < 1:
            raise ConfigError("prediction mode needs n >= 1")
        if self.mode == "reconstruction" and self.n != 0:
            raise ConfigError("reconstruction mode needs n = 0")
        if self.levels < 1 or self.base_channels < 1 or self.bottleneck_dim < 1:
            raise ConfigError("levels, base_channels and bottleneck_dim must be positive")
        if self.use_codebook and self.codebook_size < 2:
            raise ConfigError("codebook needs at least 2 entries")

    @property
    def skips(self) -> bool:
        return self.mode == "prediction"

    @property
    def in_channels(self) -> int:
        return max(self.n, 1) * self.channels

    def widths(self) -> list[int]:
        return [self.base_channels * 2 ** i for i in range(self.levels)]

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ForwardOutput:
    predicted: torch.Tensor
    quantization: QuantizationResult | None


def double_conv(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class Encoder(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        widths = cfg.widths()
        self.blocks = nn.ModuleList()
        self.downs = nn.ModuleList()
        cin = cfg.in_channels
        for w in widths:
            self.blocks.append(double_conv(cin, w))
            self.downs.append(nn.Sequential(
                nn.Conv2d(w, w, 3, stride=2, padding=1, bias=False),
                nn.BatchNorm2d(w),
                nn.ReLU(inplace=True),
            ))
            cin = w
        # no activation: codebook entries may take any sign
        self.to_latent = nn.Conv2d(widths[-1], cfg.bottleneck_dim, 1)

    def forward(self, x):
        skips = []
        for block, down in zip(self.blocks, self.downs):
            x = block(x)
            skips.append(x)
            x = down(x)
        return self.to_latent(x), skips


class Decoder(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        widths = cfg.widths()
        self.skips = cfg.skips
        self.ups = nn.ModuleList()
        self.blocks = nn.ModuleList()
        cin = cfg.bottleneck_dim
        for w in reversed(widths):
            self.ups.append(nn.ConvTranspose2d(cin, w, 2, stride=2))
            self.blocks.append(double_conv(2 * w if self.skips else w, w))
            cin = w
        # last layer: plain convolution, no batch norm and no ReLU
        self.head = nn.Conv2d(widths[0], cfg.channels, 1)

    def forward(self, z, skips=None):
        if self.skips:
            if skips is None or len(skips) != len(self.blocks):
                raise ConfigError("prediction decoder needs one skip tensor per level")
        elif skips:
            raise ConfigError("reconstruction decoder takes no skip tensors")
        x = z
        for i, (up, block) in enumerate(zip(self.ups, self.blocks)):
            x = up(x)
            if self.skips:
                x = torch.cat([x, skips[-1 - i]], dim=1)
            x = block(x)
        return self.head(x)


class VQUNet(nn.Module):
    """Frame predictor (``mode='prediction'``) or autoencoder (``'reconstruction'``).

    Input is B x (max(n,1)*C) x H x W; H and W must be divisible by 2**levels.
    With ``use_codebook`` the decoder only ever sees codebook entries at the
    bottleneck; otherwise it is a plain U-Net.
    """

    def __init__(self, cfg: NetworkConfig, codebook: Codebook | None = None):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.decoder = Decoder(cfg)
        if cfg.use_codebook:
            self.codebook = codebook if codebook is not None else Codebook(cfg.codebook_size, cfg.bottleneck_dim)
            if self.codebook.D != cfg.bottleneck_dim:
                raise ConfigError(f"codebook dim {self.codebook.D} != bottleneck dim {cfg.bottleneck_dim}")
        else:
            self.codebook = None

    def check_input(self, x: torch.Tensor) -> None:
        cfg = self.cfg
        if x.dim() != 4 or x.shape[1] != cfg.in_channels:
            raise ConfigError(f"expected B x {cfg.in_channels} x H x W input, got {tuple(x.shape)}")
        f = 2 ** cfg.levels
        if x.shape[2] % f or x.shape[3] % f:
            raise ConfigError(f"input size {tuple(x.shape[2:])} not divisible by {f}")

    def encode(self, x: torch.Tensor):
        """Returns ``(z_e, skips)``; skips is empty in reconstruction mode."""
        self.check_input(x)
        z_e, skips = self.encoder(x)
        return z_e, (skips if self.cfg.skips else [])

    def forward(self, x: torch.Tensor) -> ForwardOutput:
        z_e, skips = self.encode(x)
        if self.codebook is not None:
            q = self.codebook.quantize(z_e)
            z = straight_through(q)
        else:
            q, z = None, z_e
        return ForwardOutput(self.decoder(z, skips or None), q)


def build_model(cfg: NetworkConfig, seed: int = 0) -> VQUNet:
    from .codebook import codebook_init
    torch.manual_seed(seed)
    cb = codebook_init(cfg.codebook_size, cfg.bottleneck_dim, seed=seed) if cfg.use_codebook else None
    return VQUNet(cfg, cb)
