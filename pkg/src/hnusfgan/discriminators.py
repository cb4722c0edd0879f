"""HiFiGAN-style multi-period / multi-scale critics and the PWG critic.

Widths are reduced by default; ``DiscriminatorConfig.full()`` restores the
HiFiGAN channel counts. Intermediate activations are not returned because
feature matching is not part of the objective.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .nn import Conv1d, Module, as_tensor, leaky_relu, pad1d
from .nn.functional import avg_pool1d


@dataclass
class MPDConfig:
    periods: tuple = (2, 3, 5, 7, 11)
    channels: int = 4
    kernel_size: int = 5
    downsample_scales: tuple = (3, 3, 3, 1)
    max_channels: int = 64
    slope: float = 0.1

    def __post_init__(self):
        ps = list(self.periods)
        for i in range(len(ps)):
            for j in range(i + 1, len(ps)):
                if np.gcd(ps[i], ps[j]) != 1:
                    raise ValueError("periods must be pairwise coprime")


@dataclass
class MSDConfig:
    scales: int = 3
    channels: int = 16
    kernel_sizes: tuple = (15, 41, 5, 3)
    downsample_scales: tuple = (4, 4, 4)
    max_channels: int = 64
    max_groups: int = 16
    slope: float = 0.1

    @property
    def pool_factors(self) -> list[int]:
        return [2 ** i for i in range(self.scales)]


@dataclass
class PWGDiscConfig:
    layers: int = 10
    channels: int = 16
    kernel_size: int = 3
    slope: float = 0.2


@dataclass
class DiscriminatorConfig:
    kind: str = "hifigan"  # or "pwg"
    mpd: MPDConfig = field(default_factory=MPDConfig)
    msd: MSDConfig = field(default_factory=MSDConfig)
    pwg: PWGDiscConfig = field(default_factory=PWGDiscConfig)
    seed: int = 1

    def __post_init__(self):
        if self.kind not in ("hifigan", "pwg"):
            raise ValueError(f"unknown discriminator kind '{self.kind}'")

    @classmethod
    def full(cls, **overrides) -> "DiscriminatorConfig":
        return cls(mpd=MPDConfig(channels=32, downsample_scales=(3, 3, 3, 3, 1),
                                 max_channels=1024),
                   msd=MSDConfig(channels=128, downsample_scales=(2, 2, 4, 4, 1),
                                 max_channels=1024),
                   pwg=PWGDiscConfig(channels=64), **overrides)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DiscriminatorConfig":
        def build(klass, sub):
            names = {f.name for f in fields(klass)}
            return klass(**{k: tuple(v) if isinstance(v, list) else v
                            for k, v in sub.items() if k in names})
        return cls(kind=d.get("kind", "hifigan"), mpd=build(MPDConfig, d.get("mpd", {})),
                   msd=build(MSDConfig, d.get("msd", {})),
                   pwg=build(PWGDiscConfig, d.get("pwg", {})), seed=d.get("seed", 1))


def fold_period(x, period: int):
    """Reflect-pad ``[B, 1, T]`` on the right to a multiple of ``period`` and
    fold to ``[B * period, 1, T_pad / period]`` (one row per phase)."""
    x = as_tensor(x)
    B, C, T = x.shape
    n_pad = (period - T % period) % period
    if n_pad:
        x = pad1d(x, 0, n_pad, "reflect")
    rows = x.shape[-1] // period
    folded = x.reshape(B, C, rows, period).transpose(0, 3, 1, 2)
    return folded.reshape(B * period, C, rows)


class PeriodDiscriminator(Module):
    def __init__(self, period: int, cfg: MPDConfig, rng):
        self.period = period
        self.slope = cfg.slope
        k = cfg.kernel_size
        chans_in, chans_out = 1, cfg.channels
        self.convs = []
        for scale in cfg.downsample_scales:
            self.convs.append(Conv1d(chans_in, chans_out, k, rng, stride=scale,
                                     padding=(k - 1) // 2))
            chans_in = chans_out
            chans_out = min(chans_out * 4, cfg.max_channels)
        self.post = Conv1d(chans_in, 1, 3, rng, padding=1)

    def forward(self, x):
        B = x.shape[0]
        h = fold_period(x, self.period)
        for conv in self.convs:
            h = leaky_relu(conv(h), self.slope)
        h = self.post(h)
        # [B * p, 1, T'] -> [B, 1, T', p]
        return h.reshape(B, self.period, 1, h.shape[-1]).transpose(0, 2, 3, 1)


class MultiPeriodDiscriminator(Module):
    def __init__(self, cfg: MPDConfig, rng):
        self.discriminators = [PeriodDiscriminator(p, cfg, rng) for p in cfg.periods]

    def forward(self, x) -> list:
        if x.shape[-1] < max(d.period for d in self.discriminators):
            raise ValueError("input shorter than the largest period")
        return [d(x) for d in self.discriminators]


class ScaleDiscriminator(Module):
    def __init__(self, cfg: MSDConfig, rng):
        k0, kd, k1, k2 = cfg.kernel_sizes
        self.slope = cfg.slope
        self.convs = [Conv1d(1, cfg.channels, k0, rng, padding=(k0 - 1) // 2)]
        chans_in = cfg.channels
        chans_out = min(chans_in * 2, cfg.max_channels)
        groups = 4
        for scale in cfg.downsample_scales:
            g = min(groups, chans_in, chans_out)
            while chans_in % g or chans_out % g:
                g //= 2
            self.convs.append(Conv1d(chans_in, chans_out, kd, rng, stride=scale,
                                     padding=(kd - 1) // 2, groups=g))
            chans_in = chans_out
            chans_out = min(chans_in * 2, cfg.max_channels)
            groups = min(groups * 4, cfg.max_groups)
        self.convs.append(Conv1d(chans_in, chans_in, k1, rng, padding=(k1 - 1) // 2))
        self.post = Conv1d(chans_in, 1, k2, rng, padding=(k2 - 1) // 2)

    def forward(self, x):
        h = x
        for conv in self.convs:
            h = leaky_relu(conv(h), self.slope)
        return self.post(h)


def pool_by(x, factor: int):
    """Average-pool by ``factor`` (a power of two) using kernel 4 / stride 2 steps."""
    while factor > 1:
        x = avg_pool1d(x, 4, 2, padding=1)
        factor //= 2
    return x


class MultiScaleDiscriminator(Module):
    def __init__(self, cfg: MSDConfig, rng):
        self.pool_factors = cfg.pool_factors
        self.discriminators = [ScaleDiscriminator(cfg, rng) for _ in self.pool_factors]

    def forward(self, x) -> list:
        outs = []
        h = x
        for i, d in enumerate(self.discriminators):
            if i > 0:
                h = pool_by(h, self.pool_factors[i] // self.pool_factors[i - 1])
            outs.append(d(h))
        return outs


class PWGDiscriminator(Module):
    """Non-causal dilated stack, dilations 2^0 .. 2^(layers-1), linear output."""

    def __init__(self, cfg: PWGDiscConfig, rng):
        self.slope = cfg.slope
        k = cfg.kernel_size
        self.convs = []
        for i in range(cfg.layers):
            c_in = 1 if i == 0 else cfg.channels
            c_out = 1 if i == cfg.layers - 1 else cfg.channels
            self.convs.append(Conv1d(c_in, c_out, k, rng, dilation=2 ** i))

    def forward(self, x) -> list:
        h = x
        for i, conv in enumerate(self.convs):
            h = conv(h)
            if i < len(self.convs) - 1:
                h = leaky_relu(h, self.slope)
        return [h]


class Discriminators(Module):
    """The critic set selected by ``cfg.kind``; calling it returns a flat list
    of score maps."""

    def __init__(self, cfg: DiscriminatorConfig | None = None):
        cfg = cfg or DiscriminatorConfig()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        if cfg.kind == "hifigan":
            self.mpd = MultiPeriodDiscriminator(cfg.mpd, rng)
            self.msd = MultiScaleDiscriminator(cfg.msd, rng)
        else:
            self.pwg = PWGDiscriminator(cfg.pwg, rng)

    def forward(self, x) -> list:
        if self.cfg.kind == "hifigan":
            return self.mpd(x) + self.msd(x)
        return self.pwg(x)


def mpd_forward(disc: MultiPeriodDiscriminator, x) -> list:
    return disc(x)


def msd_forward(disc: MultiScaleDiscriminator, x) -> list:
    return disc(x)


def pwg_disc_forward(disc: PWGDiscriminator, x):
    return disc(x)[0]
