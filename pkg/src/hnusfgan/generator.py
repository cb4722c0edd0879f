"""Harmonic-plus-noise unified source-filter generator.

The source network turns a sinusoid (harmonic branch, pitch-dependent
dilations) and white noise (noise branch) into two latent signals that are
blended channel- and sample-wise by a periodicity estimator. The blended
latent feeds both a 1x1 projection (the excitation signal) and the
dilated-convolution filter network that produces speech.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from . import dsp
from .features import AcousticFeatures, FeatureNormalizer, conditioning_matrix
from .nn import Conv1d, Module, PDConv1d, Tensor, as_tensor, cast_parameters, leaky_relu, \
    no_grad, relu, sigmoid, tanh


@dataclass
class GeneratorConfig:
    residual_channels: int = 64
    gate_channels: int = 128
    skip_channels: int = 64
    kernel_size: int = 3
    harmonic_layers: int = 20
    harmonic_cycles: int = 4
    noise_layers: int = 5
    filter_layers: int = 30
    filter_cycles: int = 3
    periodicity_layers: int = 3
    periodicity_kernel: int = 5
    use_vuv: bool = True
    dense_factor: int = 4
    # "hn" = harmonic + noise + periodicity estimator; "single" = one PDCNN
    # source network fed sine and noise together (the -HN-SN ablation)
    source: str = "hn"
    sample_rate: int = 24000
    frame_shift: int = 120
    seed: int = 0

    def __post_init__(self):
        if self.harmonic_layers % self.harmonic_cycles:
            raise ValueError("harmonic_layers must be divisible by harmonic_cycles")
        if self.filter_layers % self.filter_cycles:
            raise ValueError("filter_layers must be divisible by filter_cycles")
        if min(self.residual_channels, self.gate_channels, self.skip_channels) <= 0:
            raise ValueError("channel counts must be positive")
        if self.gate_channels % 2:
            raise ValueError("gate_channels must be even")
        if self.source not in ("hn", "single"):
            raise ValueError(f"unknown source network '{self.source}'")

    @property
    def cond_channels(self) -> int:
        return 46 if self.use_vuv else 45

    @property
    def latent_channels(self) -> int:
        return self.residual_channels

    @classmethod
    def full(cls, **overrides) -> "GeneratorConfig":
        return replace(cls(), **overrides)

    @classmethod
    def toy(cls, **overrides) -> "GeneratorConfig":
        base = cls(residual_channels=16, gate_channels=32, skip_channels=16,
                   harmonic_layers=6, harmonic_cycles=2, noise_layers=3,
                   filter_layers=9, filter_cycles=3)
        return replace(base, **overrides)

    @classmethod
    def preset(cls, name: str, **overrides) -> "GeneratorConfig":
        if name == "toy":
            return cls.toy(**overrides)
        if name == "full":
            return cls.full(**overrides)
        raise ValueError(f"unknown preset '{name}'")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def filter_receptive_field(self) -> int:
        """One-sided receptive field of the filter network in samples."""
        per_cycle = self.filter_layers // self.filter_cycles
        dil = sum(2 ** (i % per_cycle) for i in range(self.filter_layers))
        return (self.kernel_size - 1) // 2 * dil


@dataclass
class SourceOutputs:
    latent: Tensor
    harmonic: Tensor | None
    noise: Tensor | None
    weights: Tensor | None
    excitation: Tensor


class ResidualBlock(Module):
    """Gated residual block: dilated conv + conditioning, tanh * sigmoid,
    1x1 projections to the residual and skip paths."""

    def __init__(self, cfg: GeneratorConfig, rng, dilation: int = 1, pitch_dependent=False,
                 last: bool = False):
        c, g, k = cfg.residual_channels, cfg.gate_channels, cfg.kernel_size
        self.pitch_dependent = pitch_dependent
        self.dilation = dilation
        if pitch_dependent:
            self.conv = PDConv1d(c, g, k, rng)
        else:
            self.conv = Conv1d(c, g, k, rng, dilation=dilation)
        self.cond = Conv1d(cfg.cond_channels, g, 1, rng, bias=False)
        # the final block of a stack only feeds the skip sum
        self.out = None if last else Conv1d(g // 2, c, 1, rng)
        self.skip = Conv1d(g // 2, cfg.skip_channels, 1, rng)
        self.half = g // 2

    def forward(self, x, cond, base_dilation=None):
        if self.pitch_dependent:
            h = self.conv(x, base_dilation * self.dilation)
        else:
            h = self.conv(x)
        h = h + self.cond(cond)
        z = tanh(h[:, :self.half]) * sigmoid(h[:, self.half:])
        if self.out is None:
            return x, self.skip(z)
        return (self.out(z) + x) * math.sqrt(0.5), self.skip(z)


class ResidualStack(Module):
    """Input projection, residual blocks, summed skips, ReLU + 1x1 output."""

    def __init__(self, cfg: GeneratorConfig, rng, in_channels: int, layers: int, cycles: int,
                 pitch_dependent: bool, dilate: bool = True):
        self.input = Conv1d(in_channels, cfg.residual_channels, 1, rng)
        per_cycle = layers // cycles
        self.blocks = [
            ResidualBlock(cfg, rng, 2 ** (i % per_cycle) if dilate else 1, pitch_dependent,
                          last=i == layers - 1)
            for i in range(layers)
        ]
        self.output = Conv1d(cfg.skip_channels, cfg.latent_channels, 1, rng)

    def forward(self, signal, cond, base_dilation=None):
        x = self.input(signal)
        skips = None
        for block in self.blocks:
            x, s = block(x, cond, base_dilation)
            skips = s if skips is None else skips + s
        skips = skips * math.sqrt(1.0 / len(self.blocks))
        return self.output(relu(skips))


class PeriodicityEstimator(Module):
    def __init__(self, cfg: GeneratorConfig, rng):
        c, k = cfg.residual_channels, cfg.periodicity_kernel
        chans = [cfg.cond_channels] + [c] * (cfg.periodicity_layers - 1) + [cfg.latent_channels]
        self.convs = [Conv1d(chans[i], chans[i + 1], k, rng) for i in range(len(chans) - 1)]

    def forward(self, cond):
        h = cond
        for i, conv in enumerate(self.convs):
            h = conv(h)
            if i < len(self.convs) - 1:
                h = leaky_relu(h, 0.1)
        return sigmoid(h)


class FilterNetwork(Module):
    def __init__(self, cfg: GeneratorConfig, rng):
        per_cycle = cfg.filter_layers // cfg.filter_cycles
        self.blocks = [ResidualBlock(cfg, rng, 2 ** (i % per_cycle),
                                     last=i == cfg.filter_layers - 1)
                       for i in range(cfg.filter_layers)]
        self.post1 = Conv1d(cfg.skip_channels, cfg.skip_channels, 1, rng)
        self.post2 = Conv1d(cfg.skip_channels, 1, 1, rng)

    def forward(self, latent, cond):
        x = latent
        skips = None
        for block in self.blocks:
            x, s = block(x, cond)
            skips = s if skips is None else skips + s
        skips = skips * math.sqrt(1.0 / len(self.blocks))
        return tanh(self.post2(relu(self.post1(relu(skips)))))


def mix_latents(harmonic, noise, weights) -> Tensor:
    """Blend harmonic and noise latents: ``a * l_h + (1 - a) * l_n``."""
    harmonic, noise, weights = as_tensor(harmonic), as_tensor(noise), as_tensor(weights)
    if not (harmonic.shape == noise.shape == weights.shape):
        raise ValueError(
            f"shape mismatch: {harmonic.shape}, {noise.shape}, {weights.shape}")
    return weights * harmonic + (1.0 - weights) * noise


class Generator(Module):
    def __init__(self, cfg: GeneratorConfig, normalizer: FeatureNormalizer | None = None):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        per_cycle = cfg.harmonic_layers // cfg.harmonic_cycles
        if cfg.source == "hn":
            self.harmonic_net = ResidualStack(cfg, rng, 1, cfg.harmonic_layers,
                                              cfg.harmonic_cycles, pitch_dependent=True)
            self.noise_net = ResidualStack(cfg, rng, 1, cfg.noise_layers, 1,
                                           pitch_dependent=False, dilate=False)
            self.periodicity = PeriodicityEstimator(cfg, rng)
        else:
            self.source_net = ResidualStack(cfg, rng, 1, cfg.harmonic_layers,
                                            cfg.harmonic_cycles, pitch_dependent=True)
        self.excitation_proj = Conv1d(cfg.latent_channels, 1, 1, rng)
        self.filter_net = FilterNetwork(cfg, rng)
        self.normalizer = normalizer or FeatureNormalizer.identity(cfg.cond_channels)
        self.harmonic_multipliers = [2 ** (i % per_cycle) for i in range(cfg.harmonic_layers)]

    # -- sub-network entry points ------------------------------------------
    def harmonic_forward(self, sine, cond, dilations) -> Tensor:
        _check_lengths(sine, cond, dilations)
        return self.harmonic_net(sine, cond, np.asarray(dilations))

    def noise_forward(self, noise, cond) -> Tensor:
        _check_lengths(noise, cond)
        return self.noise_net(noise, cond)

    def periodicity_forward(self, cond) -> Tensor:
        return self.periodicity(cond)

    def excitation_project(self, latent) -> Tensor:
        latent = as_tensor(latent)
        if latent.shape[1] != self.cfg.latent_channels:
            raise ValueError(f"latent needs {self.cfg.latent_channels} channels")
        return self.excitation_proj(latent)

    def filter_forward(self, latent, cond) -> Tensor:
        return self.filter_net(latent, cond)

    def source_forward(self, sine, noise, cond, dilations, weights_override=None) -> SourceOutputs:
        if self.cfg.source == "single":
            _check_lengths(sine, cond, dilations)
            signal = as_tensor(sine) + as_tensor(noise)
            latent = self.source_net(signal, cond, np.asarray(dilations))
            return SourceOutputs(latent, None, None, None, self.excitation_project(latent))
        lh = self.harmonic_forward(sine, cond, dilations)
        ln = self.noise_forward(noise, cond)
        if weights_override is None:
            a = self.periodicity_forward(cond)
        else:
            a = as_tensor(np.broadcast_to(np.asarray(
                weights_override.data if isinstance(weights_override, Tensor)
                else weights_override, dtype=lh.dtype), lh.shape))
        latent = mix_latents(lh, ln, a)
        return SourceOutputs(latent, lh, ln, a, self.excitation_project(latent))

    def forward(self, sine, noise, cond, dilations, weights_override=None):
        """Run source and filter networks on ``[B, 1, T]`` inputs.

        Returns ``(speech [B, 1, T], SourceOutputs)``; the filter network and
        the excitation projection consume the same latent tensor.
        """
        src = self.source_forward(sine, noise, cond, dilations, weights_override)
        return self.filter_forward(src.latent, cond), src

    # -- feature-level helpers ------------------------------------------------
    def prepare_inputs(self, feat: AcousticFeatures, seed: int, f0_scale: float = 1.0):
        """Excitation inputs, normalized conditioning and dilations for one utterance."""
        if f0_scale != 1.0:
            feat = feat.scaled_f0(f0_scale)
        cfg = self.cfg
        exc = dsp.make_excitation_inputs(feat.cont_f0 * feat.vuv, feat.vuv, feat.frame_shift,
                                         cfg.sample_rate, seed)
        d = dsp.dilation_factors(exc.per_sample_f0, cfg.sample_rate, cfg.dense_factor)
        cond = self.normalizer(conditioning_matrix(feat, use_vuv=cfg.use_vuv))
        return exc, cond[None], d[None]

    def generate(self, feat: AcousticFeatures, seed: int = 0, f0_scale: float = 1.0,
                 weights_override=None, dtype=np.float64):
        """Synthesize speech for an utterance.

        Returns ``(speech, excitation, weights, outputs)`` where the first two
        are :class:`dsp.AudioBuffer`, ``weights`` is the ``[C, T]`` periodicity
        array (``None`` for the single-source variant) and ``outputs`` the raw
        :class:`SourceOutputs`.
        """
        exc, cond, d = self.prepare_inputs(feat, seed, f0_scale)
        sine = exc.sine[None, None].astype(dtype)
        noise = exc.noise[None, None].astype(dtype)
        with no_grad(), cast_parameters(self, dtype):
            speech, src = self.forward(Tensor(sine), Tensor(noise), Tensor(cond.astype(dtype)),
                                       d, weights_override)
        fs = self.cfg.sample_rate
        weights = None if src.weights is None else src.weights.data[0]
        return (dsp.AudioBuffer(speech.data[0, 0].astype(np.float64), fs),
                dsp.AudioBuffer(src.excitation.data[0, 0].astype(np.float64), fs),
                weights, src)


def _check_lengths(*arrays):
    lengths = {np.shape(a.data if isinstance(a, Tensor) else a)[-1] for a in arrays}
    if len(lengths) != 1:
        raise ValueError(f"length mismatch between inputs: {sorted(lengths)}")
