"""Signal-processing primitives shared by feature extraction and the losses."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import Tensor, no_grad
from .nn import functional as F

EPS = 1e-8
SAMPLE_RATE = 24000
FRAME_SHIFT = 120
FFT_SIZE = 1024


@dataclass
class AudioBuffer:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if int(self.sample_rate) <= 0:
            raise ValueError("sample_rate must be positive")
        self.sample_rate = int(self.sample_rate)
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("audio contains NaN or Inf")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class Spectrogram:
    """Amplitude spectrogram, ``values`` shaped ``[frames, fft_size // 2 + 1]``."""

    values: np.ndarray
    frame_shift: int
    fft_size: int
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[1] != self.fft_size // 2 + 1:
            raise ValueError(f"bins must equal fft_size/2+1, got shape {self.values.shape}")
        if np.any(self.values < 0):
            raise ValueError("spectrogram amplitudes must be non-negative")

    @property
    def frames(self) -> int:
        return self.values.shape[0]

    @property
    def bins(self) -> int:
        return self.values.shape[1]

    def with_values(self, values) -> "Spectrogram":
        return Spectrogram(values, self.frame_shift, self.fft_size, self.sample_rate)


@dataclass
class MelFilterbank:
    weights: np.ndarray  # [n_mels, bins]
    fmin: float
    fmax: float

    @property
    def n_mels(self) -> int:
        return self.weights.shape[0]

    @property
    def bins(self) -> int:
        return self.weights.shape[1]


@dataclass
class ExcitationInputs:
    sine: np.ndarray
    noise: np.ndarray
    per_sample_f0: np.ndarray


def stft(audio: AudioBuffer, fft_size: int = FFT_SIZE, frame_shift: int = FRAME_SHIFT,
         window: str = "hann", win_length: int | None = None) -> Spectrogram:
    """Amplitude STFT with centred, reflection-padded frames."""
    if window != "hann":
        raise ValueError(f"unsupported window '{window}'")
    if fft_size & (fft_size - 1):
        raise ValueError("fft_size must be a power of two")
    if frame_shift > fft_size:
        raise ValueError("frame_shift must not exceed fft_size")
    with no_grad():
        mag = F.stft_magnitude(Tensor(audio.samples[None]), fft_size, frame_shift, win_length)
    return Spectrogram(mag.data[0], frame_shift, fft_size, audio.sample_rate)


def hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel) / 2595.0) - 1.0)


def mel_filterbank(sample_rate: int = SAMPLE_RATE, fft_size: int = FFT_SIZE, n_mels: int = 80,
                   fmin: float = 0.0, fmax: float | None = None) -> MelFilterbank:
    """Triangular filters equally spaced on the mel scale, peak weight 1."""
    fmax = sample_rate / 2 if fmax is None else fmax
    freqs = np.arange(fft_size // 2 + 1) * sample_rate / fft_size
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None] - lo) / (mid - lo)
    falling = (hi - freqs[None]) / (hi - mid)
    weights = np.maximum(0.0, np.minimum(rising, falling))
    empty = weights.sum(axis=1) == 0
    if np.any(empty):
        # filter narrower than a bin: put its weight on the nearest bin
        nearest = np.abs(freqs[None] - mid[empty]).argmin(axis=1)
        weights[np.nonzero(empty)[0], nearest] = 1.0
    return MelFilterbank(weights, fmin, fmax)


def mel_project(spec, fb: MelFilterbank) -> np.ndarray:
    """``spec @ fb.weights.T`` floored at ``EPS``; accepts a Spectrogram or an array."""
    values = spec.values if isinstance(spec, Spectrogram) else np.asarray(spec)
    if values.shape[-1] != fb.bins:
        raise ValueError(f"spectrum has {values.shape[-1]} bins, filterbank expects {fb.bins}")
    return np.maximum(values @ fb.weights.T, EPS)


def _mirror_index(n_bins: int, margin: int) -> np.ndarray:
    # reflect about DC and Nyquist without duplicating the edge bins
    return np.concatenate([np.arange(margin, 0, -1), np.arange(n_bins),
                           np.arange(n_bins - 2, n_bins - margin - 2, -1)])


class RectangularSmoother:
    """Per-frame moving average over ``width_bins`` (fractional) bins.

    Linear in the input, so ``adjoint`` gives the exact transpose for
    backpropagation.
    """

    def __init__(self, width_bins, n_bins: int):
        w = np.asarray(width_bins, dtype=np.float64).reshape(-1)
        margin = int(np.ceil(w.max() / 2)) + 2
        if margin >= n_bins - 1:
            raise ValueError("smoothing width exceeds the spectrum")
        self.width = w
        self.n_bins = n_bins
        self.src = _mirror_index(n_bins, margin)
        self.n_ext = len(self.src)
        centre = np.arange(n_bins)[None] + margin + 0.5
        half = w[:, None] / 2
        self.ends = [self._locate(centre + half), self._locate(centre - half)]

    @staticmethod
    def _locate(pos):
        i = np.floor(pos).astype(np.int64)
        return i, pos - i

    def apply(self, power: np.ndarray) -> np.ndarray:
        ext = power[:, self.src]
        integral = np.concatenate([np.zeros((len(ext), 1)), np.cumsum(ext, axis=1)], axis=1)

        def at(i, frac):
            lo = np.take_along_axis(integral, i, axis=1)
            hi = np.take_along_axis(integral, i + 1, axis=1)
            return lo + frac * (hi - lo)

        (ih, fh), (il, fl) = self.ends
        return (at(ih, fh) - at(il, fl)) / self.width[:, None]

    def adjoint(self, g: np.ndarray) -> np.ndarray:
        n_frames = g.shape[0]
        gi = g / self.width[:, None]
        stride = self.n_ext + 1
        rows = (np.arange(n_frames) * stride)[:, None]
        idx, wts = [], []
        for (i, frac), sign in zip(self.ends, (1.0, -1.0)):
            idx += [rows + i, rows + i + 1]
            wts += [sign * gi * (1.0 - frac), sign * gi * frac]
        gint = np.bincount(np.concatenate([a.ravel() for a in idx]),
                           weights=np.concatenate([a.ravel() for a in wts]),
                           minlength=n_frames * stride).reshape(n_frames, stride)
        # integral[m] sums ext[:m], so ext[j] receives every gint[m] with m > j
        gext = np.cumsum(gint[:, :0:-1], axis=1)[:, ::-1]
        out = np.zeros((self.n_bins, n_frames))
        np.add.at(out, self.src, gext.T)
        return out.T


class CepstralLifter:
    """Applies a per-frame even lifter in the quefrency domain to log spectra."""

    def __init__(self, lifter: np.ndarray):
        self.lifter = lifter  # [frames, fft_size]
        self.n = lifter.shape[1]

    def apply(self, log_power: np.ndarray) -> np.ndarray:
        cep = np.fft.irfft(log_power, n=self.n, axis=1)
        return np.fft.rfft(cep * self.lifter, axis=1).real

    def adjoint(self, g: np.ndarray) -> np.ndarray:
        h = g.astype(np.float64, copy=True)
        h[:, 1:-1] *= 0.5
        gcep = self.n * np.fft.irfft(h, n=self.n, axis=1) * self.lifter
        out = np.fft.rfft(gcep, axis=1).real / self.n
        out[:, 1:-1] *= 2.0
        return out


def envelope_operators(f0_per_frame, fft_size: int, sample_rate: int, q1: float = -0.15,
                       default_f0: float = 160.0):
    """Smoothing and liftering operators for the given frame-wise F0."""
    f0 = np.asarray(f0_per_frame, dtype=np.float64).reshape(-1)
    f0 = np.where(f0 > 0, f0, default_f0)
    df = sample_rate / fft_size
    smoother = RectangularSmoother((2.0 / 3.0) * f0 / df, fft_size // 2 + 1)
    idx = np.arange(fft_size)
    quef = np.minimum(idx, fft_size - idx) / sample_rate
    x = f0[:, None] * quef[None]
    lifter = np.sinc(x) * ((1.0 - 2.0 * q1) + 2.0 * q1 * np.cos(2.0 * np.pi * x))
    return smoother, CepstralLifter(lifter)


def spectral_envelope(speech: Spectrogram, f0_per_frame, q1: float = -0.15,
                      default_f0: float = 160.0) -> Spectrogram:
    """Pitch-adaptive envelope in the style of CheapTrick.

    The power spectrum is averaged over a 2*F0/3 Hz rectangular window, taken
    to the log domain and liftered with the F0-dependent smoothing lifter and
    the q1 compensation lifter. Frames with F0 <= 0 use ``default_f0``.
    """
    f0 = np.asarray(f0_per_frame, dtype=np.float64).reshape(-1)
    if len(f0) != speech.frames:
        raise ValueError(f"f0 has {len(f0)} frames, spectrogram has {speech.frames}")
    smoother, lifter = envelope_operators(f0, speech.fft_size, speech.sample_rate, q1, default_f0)
    smoothed = smoother.apply(speech.values ** 2)
    log_power = np.log(np.maximum(smoothed, 0.0) + EPS ** 2)
    env = np.maximum(np.exp(0.5 * lifter.apply(log_power)), EPS)
    return speech.with_values(env)


def residual_spectra(speech: Spectrogram, envelope: Spectrogram) -> Spectrogram:
    """Envelope-normalized spectra rescaled to the speech frame power.

    ``S[t] = |X[t]| / E[t] * g_t`` with ``g_t`` chosen so that
    ``mean_k S[t,k]^2 == mean_k |X[t,k]|^2``. Silent frames are set to ``EPS``.
    """
    x = speech.values
    e = envelope.values
    if x.shape != e.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {e.shape}")
    if np.any(e <= 0):
        raise ValueError("envelope must be strictly positive")
    ratio = x / e
    target = np.mean(x ** 2, axis=1, keepdims=True)
    current = np.mean(ratio ** 2, axis=1, keepdims=True)
    silent = (target <= 0) | (current <= 0)
    gain = np.sqrt(np.where(silent, 0.0, target) / np.where(silent, 1.0, current))
    out = np.where(silent, EPS, ratio * gain)
    return speech.with_values(out)


def per_sample_f0(f0_frames, vuv, frame_shift: int) -> np.ndarray:
    """Sample-rate F0: linear between consecutive voiced frames, 0 when unvoiced."""
    f0 = np.asarray(f0_frames, dtype=np.float64)
    voiced = np.asarray(vuv).astype(bool)
    n = len(f0)
    pos = np.arange(n * frame_shift) / frame_shift
    i = np.minimum(pos.astype(np.int64), n - 1)
    frac = pos - i
    nxt = np.minimum(i + 1, n - 1)
    both = voiced[i] & voiced[nxt]
    interp = f0[i] + frac * (f0[nxt] - f0[i])
    out = np.where(both, interp, f0[i])
    return np.where(voiced[i], out, 0.0)


def make_excitation_inputs(f0_frames, vuv, frame_shift: int, sample_rate: int, seed: int,
                           amplitude: float = 0.1) -> ExcitationInputs:
    """Sinusoid following F0 (zero when unvoiced) and standard-normal noise.

    Phase accumulates sample by sample inside each voiced run and restarts
    from zero at every voiced onset.
    """
    f0_frames = np.asarray(f0_frames, dtype=np.float64)
    vuv = np.asarray(vuv)
    if len(f0_frames) != len(vuv):
        raise ValueError("f0 and vuv lengths differ")
    if np.any(f0_frames < 0):
        raise ValueError("F0 must be non-negative")
    if np.any(f0_frames > sample_rate / 2):
        raise ValueError("F0 above Nyquist")
    if np.any((f0_frames > 0) & (vuv == 0)) or np.any((f0_frames == 0) & (vuv != 0)):
        raise ValueError("F0 must be zero exactly on unvoiced frames")
    f0 = per_sample_f0(f0_frames, vuv, frame_shift)
    voiced = f0 > 0
    step = f0 / sample_rate
    # exclusive cumulative phase, re-referenced at each voiced onset
    cum = np.concatenate([[0.0], np.cumsum(step)[:-1]])
    onset = voiced & ~np.concatenate([[False], voiced[:-1]])
    ref = np.maximum.accumulate(np.where(onset, np.arange(len(f0)), 0))
    phase = 2.0 * np.pi * (cum - cum[ref])
    sine = np.where(voiced, amplitude * np.sin(phase), 0.0)
    noise = np.random.default_rng(seed).standard_normal(len(f0))
    return ExcitationInputs(sine, noise, f0)


def dilation_factors(per_sample_f0, sample_rate: int, dense_factor: int = 4) -> np.ndarray:
    """``max(1, round(fs / (f0 * dense_factor)))`` on voiced samples, 1 elsewhere."""
    if dense_factor < 1:
        raise ValueError("dense_factor must be >= 1")
    f0 = np.asarray(per_sample_f0, dtype=np.float64)
    with np.errstate(divide="ignore"):
        raw = np.where(f0 > 0, sample_rate / (np.where(f0 > 0, f0, 1.0) * dense_factor), 1.0)
    return np.maximum(1, np.floor(raw + 0.5)).astype(np.int64)
