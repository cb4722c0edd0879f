"""Acoustic features: F0/V-UV, mel-cepstrum, coded aperiodicity, and the
``.usff`` container used to move them between commands."""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.fft import dct

from . import dsp

MCEP_DIM = 41
CAP_DIM = 3
ALPHA_24K = 0.466
CAP_BANDS = ((0.0, 3000.0), (3000.0, 6000.0), (6000.0, 12000.0))
CAP_FLOOR_DB = -60.0


@dataclass
class AcousticFeatures:
    cont_f0: np.ndarray
    vuv: np.ndarray
    mcep: np.ndarray
    cap: np.ndarray
    frame_shift: int = dsp.FRAME_SHIFT

    def __post_init__(self):
        self.cont_f0 = np.asarray(self.cont_f0, dtype=np.float64).reshape(-1)
        n = len(self.cont_f0)
        self.vuv = np.asarray(self.vuv, dtype=np.float64).reshape(-1)
        self.mcep = np.asarray(self.mcep, dtype=np.float64).reshape(n, -1)
        self.cap = np.asarray(self.cap, dtype=np.float64).reshape(n, -1)
        if len(self.vuv) != n:
            raise ValueError("vuv length does not match cont_f0")
        if not np.all(np.isin(self.vuv, (0.0, 1.0))):
            raise ValueError("vuv must be binary")
        if np.any(self.cont_f0 <= 0):
            raise ValueError("continuous F0 must be positive everywhere")

    @property
    def n_frames(self) -> int:
        return len(self.cont_f0)

    @property
    def n_samples(self) -> int:
        return self.n_frames * self.frame_shift

    @property
    def f0(self) -> np.ndarray:
        """Discontinuous F0 (zero on unvoiced frames)."""
        return self.cont_f0 * self.vuv

    def scaled_f0(self, factor: float) -> "AcousticFeatures":
        if factor <= 0:
            raise ValueError("F0 scale must be positive")
        return replace(self, cont_f0=self.cont_f0 * factor)

    def slice(self, start: int, stop: int) -> "AcousticFeatures":
        return AcousticFeatures(self.cont_f0[start:stop], self.vuv[start:stop],
                                self.mcep[start:stop], self.cap[start:stop], self.frame_shift)


# ---------------------------------------------------------------------------
# F0

def _windowed_sums(values: np.ndarray, starts: np.ndarray, width: int) -> np.ndarray:
    csum = np.concatenate([[0.0], np.cumsum(values)])
    return csum[starts + width] - csum[starts]


def _voiced_runs(voiced: np.ndarray) -> list[tuple[int, int]]:
    edges = np.flatnonzero(np.diff(np.concatenate([[0], voiced.astype(np.int8), [0]])))
    return list(zip(edges[::2], edges[1::2]))


def clean_contour(f0: np.ndarray, voiced: np.ndarray, min_run: int = 3,
                  max_jump: float = 0.2) -> np.ndarray:
    """Voicing mask with boundary glitches removed.

    Run edges whose F0 departs from the neighbouring voiced frame by more than
    ``max_jump`` (relative) are unvoiced, then runs shorter than ``min_run``
    frames are dropped.
    """
    voiced = voiced.astype(bool).copy()
    for start, stop in _voiced_runs(voiced):
        while stop - start >= 2 and abs(f0[start] / f0[start + 1] - 1) > max_jump:
            voiced[start] = False
            start += 1
        while stop - start >= 2 and abs(f0[stop - 1] / f0[stop - 2] - 1) > max_jump:
            voiced[stop - 1] = False
            stop -= 1
    for start, stop in _voiced_runs(voiced):
        if stop - start < min_run:
            voiced[start:stop] = False
    return voiced


def estimate_f0(audio: dsp.AudioBuffer, fmin: float = 70.0, fmax: float = 340.0,
                frame_shift: int = dsp.FRAME_SHIFT, threshold: float = 0.5,
                silence_db: float = -45.0):
    """Normalized cross-correlation pitch tracker.

    One frame per ``frame_shift`` samples (frame ``i`` centred on sample
    ``i * frame_shift``). A frame is voiced when its best correlation peak
    exceeds ``threshold`` and its RMS is above both an absolute floor and
    ``silence_db`` relative to the loudest frame. Isolated voiced blips and
    run edges that jump in pitch are then unvoiced (:func:`clean_contour`).

    Returns:
        (f0, vuv): per-frame F0 in Hz (0 on unvoiced frames) and 0/1 flags.
    """
    fs = audio.sample_rate
    if len(audio) == 0:
        raise ValueError("empty audio")
    if not 0 < fmin < fmax < fs / 2:
        raise ValueError("need 0 < fmin < fmax < sample_rate / 2")
    x = audio.samples
    n_frames = len(x) // frame_shift
    if n_frames == 0:
        raise ValueError("audio shorter than one frame")
    lag_min = max(2, int(np.floor(fs / fmax)))
    lag_max = int(np.ceil(fs / fmin))
    width = max(int(0.025 * fs), lag_max + lag_min)
    pad = width // 2 + 1
    xp = np.concatenate([np.zeros(pad), x, np.zeros(pad + lag_max + 2)])
    starts = np.arange(n_frames) * frame_shift + pad - width // 2
    energy0 = _windowed_sums(xp * xp, starts, width)
    lags = np.arange(lag_min - 1, lag_max + 2)
    ncc = np.empty((n_frames, len(lags)))
    sq = xp * xp
    for j, lag in enumerate(lags):
        prod = xp[:-lag] * xp[lag:]
        num = _windowed_sums(prod, starts, width)
        energy_lag = _windowed_sums(sq[lag:], starts, width)
        denom = np.sqrt(energy0 * energy_lag)
        ncc[:, j] = np.where(denom > 0, num / np.where(denom > 0, denom, 1.0), 0.0)

    inner = ncc[:, 1:-1]
    is_peak = (inner >= ncc[:, :-2]) & (inner >= ncc[:, 2:])
    peak_vals = np.where(is_peak, inner, -np.inf)
    best = peak_vals.max(axis=1)
    # period doubling guard: prefer a peak near best_lag / k (k = 2, 3, 4)
    # that is almost as strong as the best one
    choice = np.argmax(peak_vals, axis=1)
    rows = np.arange(n_frames)
    best_lag = lags[choice + 1].astype(np.float64)
    inner_lags = lags[1:-1][None, :]
    for k in (2, 3, 4):
        target = best_lag[:, None] / k
        near = is_peak & (np.abs(inner_lags - target) <= np.maximum(1.5, 0.03 * target))
        vals = np.where(near, inner, -np.inf)
        j = np.argmax(vals, axis=1)
        ok = vals[rows, j] >= 0.92 * best
        choice = np.where(ok, j, choice)
    y0 = ncc[rows, choice]
    y1 = ncc[rows, choice + 1]
    y2 = ncc[rows, choice + 2]
    denom = y0 - 2 * y1 + y2
    shift = np.where(np.abs(denom) > 1e-12, 0.5 * (y0 - y2) / np.where(
        np.abs(denom) > 1e-12, denom, 1.0), 0.0)
    lag = lags[choice + 1] + np.clip(shift, -0.5, 0.5)
    peak = y1

    rms = np.sqrt(energy0 / width)
    loud = rms.max()
    floor = max(1e-4, loud * 10 ** (silence_db / 20)) if loud > 0 else np.inf
    voiced = np.isfinite(best) & (peak > threshold) & (rms > floor)
    raw = np.where(voiced, fs / lag, 1.0)
    voiced = clean_contour(raw, voiced)
    f0 = np.where(voiced, raw, 0.0)
    return f0, voiced.astype(np.float64)


def continuize_f0(f0, vuv) -> np.ndarray:
    """Fill unvoiced gaps by linear interpolation; hold the nearest voiced
    value across leading and trailing gaps."""
    f0 = np.asarray(f0, dtype=np.float64)
    voiced = np.asarray(vuv).astype(bool)
    if not voiced.any():
        raise ValueError("no voiced frames")
    idx = np.nonzero(voiced)[0]
    out = np.interp(np.arange(len(f0)), idx, f0[idx])
    out[voiced] = f0[voiced]
    return out


# ---------------------------------------------------------------------------
# mel-cepstrum

def warp_frequency(omega, alpha: float):
    """Frequency mapping of the first-order all-pass ``(z^-1 - a) / (1 - a z^-1)``."""
    omega = np.asarray(omega, dtype=np.float64)
    return omega + 2.0 * np.arctan(alpha * np.sin(omega) / (1.0 - alpha * np.cos(omega)))


def _resample_rows(values: np.ndarray, positions: np.ndarray) -> np.ndarray:
    # linear interpolation of every row at fractional bin positions
    n = values.shape[1]
    pos = np.clip(positions, 0, n - 1)
    i = np.minimum(np.floor(pos).astype(np.int64), n - 2)
    frac = pos - i
    return values[:, i] + frac * (values[:, i + 1] - values[:, i])


def mcep_from_envelope(envelope: dsp.Spectrogram, order: int = MCEP_DIM,
                       alpha: float = ALPHA_24K) -> np.ndarray:
    """Mel-cepstrum of an amplitude envelope, ``[frames, order]``.

    The log envelope is resampled on a grid uniform in warped frequency and
    expanded as ``c0 + 2 * sum_m c_m cos(m * w)`` via a type-I DCT.
    """
    if np.any(envelope.values <= 0):
        raise ValueError("envelope must be positive")
    log_env = np.log(envelope.values)
    n = envelope.bins
    warped_grid = np.linspace(0.0, np.pi, n)
    linear = warp_frequency(warped_grid, -alpha)
    resampled = _resample_rows(log_env, linear / np.pi * (n - 1))
    coeffs = dct(resampled, type=1, axis=1) / (2.0 * (n - 1))
    return coeffs[:, :order]


def mcep_to_log_envelope(mcep, bins: int, alpha: float = ALPHA_24K) -> np.ndarray:
    """Natural-log amplitude envelope on ``bins`` linear-frequency bins."""
    mcep = np.atleast_2d(np.asarray(mcep, dtype=np.float64))
    warped = warp_frequency(np.linspace(0.0, np.pi, bins), alpha)
    m = np.arange(mcep.shape[1])
    basis = np.cos(m[:, None] * warped[None]) * np.where(m == 0, 1.0, 2.0)[:, None]
    return mcep @ basis


# ---------------------------------------------------------------------------
# aperiodicity fallback

def coded_aperiodicity(residual: dsp.Spectrogram, f0, vuv) -> np.ndarray:
    """Per-band noise ratio in dB from residual spectra, ``[frames, 3]``.

    On voiced frames the ratio compares the mean power between harmonics
    (further than F0/4 from any harmonic) with the mean power of the whole
    band; unvoiced frames are fully aperiodic (0 dB).
    """
    f0 = np.asarray(f0, dtype=np.float64)
    voiced = np.asarray(vuv).astype(bool) & (f0 > 0)
    freqs = np.arange(residual.bins) * residual.sample_rate / residual.fft_size
    power = residual.values ** 2
    out = np.zeros((residual.frames, len(CAP_BANDS)))
    safe_f0 = np.where(voiced, f0, 1.0)
    harm_pos = freqs[None] / safe_f0[:, None]
    dist = np.abs(harm_pos - np.round(harm_pos)) * safe_f0[:, None]
    noise_bin = (dist > safe_f0[:, None] / 4) | (freqs[None] < safe_f0[:, None] / 2)
    for b, (lo, hi) in enumerate(CAP_BANDS):
        band = (freqs >= lo) & (freqs < hi) if hi < freqs[-1] else (freqs >= lo)
        total = power[:, band].mean(axis=1)
        nb = noise_bin[:, band]
        counts = nb.sum(axis=1)
        noise = np.where(counts > 0, (power[:, band] * nb).sum(axis=1) / np.maximum(counts, 1), 0)
        ratio = np.where(total > 0, noise / np.where(total > 0, total, 1.0), 1.0)
        ratio = np.clip(ratio, 10 ** (CAP_FLOOR_DB / 10), 1.0)
        out[:, b] = np.where(voiced, 10.0 * np.log10(ratio), 0.0)
    return out


def extract_features(audio: dsp.AudioBuffer, fmin: float = 70.0, fmax: float = 340.0,
                     frame_shift: int = dsp.FRAME_SHIFT) -> AcousticFeatures:
    """Analysis chain: F0 tracker, envelope, mel-cepstrum, coded aperiodicity."""
    f0, vuv = estimate_f0(audio, fmin, fmax, frame_shift)
    return features_from_f0(audio, f0, vuv, frame_shift)


def features_from_f0(audio: dsp.AudioBuffer, f0, vuv,
                     frame_shift: int = dsp.FRAME_SHIFT) -> AcousticFeatures:
    """Features for audio whose F0/V-UV are already known."""
    f0 = np.asarray(f0, dtype=np.float64)
    vuv = np.asarray(vuv, dtype=np.float64)
    cont = continuize_f0(f0, vuv)
    n = len(f0)
    spec = dsp.stft(audio, dsp.FFT_SIZE, frame_shift)
    spec = spec.with_values(spec.values[:n])
    env = dsp.spectral_envelope(spec, f0 * vuv)
    mcep = mcep_from_envelope(env)
    cap = coded_aperiodicity(dsp.residual_spectra(spec, env), f0 * vuv, vuv)
    return AcousticFeatures(cont, vuv, mcep, cap, frame_shift)


# ---------------------------------------------------------------------------
# conditioning

def upsample_conditioning(feat: AcousticFeatures, frame_shift: int | None = None) -> np.ndarray:
    """Sample-rate conditioning ``[1 + 1 + mcep + cap, n_frames * frame_shift]``.

    Continuous F0 is interpolated linearly between frame starts and held after
    the last frame; V/UV, mel-cepstrum and aperiodicity repeat per frame.
    """
    shift = feat.frame_shift if frame_shift is None else frame_shift
    n = feat.n_frames
    pos = np.arange(n * shift) / shift
    i = np.minimum(pos.astype(np.int64), n - 1)
    frac = pos - i
    nxt = np.minimum(i + 1, n - 1)
    f0 = feat.cont_f0[i] + frac * (feat.cont_f0[nxt] - feat.cont_f0[i])
    held = np.concatenate([feat.vuv[:, None], feat.mcep, feat.cap], axis=1)[i]
    return np.concatenate([f0[None], held.T], axis=0)


def conditioning_matrix(feat: AcousticFeatures, use_vuv: bool = True) -> np.ndarray:
    """Network conditioning: log F0 in place of Hz, V/UV row optional."""
    cond = upsample_conditioning(feat)
    cond[0] = np.log(cond[0])
    if not use_vuv:
        cond = np.delete(cond, 1, axis=0)
    return cond


@dataclass
class FeatureNormalizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def identity(cls, channels: int) -> "FeatureNormalizer":
        return cls(np.zeros(channels), np.ones(channels))

    @classmethod
    def fit(cls, feats, use_vuv: bool = True) -> "FeatureNormalizer":
        rows = []
        for f in feats:
            frame_cond = np.concatenate(
                [np.log(f.cont_f0)[:, None], f.vuv[:, None], f.mcep, f.cap], axis=1)
            if not use_vuv:
                frame_cond = np.delete(frame_cond, 1, axis=1)
            rows.append(frame_cond)
        stacked = np.concatenate(rows, axis=0)
        std = stacked.std(axis=0)
        return cls(stacked.mean(axis=0), np.where(std > 1e-6, std, 1.0))

    def __call__(self, cond: np.ndarray) -> np.ndarray:
        return (cond - self.mean[:, None]) / self.std[:, None]

    def to_dict(self) -> dict:
        return {"mean": [float(v) for v in self.mean], "std": [float(v) for v in self.std]}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureNormalizer":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


# ---------------------------------------------------------------------------
# feature file

FEATURE_MAGIC = b"USFF"
FEATURE_VERSION = 1
_HEADER = struct.Struct("<4sIII4I")


class FeatureFileError(ValueError):
    """Malformed feature file; ``code`` is one of bad_magic, bad_version,
    size_mismatch."""

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


def write_features(feat: AcousticFeatures, path) -> None:
    dims = (1, 1, feat.mcep.shape[1], feat.cap.shape[1])
    header = _HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, feat.n_frames, feat.frame_shift, *dims)
    payload = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes()
                       for a in (feat.cont_f0, feat.vuv, feat.mcep, feat.cap))
    Path(path).write_bytes(header + payload)


def read_features(path) -> AcousticFeatures:
    data = Path(path).read_bytes()
    if len(data) < 4 or data[:4] != FEATURE_MAGIC:
        raise FeatureFileError("bad_magic", "not a feature file")
    if len(data) < _HEADER.size:
        raise FeatureFileError("size_mismatch", "payload size mismatch")
    _, version, n_frames, frame_shift, *dims = _HEADER.unpack_from(data, 0)
    if version != FEATURE_VERSION:
        raise FeatureFileError("bad_version", f"unsupported feature file version {version}")
    expected = 4 * n_frames * sum(dims)
    if len(data) - _HEADER.size != expected:
        raise FeatureFileError("size_mismatch", "payload size mismatch")
    values = np.frombuffer(data, dtype="<f4", offset=_HEADER.size).astype(np.float64)
    streams = []
    pos = 0
    for d in dims:
        streams.append(values[pos:pos + n_frames * d].reshape(n_frames, d))
        pos += n_frames * d
    return AcousticFeatures(streams[0][:, 0], streams[1][:, 0], streams[2], streams[3],
                            frame_shift)
