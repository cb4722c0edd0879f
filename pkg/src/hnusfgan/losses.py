"""Training objectives and their weighted composition.

Every loss accepts waveform Tensors shaped ``[B, 1, T]`` or ``[B, T]`` so the
same functions serve training, tests and evaluation.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np

from . import dsp
from .nn import Tensor, as_tensor, concat, log, maximum, no_grad, tabs
from .nn.tensor import make_node
from .nn import functional as F

MEL_BANDS = 80
MEL_FMAX = 12000.0
DEFAULT_RESOLUTIONS = ((1024, 120, 600), (2048, 240, 1200), (512, 50, 240))


@lru_cache(maxsize=16)
def _mel_weights(sample_rate: int, fft_size: int, n_mels: int, fmax: float) -> np.ndarray:
    return dsp.mel_filterbank(sample_rate, fft_size, n_mels, 0.0, fmax).weights.T.copy()


def _as_batch(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim == 3:
        if x.shape[1] != 1:
            raise ValueError(f"expected a single channel, got shape {x.shape}")
        return x.reshape(x.shape[0], x.shape[-1])
    if x.ndim == 1:
        return x.reshape(1, -1)
    return x


def _samples_2d(x) -> np.ndarray:
    if isinstance(x, dsp.AudioBuffer):
        return x.samples[None]
    if isinstance(x, (list, tuple)) and x and isinstance(x[0], dsp.AudioBuffer):
        return np.stack([a.samples for a in x])
    arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    return arr.reshape(arr.shape[0], -1) if arr.ndim == 3 else np.atleast_2d(arr)


def log_mel(x, fft_size: int = dsp.FFT_SIZE, hop: int = dsp.FRAME_SHIFT,
            sample_rate: int = dsp.SAMPLE_RATE, n_mels: int = MEL_BANDS,
            fmax: float = MEL_FMAX) -> Tensor:
    """Natural-log mel amplitude spectrogram ``[B, frames, n_mels]``."""
    mag = F.stft_magnitude(_as_batch(x), fft_size, hop)
    w = _mel_weights(sample_rate, fft_size, n_mels, fmax).astype(mag.dtype)
    return log(maximum(mag @ w, dsp.EPS))


def mel_spectral_loss(gen, ref, sample_rate: int = dsp.SAMPLE_RATE) -> Tensor:
    """Mean absolute difference of log-mel spectrograms."""
    gen, ref = _as_batch(gen), _as_batch(ref)
    if gen.shape != ref.shape:
        raise ValueError(f"length mismatch: {gen.shape} vs {ref.shape}")
    return tabs(log_mel(gen, sample_rate=sample_rate) - log_mel(ref, sample_rate=sample_rate)).mean()


def frobenius(x) -> Tensor:
    """``||x||_F`` with a zero subgradient at the origin."""
    x = as_tensor(x)
    norm = float(np.sqrt(np.sum(x.data.astype(np.float64) ** 2)))
    xd = x.data

    def backward(g):
        if norm == 0.0:
            return (np.zeros_like(xd),)
        return ((g / norm) * xd,)

    return make_node(np.asarray(norm, dtype=x.dtype), (x,), backward, "frobenius")


def multires_stft_loss(gen, ref, resolutions=DEFAULT_RESOLUTIONS) -> Tensor:
    """Spectral convergence plus log-magnitude L1, averaged over resolutions."""
    gen, ref = _as_batch(gen), _as_batch(ref)
    if gen.shape != ref.shape:
        raise ValueError(f"length mismatch: {gen.shape} vs {ref.shape}")
    total = None
    for fft_size, hop, win in resolutions:
        if hop >= fft_size:
            raise ValueError("shift must be smaller than fft_size")
        g = F.stft_magnitude(gen, fft_size, hop, win)
        r = F.stft_magnitude(ref, fft_size, hop, win)
        ref_norm = float(np.sqrt(np.sum(r.data.astype(np.float64) ** 2)))
        sc = frobenius(r - g) * (1.0 / max(ref_norm, dsp.EPS))
        mag = tabs(log(maximum(r, dsp.EPS)) - log(maximum(g, dsp.EPS))).mean()
        term = sc + mag
        total = term if total is None else total + term
    return total * (1.0 / len(resolutions))


# ---------------------------------------------------------------------------
# regularization

def _frame_f0(f0, n_frames: int) -> np.ndarray:
    """Pad or trim frame-wise F0 to the STFT frame count (edge repeat)."""
    f0 = np.asarray(f0, dtype=np.float64).reshape(-1)
    if len(f0) >= n_frames:
        return f0[:n_frames]
    return np.concatenate([f0, np.full(n_frames - len(f0), f0[-1] if len(f0) else 0.0)])


def residual_log_mel(speech, f0=None, envelope=None, sample_rate: int = dsp.SAMPLE_RATE,
                     fft_size: int = dsp.FFT_SIZE, hop: int = dsp.FRAME_SHIFT) -> np.ndarray:
    """Target ``log f(S)`` for the residual regularizer, ``[B, frames, mels]``.

    ``envelope`` overrides the CheapTrick estimate: pass a scalar (e.g. 1.0)
    or an array broadcastable to ``[B, frames, bins]``. ``f0`` is ``[frames]``
    or ``[B, frames]`` and only used when ``envelope`` is None.
    """
    wav = _samples_2d(speech)
    with no_grad():
        mags = F.stft_magnitude(Tensor(wav), fft_size, hop).data.astype(np.float64)
    if envelope is None and f0 is None:
        raise ValueError("need f0 frames or an explicit envelope")
    f0_rows = None if f0 is None else np.atleast_2d(np.asarray(f0, dtype=np.float64))
    w = _mel_weights(sample_rate, fft_size, MEL_BANDS, MEL_FMAX)
    out = []
    for b, mag in enumerate(mags):
        spec = dsp.Spectrogram(mag, hop, fft_size, sample_rate)
        if envelope is None:
            row = f0_rows[b if len(f0_rows) > 1 else 0]
            env = dsp.spectral_envelope(spec, _frame_f0(row, spec.frames))
        else:
            e = np.broadcast_to(np.asarray(envelope, dtype=np.float64), mags.shape)[b]
            env = spec.with_values(e)
        res = dsp.residual_spectra(spec, env)
        out.append(np.log(np.maximum(res.values @ w, dsp.EPS)))
    return np.stack(out)


def reg_loss_residual(excitation, target_speech, f0=None, envelope=None,
                      sample_rate: int = dsp.SAMPLE_RATE, target=None) -> Tensor:
    """Mean ``|log f(S) - log f(S_hat)|`` between the residual spectra of the
    target speech and the amplitude spectra of the excitation.

    ``target`` may carry a precomputed :func:`residual_log_mel` result.
    """
    e = _as_batch(excitation)
    if target is None:
        if _samples_2d(target_speech).shape != e.shape:
            raise ValueError("excitation and speech lengths differ")
        target = residual_log_mel(target_speech, f0, envelope, sample_rate)
    pred = log_mel(e, sample_rate=sample_rate)
    if pred.shape != target.shape:
        raise ValueError(f"target shape {target.shape} does not match {pred.shape}")
    return tabs(pred - target.astype(pred.dtype)).mean()


def flat_loss_from_log_envelope(log_env) -> Tensor:
    """``(1/N) * ||log E||_2`` per batch item, averaged over the batch.

    N counts the frame-bin elements of one item, so a constant log envelope
    of 1 gives ``1 / sqrt(N)``.
    """
    log_env = as_tensor(log_env)
    if log_env.ndim == 2:
        log_env = log_env.reshape(1, *log_env.shape)
    n = log_env.shape[1] * log_env.shape[2]
    total = None
    for b in range(log_env.shape[0]):
        term = frobenius(log_env[b]) * (1.0 / n)
        total = term if total is None else total + term
    return total * (1.0 / log_env.shape[0])


def _linear_op(x: Tensor, op, name: str) -> Tensor:
    return make_node(op.apply(x.data.astype(np.float64)).astype(x.dtype), (x,),
                     lambda g: (op.adjoint(g).astype(g.dtype),), name)


def log_envelope(excitation, f0=None, sample_rate: int = dsp.SAMPLE_RATE,
                 fft_size: int = dsp.FFT_SIZE, hop: int = dsp.FRAME_SHIFT) -> Tensor:
    """Differentiable ``log E`` (CheapTrick-style) of each waveform, ``[B, frames, bins]``."""
    e = _as_batch(excitation)
    mag = F.stft_magnitude(e, fft_size, hop)
    n_frames = mag.shape[1]
    f0_rows = np.zeros((1, n_frames)) if f0 is None else np.atleast_2d(np.asarray(f0, float))
    rows = []
    for b in range(e.shape[0]):
        row = _frame_f0(f0_rows[b if len(f0_rows) > 1 else 0], n_frames)
        smoother, lifter = dsp.envelope_operators(row, fft_size, sample_rate)
        power = mag[b] * mag[b]
        smoothed = _linear_op(power, smoother, "cheaptrick_smooth")
        lp = log(maximum(smoothed, 0.0) + dsp.EPS ** 2)
        log_env = _linear_op(lp, lifter, "cheaptrick_lifter") * 0.5
        rows.append(maximum(log_env, float(np.log(dsp.EPS))).reshape(1, *log_env.shape))
    return concat(rows, axis=0)


def reg_loss_flat(excitation, f0=None, sample_rate: int = dsp.SAMPLE_RATE) -> Tensor:
    """Push the excitation's spectral envelope towards 1 (log envelope to 0)."""
    return flat_loss_from_log_envelope(log_envelope(excitation, f0, sample_rate))


# ---------------------------------------------------------------------------
# adversarial

def _mean_sq(x, target: float) -> Tensor:
    d = as_tensor(x) - target if target else as_tensor(x)
    return (d * d).mean()


def discriminator_loss(scores_real, scores_fake) -> Tensor:
    """LSGAN critic loss, averaged over sub-discriminators."""
    if len(scores_real) != len(scores_fake) or not scores_real:
        raise ValueError("real and fake score lists must be non-empty and equal in length")
    total = None
    for r, f in zip(scores_real, scores_fake):
        term = _mean_sq(r, 1.0) + _mean_sq(f, 0.0)
        total = term if total is None else total + term
    return total * (1.0 / len(scores_real))


def generator_adv_loss(scores_fake) -> Tensor:
    """LSGAN generator loss, averaged over sub-discriminators."""
    if not scores_fake:
        raise ValueError("no scores")
    total = None
    for f in scores_fake:
        term = _mean_sq(f, 1.0)
        total = term if total is None else total + term
    return total * (1.0 / len(scores_fake))


def adv_losses(scores_real, scores_fake) -> tuple[Tensor, Tensor]:
    """``(L_D, L_adv)`` for lists of score maps."""
    return discriminator_loss(scores_real, scores_fake), generator_adv_loss(scores_fake)


# ---------------------------------------------------------------------------
# composition

REG_MODES = ("residual", "flat", "off")
SPC_MODES = ("mel", "multires_stft")
ADV_MODES = ("hifigan", "pwg")


@dataclass
class LossWeights:
    lambda_spc: float = 15.0
    lambda_adv: float = 1.0
    reg_mode: str = "residual"
    spc_mode: str = "mel"
    adv_mode: str = "hifigan"
    resolutions: tuple = field(default=DEFAULT_RESOLUTIONS)

    def __post_init__(self):
        if self.lambda_spc < 0 or self.lambda_adv < 0:
            raise ValueError("loss weights must be non-negative")
        for value, allowed, name in ((self.reg_mode, REG_MODES, "reg_mode"),
                                     (self.spc_mode, SPC_MODES, "spc_mode"),
                                     (self.adv_mode, ADV_MODES, "adv_mode")):
            if value not in allowed:
                raise ValueError(f"{name} must be one of {allowed}, got '{value}'")
        self.resolutions = tuple(tuple(int(v) for v in r) for r in self.resolutions)

    @classmethod
    def hn_usfgan(cls) -> "LossWeights":
        return cls()

    @classmethod
    def usfgan_baseline(cls) -> "LossWeights":
        return cls(lambda_spc=1.0, lambda_adv=4.0, reg_mode="flat",
                   spc_mode="multires_stft", adv_mode="pwg")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["resolutions"] = [list(r) for r in self.resolutions]
        return d


def spectral_loss(gen, ref, weights: LossWeights) -> Tensor:
    if weights.spc_mode == "mel":
        return mel_spectral_loss(gen, ref)
    return multires_stft_loss(gen, ref, weights.resolutions)


def generator_total(components, weights: LossWeights):
    """``L_reg + lambda_spc * L_spc + lambda_adv * L_adv``.

    ``components`` is a mapping with keys ``reg``, ``spc``, ``adv`` or a
    3-tuple in that order. The regularizer is dropped when ``reg_mode`` is
    ``off``; a missing or None component counts as zero.
    """
    if not isinstance(components, dict):
        components = dict(zip(("reg", "spc", "adv"), components))
    terms = []
    if weights.reg_mode != "off" and components.get("reg") is not None:
        terms.append(components["reg"])
    if components.get("spc") is not None:
        terms.append(components["spc"] * weights.lambda_spc)
    if components.get("adv") is not None and weights.lambda_adv:
        terms.append(components["adv"] * weights.lambda_adv)
    if not terms:
        return 0.0
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total
