"""Objective metrics and the copy-synthesis / F0-transformation harness."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import dsp
from .features import AcousticFeatures, estimate_f0, features_from_f0

MCD_CONST = 10.0 / math.log(10.0)


def rmse_log_f0(ref_f0, ref_vuv, gen_f0, gen_vuv) -> float:
    """RMS of ``ln gen - ln ref`` over frames voiced in both."""
    ref_f0, gen_f0 = np.asarray(ref_f0, float), np.asarray(gen_f0, float)
    ref_vuv, gen_vuv = np.asarray(ref_vuv).astype(bool), np.asarray(gen_vuv).astype(bool)
    if ref_f0.shape != gen_f0.shape or ref_vuv.shape != gen_vuv.shape:
        raise ValueError("frame counts differ")
    both = ref_vuv & gen_vuv & (ref_f0 > 0) & (gen_f0 > 0)
    if not both.any():
        raise ValueError("no co-voiced frames")
    d = np.log(gen_f0[both]) - np.log(ref_f0[both])
    return float(np.sqrt(np.mean(d * d)))


def vuv_error(ref_vuv, gen_vuv) -> float:
    """Percentage of frames whose voicing decision differs."""
    ref, gen = np.asarray(ref_vuv).astype(bool), np.asarray(gen_vuv).astype(bool)
    if ref.shape != gen.shape:
        raise ValueError("frame counts differ")
    if ref.size == 0:
        return 0.0
    return 100.0 * float(np.count_nonzero(ref != gen)) / ref.size


def mcd(ref_mcep, gen_mcep) -> float:
    """Mel-cepstral distortion in dB, ignoring the 0th coefficient."""
    ref, gen = np.atleast_2d(np.asarray(ref_mcep, float)), np.atleast_2d(np.asarray(gen_mcep, float))
    if ref.shape != gen.shape:
        raise ValueError(f"dimension mismatch: {ref.shape} vs {gen.shape}")
    diff = ref[:, 1:] - gen[:, 1:]
    per_frame = MCD_CONST * np.sqrt(2.0 * np.sum(diff * diff, axis=1))
    return math.fsum(per_frame) / len(per_frame)


@dataclass
class UtteranceScore:
    name: str
    rmse_log_f0: float
    vuv_error: float
    mcd: float | None


@dataclass
class EvalReport:
    f0_scale: float
    utterances: list[UtteranceScore] = field(default_factory=list)

    def _mean(self, attr: str) -> float | None:
        vals = [getattr(u, attr) for u in self.utterances if getattr(u, attr) is not None]
        return math.fsum(vals) / len(vals) if vals else None

    @property
    def rmse_log_f0(self) -> float | None:
        return self._mean("rmse_log_f0")

    @property
    def vuv_error(self) -> float | None:
        return self._mean("vuv_error")

    @property
    def mcd(self) -> float | None:
        return self._mean("mcd")

    def rows(self) -> list[dict]:
        def fmt(v):
            return "" if v is None else f"{v:.6f}"
        out = [{"utterance": u.name, "f0_scale": f"{self.f0_scale:g}",
                "rmse_log_f0": fmt(u.rmse_log_f0), "vuv_error": fmt(u.vuv_error),
                "mcd": fmt(u.mcd)} for u in self.utterances]
        out.append({"utterance": "MEAN", "f0_scale": f"{self.f0_scale:g}",
                    "rmse_log_f0": fmt(self.rmse_log_f0), "vuv_error": fmt(self.vuv_error),
                    "mcd": fmt(self.mcd)})
        return out

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, ["utterance", "f0_scale", "rmse_log_f0",
                                         "vuv_error", "mcd"])
            writer.writeheader()
            writer.writerows(self.rows())

    def to_text(self) -> str:
        return "\n".join(
            f"{r['utterance']}\tscale={r['f0_scale']}\trmse_log_f0={r['rmse_log_f0']}"
            f"\tvuv={r['vuv_error']}\tmcd={r['mcd']}" for r in self.rows()) + "\n"


def analyse(audio: dsp.AudioBuffer, n_frames: int, fmin: float = 70.0,
            fmax: float = 340.0) -> tuple[np.ndarray, np.ndarray, AcousticFeatures | None]:
    """F0, V/UV and (when any frame is voiced) full features, trimmed or padded
    to ``n_frames``."""
    shift = dsp.FRAME_SHIFT
    samples = audio.samples
    need = n_frames * shift
    if len(samples) < need:
        samples = np.concatenate([samples, np.zeros(need - len(samples))])
    audio = dsp.AudioBuffer(samples[:need], audio.sample_rate)
    f0, vuv = estimate_f0(audio, fmin, fmax, shift)
    feat = features_from_f0(audio, f0, vuv, shift) if vuv.any() else None
    return f0, vuv, feat


def search_range(f0_scale: float, fmin: float = 70.0, fmax: float = 340.0,
                 sample_rate: int = dsp.SAMPLE_RATE) -> tuple[float, float]:
    """Tracker bounds widened to cover the scaled contour."""
    lo = fmin * min(f0_scale, 1.0)
    hi = fmax * max(f0_scale, 1.0)
    return max(lo, 20.0), min(hi, sample_rate / 4)


Synthesizer = Callable[[AcousticFeatures, float, int], dsp.AudioBuffer]


def generator_synthesizer(gen) -> Synthesizer:
    def synthesize(feat, f0_scale, seed):
        return gen.generate(feat, seed=seed, f0_scale=f0_scale)[0]
    return synthesize


def evaluate(synthesize, corpus, f0_scale: float = 1.0, seed: int = 0) -> EvalReport:
    """Score synthesized speech against the analysis of natural speech.

    ``synthesize`` is a Generator or a callable ``(features, f0_scale, seed)
    -> AudioBuffer``; ``corpus`` holds objects with ``audio``, ``features``
    and ``name``. The reference F0 is the tracker's F0 on natural speech
    times ``f0_scale``; MCD is only reported at scale 1, where the spectral
    target is unchanged.
    """
    if f0_scale <= 0:
        raise ValueError("f0_scale must be positive")
    if not callable(synthesize) or hasattr(synthesize, "generate"):
        synthesize = generator_synthesizer(synthesize)
    report = EvalReport(f0_scale)
    lo, hi = search_range(f0_scale)
    for i, utt in enumerate(corpus):
        n = utt.features.n_frames
        ref_f0, ref_vuv, ref_feat = analyse(utt.audio, n)
        gen_audio = synthesize(utt.features, f0_scale, seed + i)
        gen_f0, gen_vuv, gen_feat = analyse(gen_audio, n, lo, hi)
        score_mcd = None
        if f0_scale == 1.0 and ref_feat is not None and gen_feat is not None:
            score_mcd = mcd(ref_feat.mcep, gen_feat.mcep)
        report.utterances.append(UtteranceScore(
            getattr(utt, "name", f"utt{i:03d}"),
            rmse_log_f0(ref_f0 * f0_scale, ref_vuv, gen_f0, gen_vuv),
            vuv_error(ref_vuv, gen_vuv), score_mcd))
    return report


def load_report_csv(path) -> list[dict]:
    with open(Path(path), newline="") as fh:
        return list(csv.DictReader(fh))
