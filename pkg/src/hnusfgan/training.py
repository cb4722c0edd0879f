"""Synthetic corpus, adversarial training loop, checkpointing and resume."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from . import dsp
from .discriminators import DiscriminatorConfig, Discriminators
from .features import (AcousticFeatures, FeatureNormalizer, features_from_f0, read_features,
                       write_features)
from .generator import Generator, GeneratorConfig
from .losses import (LossWeights, discriminator_loss, generator_adv_loss, generator_total,
                     mel_spectral_loss, reg_loss_flat, reg_loss_residual, spectral_loss)
from .nn import Adam, Tape, Tensor, load_checkpoint, load_into, no_grad, save_checkpoint
from .wavio import read_wav, write_wav

log = logging.getLogger(__name__)

FULL_DECAY_EVERY = 200_000
VARIANTS = ("hn-usfgan", "-reg-loss", "-hn-sn", "-hifi-d", "-mel-loss")


class TrainingDiverged(FloatingPointError):
    """A loss became NaN or Inf; ``op`` names the first offending graph node."""

    def __init__(self, loss_name: str, iteration: int, op: str | None):
        where = f" (first non-finite node: '{op}')" if op else ""
        super().__init__(f"loss '{loss_name}' is not finite at iteration {iteration}{where}")
        self.loss_name = loss_name
        self.iteration = iteration
        self.op = op


# ---------------------------------------------------------------------------
# configuration

@dataclass
class TrainingConfig:
    iterations: int = 5000
    batch_size: int = 1
    segment_length: int = 8160
    lr_g: float = 2e-4
    lr_d: float = 2e-4
    lr_decay_every: int = -1  # -1: preset schedule (200k on full, none on toy)
    lr_decay_factor: float = 0.5
    seed: int = 0
    preset: str = "toy"
    variant: str = "hn-usfgan"
    weights: LossWeights = field(default_factory=LossWeights)
    dtype: str = "float32"
    checkpoint_every: int = 1000

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant '{self.variant}', expected one of {VARIANTS}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        if self.segment_length % dsp.FRAME_SHIFT:
            raise ValueError(f"segment_length must be a multiple of {dsp.FRAME_SHIFT}")
        if self.lr_decay_every < -1:
            raise ValueError("lr_decay_every must be -1 (preset schedule), 0 (off) or positive")
        if self.iterations < 0 or self.batch_size < 1:
            raise ValueError("iterations must be >= 0 and batch_size >= 1")
        rf = self.generator_config().filter_receptive_field()
        if self.segment_length < rf:
            raise ValueError(f"segment_length {self.segment_length} is shorter than the "
                             f"filter receptive field {rf}")

    @classmethod
    def for_variant(cls, variant: str = "hn-usfgan", **overrides) -> "TrainingConfig":
        """Config for the proposed model or one of its ablations."""
        w = LossWeights()
        if variant == "-reg-loss":
            w = replace(w, reg_mode="off")
        elif variant == "-hifi-d":
            w = replace(w, adv_mode="pwg")
        elif variant == "-mel-loss":
            w = replace(w, spc_mode="multires_stft")
        overrides.setdefault("weights", w)
        return cls(variant=variant, **overrides)

    def generator_config(self) -> GeneratorConfig:
        source = "single" if self.variant == "-hn-sn" else "hn"
        return GeneratorConfig.preset(self.preset, source=source, seed=self.seed)

    def discriminator_config(self) -> DiscriminatorConfig:
        kind = "pwg" if self.weights.adv_mode == "pwg" else "hifigan"
        base = DiscriminatorConfig.full if self.preset == "full" else DiscriminatorConfig
        return base(kind=kind, seed=self.seed + 1)

    def decay_interval(self) -> int:
        if self.lr_decay_every >= 0:
            return self.lr_decay_every
        return FULL_DECAY_EVERY if self.preset == "full" else 0

    def lr_at(self, base: float, iteration: int) -> float:
        every = self.decay_interval()
        if every == 0:
            return base
        return base * self.lr_decay_factor ** (iteration // every)

    # -- persistence -----------------------------------------------------------
    def to_dict(self) -> dict:
        d = asdict(self)
        d["weights"] = self.weights.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingConfig":
        d = dict(d)
        w = d.pop("weights", None)
        if w is not None:
            d["weights"] = LossWeights(**w)
        return cls(**d)

    def to_text(self) -> str:
        lines = ["# hnusfgan training configuration"]
        for f in fields(self):
            if f.name != "weights":
                lines.append(f"{f.name} = {getattr(self, f.name)}")
        w = self.weights
        for name in ("lambda_spc", "lambda_adv", "reg_mode", "spc_mode", "adv_mode"):
            lines.append(f"{name} = {getattr(w, name)}")
        return "\n".join(lines) + "\n"


_WEIGHT_KEYS = {"lambda_spc": float, "lambda_adv": float, "reg_mode": str,
                "spc_mode": str, "adv_mode": str}


def parse_config_text(text: str) -> TrainingConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment.

    ``variant`` is applied first so later keys override its defaults.
    """
    types = {f.name: f.type for f in fields(TrainingConfig) if f.name != "weights"}
    values: dict[str, str] = {}
    for number, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {number}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in types and key not in _WEIGHT_KEYS:
            raise ValueError(f"line {number}: unknown key '{key}'")
        values[key] = value
    cfg_kw, w_kw = {}, {}
    for key, value in values.items():
        if key in _WEIGHT_KEYS:
            w_kw[key] = _WEIGHT_KEYS[key](value)
        elif key != "variant":
            cast = {"int": int, "float": float}.get(types[key], str)
            cfg_kw[key] = cast(value)
    base = TrainingConfig.for_variant(values.get("variant", "hn-usfgan"))
    return replace(base, weights=replace(base.weights, **w_kw), **cfg_kw)


def load_config(path) -> TrainingConfig:
    return parse_config_text(Path(path).read_text())


# ---------------------------------------------------------------------------
# synthetic corpus

@dataclass
class SyntheticCorpusSpec:
    n_utterances: int = 50
    n_frames: int = 200
    f0_range: tuple = (80.0, 300.0)
    voiced_frames: tuple = (25, 60)
    unvoiced_frames: tuple = (6, 15)
    formant_ranges: tuple = ((300.0, 900.0), (900.0, 2500.0))
    bandwidth_range: tuple = (60.0, 160.0)
    aspiration: float = 0.02
    noise_floor: float = 1e-3
    sample_rate: int = dsp.SAMPLE_RATE
    frame_shift: int = dsp.FRAME_SHIFT

    def __post_init__(self):
        lo, hi = self.f0_range
        if not 70.0 <= lo < hi <= 340.0:
            raise ValueError("F0 range must lie inside the tracker search range [70, 340] Hz")


@dataclass
class Utterance:
    audio: dsp.AudioBuffer
    features: AcousticFeatures
    name: str = ""


def _resonator(freq: float, bandwidth: float, fs: int):
    r = np.exp(-np.pi * bandwidth / fs)
    theta = 2.0 * np.pi * freq / fs
    return [1.0 - r], [1.0, -2.0 * r * np.cos(theta), r * r]


def _segments(spec: SyntheticCorpusSpec, rng) -> np.ndarray:
    """Frame-wise voicing pattern: short silence, then alternating runs."""
    vuv = np.zeros(spec.n_frames)
    pos = int(rng.integers(*spec.unvoiced_frames))
    while pos < spec.n_frames:
        run = int(rng.integers(spec.voiced_frames[0], spec.voiced_frames[1] + 1))
        vuv[pos:pos + run] = 1.0
        pos += run + int(rng.integers(spec.unvoiced_frames[0], spec.unvoiced_frames[1] + 1))
    if vuv[-3:].any() and not vuv[:-3].any():
        vuv[:] = 0.0
    if not vuv.any():
        vuv[spec.n_frames // 4: 3 * spec.n_frames // 4] = 1.0
    return vuv


def synthesize_utterance(spec: SyntheticCorpusSpec, rng) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One pulse-train-through-resonators utterance: ``(samples, f0, vuv)``."""
    fs, shift, n = spec.sample_rate, spec.frame_shift, spec.n_frames
    vuv = _segments(spec, rng)
    lo, hi = spec.f0_range
    t = np.arange(n) * shift / fs
    f0 = np.zeros(n)
    edges = np.flatnonzero(np.diff(np.concatenate([[0.0], vuv, [0.0]])))
    runs = list(zip(edges[::2], edges[1::2]))
    for start, stop in runs:
        base = rng.uniform(lo * 1.15, hi / 1.15)
        depth = rng.uniform(0.02, 0.12)
        rate = rng.uniform(1.0, 3.0)
        phase = rng.uniform(0, 2 * np.pi)
        contour = base * (1.0 + depth * np.sin(2 * np.pi * rate * t[start:stop] + phase))
        f0[start:stop] = np.clip(contour, lo, hi)
    f0_samples = dsp.per_sample_f0(f0, vuv, shift)
    cycles = np.cumsum(f0_samples / fs)
    pulses = np.diff(np.floor(cycles), prepend=0.0) * (f0_samples > 0)
    glottal = lfilter([1.0], [1.0, -0.9], pulses)
    total = n * shift
    out = spec.noise_floor * rng.standard_normal(total)
    for start, stop in runs:
        a, b = start * shift, stop * shift
        src = glottal[a:b] + spec.aspiration * rng.standard_normal(b - a)
        for f_lo, f_hi in spec.formant_ranges:
            num, den = _resonator(rng.uniform(f_lo, f_hi), rng.uniform(*spec.bandwidth_range), fs)
            src = lfilter(num, den, src)
        out[a:b] += src / (np.max(np.abs(src)) + 1e-12) * rng.uniform(0.3, 0.6)
    # fricative noise in some unvoiced gaps
    gaps = np.flatnonzero(np.diff(np.concatenate([[1.0], vuv, [1.0]])))
    for start, stop in zip(gaps[::2], gaps[1::2]):
        if rng.random() < 0.5:
            continue
        a, b = start * shift, stop * shift
        num, den = _resonator(rng.uniform(3000, 6000), 1500.0, fs)
        hiss = lfilter(num, den, rng.standard_normal(b - a))
        out[a:b] += hiss / (np.max(np.abs(hiss)) + 1e-12) * rng.uniform(0.02, 0.08)
    return out, f0, vuv


def make_synthetic_corpus(spec: SyntheticCorpusSpec | None = None, seed: int = 0) -> list[Utterance]:
    """Deterministic corpus with ground-truth F0/V-UV and analysed envelopes."""
    spec = spec or SyntheticCorpusSpec()
    rng = np.random.default_rng(seed)
    corpus = []
    for i in range(spec.n_utterances):
        samples, f0, vuv = synthesize_utterance(spec, rng)
        audio = dsp.AudioBuffer(samples, spec.sample_rate)
        feat = features_from_f0(audio, f0, vuv, spec.frame_shift)
        corpus.append(Utterance(audio, feat, f"utt{i:03d}"))
    return corpus


# ---------------------------------------------------------------------------
# models and batches

@dataclass
class Models:
    generator: Generator
    discriminators: Discriminators
    opt_g: Adam
    opt_d: Adam


def set_dtype(module, dtype) -> None:
    for p in module.parameters():
        p.data = p.data.astype(dtype)
        p.exp_avg = p.exp_avg.astype(dtype)
        p.exp_avg_sq = p.exp_avg_sq.astype(dtype)


def build_models(cfg: TrainingConfig, normalizer: FeatureNormalizer | None = None) -> Models:
    gen = Generator(cfg.generator_config(), normalizer)
    disc = Discriminators(cfg.discriminator_config())
    dtype = np.dtype(cfg.dtype)
    set_dtype(gen, dtype)
    set_dtype(disc, dtype)
    return Models(gen, disc, Adam(gen.parameters(), cfg.lr_g), Adam(disc.parameters(), cfg.lr_d))


@dataclass
class Prepared:
    """Per-utterance generator inputs computed once before training."""

    speech: np.ndarray
    sine: np.ndarray
    cond: np.ndarray
    dilations: np.ndarray
    f0: np.ndarray


def prepare_corpus(gen: Generator, corpus: list[Utterance], seed: int) -> list[Prepared]:
    out = []
    for i, utt in enumerate(corpus):
        exc, cond, d = gen.prepare_inputs(utt.features, seed=seed + i)
        n = utt.features.n_samples
        speech = np.zeros(n)
        m = min(n, len(utt.audio))
        speech[:m] = utt.audio.samples[:m]
        out.append(Prepared(speech, exc.sine, cond[0], d[0], utt.features.f0))
    return out


@dataclass
class Batch:
    speech: np.ndarray     # [B, 1, T]
    sine: np.ndarray       # [B, 1, T]
    noise: np.ndarray      # [B, 1, T]
    cond: np.ndarray       # [B, C, T]
    dilations: np.ndarray  # [B, T]
    f0: np.ndarray         # [B, frames]


def sample_batch(prepared: list[Prepared], cfg: TrainingConfig, rng) -> Batch:
    shift = dsp.FRAME_SHIFT
    seg_frames = cfg.segment_length // shift
    rows = []
    for _ in range(cfg.batch_size):
        p = prepared[int(rng.integers(len(prepared)))]
        n_frames = len(p.f0)
        if n_frames < seg_frames:
            raise ValueError("utterance shorter than the training segment")
        start = int(rng.integers(0, n_frames - seg_frames + 1))
        a, b = start * shift, (start + seg_frames) * shift
        rows.append((p.speech[a:b], p.sine[a:b], p.cond[:, a:b], p.dilations[a:b],
                     p.f0[start:start + seg_frames]))
    noise = rng.standard_normal((cfg.batch_size, 1, cfg.segment_length))
    dtype = np.dtype(cfg.dtype)
    return Batch(np.stack([r[0] for r in rows])[:, None].astype(dtype),
                 np.stack([r[1] for r in rows])[:, None].astype(dtype),
                 noise.astype(dtype),
                 np.stack([r[2] for r in rows]).astype(dtype),
                 np.stack([r[3] for r in rows]),
                 np.stack([r[4] for r in rows]))


# ---------------------------------------------------------------------------
# optimisation

def _check(loss, name: str, iteration: int) -> None:
    value = float(loss.data) if isinstance(loss, Tensor) else float(loss)
    if np.isfinite(value):
        return
    node = Tape.from_root(loss).first_nonfinite() if isinstance(loss, Tensor) else None
    raise TrainingDiverged(name, iteration, node.op if node is not None else None)


def train_step(batch: Batch, models: Models, cfg: TrainingConfig, iteration: int = 0) -> dict:
    """One discriminator update followed by one generator update."""
    gen, disc = models.generator, models.discriminators
    w = cfg.weights
    real = Tensor(batch.speech)
    fake, src = gen(Tensor(batch.sine), Tensor(batch.noise), Tensor(batch.cond), batch.dilations)

    # critic: score natural speech as 1, generated (detached) as 0
    d_loss = discriminator_loss(disc(real), disc(Tensor(fake.data)))
    _check(d_loss, "discriminator", iteration)
    models.opt_d.zero_grad()
    d_loss.backward()
    models.opt_d.lr = cfg.lr_at(cfg.lr_d, iteration)
    models.opt_d.step()

    record = {"discriminator": float(d_loss.data)}
    comps = {}
    if w.reg_mode == "residual":
        comps["reg"] = reg_loss_residual(src.excitation, batch.speech, batch.f0)
    elif w.reg_mode == "flat":
        comps["reg"] = reg_loss_flat(src.excitation, batch.f0)
    comps["spc"] = spectral_loss(fake, real, w)
    if w.lambda_adv:
        comps["adv"] = generator_adv_loss(disc(fake))
    for name, value in comps.items():
        _check(value, name, iteration)
        record[name] = float(value.data)
    total = generator_total(comps, w)
    _check(total, "generator", iteration)
    record["generator"] = float(total.data)
    if w.spc_mode != "mel":
        with no_grad():
            record["mel"] = float(mel_spectral_loss(fake.data, batch.speech).data)
    else:
        record["mel"] = record["spc"]

    models.opt_g.zero_grad()
    total.backward()
    models.opt_g.lr = cfg.lr_at(cfg.lr_g, iteration)
    models.opt_g.step()
    # the generator pass also deposited gradients on the critics; discard them
    models.opt_d.zero_grad()
    return record


# ---------------------------------------------------------------------------
# checkpoints

CKPT_NAME = "checkpoint.usfc"
LOG_NAME = "losses.tsv"


def _named(models: Models):
    yield from (("generator." + n, p) for n, p in models.generator.named_parameters())
    yield from (("discriminator." + n, p) for n, p in models.discriminators.named_parameters())


def save_training_state(path, models: Models, cfg: TrainingConfig, iteration: int, rng) -> None:
    meta = {"kind": "training", "iteration": iteration, "config": cfg.to_dict(),
            "generator": models.generator.cfg.to_dict(),
            "discriminator": models.discriminators.cfg.to_dict(),
            "normalizer": models.generator.normalizer.to_dict(),
            "rng": rng.bit_generator.state}
    save_checkpoint(path, _named(models), meta)


def restore_training_state(path) -> tuple[Models, TrainingConfig, int, np.random.Generator]:
    ckpt = load_checkpoint(path)
    meta = ckpt.meta
    if meta.get("kind") != "training":
        raise ValueError("checkpoint does not carry training state")
    cfg = TrainingConfig.from_dict(meta["config"])
    models = build_models(cfg, FeatureNormalizer.from_dict(meta["normalizer"]))
    load_into(_named(models), ckpt)
    dtype = np.dtype(cfg.dtype)
    set_dtype(models.generator, dtype)
    set_dtype(models.discriminators, dtype)
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng"]
    return models, cfg, int(meta["iteration"]), rng


def load_generator(path) -> Generator:
    """Generator (with its feature normalizer) from a training checkpoint."""
    ckpt = load_checkpoint(path)
    meta = ckpt.meta
    if "generator" not in meta:
        raise ValueError("checkpoint has no generator configuration")
    gen = Generator(GeneratorConfig.from_dict(meta["generator"]),
                    FeatureNormalizer.from_dict(meta["normalizer"]))
    prefix = "generator."
    sub = {k[len(prefix):]: v for k, v in ckpt.params.items() if k.startswith(prefix)}
    load_into(gen.named_parameters(), type(ckpt)(sub, meta))
    return gen


# ---------------------------------------------------------------------------
# loop

@dataclass
class TrainResult:
    checkpoint: Path
    loss_log: Path
    history: list[dict]
    models: Models


def read_loss_log(path) -> list[tuple[int, str, float]]:
    rows = []
    for line in Path(path).read_text().splitlines():
        it, name, value = line.split("\t")
        rows.append((int(it), name, float(value)))
    return rows


def train(cfg: TrainingConfig, corpus: list[Utterance], out_dir, resume: bool = False,
          stop_at: int | None = None) -> TrainResult:
    """Train on ``corpus`` and write ``checkpoint.usfc`` plus ``losses.tsv``.

    With ``resume`` the loop continues from ``out_dir/checkpoint.usfc`` and
    appends to the existing log. ``stop_at`` halts early (after that many
    total iterations) while keeping the configured schedule.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path, log_path = out_dir / CKPT_NAME, out_dir / LOG_NAME
    if resume:
        models, saved_cfg, start, rng = restore_training_state(ckpt_path)
        if saved_cfg.to_dict() != cfg.to_dict():
            raise ValueError("configuration differs from the checkpoint being resumed")
        # drop log lines past the checkpoint so the log stays consistent
        kept = [r for r in read_loss_log(log_path) if r[0] < start] if log_path.exists() else []
        log_path.write_text("".join(f"{i}\t{n}\t{v!r}\n" for i, n, v in kept))
    else:
        use_vuv = cfg.generator_config().use_vuv
        normalizer = FeatureNormalizer.fit([u.features for u in corpus], use_vuv=use_vuv)
        models = build_models(cfg, normalizer)
        start, rng = 0, np.random.default_rng(cfg.seed)
        log_path.write_text("")
    prepared = prepare_corpus(models.generator, corpus, cfg.seed)
    end = cfg.iterations if stop_at is None else min(stop_at, cfg.iterations)
    history = []
    with open(log_path, "a") as log_fh:
        for it in range(start, end):
            batch = sample_batch(prepared, cfg, rng)
            record = train_step(batch, models, cfg, it)
            history.append(record)
            log_fh.write("".join(f"{it}\t{k}\t{v!r}\n" for k, v in record.items()))
            if (it + 1) % 100 == 0:
                log_fh.flush()
                log.info("iteration %d: %s", it + 1,
                         json.dumps({k: round(v, 4) for k, v in record.items()}))
            if cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
                save_training_state(ckpt_path, models, cfg, it + 1, rng)
    save_training_state(ckpt_path, models, cfg, end, rng)
    return TrainResult(ckpt_path, log_path, history, models)


def window_means(rows, name: str, window: int) -> tuple[float, float]:
    """Means of loss ``name`` over the first and the last ``window`` iterations."""
    values = np.array([v for _, n, v in rows if n == name])
    if len(values) < window:
        raise ValueError(f"need at least {window} '{name}' entries, have {len(values)}")
    return float(values[:window].mean()), float(values[-window:].mean())


# ---------------------------------------------------------------------------
# corpus on disk

def save_corpus(corpus: list[Utterance], directory) -> None:
    """Write ``<name>.wav`` (float32) and ``<name>.usff`` per utterance."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for utt in corpus:
        write_wav(directory / f"{utt.name}.wav", utt.audio, subtype="float32")
        write_features(utt.features, directory / f"{utt.name}.usff")


def load_corpus(directory) -> list[Utterance]:
    """Utterances from WAV + feature-file pairs, sorted by name."""
    directory = Path(directory)
    names = sorted(p.stem for p in directory.glob("*.usff"))
    if not names:
        raise ValueError(f"no feature files in '{directory}'")
    corpus = []
    for name in names:
        wav = directory / f"{name}.wav"
        if not wav.exists():
            raise ValueError(f"missing audio for '{name}'")
        corpus.append(Utterance(read_wav(wav), read_features(directory / f"{name}.usff"), name))
    return corpus
