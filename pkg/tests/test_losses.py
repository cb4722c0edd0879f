import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hnusfgan import dsp, losses
from hnusfgan.discriminators import DiscriminatorConfig, Discriminators, PWGDiscConfig
from hnusfgan.generator import Generator, GeneratorConfig
from hnusfgan.losses import LossWeights
from hnusfgan.nn import Tensor

from conftest import gradcheck, rel_error

FS = 24000


def voiced_signal(T=2400, f0=180.0, seed=0):
    """Pulse-ish harmonic signal plus a little noise, never silent."""
    rng = np.random.default_rng(seed)
    t = np.arange(T) / FS
    x = sum(np.sin(2 * np.pi * k * f0 * t + rng.uniform(0, 6)) / k for k in range(1, 30))
    return 0.1 * x + 0.01 * rng.standard_normal(T)


def test_mel_loss_examples():
    x = voiced_signal()
    y = voiced_signal(seed=1)
    assert float(losses.mel_spectral_loss(x, x).data) == 0.0
    assert float(losses.mel_spectral_loss(2 * x, x).data) == pytest.approx(np.log(2), abs=1e-12)
    assert float(losses.mel_spectral_loss(x, y).data) == pytest.approx(
        float(losses.mel_spectral_loss(y, x).data), abs=1e-15)


def test_mel_loss_length_mismatch():
    with pytest.raises(ValueError):
        losses.mel_spectral_loss(np.zeros(2400), np.zeros(2000))


def test_log_mel_shape_and_floor():
    lm = losses.log_mel(Tensor(np.zeros((2, 1, 1200)))).data
    assert lm.shape == (2, 1200 // 120 + 1, 80)
    np.testing.assert_allclose(lm, np.log(dsp.EPS))


def test_multires_examples():
    x = voiced_signal()
    assert float(losses.multires_stft_loss(x, x).data) == 0.0
    shifted = np.roll(x, 1)
    mr = float(losses.multires_stft_loss(shifted, x).data)
    mel = float(losses.mel_spectral_loss(shifted, x).data)
    assert mr > 0 and mel > 0
    assert mr / mel > 1


@settings(max_examples=10)
@given(st.integers(0, 2 ** 31))
def test_multires_non_negative(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal(2400) * 0.1, rng.standard_normal(2400) * 0.1
    assert float(losses.multires_stft_loss(a, b).data) >= 0


def test_multires_gradient():
    rng = np.random.default_rng(3)
    ref = rng.standard_normal(600) * 0.1
    x = rng.standard_normal(600) * 0.1
    res = ((256, 60, 200), (128, 30, 100))
    # log magnitudes of small bins curve sharply; a finer step keeps the
    # central-difference truncation error below the tolerance
    assert gradcheck(lambda t: losses.multires_stft_loss(t, ref, res), x, h=1e-6) < 1e-6


def test_frobenius_zero_subgradient():
    z = Tensor(np.zeros(4), requires_grad=True)
    losses.frobenius(z).backward()
    assert np.all(z.grad == 0)
    assert gradcheck(losses.frobenius, np.array([3.0, -4.0])) < 1e-8


def test_residual_reg_matched_and_shifted():
    x = voiced_signal()
    audio = dsp.AudioBuffer(x)
    matched = float(losses.reg_loss_residual(x, audio, envelope=1.0).data)
    assert matched == pytest.approx(0.0, abs=1e-12)
    scaled = float(losses.reg_loss_residual(np.e * x, audio, envelope=1.0).data)
    assert scaled - matched == pytest.approx(1.0, abs=1e-12)


def test_residual_reg_uses_envelope():
    x = voiced_signal()
    audio = dsp.AudioBuffer(x)
    f0 = np.full(len(x) // 120 + 1, 180.0)
    target = losses.residual_log_mel(audio, f0)
    # residual spectra are flatter than the speech, so speech is not a minimiser
    assert float(losses.reg_loss_residual(x, audio, f0).data) > 0.05
    assert float(losses.reg_loss_residual(x, None, target=target).data) == pytest.approx(
        float(losses.reg_loss_residual(x, audio, f0).data), abs=1e-12)
    with pytest.raises(ValueError):
        losses.reg_loss_residual(x[:-120], audio, f0)
    with pytest.raises(ValueError):
        losses.residual_log_mel(audio)


def test_residual_reg_gradient():
    ref = dsp.AudioBuffer(voiced_signal(T=1080, seed=4))
    f0 = np.full(10, 180.0)
    target = losses.residual_log_mel(ref, f0)
    x = voiced_signal(T=1080, seed=5)
    assert gradcheck(lambda t: losses.reg_loss_residual(t, None, target=target), x) < 1e-4


def test_flat_loss_examples():
    assert float(losses.flat_loss_from_log_envelope(np.zeros((5, 7))).data) == 0.0
    assert float(losses.flat_loss_from_log_envelope(np.ones((3, 4))).data) == pytest.approx(
        1 / np.sqrt(12), abs=1e-15)
    # a batch of two identical items keeps the per-item value
    assert float(losses.flat_loss_from_log_envelope(np.ones((2, 3, 4))).data) == pytest.approx(
        1 / np.sqrt(12), abs=1e-15)


def test_flat_loss_decreases_as_envelope_flattens():
    peak = np.zeros((4, 16))
    peak[:, 5] = 2.0
    peak[:, 6] = -1.0
    values = [float(losses.flat_loss_from_log_envelope(t * peak).data)
              for t in np.linspace(1.0, 0.0, 11)]
    assert all(a > b for a, b in zip(values, values[1:]))


def test_flat_loss_gradient_through_envelope():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((1, 1, 1080)) * 0.2
    f0 = np.array([0, 150, 150, 200, 200, 0, 0, 120, 120, 0])
    assert gradcheck(lambda t: losses.reg_loss_flat(t, f0), x) < 1e-5


def test_log_envelope_matches_numpy_estimate():
    x = voiced_signal()
    spec = dsp.stft(dsp.AudioBuffer(x))
    f0 = np.full(spec.frames, 180.0)
    ref = np.log(dsp.spectral_envelope(spec, f0).values)
    got = losses.log_envelope(x, f0).data[0]
    np.testing.assert_allclose(got, ref, atol=1e-9)


def test_adv_examples():
    ones, zeros = [np.ones((1, 1, 5)), np.ones((1, 1, 3, 2))], [np.zeros((1, 1, 5)),
                                                                   np.zeros((1, 1, 3, 2))]
    ld, la = losses.adv_losses(ones, zeros)
    assert float(ld.data) == 0.0 and float(la.data) == 1.0
    half = [np.full((1, 1, 5), 0.5), np.full((2, 1, 4), 0.5), np.full((1, 1, 2), 0.5)]
    assert float(losses.discriminator_loss(half, half).data) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        losses.discriminator_loss(half, half[:2])


def test_adv_gradient_closed_form():
    d = np.random.default_rng(0).uniform(-1, 2, (1, 1, 6))
    t = Tensor(d, requires_grad=True)
    losses.generator_adv_loss([t]).backward()
    np.testing.assert_allclose(t.grad, -2 * (1 - d) / d.size)
    assert gradcheck(lambda s: losses.generator_adv_loss([s]), d) < 1e-8


def test_generator_total_examples():
    w = LossWeights()
    assert (w.lambda_spc, w.lambda_adv) == (15.0, 1.0)
    assert losses.generator_total((0.2, 0.1, 0.3), w) == pytest.approx(2.0)
    off = LossWeights(reg_mode="off")
    assert losses.generator_total((0.2, 0.1, 0.3), off) == pytest.approx(1.8)
    base = LossWeights.usfgan_baseline()
    assert (base.lambda_spc, base.lambda_adv, base.reg_mode, base.spc_mode, base.adv_mode) == (
        1.0, 4.0, "flat", "multires_stft", "pwg")
    assert losses.generator_total({"reg": 0.2, "spc": 0.1, "adv": 0.3}, base) == pytest.approx(1.5)
    with pytest.raises(ValueError):
        LossWeights(lambda_spc=-1)
    with pytest.raises(ValueError):
        LossWeights(reg_mode="both")


@pytest.mark.parametrize("weights", [LossWeights(), LossWeights.usfgan_baseline()],
                         ids=["hn", "baseline"])
def test_composite_gradient_on_small_generator(weights):
    cfg = GeneratorConfig.toy(residual_channels=4, gate_channels=8, skip_channels=4,
                              harmonic_layers=2, harmonic_cycles=1, noise_layers=1,
                              filter_layers=2, filter_cycles=1)
    g = Generator(cfg)
    # zero-initialised biases put ReLUs exactly on their kink when a whole
    # channel is inactive; jitter so the check runs at a generic point
    jitter = np.random.default_rng(2)
    for p in g.parameters():
        p.data += 0.05 * jitter.standard_normal(p.data.shape)
    kind = "pwg" if weights.adv_mode == "pwg" else "hifigan"
    d = Discriminators(DiscriminatorConfig(kind=kind, pwg=PWGDiscConfig(layers=3, channels=3)))
    T = 2400  # the widest STFT resolution needs 2048 samples
    rng = np.random.default_rng(0)
    n_frames = T // 120
    f0 = np.full(n_frames, 170.0)
    exc = dsp.make_excitation_inputs(f0, np.ones(n_frames), 120, FS, 0)
    dil = dsp.dilation_factors(exc.per_sample_f0, FS, cfg.dense_factor)[None]
    cond = Tensor(rng.standard_normal((1, cfg.cond_channels, T)) * 0.3)
    sine, noise = Tensor(exc.sine[None, None]), Tensor(exc.noise[None, None])
    ref = voiced_signal(T, 170.0)
    target = losses.residual_log_mel(dsp.AudioBuffer(ref), np.full(n_frames + 1, 170.0))

    def total():
        speech, src = g(sine, noise, cond, dil)
        if weights.reg_mode == "residual":
            reg = losses.reg_loss_residual(src.excitation, None, target=target)
        else:
            reg = losses.reg_loss_flat(src.excitation, np.full(n_frames + 1, 170.0))
        spc = losses.spectral_loss(speech, ref, weights)
        adv = losses.generator_adv_loss(d(speech))
        return losses.generator_total((reg, spc, adv), weights)

    g.zero_grad()
    total().backward()
    pick = np.random.default_rng(1)
    for name, p in g.named_parameters():
        flat = p.data.reshape(-1)
        idx = pick.choice(flat.size, size=min(2, flat.size), replace=False)
        num = []
        for i in idx:
            old = flat[i]
            flat[i] = old + 1e-6
            up = float(total().data)
            flat[i] = old - 1e-6
            down = float(total().data)
            flat[i] = old
            num.append((up - down) / 2e-6)
        ana = p.grad.reshape(-1)[idx]
        assert rel_error(ana, np.array(num)) < 1e-3, name
