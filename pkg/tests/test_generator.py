import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hnusfgan import dsp
from hnusfgan.features import AcousticFeatures
from hnusfgan.generator import Generator, GeneratorConfig, mix_latents
from hnusfgan.nn import Tensor

T = 240


def tiny(**kw):
    base = dict(residual_channels=4, gate_channels=8, skip_channels=4, harmonic_layers=4,
                harmonic_cycles=2, noise_layers=2, filter_layers=3, filter_cycles=1)
    base.update(kw)
    return GeneratorConfig(**base)


def inputs(cfg, T=T, f0=150.0, seed=0, B=1):
    rng = np.random.default_rng(seed)
    n_frames = T // cfg.frame_shift
    f0s = np.full(n_frames, f0)
    exc = dsp.make_excitation_inputs(f0s, np.ones(n_frames), cfg.frame_shift, cfg.sample_rate,
                                     seed)
    d = dsp.dilation_factors(exc.per_sample_f0, cfg.sample_rate, cfg.dense_factor)
    sine = np.repeat(exc.sine[None, None], B, 0)
    noise = np.repeat(exc.noise[None, None], B, 0)
    cond = rng.standard_normal((B, cfg.cond_channels, T)) * 0.5
    return sine, noise, cond, np.repeat(d[None], B, 0)


def zero_all(module):
    for p in module.parameters():
        p.data[...] = 0.0


def test_shapes():
    cfg = tiny()
    g = Generator(cfg)
    sine, noise, cond, d = inputs(cfg, B=2)
    speech, src = g(Tensor(sine), Tensor(noise), Tensor(cond), d)
    assert speech.shape == (2, 1, T)
    for t in (src.latent, src.harmonic, src.noise, src.weights):
        assert t.shape == (2, cfg.latent_channels, T)
    assert src.excitation.shape == (2, 1, T)


def test_gradient_reaches_every_parameter():
    cfg = tiny()
    g = Generator(cfg)
    sine, noise, cond, d = inputs(cfg)
    speech, src = g(Tensor(sine), Tensor(noise), Tensor(cond), d)
    ((speech ** 2).mean() + (src.excitation ** 2).mean()).backward()
    for name, p in g.named_parameters():
        assert p.grad is not None and np.linalg.norm(p.grad) > 0, name


def test_harmonic_collapses_to_final_bias():
    cfg = tiny()
    g = Generator(cfg)
    zero_all(g.harmonic_net)
    g.harmonic_net.output.bias.data[:] = np.arange(cfg.latent_channels) * 0.5 - 0.3
    sine, _, cond, d = inputs(cfg)
    out = g.harmonic_forward(Tensor(sine), Tensor(cond), d).data
    np.testing.assert_allclose(out, np.broadcast_to(
        g.harmonic_net.output.bias.data[None, :, None], out.shape))


def test_doubling_f0_halves_dilations():
    d100 = dsp.dilation_factors(np.full(10, 100.0), 24000, 4)
    d200 = dsp.dilation_factors(np.full(10, 200.0), 24000, 4)
    assert d100[0] == 60 and d200[0] == 30
    g = Generator(tiny())
    for m, block in zip(g.harmonic_multipliers, g.harmonic_net.blocks):
        assert block.dilation == m
        assert (d100[0] * m) == 2 * (d200[0] * m)


def test_harmonic_length_mismatch():
    cfg = tiny()
    g = Generator(cfg)
    sine, _, cond, d = inputs(cfg)
    with pytest.raises(ValueError, match="length mismatch"):
        g.harmonic_forward(Tensor(sine[..., :-1]), Tensor(cond), d)
    with pytest.raises(ValueError, match="length mismatch"):
        g.noise_forward(Tensor(sine), Tensor(cond[..., :-3]))


def test_noise_branch_ignores_sine():
    cfg = tiny()
    g = Generator(cfg)
    sine, noise, cond, d = inputs(cfg)
    _, a = g(Tensor(sine), Tensor(noise), Tensor(cond), d)
    _, b = g(Tensor(sine * 5 + 1), Tensor(noise), Tensor(cond), d)
    np.testing.assert_array_equal(a.noise.data, b.noise.data)
    assert not np.allclose(a.harmonic.data, b.harmonic.data)
    again = g.noise_forward(Tensor(noise), Tensor(cond)).data
    np.testing.assert_array_equal(again, a.noise.data)


@pytest.mark.parametrize("bias,check", [(20.0, lambda a: a > 0.9999), (-20.0, lambda a: a < 1e-4)])
def test_periodicity_saturation(bias, check):
    cfg = tiny()
    g = Generator(cfg)
    zero_all(g.periodicity)
    g.periodicity.convs[-1].bias.data[:] = bias
    _, _, cond, _ = inputs(cfg)
    assert np.all(check(g.periodicity_forward(Tensor(cond)).data))


def test_periodicity_inside_unit_interval():
    cfg = tiny()
    _, _, cond, _ = inputs(cfg)
    a = Generator(cfg).periodicity_forward(Tensor(cond)).data
    assert np.all((a > 0) & (a < 1))


def test_mix_examples():
    lh, ln = np.full((1, 2, 3), 2.0), np.full((1, 2, 3), 4.0)
    assert np.all(mix_latents(lh, ln, np.ones_like(lh)).data == lh)
    assert np.all(mix_latents(lh, ln, np.zeros_like(lh)).data == ln)
    assert np.all(mix_latents(lh, ln, np.full_like(lh, 0.5)).data == 3.0)
    with pytest.raises(ValueError):
        mix_latents(lh, ln, np.ones((1, 2, 2)))


@given(st.integers(0, 2 ** 31))
def test_mix_is_convex(seed):
    rng = np.random.default_rng(seed)
    lh, ln = rng.standard_normal((2, 3, 7)), rng.standard_normal((2, 3, 7))
    a = rng.uniform(0, 1, (2, 3, 7))
    out = mix_latents(lh, ln, a).data
    assert np.all(out >= np.minimum(lh, ln) - 1e-12)
    assert np.all(out <= np.maximum(lh, ln) + 1e-12)


def test_excitation_projection_selects_channel():
    g = Generator(tiny())
    lat = np.random.default_rng(1).standard_normal((1, 4, 10))
    g.excitation_proj.weight.data[...] = 0
    g.excitation_proj.weight.data[0, 0, 0] = 1
    g.excitation_proj.bias.data[:] = 0
    np.testing.assert_array_equal(g.excitation_project(lat).data[:, 0], lat[:, 0])
    g.excitation_proj.weight.data[...] = 0
    g.excitation_proj.bias.data[:] = 0.7
    e = g.excitation_project(lat)
    assert e.shape == (1, 1, 10) and np.all(e.data == 0.7)
    with pytest.raises(ValueError):
        g.excitation_project(lat[:, :3])


def test_filter_zero_params_and_range():
    cfg = tiny()
    g = Generator(cfg)
    _, _, cond, _ = inputs(cfg)
    big = np.random.default_rng(2).standard_normal((1, 4, T)) * 50
    out = g.filter_forward(Tensor(big), Tensor(cond)).data
    assert np.all(np.abs(out) < 1)
    zero_all(g.filter_net)
    z = g.filter_forward(Tensor(np.zeros((1, 4, T))), Tensor(np.zeros_like(cond))).data
    assert np.all(z == 0)


def test_receptive_field():
    assert GeneratorConfig.full().filter_receptive_field() == 3069
    assert GeneratorConfig.toy().filter_receptive_field() == 3 * (1 + 2 + 4)


def test_full_preset_shape():
    cfg = GeneratorConfig.full()
    assert (cfg.harmonic_layers, cfg.harmonic_cycles, cfg.noise_layers, cfg.filter_layers,
            cfg.filter_cycles, cfg.residual_channels, cfg.cond_channels) == (20, 4, 5, 30, 3, 64, 46)
    with pytest.raises(ValueError):
        GeneratorConfig(harmonic_layers=7, harmonic_cycles=2)


def toy_features(n=8, f0=160.0):
    rng = np.random.default_rng(7)
    vuv = np.array([0, 1, 1, 1, 1, 1, 1, 0][:n], float)
    return AcousticFeatures(np.full(n, f0), vuv, rng.normal(0, 0.1, (n, 41)),
                            -np.abs(rng.normal(0, 5, (n, 3))))


def test_generate_length_and_determinism():
    g = Generator(tiny())
    feat = toy_features()
    s1, e1, w1, _ = g.generate(feat, seed=5)
    s2, e2, w2, _ = g.generate(feat, seed=5)
    assert len(s1) == feat.n_frames * feat.frame_shift == len(e1)
    assert s1.samples.tobytes() == s2.samples.tobytes()
    assert e1.samples.tobytes() == e2.samples.tobytes()
    np.testing.assert_array_equal(w1, w2)
    s3, *_ = g.generate(feat, seed=6)
    assert not np.array_equal(s1.samples, s3.samples)


def test_float32_close_to_float64():
    g = Generator(tiny())
    feat = toy_features()
    s64, *_ = g.generate(feat, seed=1)
    s32, *_ = g.generate(feat, seed=1, dtype=np.float32)
    assert np.max(np.abs(s64.samples - s32.samples)) < 1e-3
    # parameters are restored to float64 afterwards
    assert all(p.data.dtype == np.float64 for p in g.parameters())


def test_weights_override():
    g = Generator(tiny())
    feat = toy_features()
    _, e, w, _ = g.generate(feat, seed=2)
    _, e_same, _, _ = g.generate(feat, seed=2, weights_override=w[None])
    np.testing.assert_allclose(e_same.samples, e.samples, atol=1e-9)
    # the projection is affine in the latent, so a constant blend of 0.3
    # reassembles from the pure harmonic and pure noise excitations
    _, eh, _, _ = g.generate(feat, seed=2, weights_override=1.0)
    _, en, _, _ = g.generate(feat, seed=2, weights_override=0.0)
    _, mix, _, _ = g.generate(feat, seed=2, weights_override=0.3)
    np.testing.assert_allclose(mix.samples, 0.3 * eh.samples + 0.7 * en.samples, atol=1e-9)


def test_single_source_variant():
    cfg = tiny(source="single")
    g = Generator(cfg)
    assert not hasattr(g, "periodicity")
    speech, exc, w, src = g.generate(toy_features(), seed=0)
    assert w is None and src.harmonic is None
    assert len(speech) == len(exc)


def test_excitation_and_speech_share_latent():
    cfg = tiny()
    g = Generator(cfg)
    sine, noise, cond, d = inputs(cfg)
    speech, src = g(Tensor(sine), Tensor(noise), Tensor(cond), d)
    np.testing.assert_array_equal(g.excitation_project(src.latent).data, src.excitation.data)
    np.testing.assert_array_equal(g.filter_forward(src.latent, Tensor(cond)).data, speech.data)
