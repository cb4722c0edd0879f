from dataclasses import replace

import numpy as np
import pytest

from hnusfgan import training as tr
from hnusfgan.features import estimate_f0
from hnusfgan.losses import LossWeights
from hnusfgan.nn import Tensor
from hnusfgan.nn.tensor import make_node

SEG = 1200


def small_corpus(n=2, frames=40, seed=0):
    return tr.make_synthetic_corpus(tr.SyntheticCorpusSpec(n_utterances=n, n_frames=frames), seed)


def cfg_for(variant="hn-usfgan", **kw):
    kw.setdefault("segment_length", 2400 if variant == "-mel-loss" else SEG)
    kw.setdefault("checkpoint_every", 0)
    return tr.TrainingConfig.for_variant(variant, **kw)


def test_config_text_round_trip(tmp_path):
    cfg = tr.TrainingConfig.for_variant("-hifi-d", iterations=77, seed=3, lr_g=1e-4,
                                        segment_length=2400)
    back = tr.parse_config_text(cfg.to_text())
    assert back == cfg
    path = tmp_path / "c.txt"
    path.write_text("variant = -reg-loss  # ablation\n\niterations=12\nlambda_spc = 3.5\n")
    loaded = tr.load_config(path)
    assert loaded.iterations == 12 and loaded.weights.reg_mode == "off"
    assert loaded.weights.lambda_spc == 3.5


def test_config_errors():
    with pytest.raises(ValueError, match="unknown key"):
        tr.parse_config_text("colour = blue\n")
    with pytest.raises(ValueError, match="key = value"):
        tr.parse_config_text("iterations\n")
    with pytest.raises(ValueError, match="multiple of 120"):
        tr.TrainingConfig(segment_length=8192)
    with pytest.raises(ValueError, match="receptive field"):
        tr.TrainingConfig(preset="full", segment_length=2400)
    with pytest.raises(ValueError):
        tr.TrainingConfig(variant="-everything")


def test_variants_map_to_components():
    assert tr.TrainingConfig.for_variant("-reg-loss").weights.reg_mode == "off"
    assert tr.TrainingConfig.for_variant("-hn-sn").generator_config().source == "single"
    hifi = tr.TrainingConfig.for_variant("-hifi-d")
    assert hifi.discriminator_config().kind == "pwg"
    mel = tr.TrainingConfig.for_variant("-mel-loss").weights
    assert mel.spc_mode == "multires_stft" and mel.lambda_spc == 15.0
    full = tr.TrainingConfig()
    assert full.weights == LossWeights()
    assert full.lr_at(2e-4, 10 ** 6) == 2e-4
    decayed = replace(full, lr_decay_every=100)
    assert decayed.lr_at(2e-4, 250) == pytest.approx(5e-5)
    big = tr.TrainingConfig(preset="full", segment_length=15360)
    assert big.lr_at(2e-4, 199_999) == 2e-4
    assert big.lr_at(2e-4, 400_000) == pytest.approx(5e-5)
    with pytest.raises(ValueError):
        tr.TrainingConfig(lr_decay_every=-2)


def test_corpus_ground_truth_and_determinism():
    a = small_corpus(frames=120)
    b = small_corpus(frames=120)
    for u, v in zip(a, b):
        assert u.audio.samples.tobytes() == v.audio.samples.tobytes()
        assert u.features.cont_f0.tobytes() == v.features.cont_f0.tobytes()
    for u in a:
        f = u.features
        voiced = f.vuv > 0
        assert np.all((f.f0[voiced] >= 80) & (f.f0[voiced] <= 300))
        assert f.n_samples == len(u.audio)
    assert not np.array_equal(a[0].audio.samples, small_corpus(frames=120, seed=1)[0].audio.samples)


def test_tracker_recovers_corpus_contour():
    for u in small_corpus(n=4, frames=200, seed=5):
        f0, vuv = estimate_f0(u.audio)
        n = min(len(f0), u.features.n_frames)
        both = (vuv[:n] > 0) & (u.features.vuv[:n] > 0)
        assert both.sum() > 20
        assert np.median(np.abs(f0[:n][both] - u.features.f0[:n][both])) < 3.0


def _step_models(corpus, cfg):
    models = tr.build_models(cfg, tr.FeatureNormalizer.fit([u.features for u in corpus]))
    prepared = tr.prepare_corpus(models.generator, corpus, cfg.seed)
    return models, prepared


def test_train_step_parameter_partition():
    corpus = small_corpus()
    cfg = cfg_for(dtype="float64")
    models, prepared = _step_models(corpus, cfg)
    batch = tr.sample_batch(prepared, cfg, np.random.default_rng(0))
    g_params = [p.data.copy() for p in models.generator.parameters()]
    d_params = [p.data.copy() for p in models.discriminators.parameters()]

    g_step, models.opt_g.step = models.opt_g.step, lambda: None
    record = tr.train_step(batch, models, cfg)
    assert set(record) == {"discriminator", "reg", "spc", "adv", "generator", "mel"}
    # only the critic moved
    assert all(np.array_equal(a, p.data) for a, p in zip(g_params, models.generator.parameters()))
    assert any(not np.array_equal(a, p.data)
               for a, p in zip(d_params, models.discriminators.parameters()))

    models.opt_g.step = g_step
    d_params = [p.data.copy() for p in models.discriminators.parameters()]
    models.opt_d.step = lambda: None
    tr.train_step(batch, models, cfg)
    assert all(np.array_equal(a, p.data)
               for a, p in zip(d_params, models.discriminators.parameters()))
    assert any(not np.array_equal(a, p.data)
               for a, p in zip(g_params, models.generator.parameters()))


def test_spectral_regression_overfits_one_utterance():
    corpus = small_corpus(n=1, frames=SEG // 120)
    w = LossWeights(lambda_adv=0.0, reg_mode="off")
    cfg = cfg_for(weights=w, lr_g=1e-3)
    models, prepared = _step_models(corpus, cfg)
    rng = np.random.default_rng(0)
    losses = [tr.train_step(tr.sample_batch(prepared, cfg, rng), models, cfg, i)["spc"]
              for i in range(100)]
    assert np.mean(losses[-10:]) < 0.7 * np.mean(losses[:10])


def test_nan_aborts_with_node_name(monkeypatch):
    corpus = small_corpus()
    cfg = cfg_for()
    models, prepared = _step_models(corpus, cfg)
    batch = tr.sample_batch(prepared, cfg, np.random.default_rng(0))

    def poisoned(gen, ref, weights):
        x = Tensor(np.array(1.0), requires_grad=True)
        with np.errstate(invalid="ignore"):
            return make_node(np.array(np.nan), (x,), lambda g: (g,), "poison") * 2.0
    monkeypatch.setattr(tr, "spectral_loss", poisoned)
    with pytest.raises(tr.TrainingDiverged) as info:
        tr.train_step(batch, models, cfg, iteration=4)
    assert info.value.loss_name == "spc" and info.value.op == "poison"
    assert "iteration 4" in str(info.value)


def test_every_parameter_receives_gradient():
    corpus = small_corpus()
    cfg = cfg_for(dtype="float64")
    models, prepared = _step_models(corpus, cfg)
    seen = {}

    def recording(opt, named):
        inner = opt.step

        def step():
            for name, p in named:
                g = 0.0 if p.grad is None else float(np.abs(p.grad).sum())
                seen[name] = seen.get(name, 0.0) + g
            inner()
        return step
    models.opt_g.step = recording(models.opt_g, list(models.generator.named_parameters()))
    models.opt_d.step = recording(
        models.opt_d, [("d." + n, p) for n, p in models.discriminators.named_parameters()])
    rng = np.random.default_rng(0)
    for i in range(len(corpus)):
        tr.train_step(tr.sample_batch(prepared, cfg, rng), models, cfg, i)
    dead = [n for n, v in seen.items() if v == 0.0]
    assert not dead


def _log_bytes(out):
    return (out / tr.LOG_NAME).read_bytes()


def test_same_seed_same_log_and_checkpoint(tmp_path):
    corpus = small_corpus()
    cfg = cfg_for(iterations=4, dtype="float64")
    tr.train(cfg, corpus, tmp_path / "a")
    tr.train(cfg, corpus, tmp_path / "b")
    assert _log_bytes(tmp_path / "a") == _log_bytes(tmp_path / "b")
    assert (tmp_path / "a" / tr.CKPT_NAME).read_bytes() == (tmp_path / "b" / tr.CKPT_NAME).read_bytes()
    rows = tr.read_loss_log(tmp_path / "a" / tr.LOG_NAME)
    assert {r[0] for r in rows} == {0, 1, 2, 3}
    other = tr.train(replace(cfg, seed=1), corpus, tmp_path / "c")
    assert _log_bytes(tmp_path / "c") != _log_bytes(tmp_path / "a")
    assert other.checkpoint.exists()


@pytest.mark.parametrize("dtype", ["float64", "float32"])
def test_resume_matches_unbroken_run(tmp_path, dtype):
    corpus = small_corpus()
    cfg = cfg_for(iterations=6, checkpoint_every=3, dtype=dtype)
    tr.train(cfg, corpus, tmp_path / "full")
    tr.train(cfg, corpus, tmp_path / "part", stop_at=4)  # checkpoint at 3, log runs to 4
    tr.train(cfg, corpus, tmp_path / "part", resume=True)
    assert _log_bytes(tmp_path / "full") == _log_bytes(tmp_path / "part")
    assert ((tmp_path / "full" / tr.CKPT_NAME).read_bytes()
            == (tmp_path / "part" / tr.CKPT_NAME).read_bytes())
    with pytest.raises(ValueError, match="differs"):
        tr.train(replace(cfg, lr_g=1e-3), corpus, tmp_path / "part", resume=True)


def test_checkpoint_resave_is_identical(tmp_path):
    corpus = small_corpus()
    cfg = cfg_for(iterations=2)
    res = tr.train(cfg, corpus, tmp_path)
    models, cfg2, it, rng = tr.restore_training_state(res.checkpoint)
    assert it == 2 and cfg2 == cfg
    tr.save_training_state(tmp_path / "again.usfc", models, cfg2, it, rng)
    assert res.checkpoint.read_bytes() == (tmp_path / "again.usfc").read_bytes()
    gen = tr.load_generator(res.checkpoint)
    speech, *_ = gen.generate(corpus[0].features, seed=0)
    assert len(speech) == corpus[0].features.n_samples


@pytest.mark.parametrize("variant", tr.VARIANTS)
def test_every_variant_trains(tmp_path, variant):
    res = tr.train(cfg_for(variant, iterations=2), small_corpus(), tmp_path)
    names = {r[1] for r in tr.read_loss_log(res.loss_log)}
    assert "mel" in names and "generator" in names
    assert ("reg" in names) == (variant != "-reg-loss")


def test_corpus_disk_round_trip(tmp_path):
    corpus = small_corpus()
    tr.save_corpus(corpus, tmp_path)
    back = tr.load_corpus(tmp_path)
    assert [u.name for u in back] == [u.name for u in corpus]
    np.testing.assert_allclose(back[0].audio.samples, corpus[0].audio.samples, atol=1e-7)
    with pytest.raises(ValueError):
        tr.load_corpus(tmp_path / "missing")


def test_window_means():
    rows = [(i, "mel", float(i)) for i in range(10)] + [(0, "adv", 5.0)]
    assert tr.window_means(rows, "mel", 3) == (1.0, 8.0)
    with pytest.raises(ValueError):
        tr.window_means(rows, "adv", 3)
