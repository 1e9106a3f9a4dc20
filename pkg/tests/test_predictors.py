from __future__ import annotations

import numpy as np
import pytest
from fdcheck import numeric_grads, rel_error

from safechance import nn, predictors as P
from safechance import sim


def test_kl_zero_at_prior():
    assert P.kl_divergence(np.zeros((1, 4)), np.zeros((1, 4)))[0] == 0.0


def test_kl_matches_monte_carlo():
    rng = np.random.default_rng(0)
    mean, log_var = np.array([1.0, -1.5, 0.5]), np.array([0.3, -0.4, 0.2])
    std = np.exp(0.5 * log_var)
    z = mean + std * rng.standard_normal((100_000, 3))
    log_q = -0.5 * np.sum(((z - mean) / std) ** 2 + log_var + np.log(2 * np.pi), axis=1)
    log_p = -0.5 * np.sum(z**2 + np.log(2 * np.pi), axis=1)
    mc = float(np.mean(log_q - log_p))
    assert P.kl_divergence(mean, log_var) == pytest.approx(mc, rel=0.01)


def _tiny_vae(rng, lambda1=1.0):
    return P.new_vae(rng, latent_dim=2, hidden=4, lambda1=lambda1, n_pixels=6)


def test_vae_gradient_matches_finite_differences():
    for trial in range(10):
        rng = np.random.default_rng(trial)
        vae = _tiny_vae(rng, lambda1=rng.uniform(0.1, 2.0))
        for p in vae.enc.params() + vae.dec.params():
            p += rng.normal(scale=0.2, size=p.shape)
        x = rng.uniform(size=(5, 6))
        noise = rng.standard_normal((5, 2))
        _, grads = P.vae_loss_and_grad(vae, x, noise)
        num = numeric_grads(lambda: P.vae_loss_and_grad(vae, x, noise)[0], vae.enc.params() + vae.dec.params())
        assert rel_error(grads, num) < 1e-4


def test_vae_shape_invariants():
    rng = np.random.default_rng(0)
    enc = nn.init_net([6, 4, 4], ["tanh", "identity"], rng)
    dec = nn.init_net([3, 4, 6], ["tanh", "sigmoid"], rng)
    with pytest.raises(ValueError, match="decoder input"):
        P.VaeEncoder(enc, dec, 2)


@pytest.fixture(scope="module")
def small_world():
    trajs = [sim.random_rollout(s, 120) for s in range(60)]
    frames = np.concatenate([t.frames for t in trajs])
    cfg = nn.TrainConfig(batch_size=64, max_epochs=6)
    vae, _ = P.train_vae(frames, cfg, latent_dim=8, hidden=64)
    return trajs, frames, vae


def test_lambda_zero_reconstructs_at_least_as_well(small_world):
    _, frames, _ = small_world
    sub = frames[::4]
    cfg = nn.TrainConfig(batch_size=64, max_epochs=6)
    mses = {}
    for lam in (0.0, 1.0):
        vae, _ = P.train_vae(sub, cfg, lambda1=lam, latent_dim=8, hidden=64)
        recon = P.decode(vae, P.encode(vae, sub))
        mses[lam] = float(np.mean((recon - sim.to_pixels(sub)) ** 2))
    assert mses[0.0] <= mses[1.0]


def test_train_vae_rejects_bad_inputs():
    with pytest.raises(ValueError):
        P.train_vae(np.zeros((0, 32, 32), np.uint8), nn.TrainConfig())
    with pytest.raises(ValueError):
        P.train_vae(np.zeros((4, 32, 32), np.uint8), nn.TrainConfig(), lambda1=-1)


def test_encode_deterministic_and_shapes(small_world):
    _, frames, vae = small_world
    a, b = P.encode(vae, frames[0]), P.encode(vae, frames[0])
    assert a.shape == (8,) and np.array_equal(a, b)
    assert P.encode(vae, frames[:5]).shape == (5, 8)
    # batched BLAS may sum in a different order than the single-row path
    assert np.allclose(P.encode(vae, frames[:5])[0], a, rtol=0, atol=1e-12)
    assert P.decode(vae, a).shape == (1024,)
    out = P.decode(vae, P.encode(vae, frames[:5]))
    assert out.min() >= 0 and out.max() <= 1


def test_forecaster_requires_frozen_encoder(small_world):
    trajs, _, vae = small_world
    ds = sim.build_dataset(trajs[:5], 4, 5)
    thawed = P.VaeEncoder(vae.enc, vae.dec, vae.latent_dim)
    with pytest.raises(RuntimeError, match="VAE first"):
        P.train_forecaster(thawed, ds, nn.TrainConfig(max_epochs=1))


def test_forecaster_shape_contract(small_world):
    trajs, _, vae = small_world
    ds = sim.build_dataset(trajs[:10], 4, 5)
    f, _ = P.train_forecaster(vae, ds, nn.TrainConfig(max_epochs=1), n=3)
    assert f.net.layer_dims[-1] == 3 * 8
    lat = P.encode(vae, ds.frames)
    assert P.forecast(f, P.window_features(lat, ds, [0, 1])).shape == (2, 3, 8)
    with pytest.raises(ValueError, match="exceeds horizon"):
        P.LatentForecaster(f.net, 4, 6, 5, 8)


def test_forecaster_static_trajectories(small_world):
    _, _, vae = small_world
    rng = np.random.default_rng(0)
    trajs = []
    for s in range(40):
        state = np.array([rng.uniform(-2, 2), 0, rng.uniform(-0.4, 0.4), 0])
        frame = sim.render(state)[0]
        trajs.append(sim.Trajectory(np.tile(state, (30, 1)), np.tile(frame, (30, 1, 1)), np.zeros(29), s))
    train, test = sim.build_dataset(trajs[:30], 4, 5), sim.build_dataset(trajs[30:], 4, 5)
    f, _ = P.train_forecaster(vae, train, nn.TrainConfig(max_epochs=200, batch_size=32, learning_rate=3e-3))
    lat = P.encode(vae, test.frames)
    pred = P.forecast(f, P.window_features(lat, test))[:, -1]
    truth = P.forecast_targets(lat, test, 1)
    mse = np.mean((pred - truth) ** 2)
    assert mse < 0.1 * np.mean(np.var(lat, axis=0))


def test_short_horizon_easier_than_long(small_world):
    trajs, _, vae = small_world
    lat_cache = {}
    errs = {}
    for k in (1, 30):
        tr, te = sim.build_dataset(trajs[:45], 4, k), sim.build_dataset(trajs[45:], 4, k)
        f, _ = P.train_forecaster(vae, tr, nn.TrainConfig(max_epochs=10, batch_size=64))
        lat = lat_cache.setdefault("te", P.encode(vae, te.frames))
        pred = P.forecast(f, P.window_features(lat, te))[:, -1]
        errs[k] = float(np.mean((pred - P.forecast_targets(lat, te, 1)) ** 2))
    assert errs[1] < errs[30]


def _logit_head(logits_out):
    """Head whose output logits are fixed regardless of input (zero weights)."""
    return nn.DenseNet([np.zeros((1, 2))], [np.asarray(logits_out, float)], ["softmax"])


def test_label_scores_argmax_and_shift_invariance():
    z = np.log([0.9, 0.1])
    labels, probs, _ = P._label_scores(_logit_head(z), np.zeros((1, 1)))
    assert labels[0] == 0 and probs[0, 0] == pytest.approx(0.9)
    labels2, probs2, _ = P._label_scores(_logit_head(z + 7.5), np.zeros((1, 1)))
    assert labels2[0] == labels[0]
    assert np.allclose(probs2, probs)


def test_predict_monolithic_single_and_batch_agree(small_world):
    trajs, _, vae = small_world
    ds = sim.build_dataset(trajs[:20], 4, 5)
    p, _ = P.train_monolithic(vae, ds, nn.TrainConfig(max_epochs=2))
    batch = P.predict_monolithic_batch(p, ds, idx=[3])
    label, probs = P.predict_monolithic(p, ds.window(3))
    assert label == batch.labels[0]
    assert np.allclose(probs, batch.probs[0])
    assert np.all(batch.labels == batch.probs.argmax(axis=1))


def test_pixel_monolithic_trains_and_predicts(small_world):
    trajs, _, _ = small_world
    ds = sim.build_dataset(trajs[:5], 2, 5)
    p, _ = P.train_monolithic(None, ds, nn.TrainConfig(max_epochs=1))
    assert p.head.layer_dims[0] == 2 * 1025
    assert len(P.predict_monolithic_batch(p, ds).labels) == len(ds)


def test_composite_runs_and_oracle_substitution(small_world):
    trajs, _, vae = small_world
    ds = sim.build_dataset(trajs[:20], 4, 5)
    lat = P.encode(vae, ds.frames)
    f, _ = P.train_forecaster(vae, ds, nn.TrainConfig(max_epochs=1), latents=lat)
    future = lat[ds.ends + ds.k]
    y_now = np.abs(ds.states[:, 2]) <= sim.SAFE_ANGLE
    v, _ = P.train_evaluator(lat, y_now.astype(int), nn.TrainConfig(max_epochs=2), "latent")
    pred = P.predict_composite_batch(vae, f, v, ds, latents=lat)
    assert pred.probs.shape == (len(ds), 2)
    label, _ = P.predict_composite(vae, f, v, ds.window(0))
    assert label == pred.labels[0]
    # oracle latents injected in place of the forecast give the evaluator's own outputs
    oracle = nn.forward(v.net, P.evaluator_inputs(v, future[:, None, :]))
    assert np.array_equal(oracle, v.probs(future))


def test_stage_mismatch_named(small_world):
    trajs, _, vae = small_world
    ds = sim.build_dataset(trajs[:5], 4, 5)
    f, _ = P.train_forecaster(vae, ds, nn.TrainConfig(max_epochs=1))
    bad = P.Evaluator(P.classifier(5, 4, np.random.default_rng(0)), "latent")
    with pytest.raises(ValueError, match="evaluator stage"):
        P.predict_composite_batch(vae, f, bad, ds)
    ds6 = sim.build_dataset(trajs[:5], 6, 5)
    good = P.Evaluator(P.classifier(8, 4, np.random.default_rng(0)), "latent")
    with pytest.raises(ValueError, match="forecaster stage"):
        P.predict_composite_batch(vae, f, good, ds6)


def test_retrained_encoder_invalidates_forecaster(small_world):
    trajs, frames, vae = small_world
    ds = sim.build_dataset(trajs[:5], 4, 5)
    f, _ = P.train_forecaster(vae, ds, nn.TrainConfig(max_epochs=1))
    vae2, _ = P.train_vae(frames[:500], nn.TrainConfig(max_epochs=1, seed=3), latent_dim=8, hidden=64)
    v = P.Evaluator(P.classifier(8, 4, np.random.default_rng(0)), "latent")
    with pytest.raises(RuntimeError, match="different encoder"):
        P.predict_composite_batch(vae2, f, v, ds)


def test_composite_image_with_passthrough_stub():
    rng = np.random.default_rng(0)
    d = 1024
    enc = nn.DenseNet([np.hstack([np.eye(d), np.zeros((d, d))])], [np.zeros(2 * d)], ["identity"])
    dec = nn.DenseNet([np.eye(d)], [np.zeros(d)], ["identity"])
    vae = P.VaeEncoder(enc, dec, d, frozen=True)
    w = np.zeros((d + 1, d))
    w[:d] = np.eye(d)  # forecast = last latent
    f = P.LatentForecaster(nn.DenseNet([w], [np.zeros(d)], ["identity"]), 1, 1, 3, d, vae.fingerprint)
    v = P.Evaluator(P.classifier(d, 8, rng), "image")
    trajs = [sim.random_rollout(s, 30) for s in range(2)]
    ds = sim.build_dataset(trajs, 1, 3)
    pred = P.predict_composite_image_batch(vae, f, v, ds)
    direct = v.probs(sim.to_pixels(ds.frames[ds.ends]))
    assert np.allclose(pred.probs, direct, atol=1e-12)


def test_evaluator_single_class_rejected():
    with pytest.raises(ValueError, match="single class"):
        P.train_evaluator(np.zeros((10, 3)), np.ones(10, int), nn.TrainConfig(max_epochs=1), "latent")


def test_evaluator_constant_input_majority_rate():
    x = np.ones((100, 3))
    y = np.array([1] * 70 + [0] * 30)
    net, _ = P.train_classifier(x, y, nn.TrainConfig(max_epochs=200, learning_rate=1e-2), hidden=4, balance=False)
    acc = np.mean(nn.forward(net, x).argmax(axis=1) == y)
    assert acc == pytest.approx(0.7)


def test_evaluator_requires_softmax_pair():
    with pytest.raises(ValueError):
        P.Evaluator(nn.mlp([3, 2], np.random.default_rng(0)), "latent")
    with pytest.raises(ValueError):
        P.Evaluator(P.classifier(3, 2, np.random.default_rng(0)), "pixels")
