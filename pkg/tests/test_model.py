import numpy as np
import pytest

from mmae.data import Modality, SynthSpec, TripletDataset, batch_iter, fit_dataset_stats, standardize_dataset, synth_triplets
from mmae.exceptions import CheckpointError, ConfigError, NumericsError, ShapeError
from mmae.model import (
    MmaeConfig,
    MultimodalAutoencoder,
    embed,
    load_checkpoint,
    mmae_forward,
    mmae_grad_check,
    mmae_init,
    mmae_loss,
    save_checkpoint,
    train,
)
from mmae.nn import EVAL, TRAIN, AdamState, adam_step, mse_loss

I, A, T = Modality.IMAGE, Modality.AUDIO, Modality.TEXT
TOY = dict(input_dims=(4, 6, 5), latent_dim=3, hidden_sizes=(4, 4))


def toy_batch(rng, n=8, dims=(4, 6, 5)):
    return tuple(rng.normal(size=(n, d)) for d in dims)


def easy_data(n_classes=5, per_class=40, dims=(8, 12, 10), seed=42):
    d = synth_triplets(SynthSpec(n_classes, per_class, dims, 10.0, 1.0, seed))
    return standardize_dataset(d, fit_dataset_stats(d))


# -- init --------------------------------------------------------------------


def test_default_image_encoder_dims():
    net = mmae_init(MmaeConfig())
    assert net.encoders[I].sizes == [50, 128, 128, 128]
    assert net.decoders[A].sizes == [128, 128, 128, 1024]
    assert net.decoders[T].out_dim == 768


def test_init_deterministic():
    a, b = mmae_init(MmaeConfig(**TOY)), mmae_init(MmaeConfig(**TOY))
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a.parameters(), b.parameters()))
    c = mmae_init(MmaeConfig(**TOY, seed=1))
    assert any(x.tobytes() != y.tobytes() for x, y in zip(a.parameters(), c.parameters()))


def test_latent_two_chains():
    net = mmae_init(MmaeConfig(input_dims=(3, 4, 5), latent_dim=2, hidden_sizes=(6,)))
    for m in (I, A, T):
        assert net.encoders[m].out_dim == net.decoders[m].in_dim == 2
        assert net.encoders[m].in_dim == net.decoders[m].out_dim


@pytest.mark.parametrize("kwargs", [
    dict(latent_dim=0), dict(loss_weights=(0, 0, 0)), dict(loss_weights=(1, -1, 1)),
    dict(fusion="max"), dict(align_weight=-0.1), dict(epochs=0), dict(input_dims=(1, 2)),
])
def test_config_rejects(kwargs):
    with pytest.raises(ConfigError):
        MmaeConfig(**kwargs)


# -- forward -------------------------------------------------------------------


def test_zero_inputs_zero_final_layers(rng):
    net = mmae_init(MmaeConfig(**TOY))
    for m in (I, A, T):
        net.encoders[m].layers[-1].weights[...] = 0.0
    trace = mmae_forward(net, tuple(np.zeros((4, d)) for d in TOY["input_dims"]))
    for m in (I, A, T):
        np.testing.assert_array_equal(trace.z[m], trace.z_fused)


def test_single_modality_fusion(rng):
    net = mmae_init(MmaeConfig(**TOY, fusion="image"))
    trace = mmae_forward(net, toy_batch(rng))
    np.testing.assert_array_equal(trace.z_fused, trace.z[I])


def test_mean_fusion(rng):
    trace = mmae_forward(mmae_init(MmaeConfig(**TOY)), toy_batch(rng))
    np.testing.assert_allclose(trace.z_fused, (trace.z[I] + trace.z[A] + trace.z[T]) / 3, atol=1e-12, rtol=0)


def test_forward_shape_mismatch(rng):
    net = mmae_init(MmaeConfig(**TOY))
    with pytest.raises(ShapeError):
        mmae_forward(net, toy_batch(rng, dims=(4, 6, 6)))


# -- loss --------------------------------------------------------------------


def test_perfect_reconstruction(rng):
    cfg = MmaeConfig(**TOY, align_weight=0.3)
    trace = mmae_forward(mmae_init(cfg), toy_batch(rng))
    targets = tuple(trace.reconstructions[m] for m in (I, A, T))
    loss = mmae_loss(trace, targets, cfg)
    assert loss.rec_image == loss.rec_audio == loss.rec_text == 0.0
    assert loss.total == cfg.align_weight * loss.align


def test_weight_mask(rng):
    cfg = MmaeConfig(**TOY, loss_weights=(1, 0, 0))
    batch = toy_batch(rng)
    trace = mmae_forward(mmae_init(cfg), batch)
    loss = mmae_loss(trace, batch, cfg)
    assert loss.total == loss.rec_image
    noisy = (batch[0], batch[1] + 100.0, batch[2] * 3.0)
    assert mmae_loss(trace, noisy, cfg).total == loss.total


def test_total_is_weighted_sum(rng):
    cfg = MmaeConfig(**TOY, loss_weights=(0.3, 1.7, 2.2), align_weight=0.4)
    batch = toy_batch(rng)
    trace = mmae_forward(mmae_init(cfg), batch)
    loss = mmae_loss(trace, batch, cfg)
    rec = [np.mean((trace.reconstructions[m] - x) ** 2) for m, x in zip((I, A, T), batch)]
    pairs = [(I, A), (I, T), (A, T)]
    align = np.mean([np.mean(np.sum((trace.z[a] - trace.z[b]) ** 2, axis=1)) for a, b in pairs])
    np.testing.assert_allclose([loss.rec_image, loss.rec_audio, loss.rec_text], rec, rtol=0, atol=1e-12)
    assert abs(loss.align - align) < 1e-12
    assert abs(loss.total - (0.3 * rec[0] + 1.7 * rec[1] + 2.2 * rec[2] + 0.4 * align)) < 1e-12
    assert min(loss.as_row()) >= 0


def test_align_zero_when_disabled(rng):
    cfg = MmaeConfig(**TOY)
    batch = toy_batch(rng)
    assert mmae_loss(mmae_forward(mmae_init(cfg), batch), batch, cfg).align == 0.0


def test_sum_reconstruction(rng):
    cfg = MmaeConfig(**TOY, reconstruction="sum")
    batch = toy_batch(rng)
    trace = mmae_forward(mmae_init(cfg), batch)
    loss = mmae_loss(trace, batch, cfg)
    expected = np.sum((trace.reconstructions[A] - batch[1]) ** 2) / batch[1].shape[0]
    assert abs(loss.rec_audio - expected) < 1e-12


@pytest.mark.parametrize("c", [2.0, 0.25, 8.0])
def test_weight_scaling_exact(rng, c):
    batch = toy_batch(rng)
    base = MmaeConfig(**TOY, loss_weights=(0.5, 1.25, 3.0))
    scaled = MmaeConfig(**TOY, loss_weights=tuple(c * w for w in base.loss_weights))
    trace = mmae_forward(mmae_init(base), batch, update_stats=False)
    assert mmae_loss(trace, batch, scaled).total == c * mmae_loss(trace, batch, base).total


def test_weight_scaling_general(rng):
    batch = toy_batch(rng)
    base = MmaeConfig(**TOY, loss_weights=(0.5, 1.25, 3.0))
    scaled = MmaeConfig(**TOY, loss_weights=(1.5, 3.75, 9.0))
    trace = mmae_forward(mmae_init(base), batch)
    np.testing.assert_allclose(mmae_loss(trace, batch, scaled).total, 3 * mmae_loss(trace, batch, base).total,
                               rtol=1e-14)


# -- gradients ---------------------------------------------------------------


@pytest.mark.parametrize("kwargs", [
    {}, dict(align_weight=0.1), dict(fusion="audio"), dict(reconstruction="sum", loss_weights=(1, 2, 0.5)),
])
def test_joint_gradients(rng, kwargs):
    net = mmae_init(MmaeConfig(**TOY, **kwargs))
    rep = mmae_grad_check(net, toy_batch(rng))
    assert rep.passed, rep


# -- training ----------------------------------------------------------------


def test_single_modality_reduces_to_autoencoder():
    data = easy_data(per_class=10)
    cfg = MmaeConfig(input_dims=data.dims, latent_dim=4, hidden_sizes=(8,), loss_weights=(1, 0, 0),
                     fusion="image", batch_size=16, epochs=3)
    _, history = train(mmae_init(cfg), data, cfg)

    # the same two networks trained as a plain autoencoder
    ref = mmae_init(cfg)
    enc, dec = ref.encoders[I], ref.decoders[I]
    params = enc.parameters() + dec.parameters()
    state = AdamState(lr=cfg.learning_rate)
    totals = []
    for epoch in range(1, cfg.epochs + 1):
        losses, sizes = [], []
        for batch in batch_iter(data, cfg.batch_size, shuffle=True, seed=cfg.seed, epoch=epoch):
            z, tz = enc.forward(batch.image, TRAIN)
            y, ty = dec.forward(z, TRAIN)
            loss, g = mse_loss(y, batch.image)
            gz, dgrads = dec.backward(ty, g)
            _, egrads = enc.backward(tz, gz)
            adam_step(params, egrads + dgrads, state)
            losses.append(loss)
            sizes.append(batch.size)
        totals.append(float(np.asarray(sizes, float) @ np.asarray(losses) / sum(sizes)))
    np.testing.assert_array_equal(history.totals, totals)


def test_loss_decreases_on_easy_data():
    data = easy_data()
    cfg = MmaeConfig(input_dims=data.dims, latent_dim=8, hidden_sizes=(16, 16), batch_size=32, epochs=50)
    _, history = train(mmae_init(cfg), data, cfg)
    assert len(history.records) == 50
    assert history.totals[-1] < 0.1 * history.totals[0]


def test_lr_zero_keeps_parameters():
    data = easy_data(per_class=8)
    cfg = MmaeConfig(input_dims=data.dims, latent_dim=3, hidden_sizes=(4,), learning_rate=0.0,
                     batch_size=16, epochs=2)
    net = mmae_init(cfg)
    before = [p.copy() for p in net.parameters()]
    train(net, data, cfg)
    for a, b in zip(before, net.parameters()):
        np.testing.assert_array_equal(a, b)


def test_training_deterministic():
    data = easy_data(per_class=8)
    cfg = MmaeConfig(input_dims=data.dims, latent_dim=3, hidden_sizes=(4,), batch_size=16, epochs=3)
    a, ha = train(mmae_init(cfg), data, cfg)
    b, hb = train(mmae_init(cfg), data, cfg)
    np.testing.assert_array_equal(ha.totals, hb.totals)
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a.parameters(), b.parameters()))


def test_nonfinite_loss_aborts_with_last_good_state(rng):
    x = rng.normal(size=(20, 3)) * 1e200
    data = TripletDataset.from_arrays(x, x, x, np.zeros(20, int))
    cfg = MmaeConfig(input_dims=(3, 3, 3), latent_dim=2, hidden_sizes=(3,), batch_size=10, epochs=2)
    net = mmae_init(cfg)
    before = net.state()
    with np.errstate(over="ignore", invalid="ignore"), pytest.raises(NumericsError) as info:
        train(net, data, cfg)
    for a, b in zip(before, info.value.checkpoint.state()):
        np.testing.assert_array_equal(a, b)


def test_train_dim_mismatch():
    data = easy_data(per_class=4)
    with pytest.raises(ShapeError):
        train(mmae_init(MmaeConfig(**TOY)), data)


def test_history_csv(tmp_path):
    data = easy_data(per_class=4)
    cfg = MmaeConfig(input_dims=data.dims, latent_dim=2, hidden_sizes=(3,), batch_size=8, epochs=2)
    _, history = train(mmae_init(cfg), data, cfg)
    path = tmp_path / "h.csv"
    history.to_csv(path, "run 1")
    lines = path.read_text().splitlines()
    assert lines[0] == "# run 1"
    assert lines[1] == "epoch,rec_I,rec_A,rec_T,align,total"
    assert len(lines) == 4 and float(lines[-1].split(",")[-1]) == history.totals[-1]


# -- embedding and checkpoints ---------------------------------------------


@pytest.fixture(scope="module")
def trained():
    data = easy_data(per_class=10)
    cfg = MmaeConfig(input_dims=data.dims, latent_dim=4, hidden_sizes=(8, 8), batch_size=16, epochs=3)
    net, _ = train(mmae_init(cfg), data, cfg)
    return net, data


def test_fused_embedding_is_mean(trained):
    net, data = trained
    parts = [embed(net, data, s) for s in ("image", "audio", "text")]
    np.testing.assert_allclose(embed(net, data, "fused"), sum(parts) / 3, atol=1e-6)


def test_embed_repeatable(trained):
    net, data = trained
    a, b = embed(net, data), embed(net, data)
    np.testing.assert_array_equal(a, b)
    assert a.shape == (data.n_samples, 4)


def test_embed_blocks_do_not_matter(trained):
    net, data = trained
    np.testing.assert_allclose(embed(net, data, block=7), embed(net, data), rtol=0, atol=1e-12)


def test_embed_row_permutation(trained, rng):
    net, data = trained
    perm = rng.permutation(data.n_samples)
    np.testing.assert_allclose(embed(net, data.take(perm)), embed(net, data)[perm], rtol=0, atol=1e-12)


def test_embed_rejects_bad_dims(trained, rng):
    net, _ = trained
    with pytest.raises(ShapeError):
        embed(net, toy_batch(rng, dims=(8, 12, 9)))


def test_checkpoint_round_trip(trained, tmp_path):
    net, data = trained
    net.extras["image.mean"] = np.arange(3.0)
    path = tmp_path / "m.ckpt"
    save_checkpoint(net, path)
    back = load_checkpoint(path)
    for source in ("fused", "image", "audio", "text"):
        assert embed(back, data, source).tobytes() == embed(net, data, source).tobytes()
    np.testing.assert_array_equal(back.extras["image.mean"], np.arange(3.0))
    assert back.config == net.config


def test_checkpoint_fresh_init(tmp_path):
    net = mmae_init(MmaeConfig(**TOY))
    save_checkpoint(net, tmp_path / "f.ckpt")
    back = load_checkpoint(tmp_path / "f.ckpt")
    for a, b in zip(net.state(), back.state()):
        np.testing.assert_array_equal(a, b)


def test_checkpoint_corruption(tmp_path):
    path = tmp_path / "c.ckpt"
    save_checkpoint(mmae_init(MmaeConfig(**TOY)), path)
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) // 2])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
    path.write_bytes(blob[:8] + (2).to_bytes(4, "little") + blob[12:])
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)
    path.write_bytes(b"XXXXXXXX" + blob[8:])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


# -- estimator -------------------------------------------------------------


def test_estimator(tmp_path):
    data = easy_data(per_class=6)
    est = MultimodalAutoencoder(latent_dim=3, hidden_sizes=(4,), batch_size=8, epochs=2)
    assert est.get_params()["latent_dim"] == 3
    z = est.fit(data).transform(data)
    assert z.shape == (data.n_samples, 3)
    recon = est.reconstruct(data.arrays)
    assert [r.shape for r in recon] == [x.shape for x in data.arrays]
    assert est.score(data.arrays) <= 0
    est.save(tmp_path / "e.ckpt")
    np.testing.assert_array_equal(MultimodalAutoencoder.load(tmp_path / "e.ckpt").transform(data), z)
    assert len(est.history_.records) == 2


def test_estimator_float32():
    data = easy_data(per_class=6)
    est = MultimodalAutoencoder(latent_dim=3, hidden_sizes=(4,), batch_size=8, epochs=2, dtype="float32").fit(data)
    assert est.transform(data).dtype == np.float32
    assert np.isfinite(est.history_.totals).all()


def test_eval_mode_uses_running_stats(trained):
    net, data = trained
    batch = data.arrays
    a = mmae_forward(net, batch, EVAL)
    b = mmae_forward(net, tuple(x[:1] for x in batch), EVAL)
    np.testing.assert_allclose(b.z_fused, a.z_fused[:1], atol=1e-12)
