"""Optimizer arithmetic, warm-up gating in the training loop, checkpoints and smoke runs."""
import numpy as np
import pytest

from rendezvous.autodiff import Tensor, backward
from rendezvous.encoder import ModelConfig
from rendezvous.errors import ConfigError, DivergenceError, FormatError
from rendezvous.models import VARIANTS, build_model
from rendezvous.synthetic import SyntheticConfig, generate_dataset
from rendezvous.train import (LOG_COLUMNS, RunConfig, SGDMomentum, batch_loss, evaluate_run, load_run,
                              make_loss_state, train)

DATA = SyntheticConfig(n_videos=3, frames_per_video=4)
MODEL = ModelConfig(depth=8, low_channels=4, wsl_channels=8, bottleneck_channels=8, decoder_layers=1)


def run_cfg(variant="rdv", **kw):
    return RunConfig(variant=variant, model=MODEL, data=DATA, **{"epochs": 2, "batch_size": 4, **kw})


@pytest.fixture(scope="module")
def dataset():
    return generate_dataset(DATA, 0)


def test_sgd_momentum_two_steps_by_hand():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = SGDMomentum([p], momentum=0.5)
    p.grad = np.array([0.2, 0.4])
    opt.step(0.1)
    np.testing.assert_allclose(p.data, [0.98, -2.04])
    opt.step(0.1)
    # v = 0.5 * (-0.02, -0.04) - 0.1 * (0.2, 0.4)
    np.testing.assert_allclose(p.data, [0.98 - 0.03, -2.04 - 0.06])


def test_gradient_clipping_rescales_to_the_ceiling():
    p = Tensor(np.array([0.0, 0.0]), requires_grad=True)
    opt = SGDMomentum([p], momentum=0.0, clip=1.0)
    p.grad = np.array([3.0, 4.0])
    opt.step(1.0)
    assert opt.last_norm == 5.0
    np.testing.assert_allclose(p.data, [-0.6, -0.8])


def test_zero_learning_rate_leaves_parameters_unchanged(dataset):
    res = train(run_cfg(lr=0.0), dataset)
    fresh = build_model("rdv", res.model.cfg, np.random.default_rng([0, 1]))
    for (name, a), (_, b) in zip(res.model.named_parameters(), fresh.named_parameters()):
        assert np.array_equal(a.data, b.data), name


@pytest.mark.parametrize("variant", VARIANTS)
def test_two_epoch_smoke_run_logs_finite_losses(variant, dataset, tmp_path):
    log = tmp_path / "log.csv"
    res = train(run_cfg(variant, epochs=3, warmup_epochs=1, lr=0.01), dataset, log_path=log)
    lines = log.read_text().splitlines()
    assert lines[0] == ",".join(LOG_COLUMNS) and len(lines) == 4
    assert all(np.isfinite(r["l_total"]) for r in res.log)
    if variant != "naive-cnn":
        assert [r["rho"] for r in res.log] == [0.0, 1.0, 1.0]


def test_warmup_gives_exactly_zero_gradient_to_association_only_parameters(dataset):
    cfg = run_cfg(warmup_epochs=5)
    model = build_model("rdv", ModelConfig(**{**MODEL.to_dict(), "n_instruments": dataset.vocab.C_I,
                                              "n_verbs": dataset.vocab.C_V, "n_targets": dataset.vocab.C_T,
                                              "n_triplets": dataset.vocab.C}), 0)
    state = make_loss_state(cfg, dataset)
    loss, terms = batch_loss(model, state, dataset.train.images[:4], dataset.train.labels[:4],
                             dataset.vocab, 0, np.random.default_rng(0))
    assert terms["rho"] == 0.0
    backward(loss)
    for p in model.assoc_parameters():
        assert p.grad is None or not np.any(p.grad)
    assert any(p.grad is not None and np.any(p.grad) for p in model.component_parameters())


def test_divergence_is_reported(dataset):
    with pytest.raises(DivergenceError):
        train(run_cfg(lr=1e30, epochs=3, warmup_epochs=0, log_var_range=None), dataset)


def test_checkpoint_roundtrip_reproduces_the_report(dataset, tmp_path):
    ck = tmp_path / "run.json"
    res = train(run_cfg(), dataset, checkpoint_path=ck)
    model, cfg = load_run(ck)
    assert cfg.variant == "rdv"
    np.testing.assert_allclose(model.predict(dataset.test.images), res.model.predict(dataset.test.images),
                               rtol=1e-6, atol=1e-9)
    assert evaluate_run(ck, "test", dataset).mean_ap.keys() == {"i", "v", "t", "iv", "it", "ivt"}


def test_bad_manifest_raises_format_error(tmp_path):
    from rendezvous.autodiff import save_checkpoint

    ck = tmp_path / "bad.json"
    save_checkpoint(ck, {}, {"nothing": 1})
    with pytest.raises(FormatError):
        load_run(ck)


def test_run_config_validation_and_schedule():
    cfg = RunConfig(epochs=200, lr=0.1, decay_every=50)
    assert cfg.warmup == 18
    assert cfg.lr_at(49) == 0.1 and cfg.lr_at(50) == pytest.approx(0.01)
    assert RunConfig.from_dict(cfg.to_dict()) == cfg
    for bad in ({"variant": "x"}, {"lr": -1.0}, {"momentum": 1.0}, {"grad_clip": 0.0},
                {"log_var_range": (1.0, 0.0)}, {"unknown": 3}):
        with pytest.raises(ConfigError):
            RunConfig.from_dict(bad)


def test_image_size_mismatch_is_a_config_error(dataset):
    with pytest.raises(ConfigError):
        train(RunConfig(model=ModelConfig(image_hw=(16, 16)), data=DATA, epochs=1), dataset)
