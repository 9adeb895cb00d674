import numpy as np
import pytest
import torch

from powerskel.ckdformer import CKDformer
from powerskel.datamodel import make_topology
from powerskel.distill import SinkhornConfig
from powerskel.synth import AugmentConfig, GeneratorConfig, generate_dataset
from powerskel.train import (
    TrainConfig,
    TrainingDiverged,
    evaluate,
    model_config_for,
    predict,
    prepare_inputs,
    train,
)

TOPO = make_topology(3, 8)  # e=6, k=48: small enough for fast epochs


@pytest.fixture(scope="module")
def tiny_data():
    cfg = GeneratorConfig(seed=13, n_train=32, n_test=16, topology=TOPO, noise_sigma=0.1)
    return generate_dataset(cfg)


def _train_config(**kw):
    defaults = dict(
        epochs=2,
        batch_size=8,
        lr=0.2,
        seed=4,
        use_saf=False,
        use_ckd=True,
        students=2,
        blocks=1,
        heads=2,
        d_ff=8,
        kernel=3,
        head_hidden=16,
        beta=0.5,
    )
    defaults.update(kw)
    return TrainConfig(**defaults)


def _sink():
    return SinkhornConfig(niter=30)


def _aug():
    return AugmentConfig(strong_noise_sigma=0.05, weak_shift_max=2, seed=0)


class TestModelConfig:
    def test_tokenizes_by_paths_when_divisible(self, tiny_data):
        train_ds, _ = tiny_data
        cfg = model_config_for(train_ds, _train_config(heads=2))
        assert cfg.backbone.tokens == TOPO.e
        assert cfg.backbone.d_token == TOPO.f

    def test_single_token_fallback(self, tiny_data):
        train_ds, _ = tiny_data
        cfg = model_config_for(train_ds, _train_config(heads=3, blocks=1))
        # f=8 not divisible by 3 heads: falls back to one token of width 48
        assert cfg.backbone.tokens == 1

    def test_single_token_flag(self, tiny_data):
        train_ds, _ = tiny_data
        cfg = model_config_for(train_ds, _train_config(single_token=True))
        assert cfg.backbone.tokens == 1

    def test_no_ckd_forces_one_student(self, tiny_data):
        train_ds, _ = tiny_data
        cfg = model_config_for(train_ds, _train_config(use_ckd=False, students=2))
        assert cfg.students == 1


class TestPrepareInputs:
    def test_raw_flatten(self, tiny_data):
        train_ds, _ = tiny_data
        X = prepare_inputs(train_ds, use_saf=False)
        assert X.shape == (32, TOPO.k)
        assert np.array_equal(X[0], train_ds.samples[0].csi.values.reshape(-1))

    def test_saf_path_shape(self, tiny_data):
        train_ds, _ = tiny_data
        X = prepare_inputs(train_ds, use_saf=True)
        assert X.shape == (32, TOPO.k)
        assert np.all(np.isfinite(X))


class TestTraining:
    def test_loss_descends(self, tiny_data):
        train_ds, _ = tiny_data
        result = train(train_ds, _train_config(epochs=5), sinkhorn=_sink(), augment=_aug())
        curve = result.loss_curve()
        assert curve[-1] < curve[0]

    def test_bit_identical_histories_same_seed(self, tiny_data):
        train_ds, _ = tiny_data
        a = train(train_ds, _train_config(), sinkhorn=_sink(), augment=_aug())
        b = train(train_ds, _train_config(), sinkhorn=_sink(), augment=_aug())
        for ea, eb in zip(a.history, b.history):
            assert ea.data_loss == eb.data_loss
            assert ea.ot_loss == eb.ot_loss
            assert ea.total_loss == eb.total_loss
        for pa, pb in zip(a.model.parameters(), b.model.parameters()):
            assert torch.equal(pa, pb)

    def test_different_seed_differs(self, tiny_data):
        train_ds, _ = tiny_data
        a = train(train_ds, _train_config(seed=4), sinkhorn=_sink(), augment=_aug())
        b = train(train_ds, _train_config(seed=5), sinkhorn=_sink(), augment=_aug())
        assert a.loss_curve() != b.loss_curve()

    def test_no_ckd_is_single_student_mae(self, tiny_data):
        train_ds, _ = tiny_data
        result = train(train_ds, _train_config(use_ckd=False), sinkhorn=_sink(), augment=_aug())
        for stats in result.history:
            assert len(stats.total_loss) == 1
            assert stats.ot_loss == [0.0]
            assert stats.total_loss == stats.data_loss

    def test_history_structure(self, tiny_data):
        train_ds, _ = tiny_data
        result = train(train_ds, _train_config(epochs=3), sinkhorn=_sink(), augment=_aug())
        assert len(result.history) == 3
        assert [e.epoch for e in result.history] == [0, 1, 2]
        assert all(len(e.total_loss) == 2 for e in result.history)

    def test_cosine_lr_decays(self, tiny_data):
        train_ds, _ = tiny_data
        result = train(
            train_ds, _train_config(epochs=3, cosine_lr=True), sinkhorn=_sink(), augment=_aug()
        )
        lrs = [e.lr for e in result.history]
        assert lrs[0] == pytest.approx(0.2)
        assert lrs[-1] == pytest.approx(0.0)
        assert lrs == sorted(lrs, reverse=True)

    def test_divergence_aborts_with_diagnostics(self, tiny_data):
        train_ds, _ = tiny_data
        config = _train_config(lr=1e9, grad_clip=0.0, epochs=2)
        with pytest.raises(TrainingDiverged) as err:
            train(train_ds, config, sinkhorn=_sink(), augment=_aug())
        assert err.value.epoch >= 0
        assert err.value.step >= 0


class TestEvaluate:
    def test_untrained_near_chance(self, tiny_data):
        train_ds, test_ds = tiny_data
        model = CKDformer(model_config_for(train_ds, _train_config()), seed=4)
        result = evaluate(test_ds, model, use_saf=False)
        # an untrained regressor outputs near-zero coordinates: almost
        # nothing lands within half a torso of the truth
        assert result.table.averages()[-1] <= 0.10

    def test_trained_beats_untrained(self, tiny_data):
        train_ds, test_ds = tiny_data
        config = _train_config(epochs=8, lr=0.5)
        trained = train(train_ds, config, sinkhorn=_sink(), augment=_aug())
        untrained = CKDformer(model_config_for(train_ds, config), seed=config.seed)
        pck_trained = evaluate(test_ds, trained.model, use_saf=False).table.averages()[-1]
        pck_untrained = evaluate(test_ds, untrained, use_saf=False).table.averages()[-1]
        assert pck_trained > pck_untrained

    def test_deterministic_reports(self, tiny_data):
        train_ds, test_ds = tiny_data
        model = CKDformer(model_config_for(train_ds, _train_config()), seed=9)
        a = evaluate(test_ds, model, use_saf=False)
        b = evaluate(test_ds, model, use_saf=False)
        assert a.report_text == b.report_text
        assert np.array_equal(a.predictions, b.predictions)

    def test_single_student_selection(self, tiny_data):
        train_ds, test_ds = tiny_data
        model = CKDformer(model_config_for(train_ds, _train_config()), seed=10)
        consensus = predict(test_ds, model, use_saf=False)
        student0 = predict(test_ds, model, use_saf=False, student=0)
        student1 = predict(test_ds, model, use_saf=False, student=1)
        assert not np.array_equal(student0, student1)
        assert np.allclose((student0 + student1) / 2, consensus, atol=1e-9)

    def test_empty_dataset_rejected(self, tiny_data):
        train_ds, _ = tiny_data
        from powerskel.datamodel import Dataset

        empty = Dataset(topology=TOPO, samples=(), split="test")
        model = CKDformer(model_config_for(train_ds, _train_config()), seed=1)
        with pytest.raises(ValueError):
            evaluate(empty, model, use_saf=False)
