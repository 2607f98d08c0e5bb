import csv

import numpy as np
import pytest

from at2l.attacks import fgsm_config, ll_config
from at2l.autodiff import Tensor
from at2l.data import synthetic_2d
from at2l.models import Model, build_model, load_checkpoint, mlp_spec, predict_labels
from at2l.training import (SGD, NumericError, TrainConfig, TrainingConfigError, probe_objective, sgd_step, train,
                           train_adversarial, train_at2l, train_ensemble_at2l, train_plain, train_with_regularizer)
from at2l.triplet import LossWeights

SPEC = mlp_spec("m", [16], num_classes=4)


@pytest.fixture(scope="module")
def data():
    return synthetic_2d("four_gaussians", 256, 0.4, seed=0)


def _cfg(**kw):
    base = dict(outer_rounds=3, learning_rate=0.05, negative_mode="multiclass_anylabel",
                attack_set=[fgsm_config(0.1)], seed=1)
    base.update(kw)
    return TrainConfig(**base)


def _scalar_model(theta):
    spec = mlp_spec("s", [], input_shape=(1,), num_classes=2)
    m = build_model(spec, 0)
    m.params["0.w"].data[...] = theta
    return m


def test_sgd_step_exact_and_lr_zero():
    m = _scalar_model(0.5)
    before = m.params["0.w"].data.copy()
    sgd_step(m, {"0.w": np.full((1, 2), 2.0)}, 0.0)
    assert np.array_equal(m.params["0.w"].data, before)
    sgd_step(m, {"0.w": np.full((1, 2), 2.0)}, 0.1)
    assert np.array_equal(m.params["0.w"].data, before - 0.1 * 2.0)


def test_sgd_rejects_nonfinite_and_wrong_shape():
    m = _scalar_model(0.5)
    with pytest.raises(NumericError):
        sgd_step(m, {"0.w": np.array([[np.nan, 0.0]])}, 0.1)
    with pytest.raises(ValueError):
        sgd_step(m, {"0.w": np.zeros(3)}, 0.1)


@pytest.mark.parametrize("momentum", [0.0, 0.5])
def test_quadratic_converges_to_analytic_minimum(momentum):
    target = np.array([[1.5, -2.0]])
    m = Model(mlp_spec("q", [], input_shape=(1,)), {"0.w": Tensor(np.zeros((1, 2)), True), "0.b": Tensor(np.zeros(2), True)})
    opt = SGD(m, 0.1, momentum)
    for _ in range(300):
        # grad of 0.5 * ||w - target||^2
        opt.step({"0.w": m.params["0.w"].data - target})
    assert np.allclose(m.params["0.w"].data, target, atol=1e-8)


def test_plain_training_separates_noiseless_data():
    ds = synthetic_2d("two_gaussians", 64, 0.0, seed=0)
    model, trace = train_plain(mlp_spec("b", [8]), ds, TrainConfig(outer_rounds=20, learning_rate=0.5))
    assert np.all(predict_labels(model, ds.x) == ds.y)
    assert len(trace.records) == 20


def test_plain_loss_decreases_within_noise():
    finals = []
    for seed in range(5):
        ds = synthetic_2d("four_gaussians", 256, 0.3, seed=seed)
        _, trace = train_plain(SPEC, ds, TrainConfig(outer_rounds=6, learning_rate=0.05, seed=seed))
        losses = [r.train_loss for r in trace.records]
        finals.append(losses[-1] <= losses[0])
    assert np.median(finals) == 1


def test_config_invariants():
    with pytest.raises(TrainingConfigError):
        TrainConfig(batch_size=1)
    with pytest.raises(TrainingConfigError):
        TrainConfig(outer_rounds=0)
    with pytest.raises(TrainingConfigError):
        TrainConfig(negative_mode="hard")


def test_negative_mode_is_mandatory_for_triplet_modes(data):
    with pytest.raises(TrainingConfigError, match="negative_mode"):
        train_at2l(SPEC, data, _cfg(negative_mode=None))
    train_adversarial(SPEC, data, _cfg(negative_mode=None, outer_rounds=1))


def test_at2l_needs_single_model_set(data):
    with pytest.raises(TrainingConfigError):
        train_at2l(SPEC, data, _cfg(model_set=[SPEC, mlp_spec("o", [4], num_classes=4)]))


def _hashes(model, trace):
    return [r.param_hash for r in trace.records] + [model.param_hash()]


def test_lambda2_zero_reproduces_baseline_bitwise(data):
    a = train_at2l(SPEC, data, _cfg(weights=LossWeights(0.3, 0.0)))
    b = train_adversarial(SPEC, data, _cfg(weights=LossWeights(0.3, 1.0)))
    assert _hashes(*a) == _hashes(*b)


def test_all_zero_weights_reproduce_plain_bitwise(data):
    a = train_at2l(SPEC, data, _cfg(weights=LossWeights(0.0, 0.0)))
    b = train_plain(SPEC, data, _cfg())
    assert _hashes(*a) == _hashes(*b)


def test_regularizer_with_zero_weight_is_plain(data):
    from at2l.training import default_host_loss

    a = train_with_regularizer(SPEC, data, default_host_loss, _cfg(weights=LossWeights(0.3, 0.0)))
    b = train_plain(SPEC, data, _cfg())
    assert _hashes(*a) == _hashes(*b)


def test_ensemble_with_one_pair_equals_single_model(data):
    a = train_at2l(SPEC, data, _cfg())
    b = train_ensemble_at2l(SPEC, data, _cfg(model_set=[SPEC]))
    assert _hashes(*a) == _hashes(*b)


def test_training_is_deterministic(data):
    a = train_at2l(SPEC, data, _cfg(negative_mode="multiclass_advclass"))
    b = train_at2l(SPEC, data, _cfg(negative_mode="multiclass_advclass"))
    assert _hashes(*a) == _hashes(*b)
    assert [r.fallback_count for r in a[1].records] == [r.fallback_count for r in b[1].records]
    assert sum(r.fallback_count for r in a[1].records) > 0


def test_adversarials_are_regenerated_against_current_model(data):
    seen = []
    cfg = _cfg()
    from at2l import training

    real = training.generate

    def spy(model, *args, **kw):
        batch = real(model, *args, **kw)
        seen.append(batch.param_hash)
        return batch

    training.generate = spy
    try:
        model, trace = train_at2l(SPEC, data, cfg)
    finally:
        training.generate = real
    assert seen == [r.param_hash for r in trace.records]
    assert len(set(seen)) == cfg.outer_rounds


def test_trace_loss_equals_reevaluated_probe_loss(data, tmp_path):
    snapshots = {}
    model, trace = train_at2l(SPEC, data, _cfg(), checkpoint_dir=tmp_path,
                              on_round=lambda r, m, t: snapshots.__setitem__(r, m.copy()))
    for rec in trace.records:
        again = probe_objective("at2l", snapshots[rec.round], trace.probe, _cfg())[0]
        assert abs(again - rec.loss) <= 1e-9
        ck = load_checkpoint(tmp_path / f"at2l_round{rec.round:03d}.ckpt")
        assert ck.param_hash() == snapshots[rec.round].param_hash()


def test_ensemble_uses_static_models_and_mixed_attacks(data):
    other = mlp_spec("other", [8], num_classes=4)
    cfg = _cfg(model_set=[SPEC, other], attack_set=[fgsm_config(0.1), ll_config(0.1)])
    model, trace = train_ensemble_at2l(SPEC, data, cfg)
    assert len(trace.records) == 3 and model.name == "m"


def test_trace_csv_columns(data, tmp_path):
    _, trace = train_at2l(SPEC, data, _cfg(), eval_data=data, eval_attacks=[fgsm_config(0.1)])
    trace.to_csv(tmp_path / "t.csv")
    rows = list(csv.reader(open(tmp_path / "t.csv")))
    assert rows[0] == ["round", "clean_err", "FGSM", "loss_ce_clean", "loss_ce_adv", "loss_triplet", "fallback_count"]
    assert len(rows) == 4 and rows[-1][0] == "3"


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_aborts(data):
    with pytest.raises(NumericError):
        train_plain(SPEC, data, _cfg(learning_rate=1e300, outer_rounds=2))


def test_early_stop(data):
    _, trace = train_plain(SPEC, data, _cfg(outer_rounds=30, early_stop_tol=10.0))
    assert len(trace.records) == 2
