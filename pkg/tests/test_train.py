import csv

import numpy as np
import pytest

from shefu.dataset import SynthConfig, generate_synthetic
from shefu.embedder import Mode
from shefu.errors import ContractError, DivergenceError
from shefu.model import Model, Variant, init_params
from shefu.optim import AdamState
from shefu.train import (
    Encoded,
    TrainConfig,
    best_from_curve,
    build_variant,
    evaluate,
    evaluate_encoded,
    joint_accuracy,
    model_config_for,
    params_checksum,
    train,
    train_step,
    write_metrics,
)

DIMS = dict(d_model=8, layers=2, heads=2, dropout=0.1)


@pytest.fixture(scope="module")
def tiny():
    return generate_synthetic(SynthConfig(n_scenes=40, split_sizes=(48, 16, 16), seed=11))


@pytest.fixture(scope="module")
def run(tiny):
    return train(TrainConfig(steps=12, eval_every=3, batch_size=4, lr=1e-3, seed=2), tiny, "shefu", DIMS)


def test_one_evaluation_per_interval(run):
    val = [r for r in run.report.curve if r["split"] == "val"]
    assert [r["step"] for r in val] == [3, 6, 9, 12]


def test_ten_evaluations_at_reference_ratio(tiny):
    # 20000 / 2000 keeps the same ratio as 20 / 2
    res = train(TrainConfig(steps=20, eval_every=2, batch_size=2, lr=1e-3, seed=0), tiny, "shefu", DIMS)
    assert sum(r["split"] == "val" for r in res.report.curve) == 10


def test_best_step_reproduced_from_curve(run):
    assert best_from_curve(run.report.curve) == run.report.best_step
    assert run.report.best_step in {r["step"] for r in run.report.curve if r["split"] == "val"}


def test_reported_test_accuracy_is_from_best_params(run, tiny):
    assert evaluate(run.model, tiny.splits["test"], tiny.vocab) == run.report.test_accuracy


def test_checksum_matches_returned_params(run):
    assert params_checksum(run.model.cfg, run.model.params, run.run_config) == run.report.checksum


def test_same_seed_same_checksum(tiny, run):
    again = train(TrainConfig(steps=12, eval_every=3, batch_size=4, lr=1e-3, seed=2), tiny, "shefu", DIMS)
    assert again.report.checksum == run.report.checksum
    assert again.report.curve == run.report.curve


def test_different_seed_different_checksum(tiny, run):
    other = train(TrainConfig(steps=12, eval_every=3, batch_size=4, lr=1e-3, seed=3), tiny, "shefu", DIMS)
    assert other.report.checksum != run.report.checksum


def test_best_from_curve_earliest_tie():
    curve = [
        {"step": 2, "split": "val", "accuracy": 0.5},
        {"step": 4, "split": "val", "accuracy": 0.75},
        {"step": 6, "split": "val", "accuracy": 0.75},
        {"step": 4, "split": "test", "accuracy": 1.0},
    ]
    assert best_from_curve(curve) == 4


def test_best_from_curve_needs_val_rows():
    with pytest.raises(ContractError):
        best_from_curve([{"step": 1, "split": "test", "accuracy": 1.0}])


def test_uneven_steps_warn(tiny):
    with pytest.warns(UserWarning):
        train(TrainConfig(steps=5, eval_every=2, batch_size=2, lr=1e-3), tiny, "shefu", DIMS)


def test_train_needs_val_split(tiny):
    from shefu.dataset import Dataset

    partial = Dataset({"train": tiny.splits["train"]}, tiny.vocab, tiny.feature_dim, tiny.max_regions, tiny.config)
    with pytest.raises(ContractError):
        train(TrainConfig(steps=2, eval_every=1), partial, "shefu", DIMS)


# accuracy -----------------------------------------------------------------------------

def test_three_of_four():
    assert joint_accuracy([True, False, True, True], [True, False, False, True]) == 0.75


def test_all_positive_predictor_on_quarter_positive_set():
    truth = np.array([True, False, False, False] * 5)
    assert joint_accuracy(np.ones(20, bool), truth) == 0.25


def test_accuracy_is_one_minus_hamming():
    rng = np.random.default_rng(0)
    a, b = rng.random(50) > 0.5, rng.random(50) > 0.5
    assert joint_accuracy(a, b) == pytest.approx(1 - np.mean(a != b))


def test_empty_accuracy_rejected():
    with pytest.raises(ContractError):
        joint_accuracy([], [])


def test_empty_split_rejected(tiny):
    m = build_variant("shefu", model_config_for(tiny, **DIMS))
    with pytest.raises(ContractError):
        evaluate(m, [], tiny.vocab)


class _Oracle(Model):
    """Predicts the true per-mode labels; used to check the joint composition."""

    def __init__(self, base, y_targ, y_dest):
        super().__init__(base.cfg, base.params)
        self._labels = {Mode.TARGET: y_targ, Mode.DESTINATION: y_dest}

    def probabilities(self, inputs, mode):
        return self._labels[mode][: len(inputs)].astype(float)


def test_perfect_per_mode_predictions_give_perfect_joint(tiny):
    data = Encoded.from_samples(tiny.splits["val"], tiny.vocab, model_config_for(tiny, **DIMS))
    base = build_variant("shefu", model_config_for(tiny, **DIMS))
    assert evaluate_encoded(_Oracle(base, data.y_targ, data.y_dest), data) == 1.0


# variants --------------------------------------------------------------------------------

def test_variant_parameter_counts_differ(tiny):
    cfg = model_config_for(tiny, **DIMS)
    n = {v: build_variant(v, cfg).parameter_count() for v in Variant}
    assert n[Variant.SHEFU] != n[Variant.NO_SWITCHING_TAIL]
    assert n[Variant.SHEFU] == n[Variant.NO_SWITCHING_HEAD]
    assert n[Variant.PAIRED_BASELINE] == n[Variant.NO_SWITCHING_TAIL]


@pytest.mark.parametrize("variant", list(Variant))
def test_every_variant_trains(tiny, variant):
    res = train(TrainConfig(steps=4, eval_every=2, batch_size=4, lr=1e-3, seed=1), tiny, variant, DIMS)
    assert 0.0 <= res.report.test_accuracy <= 1.0
    assert res.report.variant == variant.value


# single-mode steps and divergence ---------------------------------------------------------

def _batch(tiny, n=4):
    cfg = model_config_for(tiny, **DIMS)
    data = Encoded.from_samples(tiny.splits["train"][:n], tiny.vocab, cfg)
    return cfg, data


@pytest.mark.parametrize("mode,idle", [(Mode.TARGET, "dest"), (Mode.DESTINATION, "targ")])
def test_single_mode_step_leaves_idle_head_alone(tiny, mode, idle):
    cfg, data = _batch(tiny)
    params = init_params(cfg, 0)
    state = AdamState(lr=1e-2)
    train_step(params, cfg, data, state, rng=np.random.default_rng(0))
    saved = {k: (state.m[k].copy(), state.v[k].copy(), params[k].copy()) for k in params if k.startswith(f"head.{idle}.")}
    train_step(params, cfg, data, state, modes=[mode], rng=np.random.default_rng(1))
    for k, (m, v, p) in saved.items():
        assert state.m[k].tobytes() == m.tobytes()
        assert state.v[k].tobytes() == v.tobytes()
        assert params[k].tobytes() == p.tobytes()


def test_nan_loss_raises_divergence(tiny):
    cfg, data = _batch(tiny)
    params = init_params(cfg, 0)
    params["head.targ.w"][:] = np.nan
    with pytest.raises(DivergenceError):
        train_step(params, cfg, data, AdamState(), rng=np.random.default_rng(0))


def test_metrics_csv_columns(run, tmp_path):
    write_metrics(tmp_path / "m.csv", run.report.curve)
    rows = list(csv.DictReader(open(tmp_path / "m.csv")))
    assert list(rows[0]) == ["step", "split", "accuracy", "loss"]
    assert [r["split"] for r in rows].count("val") == 4
    assert float(rows[0]["accuracy"]) == run.report.curve[0]["accuracy"]
