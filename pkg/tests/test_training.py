import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from posture_forecaster import autodiff as ad
from posture_forecaster.autodiff import Tape, Tensor
from posture_forecaster.models import BLSTM, BlstmConfig, Transformer, TransformerConfig
from posture_forecaster.motion.markers import get_segment
from posture_forecaster.motion.preprocess import (fit_normalizer, make_windows, pair_lengths, segment_frames)
from posture_forecaster.motion.recording import TaskRecording
from posture_forecaster.training import (BEST_COEFFICIENT, SEARCH_SPACE, EarlyStopping, History,
                                         PlateauScheduler, RandomSearch, TrainConfig, TrainingDivergedError,
                                         decode_grid_index, grid_size, hyperparameter_search, kinematic_loss,
                                         segment_lengths, train)

ARMS = get_segment("arms")
LEGS = get_segment("legs")


def test_segment_length_345():
    frame = np.array([0.0, 0.0, 0.0, 300.0, 400.0, 0.0])
    assert segment_lengths(frame, [(0, 1)]).data == pytest.approx([500.0])


def test_segment_length_counts(one_task):
    arms = segment_frames(one_task, ARMS)
    legs = segment_frames(one_task, LEGS)
    assert segment_lengths(arms, ARMS.pair_indices()).shape == (101, 4)
    assert segment_lengths(legs, LEGS.pair_indices()).shape == (101, 2)


def test_a_zero_is_plain_mse(rng):
    pred, y = rng.normal(size=(4, 42)), rng.normal(size=(4, 42))
    assert kinematic_loss(pred, y, None, ARMS.pair_indices(), 0.0).data == ad.mse(pred, y).data


def test_worked_constraint_penalty(one_task):
    y = segment_frames(one_task, ARMS)[30:31]
    ref = pair_lengths(y, ARMS.pair_indices()) + 1.0
    loss = kinematic_loss(y, y, ref, ARMS.pair_indices(), a=10.0)
    assert float(loss.data) == pytest.approx(40.0, rel=1e-9)


def test_perfect_prediction_gives_zero(one_task):
    y = segment_frames(one_task, ARMS)[40:44]
    ref = pair_lengths(y, ARMS.pair_indices())
    assert float(kinematic_loss(y, y, ref, ARMS.pair_indices(), a=10.0).data) == pytest.approx(0.0, abs=1e-18)


def test_missing_reference_lengths_rejected(rng):
    with pytest.raises(ValueError, match="reference lengths"):
        kinematic_loss(rng.normal(size=(2, 42)), rng.normal(size=(2, 42)), None, ARMS.pair_indices(), 1.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 20.0))
def test_constraint_loss_bounds_mse(seed, a):
    rng = np.random.default_rng(seed)
    pred = rng.normal(scale=200, size=(3, 36))
    y = pred + rng.normal(size=(3, 36))
    ref = rng.uniform(300, 500, size=(3, 2))
    mse = float(ad.mse(pred, y).data)
    assert float(kinematic_loss(pred, y, ref, LEGS.pair_indices(), a).data) > mse
    exact = pair_lengths(pred, LEGS.pair_indices())
    assert float(kinematic_loss(pred, y, exact, LEGS.pair_indices(), a).data) == pytest.approx(mse, rel=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=3))
def test_constraint_loss_translation_invariant(seed, shift):
    rng = np.random.default_rng(seed)
    pred = rng.normal(scale=200, size=(2, 42))
    y = rng.normal(scale=200, size=(2, 42))
    ref = rng.uniform(250, 350, size=(2, 4))
    t = np.tile(shift, 14)
    base = float(kinematic_loss(pred, y, ref, ARMS.pair_indices(), 10.0).data)
    moved = float(kinematic_loss(pred + t, y + t, ref, ARMS.pair_indices(), 10.0).data)
    assert moved == pytest.approx(base, rel=1e-9)


def test_constraint_gradient_vanishes_at_reference_lengths(rng):
    pred = Tensor(rng.normal(scale=200, size=(3, 36)), requires_grad=True)
    y = rng.normal(scale=200, size=(3, 36))
    ref = pair_lengths(pred.data, LEGS.pair_indices())
    with Tape() as t1:
        l1 = kinematic_loss(pred, y, ref, LEGS.pair_indices(), 5.0)
    with Tape() as t2:
        l2 = ad.mse(pred, y)
    np.testing.assert_allclose(t1.backward(l1)[pred], t2.backward(l2)[pred], rtol=0, atol=1e-15)


def test_normalized_constraint_space_scales_penalty(rng):
    stats = fit_normalizer(rng.normal(scale=100, size=(50, 25, 43)))
    pred = rng.normal(size=(2, 36))
    ref = np.full((2, 2), 400.0)
    mse = float(ad.mse(pred, pred).data)
    mm = float(kinematic_loss(pred, pred, ref, LEGS.pair_indices(), 1.0, stats, "mm").data) - mse
    nz = float(kinematic_loss(pred, pred, ref, LEGS.pair_indices(), 1.0, stats, "normalized").data) - mse
    assert nz == pytest.approx(mm / stats.divisor[:36].mean() ** 2, rel=1e-9)


def test_best_coefficients():
    assert BEST_COEFFICIENT == {"arms": 10.0, "legs": 1.0}


def test_train_config_defaults():
    b, t = TrainConfig.for_model("blstm"), TrainConfig.for_model("transformer")
    assert (b.epochs, b.batch_size, b.lr) == (150, 256, 1e-2)
    assert (t.epochs, t.batch_size, t.lr) == (200, 512, 1e-3)
    assert (t.lr_factor, t.lr_patience, t.min_lr, t.early_stop_patience) == (0.1, 5, 1e-7, 15)
    with pytest.raises(ValueError):
        TrainConfig(a=-1.0)
    with pytest.raises(ValueError):
        TrainConfig(constraint_space="px")


def test_scheduler_drops_after_five_stagnant_epochs():
    s = PlateauScheduler(1e-3, 0.1, 5, 1e-7)
    lrs = [s.step(1.0)] + [s.step(1.0) for _ in range(5)]
    assert lrs[:5] == [1e-3] * 5
    assert lrs[5] == pytest.approx(1e-4)


def test_scheduler_respects_floor():
    s = PlateauScheduler(1e-6, 0.1, 1, 1e-7)
    for _ in range(10):
        lr = s.step(1.0)
    assert lr == 1e-7


def test_early_stopping():
    e = EarlyStopping(3)
    assert [e.step(v) for v in (3.0, 2.0, 2.5, 2.5, 2.0)] == [False, False, False, False, True]


def test_history_csv_round_trip():
    h = History([1, 2], [0.5, 0.25], [0.6, 0.3], [1e-3, 1e-4])
    text = h.to_csv()
    assert text.splitlines()[0] == "epoch,train_loss,val_loss,lr"
    back = History.from_csv(text)
    assert (back.epoch, back.train_loss, back.val_loss, back.lr) == (h.epoch, h.train_loss, h.val_loss, h.lr)


def _tiny_transformer(seg, seed=0):
    return Transformer.init(TransformerConfig(seg.n_features, 3 * seg.n_markers, model_width=8, heads=2,
                                              feedforward_width=8, head_hidden=8, decoder_layers=1), seed)


def test_training_is_reproducible(one_task):
    w = make_windows(one_task, LEGS)
    cfg = TrainConfig.for_model("transformer", epochs=4, batch_size=16, a=1.0, seed=3)
    _, h1 = train(_tiny_transformer(LEGS), w[:60], w[60:], cfg, LEGS)
    _, h2 = train(_tiny_transformer(LEGS), w[:60], w[60:], cfg, LEGS)
    np.testing.assert_allclose(h1.train_loss, h2.train_loss, rtol=0, atol=1e-12)
    np.testing.assert_allclose(h1.val_loss, h2.val_loss, rtol=0, atol=1e-12)


def test_normalizer_comes_from_training_windows(small_dataset):
    tr = [w for r in small_dataset[:4] for w in make_windows(r, LEGS)]
    va = [w for r in small_dataset[4:] for w in make_windows(r, LEGS)]
    cfg = TrainConfig.for_model("transformer", epochs=1, batch_size=64)
    ck, _ = train(_tiny_transformer(LEGS), tr, va, cfg, LEGS)
    ref = fit_normalizer(tr)
    np.testing.assert_array_equal(ck.stats.mean, ref.mean)
    np.testing.assert_array_equal(ck.stats.std, ref.std)
    # changing the validation data leaves the statistics untouched
    ck2, _ = train(_tiny_transformer(LEGS), tr, va[::-1][:50], cfg, LEGS)
    np.testing.assert_array_equal(ck2.stats.mean, ref.mean)


def test_constant_target_converges(one_task):
    # a motionless posture: every label equals every input frame
    frames = np.broadcast_to(one_task.frames[:1], one_task.frames.shape).copy()
    rec = TaskRecording(**{**one_task.__dict__, "frames": frames})
    w = make_windows(rec, LEGS)
    model = BLSTM.init(BlstmConfig(LEGS.n_features, 36, hidden_units=8), 0)
    cfg = TrainConfig.for_model("blstm", epochs=40, batch_size=16, early_stop_patience=40)
    ck, h = train(model, w, w, cfg, LEGS)
    best = np.minimum.accumulate(h.val_loss)
    assert np.all(np.diff(best) <= 0)
    assert best[-1] < 1e-3 * h.val_loss[0]
    assert h.best_epoch == int(np.argmin(h.val_loss)) + 1


def test_best_weights_are_restored(one_task):
    w = make_windows(one_task, LEGS)
    cfg = TrainConfig.for_model("transformer", epochs=6, batch_size=8, lr=5e-2)
    ck, h = train(_tiny_transformer(LEGS), w[:50], w[50:], cfg, LEGS)
    from posture_forecaster.training import evaluate_loss, prepare
    assert evaluate_loss(ck.model, prepare(w[50:], ck.stats)) == pytest.approx(min(h.val_loss), rel=1e-12)


def test_non_finite_loss_aborts_with_location(one_task):
    w = make_windows(one_task, LEGS)
    model = _tiny_transformer(LEGS)
    model.params["out.b"].data[0] = np.nan
    with pytest.raises(TrainingDivergedError, match="epoch 1, batch 0"):
        train(model, w, w, TrainConfig.for_model("transformer", epochs=1), LEGS)


def test_empty_windows_rejected():
    with pytest.raises(ValueError):
        train(_tiny_transformer(LEGS), [], [], TrainConfig(), LEGS)


# -- hyperparameter search ------------------------------------------------------------


def test_search_space_size():
    assert grid_size(SEARCH_SPACE) == 3 * 3 * 4 * 4 * 4 * 3 * 7 == 12096


def test_decode_covers_grid_bijectively():
    space = {"a": [1, 2], "b": ["x", "y", "z"]}
    decoded = [tuple(decode_grid_index(space, i).values()) for i in range(6)]
    assert len(set(decoded)) == 6


def test_budget_one_returns_the_sampled_config():
    seen = []
    best, trials = hyperparameter_search(lambda p: seen.append(p) or 1.0, budget=1, seed=4)
    assert len(trials) == 1 and best == seen[0]


def test_search_rejects_empty_budget():
    with pytest.raises(ValueError):
        hyperparameter_search(lambda p: 0.0, budget=0)


def test_trials_stay_inside_space():
    _, trials = hyperparameter_search(lambda p: 0.0, budget=200, seed=1)
    for t in trials:
        for k, v in t.params.items():
            assert v in SEARCH_SPACE[k]
    assert len({tuple(t.params.values()) for t in trials}) == 200


def test_rigged_objective_over_full_grid():
    target = {"model_width": 96, "heads": 16, "feedforward_width": 512, "encoder_layers": 1,
              "decoder_layers": 3, "head_hidden": 64, "dropout": 0.25}

    def rigged(p):
        return sum(abs(p[k] - target[k]) / (1 + abs(target[k])) for k in target)

    best, trials = hyperparameter_search(rigged, budget=grid_size(SEARCH_SPACE), seed=0)
    assert best == target
    assert len(trials) == 12096


def test_search_is_seeded():
    a = [t.params for t in hyperparameter_search(lambda p: 0.0, 5, seed=2)[1]]
    b = [t.params for t in hyperparameter_search(lambda p: 0.0, 5, seed=2)[1]]
    assert a == b
    assert RandomSearch(SEARCH_SPACE, 0).ask() == RandomSearch(SEARCH_SPACE, 0).ask()
