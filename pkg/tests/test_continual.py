import numpy as np
import pytest

from dsgreplay import tensor as T
from dsgreplay.continual import (ClMethod, DiffusionSettings, ReplayBuffer, StreamError, TrainProtocol,
                                 classifier_update_step, label_replay, load_generator, rng_stream, run_stream,
                                 train_classifier)
from dsgreplay.data import LabeledDataset, SynthSpec, Task, TaskStream, make_synthetic, split_stream
from dsgreplay.dsg import DsgConfig
from dsgreplay.nn import ClassifierConfig, ClassifierModel
from dsgreplay.stopping import early_stop_check
from dsgreplay.tensor import Tensor

FAST = TrainProtocol(channels=(8, 16), max_epochs=30, patience=5, dropout_rate=0.0)


def small_stream(num_classes=4, cpt=2, seed=0, per_class=60, length=16):
    spec = SynthSpec(num_classes=num_classes, classes_per_task=cpt, channels=2, length=length,
                     train_per_class=per_class, test_per_class=20, seed=seed)
    return split_stream(make_synthetic(spec), cpt, None, spec.train_ratio, np.random.default_rng(seed))


class LogitTable:
    """Stand-in classifier whose logits are the flattened input rows."""

    def __call__(self, x, train=False, rng=None):
        return Tensor(x.data.reshape(x.shape[0], -1))


# --- early stopping -----------------------------------------------------------


def test_early_stop_examples():
    assert early_stop_check([1.0, 0.5, 0.6, 0.55], patience=2)
    assert early_stop_check([0.3] * 3, patience=2)
    assert not early_stop_check([5.0, 4.0, 3.0, 2.0, 1.0], patience=1)
    assert not early_stop_check([1.0, 0.5, 0.6], patience=2)


def test_early_stop_requires_min_delta():
    assert early_stop_check([1.0, 1.0 - 1e-8, 1.0 - 2e-8], patience=2)
    assert not early_stop_check([1.0, 1.0 - 1e-8, 1.0 - 2e-6], patience=2)


def test_early_stop_errors():
    with pytest.raises(ValueError):
        early_stop_check([], 2)
    with pytest.raises(ValueError):
        early_stop_check([1.0], 0)


# --- replay labeling ----------------------------------------------------------


def test_label_replay_argmax():
    assert label_replay(LogitTable(), np.array([[[0.1, 2.0, -1.0]]])).tolist() == [1]


def test_label_replay_tie_goes_to_lower_index():
    assert label_replay(LogitTable(), np.array([[[0.0, 3.0, 3.0]], [[7.0, 7.0, 1.0]]])).tolist() == [1, 0]


def test_label_replay_shift_invariant(rng):
    logits = rng.standard_normal((50, 1, 6))
    assert (label_replay(LogitTable(), logits) == label_replay(LogitTable(), logits + 3.25)).all()
    assert (label_replay(LogitTable(), logits) == np.argmax(logits[:, 0], axis=1)).all()


# --- replay buffer ------------------------------------------------------------


def test_replay_buffer_balanced_across_tasks(rng):
    buf = ReplayBuffer(100)
    for classes in ([0, 1], [2, 3], [4, 5]):
        y = np.repeat(classes, 80)
        x = rng.standard_normal((y.size, 1, 4)) + y[:, None, None]
        buf.add(x, y, rng)
        counts = buf.counts()
        assert len(buf) <= 100
        assert max(counts.values()) - min(counts.values()) <= 1
    assert sum(counts.values()) == 100 and counts == {0: 17, 1: 17, 2: 17, 3: 17, 4: 16, 5: 16}
    x, y = buf.contents()
    # stored samples keep their labels (class c was drawn around mean c)
    for c in range(6):
        assert abs(x[y == c].mean() - c) < 0.5


def test_replay_buffer_small_classes_kept_whole(rng):
    buf = ReplayBuffer(300)
    y = np.repeat([0, 1], 10)
    buf.add(rng.standard_normal((20, 1, 2)), y, rng)
    assert buf.counts() == {0: 10, 1: 10}
    with pytest.raises(ValueError):
        ReplayBuffer(0)


# --- classifier step ----------------------------------------------------------


def _step_model(seed=0, k=4):
    return ClassifierModel(ClassifierConfig(2, k, (4, 8), dropout_rate=0.0), np.random.default_rng(seed))


def _numpy_ce(logits, y):
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return -logp[np.arange(len(y)), y].mean()


def test_step_loss_matches_independent_cross_entropy(rng):
    model = _step_model()
    x, y = rng.standard_normal((8, 2, 16)), rng.integers(0, 4, 8)
    with T.no_grad():
        logits = model(Tensor(x), True).data
    total, task, replay = classifier_update_step(model, T.OptimizerState("sgd", 1e-12), x, y)
    assert total == pytest.approx(_numpy_ce(logits, y), abs=1e-9)
    assert task == total and replay == 0.0


def test_step_duplicate_replay_doubles_loss(rng):
    model = _step_model()
    x, y = rng.standard_normal((8, 2, 16)), rng.integers(0, 4, 8)
    total, task, replay = classifier_update_step(model, T.OptimizerState("sgd", 1e-3), x, y, x, y)
    assert total == pytest.approx(2 * task, rel=1e-12) and replay == pytest.approx(task, rel=1e-12)


def test_step_without_replay_is_plain_cross_entropy_gradient(rng):
    x, y = rng.standard_normal((8, 2, 16)), rng.integers(0, 4, 8)
    ref = _step_model()
    loss = T.softmax_cross_entropy(ref(Tensor(x), True), y)
    T.backward(loss)
    grads = [p.grad.copy() for p in ref.parameters()]

    model = _step_model()
    before = [p.data.copy() for p in model.parameters()]
    lr = 0.5
    classifier_update_step(model, T.OptimizerState("sgd", lr), x, y)
    for p, b, g in zip(model.parameters(), before, grads):
        np.testing.assert_allclose((b - p.data) / lr, g, rtol=1e-9, atol=1e-12)


def test_step_rejects_out_of_range_labels(rng):
    x = rng.standard_normal((4, 2, 16))
    with pytest.raises(ValueError, match="label"):
        classifier_update_step(_step_model(), T.OptimizerState(), x, np.array([0, 1, 2, 4]))
    with pytest.raises(ValueError, match="label"):
        classifier_update_step(_step_model(), T.OptimizerState(), x, np.zeros(4, int), x, np.array([-1, 0, 0, 0]))


def test_train_classifier_restores_best_weights():
    stream = small_stream()
    model = ClassifierModel(ClassifierConfig(2, 4, (8, 16), dropout_rate=0.0), np.random.default_rng(0))
    fit = train_classifier(model, stream[0].train, FAST, np.random.default_rng(0))
    assert fit.epochs <= FAST.max_epochs
    assert fit.val_history[fit.best_epoch] == min(fit.val_history)


# --- streams ------------------------------------------------------------------


def test_rng_streams_are_independent_and_stable():
    a = rng_stream(3, "train").random()
    assert a == rng_stream(3, "train").random()
    assert a != rng_stream(3, "replay").random() and a != rng_stream(4, "train").random()


@pytest.mark.parametrize("kind", ["sft", "er"])
def test_single_task_stream_has_one_entry(kind):
    stream = small_stream()
    one = TaskStream([stream[0]], stream.num_classes, stream.class_order)
    result = run_stream(ClMethod(kind), one, FAST, seed=0)
    assert result.matrix.n_tasks == 1 and len(result.matrix.rows) == 1 and len(result.matrix.rows[0]) == 1


def test_single_task_generator_stream(tmp_path):
    stream = small_stream()
    one = TaskStream([stream[0]], stream.num_classes, stream.class_order)
    method = ClMethod("dsg", generator=DsgConfig(epochs=2, batch_size=32),
                      diffusion=DiffusionSettings(T=10, base_channels=4))
    result = run_stream(method, one, FAST, seed=0, checkpoint_dir=tmp_path)
    assert len(result.matrix.rows) == 1
    gen, manifest = load_generator(tmp_path / "generator_task1.rftn")
    assert manifest["sample_shape"] == [2, 16] and gen.schedule.T == 10


def test_sft_forgets_first_task():
    # two binary tasks: chance on the old task is 0.5 within its own label pair
    protocol = TrainProtocol(channels=(8, 16, 16), max_epochs=60, patience=20, dropout_rate=0.0)
    rows = [run_stream(ClMethod("sft"), small_stream(seed=s, length=64), protocol, seed=s).matrix
            for s in range(3)]
    assert rows[0][2, 1] <= 0.6
    assert np.mean([m[2, 1] for m in rows]) <= 0.6
    assert all(m[2, 2] >= 0.9 and m[1, 1] >= 0.9 for m in rows)


def test_er_with_full_buffer_retains_first_task():
    stream = small_stream()
    result = run_stream(ClMethod("er", buffer_capacity=len(stream[0].train)), stream, FAST, seed=0)
    assert result.matrix[2, 1] >= 0.9 and result.matrix[2, 2] >= 0.9


def test_stream_reproducible_for_fixed_seed():
    stream = small_stream()
    a = run_stream(ClMethod("er"), stream, FAST, seed=5).matrix.rows
    b = run_stream(ClMethod("er"), stream, FAST, seed=5).matrix.rows
    assert a == b


def test_matrix_lower_triangular_in_unit_interval():
    m = run_stream(ClMethod("sft"), small_stream(), FAST, seed=1).matrix
    assert [len(r) for r in m.rows] == [1, 2]
    assert all(0.0 <= a <= 1.0 for r in m.rows for a in r)


def test_stream_errors():
    stream = small_stream()
    with pytest.raises(StreamError, match="no tasks"):
        run_stream(ClMethod("sft"), TaskStream([], 4), FAST, 0)
    dup = TaskStream([stream[0], stream[0]], 4)
    with pytest.raises(StreamError, match="reuses"):
        run_stream(ClMethod("sft"), dup, FAST, 0)
    empty = LabeledDataset(np.zeros((0, 2, 16)), np.zeros(0, int), 4)
    with pytest.raises(StreamError, match="empty"):
        run_stream(ClMethod("sft"), TaskStream([Task([0, 1], empty, stream[0].test)], 4), FAST, 0)


def test_method_and_protocol_validation():
    with pytest.raises(ValueError):
        ClMethod("ewc")
    with pytest.raises(ValueError):
        TrainProtocol(patience=0)
