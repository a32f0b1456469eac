"""Sequential task training with replay.

``run_stream`` trains one classifier over a :class:`~dsgreplay.data.TaskStream`
using one of four methods:

* ``sft`` - plain sequential fine-tuning;
* ``er``  - replay from a class-balanced buffer of stored real samples;
* ``gr``  - generative replay where the generator is retrained on new data
  plus its own replayed samples;
* ``dsg`` - generative replay where the generator is updated on new data with
  a distillation term towards its previous version.

For ``n >= 2`` the replay pool is produced from the end-of-task ``n - 1``
snapshots, labeled by the previous classifier's argmax, and consumed as a
32-sample minibatch next to every 64-sample batch of new data.
"""

from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import LabeledDataset, TaskStream, stratified_split
from .diffusion import DiffusionModel, NoiseSchedule, make_schedule, sample
from .dsg import DsgConfig, TeacherSnapshot, dsg_update_generator, init_student, train_generator
from .metrics import AccuracyMatrix, ConfusionMatrix, evaluate, predict
from .nn import DEFAULT_CHANNELS, ClassifierConfig, ClassifierModel, NoisePredictorModel, load_model, save_model
from .stopping import early_stop_check
from .tensor import Tensor

log = logging.getLogger(__name__)

METHODS = ("sft", "er", "gr", "dsg")


class StreamError(ValueError):
    pass


def rng_stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named purpose derived from the run seed."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


@dataclass
class DiffusionSettings:
    T: int = 200
    beta_start: float = 1e-4
    beta_end: float = 0.02
    sigma2: str = "beta"
    base_channels: int = 32
    depth: int = 2

    def schedule(self):
        return make_schedule(self.T, self.beta_start, self.beta_end, self.sigma2)


@dataclass
class ClMethod:
    kind: str = "dsg"
    buffer_capacity: int = 300
    generator: DsgConfig = field(default_factory=DsgConfig)
    diffusion: DiffusionSettings = field(default_factory=DiffusionSettings)

    def __post_init__(self):
        if self.kind not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.kind!r}")
        if self.buffer_capacity < 1:
            raise ValueError("buffer_capacity must be >= 1")

    @property
    def uses_generator(self) -> bool:
        return self.kind in ("gr", "dsg")


@dataclass
class TrainProtocol:
    learning_rate: float = 1e-3
    batch_size: int = 64
    replay_batch_size: int = 32
    patience: int = 20
    max_epochs: int = 200
    val_fraction: float = 0.1
    dropout_rate: float = 0.1
    optimizer: str = "adam"
    channels: tuple[int, ...] = DEFAULT_CHANNELS
    replay_pool_size: int | None = None

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1 or self.replay_batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch sizes and max_epochs must be >= 1")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in (0, 1)")


# ---------------------------------------------------------------------------
# replay buffer
# ---------------------------------------------------------------------------


class ReplayBuffer:
    """Class-balanced store of real samples.

    The total capacity is split into per-class quotas that differ by at most
    one (earlier class ids get the remainder).  When new classes arrive every
    existing store is truncated to its new quota, so a class only ever keeps a
    prefix of the samples it was first given.
    """

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.stores: dict[int, np.ndarray] = {}

    def __len__(self) -> int:
        return sum(s.shape[0] for s in self.stores.values())

    def quotas(self, classes) -> dict[int, int]:
        classes = sorted(classes)
        base, extra = divmod(self.capacity, len(classes))
        return {c: base + (1 if i < extra else 0) for i, c in enumerate(classes)}

    def add(self, samples: np.ndarray, labels: np.ndarray, rng: np.random.Generator) -> None:
        new = {int(c): samples[labels == c] for c in np.unique(labels)}
        quotas = self.quotas(set(self.stores) | set(new))
        for c, x in new.items():
            keep = rng.permutation(x.shape[0])[: quotas[c]]
            self.stores[c] = x[keep]
        for c in self.stores:
            self.stores[c] = self.stores[c][: quotas[c]]

    def contents(self) -> tuple[np.ndarray, np.ndarray]:
        classes = sorted(self.stores)
        x = np.concatenate([self.stores[c] for c in classes])
        y = np.concatenate([np.full(self.stores[c].shape[0], c, dtype=np.int64) for c in classes])
        return x, y

    def counts(self) -> dict[int, int]:
        return {c: s.shape[0] for c, s in sorted(self.stores.items())}


# ---------------------------------------------------------------------------
# classifier training
# ---------------------------------------------------------------------------


def label_replay(model, samples: np.ndarray) -> np.ndarray:
    """Hard labels from the previous classifier (argmax, lowest index on ties)."""
    return predict(model, np.asarray(samples, dtype=np.float64))


def classifier_update_step(model: ClassifierModel, opt: T.OptimizerState, new_x: np.ndarray, new_y: np.ndarray,
                           replay_x: np.ndarray | None = None, replay_y: np.ndarray | None = None,
                           rng: np.random.Generator | None = None) -> tuple[float, float, float]:
    """One optimizer step on CE(new) + CE(replay); returns (total, task, replay)."""
    k = model.config.num_classes
    for y in (new_y, replay_y):
        if y is not None and len(y) and (np.min(y) < 0 or np.max(y) >= k):
            raise ValueError(f"label outside [0, {k})")
    params = model.parameters()
    task = T.softmax_cross_entropy(model(Tensor._wrap(np.asarray(new_x, dtype=np.float64)), True, rng), new_y)
    total = task
    replay_value = 0.0
    if replay_x is not None:
        replay = T.softmax_cross_entropy(
            model(Tensor._wrap(np.asarray(replay_x, dtype=np.float64)), True, rng), replay_y
        )
        replay_value = replay.item()
        total = task + replay
    T.zero_grad(params)
    total.backward()
    T.optimizer_step(params, opt)
    return total.item(), task.item(), replay_value


def _eval_loss(model, x: np.ndarray, y: np.ndarray, batch_size: int = 256) -> float:
    total = 0.0
    with T.no_grad():
        for s in range(0, x.shape[0], batch_size):
            logits = model(Tensor._wrap(x[s : s + batch_size]), False)
            total += T.softmax_cross_entropy(logits, y[s : s + batch_size], "sum").item()
    return total / x.shape[0]


@dataclass
class ClassifierFit:
    epochs: int
    best_epoch: int
    val_history: list[float]


def train_classifier(model: ClassifierModel, data: LabeledDataset, protocol: TrainProtocol,
                     rng: np.random.Generator, replay: tuple[np.ndarray, np.ndarray] | None = None,
                     replay_rng: np.random.Generator | None = None) -> ClassifierFit:
    """Fit on one task with early stopping on the (task + replay) validation
    loss, restoring the best-validation weights."""
    tr, va = stratified_split(data.labels, 1.0 - protocol.val_fraction, rng)
    x_tr, y_tr = data.samples[tr], data.labels[tr]
    x_va, y_va = data.samples[va], data.labels[va]
    if replay is not None:
        replay_rng = replay_rng if replay_rng is not None else rng
        rx, ry = replay
        order = replay_rng.permutation(rx.shape[0])
        n_rval = int(round(protocol.val_fraction * rx.shape[0])) if rx.shape[0] > 1 else 0
        rx_va, ry_va = rx[order[:n_rval]], ry[order[:n_rval]]
        rx_tr, ry_tr = rx[order[n_rval:]], ry[order[n_rval:]]

    opt = T.OptimizerState(protocol.optimizer, protocol.learning_rate)
    history: list[float] = []
    best, best_state, best_epoch = np.inf, model.copy_state(), 0
    for epoch in range(protocol.max_epochs):
        perm = rng.permutation(x_tr.shape[0])
        for start in range(0, x_tr.shape[0], protocol.batch_size):
            idx = perm[start : start + protocol.batch_size]
            if idx.size < 2:  # batch statistics need more than one sample
                continue
            bx = by = None
            if replay is not None:
                pick = replay_rng.integers(0, rx_tr.shape[0], size=protocol.replay_batch_size)
                bx, by = rx_tr[pick], ry_tr[pick]
            classifier_update_step(model, opt, x_tr[idx], y_tr[idx], bx, by, rng)
        val = _eval_loss(model, x_va, y_va) if x_va.shape[0] else 0.0
        if replay is not None and rx_va.shape[0]:
            val += _eval_loss(model, rx_va, ry_va)
        history.append(val)
        if val < best:
            best, best_state, best_epoch = val, model.copy_state(), epoch
        if early_stop_check(history, protocol.patience):
            break
    model.load_state_arrays(best_state)
    return ClassifierFit(len(history), best_epoch, history)


# ---------------------------------------------------------------------------
# the stream
# ---------------------------------------------------------------------------


@dataclass
class StreamResult:
    matrix: AccuracyMatrix
    confusions: list[ConfusionMatrix]
    checkpoints: list[str]
    classifier: ClassifierModel
    generator: DiffusionModel | None
    fits: list[ClassifierFit]


def _validate_stream(stream: TaskStream) -> None:
    if len(stream) < 1:
        raise StreamError("stream has no tasks")
    seen: set[int] = set()
    for n, task in enumerate(stream, start=1):
        if len(task.train) == 0 or len(task.test) == 0:
            raise StreamError(f"task {n} is empty")
        classes = set(task.train.classes())
        if classes & seen:
            raise StreamError(f"task {n} reuses classes {sorted(classes & seen)}")
        seen |= classes


def _copy_classifier(model: ClassifierModel) -> ClassifierModel:
    clone = ClassifierModel(model.config, np.random.default_rng(0))
    clone.load_state_arrays(model.copy_state())
    return clone


def run_stream(method: ClMethod, stream: TaskStream, protocol: TrainProtocol, seed: int,
               checkpoint_dir: str | Path | None = None) -> StreamResult:
    _validate_stream(stream)
    channels, length = stream.sample_shape
    init_rng = rng_stream(seed, "init")
    train_rng = rng_stream(seed, "train")
    replay_rng = rng_stream(seed, "replay")
    diffusion_rng = rng_stream(seed, "diffusion")
    sampling_rng = rng_stream(seed, "sampling")

    clf = ClassifierModel(
        ClassifierConfig(channels, stream.num_classes, protocol.channels, dropout_rate=protocol.dropout_rate),
        init_rng,
    )
    generator: DiffusionModel | None = None
    if method.uses_generator:
        generator = DiffusionModel.create(
            channels, method.diffusion.schedule(), init_rng,
            base_channels=method.diffusion.base_channels, depth=method.diffusion.depth,
        )
    buffer = ReplayBuffer(method.buffer_capacity) if method.kind == "er" else None
    matrix = AccuracyMatrix(len(stream))
    confusions: list[ConfusionMatrix] = []
    checkpoints: list[str] = []
    fits: list[ClassifierFit] = []
    ckpt = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckpt is not None:
        ckpt.mkdir(parents=True, exist_ok=True)

    for n, task in enumerate(stream, start=1):
        x_new = task.train.samples
        replay = None
        if n >= 2 and method.kind != "sft":
            replay = _replay_pool(method, clf, generator, buffer, x_new.shape[0], protocol,
                                  (channels, length), sampling_rng)
        assert replay is None or n >= 2, "replay before task 2"
        fit = train_classifier(clf, task.train, protocol, train_rng, replay, replay_rng)
        fits.append(fit)
        log.info("task %d: classifier stopped after %d epochs (best %d)", n, fit.epochs, fit.best_epoch)

        if method.kind == "er":
            buffer.add(x_new, task.train.labels, replay_rng)
        elif generator is not None:
            generator = _update_generator(method, generator, x_new, replay, n, diffusion_rng, init_rng)

        row, cms = [], []
        for j in range(n):
            acc, cm = evaluate(clf, stream[j].test)
            row.append(acc)
            cms.append(cm)
        matrix.set_row(n, row)
        confusions.append(_merge_confusions(cms))

        if ckpt is not None:
            path = ckpt / f"classifier_task{n}.rftn"
            save_model(clf, path, {"task": n, "seed": seed})
            checkpoints.append(str(path))
            if generator is not None:
                path = ckpt / f"generator_task{n}.rftn"
                save_generator(generator, path, {"task": n, "seed": seed, "sample_shape": [channels, length]})
                checkpoints.append(str(path))
    return StreamResult(matrix, confusions, checkpoints, clf, generator, fits)


def _merge_confusions(cms: list[ConfusionMatrix]) -> ConfusionMatrix:
    return ConfusionMatrix(sum(cm.counts for cm in cms))


def _replay_pool(method, clf, generator, buffer, task_size, protocol, shape, sampling_rng):
    if method.kind == "er":
        return buffer.contents()
    pool_size = protocol.replay_pool_size or task_size
    x = sample(generator, pool_size, shape, sampling_rng)
    # the classifier snapshot here is still the end-of-previous-task one
    return x, label_replay(clf, x)


def _update_generator(method, generator, x_new, replay, n, diffusion_rng, init_rng):
    cfg = method.generator
    if n == 1:
        train_generator(generator, x_new, cfg, diffusion_rng)
        return generator
    student = init_student(generator, cfg, init_rng)
    if method.kind == "dsg":
        return dsg_update_generator(student, TeacherSnapshot(generator), x_new, cfg, diffusion_rng)
    mixed = np.concatenate([x_new, replay[0]])
    train_generator(student, mixed, cfg, diffusion_rng)
    return student


def save_generator(model: DiffusionModel, path: str | Path, extra: dict | None = None) -> None:
    sched = model.schedule
    info = {"schedule": {"beta": sched.beta.tolist(), "sigma2_choice": sched.sigma2_choice}}
    info.update(extra or {})
    save_model(model.predictor, path, info)


def load_generator(path: str | Path) -> tuple[DiffusionModel, dict]:
    predictor, manifest = load_model(path)
    if not isinstance(predictor, NoisePredictorModel) or "schedule" not in manifest:
        raise ValueError(f"{path}: manifest does not describe a generator")
    sched = manifest["schedule"]
    return DiffusionModel(predictor, NoiseSchedule(np.asarray(sched["beta"]), sched["sigma2_choice"])), manifest
