"""Distillation-based self-guidance for the replay generator.

While the generator learns task ``n`` it minimises the noise-matching loss on
the new data plus ``lam`` times the squared gap between its noise prediction
and that of the frozen generator from task ``n - 1``, evaluated on the same
noised inputs.  The teacher is never sampled; distillation inputs come from
current-task data only.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .diffusion import DiffusionModel, diffuse, draw_noising
from .nn import NoisePredictorModel
from .stopping import early_stop_check
from .tensor import Tensor

log = logging.getLogger(__name__)

INIT_MODES = ("warm", "cold")


class DivergenceError(RuntimeError):
    pass


@dataclass
class DsgConfig:
    lam: float = 1.0
    epochs: int = 100
    learning_rate: float = 1e-3
    batch_size: int = 64
    patience: int = 20
    val_fraction: float = 0.1
    init: str = "warm"

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if self.init not in INIT_MODES:
            raise ValueError(f"init must be one of {INIT_MODES}, got {self.init!r}")
        if self.epochs < 1 or self.batch_size < 1 or self.patience < 1:
            raise ValueError("epochs, batch_size and patience must be >= 1")


class TeacherSnapshot:
    """Frozen, gradient-free copy of a generator."""

    def __init__(self, model: DiffusionModel):
        predictor = NoisePredictorModel(model.predictor.config, np.random.default_rng(0))
        predictor.load_state_arrays(model.predictor.copy_state())
        for p in predictor.parameters():
            p.requires_grad = False
        self.model = DiffusionModel(predictor, model.schedule)

    @property
    def config(self):
        return self.model.predictor.config

    def state_arrays(self) -> list[np.ndarray]:
        return self.model.predictor.state_arrays()

    def predict(self, x_tau: np.ndarray, taus) -> np.ndarray:
        with T.no_grad():
            return self.model.predict(Tensor._wrap(x_tau), taus).data


def copy_generator(model: DiffusionModel) -> DiffusionModel:
    predictor = NoisePredictorModel(model.predictor.config, np.random.default_rng(0))
    predictor.load_state_arrays(model.predictor.copy_state())
    return DiffusionModel(predictor, model.schedule)


def init_student(teacher: DiffusionModel, config: DsgConfig, rng: np.random.Generator) -> DiffusionModel:
    if config.init == "warm":
        return copy_generator(teacher)
    return DiffusionModel(NoisePredictorModel(teacher.predictor.config, rng), teacher.schedule)


def _noised(x_batch, taus, eps, student: DiffusionModel) -> np.ndarray:
    x = np.asarray(x_batch.data if isinstance(x_batch, Tensor) else x_batch, dtype=np.float64)
    return diffuse(x, taus, eps, student.schedule)


def task_loss(student: DiffusionModel, x_batch, taus, eps) -> Tensor:
    x_tau = _noised(x_batch, taus, eps, student)
    return T.mse(student.predict(Tensor._wrap(x_tau), taus), Tensor._wrap(np.asarray(eps, dtype=np.float64)))


def _check_teacher(student: DiffusionModel, teacher: TeacherSnapshot) -> None:
    if student.predictor.config != teacher.config or student.schedule.T != teacher.model.schedule.T:
        raise ValueError("teacher and student generators differ in architecture")


def distill_loss(student: DiffusionModel, teacher: TeacherSnapshot, x_batch, taus, eps) -> Tensor:
    _check_teacher(student, teacher)
    x_tau = _noised(x_batch, taus, eps, student)
    target = teacher.predict(x_tau, taus)
    return T.mse(student.predict(Tensor._wrap(x_tau), taus), Tensor._wrap(target))


def dsg_loss(student: DiffusionModel, teacher: TeacherSnapshot | None, x_tau: np.ndarray, taus,
             eps: np.ndarray, lam: float) -> tuple[Tensor, float, float]:
    """Combined objective from one shared student forward pass.

    Returns ``(total, task, distill)``; with no teacher the distill term is 0
    and ``total`` is the task loss itself.
    """
    pred = student.predict(Tensor._wrap(x_tau), taus)
    task = T.mse(pred, Tensor._wrap(eps))
    if teacher is None:
        return task, task.item(), 0.0
    dist = T.mse(pred, Tensor._wrap(teacher.predict(x_tau, taus)))
    return task + dist * lam, task.item(), dist.item()


@dataclass
class FitHistory:
    train: list[float]
    val: list[float]
    best_epoch: int


def fit_generator(student: DiffusionModel, data: np.ndarray, config: DsgConfig, rng: np.random.Generator,
                  teacher: TeacherSnapshot | None = None, lam: float | None = None) -> FitHistory:
    """Minibatch Adam on the (optionally distillation-augmented) noise loss.

    A ``val_fraction`` hold-out with noise draws fixed up front drives early
    stopping; the best-validation weights are restored at the end.
    """
    lam = config.lam if lam is None else lam
    if teacher is not None:
        _check_teacher(student, teacher)
    data = np.asarray(data, dtype=np.float64)
    if data.shape[0] == 0:
        raise ValueError("fit_generator: empty dataset")
    order = rng.permutation(data.shape[0])
    n_val = int(round(config.val_fraction * data.shape[0])) if data.shape[0] > 1 else 0
    val, train = data[order[:n_val]], data[order[n_val:]]
    val_draw = draw_noising(val, student.schedule, rng) if n_val else None

    params = student.parameters()
    opt = T.OptimizerState("adam", config.learning_rate)
    train_hist, val_hist = [], []
    best_val, best_state, best_epoch = np.inf, student.predictor.copy_state(), 0
    for epoch in range(config.epochs):
        perm = rng.permutation(train.shape[0])
        total, count = 0.0, 0
        for start in range(0, train.shape[0], config.batch_size):
            batch = train[perm[start : start + config.batch_size]]
            taus, eps, x_tau = draw_noising(batch, student.schedule, rng)
            loss, _, _ = dsg_loss(student, teacher, x_tau, taus, eps, lam)
            value = loss.item()
            if not np.isfinite(value):
                raise DivergenceError(f"generator loss became non-finite at epoch {epoch}")
            T.zero_grad(params)
            loss.backward()
            T.optimizer_step(params, opt)
            total += value * batch.shape[0]
            count += batch.shape[0]
        train_hist.append(total / count)
        if val_draw is None:
            val_hist.append(train_hist[-1])
        else:
            taus, eps, x_tau = val_draw
            with T.no_grad():
                val_hist.append(dsg_loss(student, teacher, x_tau, taus, eps, lam)[0].item())
        if val_hist[-1] < best_val:
            best_val, best_state, best_epoch = val_hist[-1], student.predictor.copy_state(), epoch
        if early_stop_check(val_hist, config.patience):
            break
    student.predictor.load_state_arrays(best_state)
    log.debug("generator fit: %d epochs, best %.5f at %d", len(val_hist), best_val, best_epoch)
    return FitHistory(train_hist, val_hist, best_epoch)


def train_generator(model: DiffusionModel, data: np.ndarray, config: DsgConfig,
                    rng: np.random.Generator) -> FitHistory:
    """Plain noise-matching training (task 1, GR updates, fine-tuning)."""
    return fit_generator(model, data, config, rng)


def dsg_update_generator(student: DiffusionModel, teacher: TeacherSnapshot | None, task_data: np.ndarray,
                         config: DsgConfig, rng: np.random.Generator) -> DiffusionModel:
    """Train ``student`` on ``task_data`` under the task + lam * distill objective.

    ``teacher`` is left untouched; without one (first task) only the task
    term is used.
    """
    fit_generator(student, task_data, config, rng, teacher=teacher)
    return student
