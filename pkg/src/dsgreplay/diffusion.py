"""DDPM core: linear noise schedule, closed-form forward noising, the
simplified noise-matching loss and ancestral sampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import NoisePredictorConfig, NoisePredictorModel, noise_predictor_forward
from .tensor import Tensor

SIGMA_CHOICES = ("beta", "beta_tilde")


@dataclass(frozen=True)
class NoiseSchedule:
    """Coefficient tables indexed by step tau in 1..T (index 0 holds tau=0,
    where alpha_bar is 1 by convention)."""

    beta: np.ndarray
    sigma2_choice: str = "beta"

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64)
        if beta.ndim != 1 or beta.size < 1:
            raise ValueError("beta must be a non-empty 1-D sequence")
        if np.any(beta <= 0) or np.any(beta >= 1):
            raise ValueError("every beta must lie in (0, 1)")
        if self.sigma2_choice not in SIGMA_CHOICES:
            raise ValueError(f"sigma2_choice must be one of {SIGMA_CHOICES}")
        object.__setattr__(self, "beta", beta)

    @property
    def T(self) -> int:
        return self.beta.size

    @property
    def alpha(self) -> np.ndarray:
        return 1.0 - self.beta

    @property
    def alpha_bar(self) -> np.ndarray:
        return np.cumprod(self.alpha)

    def alpha_bar_prev(self) -> np.ndarray:
        return np.concatenate([[1.0], self.alpha_bar[:-1]])

    @property
    def beta_tilde(self) -> np.ndarray:
        ab = self.alpha_bar
        return (1.0 - self.alpha_bar_prev()) / (1.0 - ab) * self.beta

    @property
    def sigma2(self) -> np.ndarray:
        return self.beta if self.sigma2_choice == "beta" else self.beta_tilde

    def at(self, table: np.ndarray, tau) -> np.ndarray:
        """Look up 1-based step(s) ``tau`` in a length-T table."""
        tau = np.asarray(tau, dtype=np.int64)
        if tau.size and (tau.min() < 1 or tau.max() > self.T):
            raise ValueError(f"diffusion step outside [1, {self.T}]")
        return table[tau - 1]


def make_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02,
                  sigma2_choice: str = "beta") -> NoiseSchedule:
    if T < 1:
        raise ValueError("T must be >= 1")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    return NoiseSchedule(np.linspace(beta_start, beta_end, T), sigma2_choice)


@dataclass
class DiffusionModel:
    predictor: NoisePredictorModel
    schedule: NoiseSchedule

    def __post_init__(self):
        if self.predictor.config.steps != self.schedule.T:
            raise ValueError(
                f"predictor embeds {self.predictor.config.steps} steps but schedule has T={self.schedule.T}"
            )

    @classmethod
    def create(cls, channels: int, schedule: NoiseSchedule, rng: np.random.Generator,
               **arch) -> "DiffusionModel":
        cfg = NoisePredictorConfig(channels=channels, steps=schedule.T, **arch)
        return cls(NoisePredictorModel(cfg, rng), schedule)

    def parameters(self) -> list[Tensor]:
        return self.predictor.parameters()

    def predict(self, x_tau: Tensor, tau) -> Tensor:
        return noise_predictor_forward(self.predictor, x_tau, tau)


def diffuse(x0, tau, eps, schedule: NoiseSchedule) -> np.ndarray:
    """sqrt(alpha_bar)*x0 + sqrt(1-alpha_bar)*eps, with per-example tau when
    ``tau`` is an array matching the leading axis of ``x0``."""
    x0 = np.asarray(x0.data if isinstance(x0, Tensor) else x0, dtype=np.float64)
    eps = np.asarray(eps.data if isinstance(eps, Tensor) else eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise T.ShapeError(f"diffuse: x0 {x0.shape} vs eps {eps.shape}")
    ab = schedule.at(schedule.alpha_bar, tau)
    if ab.ndim:
        ab = ab.reshape((-1,) + (1,) * (x0.ndim - 1))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def draw_noising(x0: np.ndarray, schedule: NoiseSchedule, rng: np.random.Generator):
    """Per-example tau ~ U{1..T} and eps ~ N(0, I), plus the resulting x_tau."""
    taus = rng.integers(1, schedule.T + 1, size=x0.shape[0])
    eps = rng.standard_normal(x0.shape)
    return taus, eps, diffuse(x0, taus, eps, schedule)


def noise_matching_loss(model: DiffusionModel, x_tau: np.ndarray, taus, eps: np.ndarray) -> Tensor:
    return T.mse(model.predict(Tensor._wrap(x_tau), taus), Tensor._wrap(eps))


def ddpm_loss(model: DiffusionModel, x0_batch, rng: np.random.Generator) -> Tensor:
    x0 = np.asarray(x0_batch.data if isinstance(x0_batch, Tensor) else x0_batch, dtype=np.float64)
    if x0.shape[0] == 0:
        raise ValueError("ddpm_loss: empty batch")
    taus, eps, x_tau = draw_noising(x0, model.schedule, rng)
    return noise_matching_loss(model, x_tau, taus, eps)


def sample(model: DiffusionModel, count: int, shape: tuple[int, int], rng: np.random.Generator,
           x_T: np.ndarray | None = None, batch_size: int = 512) -> np.ndarray:
    """Ancestral sampling from x_T ~ N(0, I) down to x_0.

    No noise is drawn at the final step.  ``x_T`` may be supplied to fix the
    starting point.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    sched = model.schedule
    alpha, alpha_bar, sigma = sched.alpha, sched.alpha_bar, np.sqrt(sched.sigma2)
    x = rng.standard_normal((count,) + tuple(shape)) if x_T is None else np.array(x_T, dtype=np.float64)
    with T.no_grad():
        for tau in range(sched.T, 0, -1):
            i = tau - 1
            eps_hat = np.concatenate([
                model.predict(Tensor._wrap(x[s : s + batch_size]), tau).data
                for s in range(0, count, batch_size)
            ])
            coef = (1.0 - alpha[i]) / np.sqrt(1.0 - alpha_bar[i])
            x = (x - coef * eps_hat) / np.sqrt(alpha[i])
            if tau > 1:
                x = x + sigma[i] * rng.standard_normal(x.shape)
    return x
