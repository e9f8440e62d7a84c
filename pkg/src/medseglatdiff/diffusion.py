"""Closed-form diffusion mathematics, agnostic to pixel or latent space.

Implements the forward noising chain, its closed-form marginal, the
noise-prediction training loss, the algebraic inversion back to the clean
state, and the stochastic reverse step:

    forward step:    x_t = sqrt(alpha_t) x_{t-1} + sqrt(1 - alpha_t) eps
    marginal:        x_t = sqrt(gamma_t) x_0 + sqrt(1 - gamma_t) eps
    loss:            mean((eps - eps_pred)^2)
    inversion:       x_0 = (x_t - sqrt(1 - gamma_t) eps) / sqrt(gamma_t)
    reverse step:    x_{t-1} = (x_t - (1 - alpha_t)/sqrt(1 - gamma_t) eps_pred)
                               / sqrt(alpha_t)  +  noise term

Everything here is a pure function of explicit inputs plus an explicit
``numpy.random.Generator``; identical seeds give bit-identical outputs, and
all arithmetic runs in 64-bit floats. Grids may have any shape.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .schedule import NoiseSchedule

VARIANCE_MODES = ("standard", "paper_literal")


@dataclass
class DiffusionState:
    """A (possibly noisy) grid at step t, with the noise that produced it.

    ``noise_used`` is recorded when the state was formed by adding known
    noise, so training targets can be paired with their inputs; reverse-step
    outputs leave it None.
    """

    value: np.ndarray
    t: int
    noise_used: np.ndarray | None = None

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=np.float64)
        if self.noise_used is not None:
            self.noise_used = np.asarray(self.noise_used, dtype=np.float64)
            if self.noise_used.shape != self.value.shape:
                raise ValueError("noise_used shape does not match value shape")
        if self.t < 0:
            raise ValueError(f"step index must be >= 0, got {self.t}")


def _check_shapes(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def forward_step(prev: DiffusionState, schedule: NoiseSchedule, rng: np.random.Generator) -> DiffusionState:
    """Advance one step of the noising chain, drawing fresh Gaussian noise."""
    t = prev.t + 1
    if not 1 <= t <= schedule.T:
        raise ValueError(f"forward step to t={t} outside [1, {schedule.T}]")
    a = schedule.alpha(t)
    eps = rng.standard_normal(prev.value.shape)
    value = math.sqrt(a) * prev.value + math.sqrt(1.0 - a) * eps
    return DiffusionState(value=value, t=t, noise_used=eps)


def sample_noisy(clean, t: int, schedule: NoiseSchedule, eps) -> DiffusionState:
    """Jump straight to step t via the closed-form marginal, with given noise."""
    clean = np.asarray(clean, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    _check_shapes(clean, eps, "sample_noisy")
    if not 1 <= t <= schedule.T:
        raise ValueError(f"t={t} outside [1, {schedule.T}]")
    g = schedule.gamma(t)
    value = math.sqrt(g) * clean + math.sqrt(1.0 - g) * eps
    return DiffusionState(value=value, t=t, noise_used=eps)


def diffusion_loss(eps_true, eps_pred) -> float:
    """Mean squared error between true and predicted noise grids."""
    eps_true = np.asarray(eps_true, dtype=np.float64)
    eps_pred = np.asarray(eps_pred, dtype=np.float64)
    _check_shapes(eps_true, eps_pred, "diffusion_loss")
    return float(np.mean((eps_true - eps_pred) ** 2))


def predict_x0(state: DiffusionState, eps_pred, schedule: NoiseSchedule) -> np.ndarray:
    """Invert the closed-form marginal to estimate the clean grid."""
    eps_pred = np.asarray(eps_pred, dtype=np.float64)
    _check_shapes(state.value, eps_pred, "predict_x0")
    if not 1 <= state.t <= schedule.T:
        raise ValueError(f"t={state.t} outside [1, {schedule.T}]")
    g = schedule.gamma(state.t)
    return (state.value - math.sqrt(1.0 - g) * eps_pred) / math.sqrt(g)


def reverse_step(
    state: DiffusionState,
    eps_pred,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    variance_mode: str = "standard",
    deterministic_last: bool = True,
) -> DiffusionState:
    """One denoising step from t to t-1 given a noise prediction.

    The mean term is (x_t - (1 - alpha_t)/sqrt(1 - gamma_t) eps_pred)
    / sqrt(alpha_t). The added noise is sqrt(1 - alpha_t) eps' in
    ``standard`` mode and gamma_t eps' in ``paper_literal`` mode; with
    ``deterministic_last`` the final step to t = 0 adds no noise at all.
    """
    if variance_mode not in VARIANCE_MODES:
        raise ValueError(f"variance_mode must be one of {VARIANCE_MODES}, got {variance_mode!r}")
    t = state.t
    if not 1 <= t <= schedule.T:
        raise ValueError(f"t={t} outside [1, {schedule.T}]")
    eps_pred = np.asarray(eps_pred, dtype=np.float64)
    _check_shapes(state.value, eps_pred, "reverse_step")

    a = schedule.alpha(t)
    g = schedule.gamma(t)
    if g >= 1.0:
        # gamma_t = 1 forces alpha_t = 1, so the eps coefficient is 0/0;
        # the mean then collapses to the input.
        mean = state.value
    else:
        mean = (state.value - ((1.0 - a) / math.sqrt(1.0 - g)) * eps_pred) / math.sqrt(a)
    noise_coef = math.sqrt(1.0 - a) if variance_mode == "standard" else g

    if t == 1 and deterministic_last:
        value = mean
    else:
        value = mean + noise_coef * rng.standard_normal(state.value.shape)
    return DiffusionState(value=value, t=t - 1)
