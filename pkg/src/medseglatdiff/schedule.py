"""Noise schedules driving the forward and reverse diffusion processes.

A schedule fixes, for each step t in 1..T, the retained-signal fraction
alpha_t and its running product gamma_t = prod_{i<=t} alpha_i. All values
are kept in 64-bit floats so that downstream identities (inversion,
chain/closed-form agreement) hold to tight tolerances.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

SCHEDULE_KINDS = ("linear",)


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step alpha_t and cumulative gamma_t for a T-step diffusion.

    Arrays are 1-indexed conceptually: ``alphas[t - 1]`` is alpha_t for
    t in 1..T. gamma at t = 0 is defined as 1 (a step-0 state carries no
    noise), which keeps the inversion formulas total.

    ``beta_start``/``beta_end``/``kind`` record how the schedule was built
    so checkpoints can reconstruct it bit-exactly from four scalars instead
    of persisting the arrays.
    """

    T: int
    alphas: np.ndarray
    gammas: np.ndarray
    beta_start: float | None = None
    beta_end: float | None = None
    kind: str | None = None

    def alpha(self, t: int) -> float:
        self._check_step(t)
        return float(self.alphas[t - 1])

    def gamma(self, t: int) -> float:
        if t == 0:
            return 1.0
        self._check_step(t)
        return float(self.gammas[t - 1])

    def _check_step(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise ValueError(f"step t={t} outside [1, {self.T}]")

    def spec(self) -> tuple[int, float, float, str]:
        """Four scalars sufficient to rebuild this schedule exactly."""
        if self.beta_start is None or self.beta_end is None or self.kind is None:
            raise ValueError("schedule was not built from beta endpoints; cannot serialize")
        return (self.T, self.beta_start, self.beta_end, self.kind)


def build_schedule(
    T: int,
    beta_start: float = 1e-4,
    beta_end: float = 0.02,
    kind: str = "linear",
) -> NoiseSchedule:
    """Build a T-step schedule with per-step noise fractions beta_t.

    ``linear`` interpolates beta from ``beta_start`` to ``beta_end`` over the
    T steps; alpha_t = 1 - beta_t and gamma_t is the running product of the
    alphas. Defaults are the common 1e-4..0.02 choice over T=1000.
    """
    if not isinstance(T, (int, np.integer)) or T < 1:
        raise ValueError(f"T must be a positive integer, got {T!r}")
    for name, val in (("beta_start", beta_start), ("beta_end", beta_end)):
        if not math.isfinite(val):
            raise ValueError(f"{name} must be finite, got {val!r}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(
            f"beta endpoints must satisfy 0 < beta_start <= beta_end < 1, "
            f"got ({beta_start}, {beta_end})"
        )
    if kind not in SCHEDULE_KINDS:
        raise ValueError(f"unknown schedule kind {kind!r}; supported: {SCHEDULE_KINDS}")

    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alphas = 1.0 - betas
    gammas = np.cumprod(alphas)
    return NoiseSchedule(
        T=int(T), alphas=alphas, gammas=gammas,
        beta_start=float(beta_start), beta_end=float(beta_end), kind=kind,
    )


def schedule_from_spec(spec: tuple[int, float, float, str]) -> NoiseSchedule:
    """Reconstruct a schedule from the four scalars stored in a checkpoint."""
    T, beta_start, beta_end, kind = spec
    return build_schedule(int(T), float(beta_start), float(beta_end), str(kind))


def schedule_from_alphas(alphas) -> NoiseSchedule:
    """Assemble a schedule directly from alpha values.

    Intended for tests and degenerate configurations (e.g. alpha_t = 1
    everywhere); skips the open-interval range check that build_schedule
    enforces.
    """
    a = np.asarray(alphas, dtype=np.float64)
    if a.ndim != 1 or a.size < 1:
        raise ValueError("alphas must be a non-empty 1-d sequence")
    if not np.all(np.isfinite(a)) or np.any(a <= 0.0) or np.any(a > 1.0):
        raise ValueError("alphas must be finite and in (0, 1]")
    return NoiseSchedule(T=int(a.size), alphas=a, gammas=np.cumprod(a))
