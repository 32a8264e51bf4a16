"""Noise schedule and the closed-form forward / single reverse step.

Timesteps are 1-based at every public surface (t in [1, T]); the tables
are indexed internally with t-1. All randomness (eps, z) enters as explicit
arguments, so every operation here is a pure, replayable function.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

# Default: 250 steps with the classic linear range rescaled from 1000 steps
# (beta * 4), which preserves the total injected variance and drives the
# terminal alpha_bar to ~3.3e-5. The unscaled (1e-4, 0.02) range leaves
# alpha_bar_250 at ~0.0797 -- far too much residual signal at t=T.
DEFAULT_NUM_STEPS = 250
DEFAULT_BETA_START = 4e-4
DEFAULT_BETA_END = 0.08


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-timestep variance tables for a T-step diffusion.

    betas[t-1] is the step-t noise variance; alpha_bars[t-1] the surviving
    signal fraction after t steps; posterior_variances the conditional
    reverse variances (zero at t=1 by convention alpha_bar_0 = 1).
    """

    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    posterior_variances: np.ndarray

    @property
    def num_steps(self) -> int:
        return len(self.betas)

    def _check_t(self, t: int) -> int:
        t = int(t)
        if not 1 <= t <= self.num_steps:
            raise ValueError(f"timestep {t} outside [1, {self.num_steps}]")
        return t


def make_linear_schedule(
    num_steps: int,
    beta_start: float = DEFAULT_BETA_START,
    beta_end: float = DEFAULT_BETA_END,
) -> NoiseSchedule:
    """Linearly spaced betas from beta_start to beta_end inclusive."""
    if num_steps < 1:
        raise ValueError(f"num_steps must be >= 1, got {num_steps}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    return schedule_from_betas(np.linspace(beta_start, beta_end, num_steps))


def default_schedule() -> NoiseSchedule:
    return make_linear_schedule(DEFAULT_NUM_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END)


def schedule_from_betas(betas: np.ndarray) -> NoiseSchedule:
    """Rebuild the derived tables from an explicit beta sequence."""
    betas = np.asarray(betas, dtype=np.float64).copy()
    if betas.ndim != 1 or len(betas) < 1:
        raise ValueError("betas must be a non-empty 1-D array")
    if betas.min() <= 0.0 or betas.max() >= 1.0:
        raise ValueError("betas must lie strictly inside (0, 1)")
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    prev_bars = np.concatenate([[1.0], alpha_bars[:-1]])
    posterior_variances = (1.0 - prev_bars) / (1.0 - alpha_bars) * betas
    arrays = (betas, alphas, alpha_bars, posterior_variances)
    for a in arrays:
        a.setflags(write=False)
    return NoiseSchedule(*arrays)


def _broadcast_to_leading(values: np.ndarray, ndim: int) -> np.ndarray:
    # (B,) scalars applied over (B, ...) fields
    return values.reshape(values.shape + (1,) * (ndim - 1))


def q_sample(
    x0: np.ndarray,
    t: int | np.ndarray,
    eps: np.ndarray,
    schedule: NoiseSchedule,
) -> np.ndarray:
    """Closed-form forward noising: sqrt(ab_t)*x0 + sqrt(1-ab_t)*eps.

    ``t`` is either a single timestep applied to the whole field or a
    (B,) array of per-sample timesteps for a (B, ...) batch. Elementwise,
    so every channel is treated identically by construction.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValueError(f"x0 shape {x0.shape} != eps shape {eps.shape}")
    if np.ndim(t) == 0:
        idx = schedule._check_t(int(t)) - 1
        ab = schedule.alpha_bars[idx]
    else:
        t = np.asarray(t)
        if t.ndim != 1 or t.shape[0] != x0.shape[0]:
            raise ValueError(f"per-sample t must have shape ({x0.shape[0]},)")
        if t.min() < 1 or t.max() > schedule.num_steps:
            raise ValueError(f"timesteps outside [1, {schedule.num_steps}]")
        ab = _broadcast_to_leading(schedule.alpha_bars[t - 1], x0.ndim)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def p_sample_step(
    x_t: np.ndarray,
    t: int,
    predicted_eps: np.ndarray,
    schedule: NoiseSchedule,
    z: np.ndarray,
) -> np.ndarray:
    """One reverse step with sigma_t^2 = beta_t.

    Returns (x_t - beta_t/sqrt(1-ab_t) * predicted_eps) / sqrt(alpha_t)
    + sqrt(beta_t) * z. The caller must pass z = 0 at t = 1 (no noise is
    added on the final step); this is enforced.
    """
    x_t = np.asarray(x_t, dtype=np.float64)
    predicted_eps = np.asarray(predicted_eps, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if x_t.shape != predicted_eps.shape or x_t.shape != z.shape:
        raise ValueError(
            f"shape mismatch: x_t {x_t.shape}, predicted_eps "
            f"{predicted_eps.shape}, z {z.shape}"
        )
    idx = schedule._check_t(t) - 1
    if idx == 0 and np.any(z != 0.0):
        raise ValueError("z must be all-zeros at t=1")
    beta = schedule.betas[idx]
    alpha = schedule.alphas[idx]
    ab = schedule.alpha_bars[idx]
    mean = (x_t - beta / np.sqrt(1.0 - ab) * predicted_eps) / np.sqrt(alpha)
    return mean + np.sqrt(beta) * z


def save_schedule_csv(schedule: NoiseSchedule, path: str | Path) -> None:
    """Dump (t, beta, alpha_bar) rows for inspection or plotting."""
    with Path(path).open("w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["t", "beta", "alpha_bar"])
        for i in range(schedule.num_steps):
            writer.writerow(
                [i + 1, repr(float(schedule.betas[i])), repr(float(schedule.alpha_bars[i]))]
            )
