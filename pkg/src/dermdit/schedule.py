"""Noise-schedule construction, forward diffusion, and posterior quantities.

All arrays are float64 and immutable after construction, so schedules are
safe for unrestricted concurrent reads. Timesteps are 1-based: ``t`` runs
over 1..T and array index ``t - 1`` holds the step-``t`` constants, with
the convention that the cumulative signal fraction before step 1 is 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "NoiseSchedule",
    "SamplingScheduleView",
    "build_schedule",
    "q_sample",
    "posterior_mean",
    "predict_x0_from_eps",
    "respace",
]


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step diffusion constants.

    ``beta[t-1]`` is the noising rate at step t, ``alpha = 1 - beta``,
    ``alpha_bar`` its cumulative product, and ``posterior_variance[t-1]``
    the variance of the reverse-process posterior at step t (zero at
    t = 1, where the posterior is deterministic).
    """

    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    posterior_variance: np.ndarray

    @property
    def T(self) -> int:
        return len(self.beta)

    def __post_init__(self):
        for name in ("beta", "alpha", "alpha_bar", "posterior_variance"):
            getattr(self, name).setflags(write=False)

    def _check_t(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} outside 1..{self.T}")

    def alpha_bar_prev(self, t: int) -> float:
        """Cumulative signal fraction before step t (1 for t = 1)."""
        self._check_t(t)
        return 1.0 if t == 1 else float(self.alpha_bar[t - 2])


@dataclass(frozen=True)
class SamplingScheduleView:
    """Strided subset of a schedule's timesteps for faster sampling.

    ``steps`` holds the selected parent timesteps in increasing order and
    always ends at the parent's final step. ``beta``/``alpha``/``alpha_bar``
    are the effective per-selected-step constants: ``alpha_bar`` equals the
    parent values at the selected steps and the effective betas compound to
    the same signal decay between consecutive selections.
    """

    parent: NoiseSchedule
    steps: np.ndarray
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    posterior_variance: np.ndarray

    @property
    def n_steps(self) -> int:
        return len(self.steps)

    def __post_init__(self):
        for name in ("steps", "beta", "alpha", "alpha_bar", "posterior_variance"):
            getattr(self, name).setflags(write=False)


def build_schedule(
    kind: str, T: int, beta_start: float, beta_end: float
) -> NoiseSchedule:
    """Construct a noise schedule; ``kind`` currently supports "linear"."""
    if kind != "linear":
        raise ValueError(f"unknown schedule kind {kind!r}")
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(
            f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return NoiseSchedule(
        beta=beta,
        alpha=alpha,
        alpha_bar=alpha_bar,
        posterior_variance=_posterior_variance(beta, alpha_bar),
    )


def _posterior_variance(beta: np.ndarray, alpha_bar: np.ndarray) -> np.ndarray:
    prev = np.concatenate(([1.0], alpha_bar[:-1]))
    return (1.0 - prev) / (1.0 - alpha_bar) * beta


def q_sample(x0: np.ndarray, t: int, eps: np.ndarray, schedule) -> np.ndarray:
    """Forward-process sample: sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps.

    The noise is supplied by the caller, keeping all randomness explicit.
    """
    if isinstance(schedule, NoiseSchedule):
        schedule._check_t(t)
    else:
        _check_view_t(schedule, t)
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if x0.shape != eps.shape:
        raise ValueError(f"x0 shape {x0.shape} != eps shape {eps.shape}")
    abar = _abar_at(schedule, t)
    dt = x0.dtype if x0.dtype.kind == "f" else np.float64
    return (np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * eps).astype(dt)


def _abar_at(schedule, t: int) -> float:
    return float(schedule.alpha_bar[t - 1])


def _check_view_t(view: SamplingScheduleView, t: int) -> None:
    if not 1 <= t <= view.n_steps:
        raise ValueError(f"view position {t} outside 1..{view.n_steps}")


def posterior_mean(x0: np.ndarray, xt: np.ndarray, t: int, schedule) -> np.ndarray:
    """Mean of the reverse-process posterior given clean and noisy samples.

    Works on a full schedule (``t`` a parent timestep) or a sampling view
    (``t`` a 1-based position in the view, using effective constants).
    """
    if isinstance(schedule, NoiseSchedule):
        schedule._check_t(t)
        abar_prev = schedule.alpha_bar_prev(t)
    else:
        _check_view_t(schedule, t)
        abar_prev = 1.0 if t == 1 else float(schedule.alpha_bar[t - 2])
    beta = float(schedule.beta[t - 1])
    alpha = float(schedule.alpha[t - 1])
    abar = _abar_at(schedule, t)
    c0 = np.sqrt(abar_prev) * beta / (1.0 - abar)
    ct = np.sqrt(alpha) * (1.0 - abar_prev) / (1.0 - abar)
    x0 = np.asarray(x0)
    xt = np.asarray(xt)
    dt = x0.dtype if x0.dtype.kind == "f" else np.float64
    return (c0 * x0 + ct * xt).astype(dt)


def predict_x0_from_eps(xt: np.ndarray, eps_hat: np.ndarray, t: int, schedule) -> np.ndarray:
    """Invert the forward reparameterization: (x_t - sqrt(1-abar)*eps) / sqrt(abar)."""
    xt = np.asarray(xt)
    eps_hat = np.asarray(eps_hat)
    if xt.shape != eps_hat.shape:
        raise ValueError(f"xt shape {xt.shape} != eps_hat shape {eps_hat.shape}")
    if isinstance(schedule, NoiseSchedule):
        schedule._check_t(t)
    else:
        _check_view_t(schedule, t)
    abar = _abar_at(schedule, t)
    dt = xt.dtype if xt.dtype.kind == "f" else np.float64
    return ((xt - np.sqrt(1.0 - abar) * eps_hat) / np.sqrt(abar)).astype(dt)


def respace(schedule: NoiseSchedule, n_steps: int) -> SamplingScheduleView:
    """Evenly strided view of ``n_steps`` timesteps ending at T.

    The effective beta between consecutive selections s < s' is
    1 - abar_{s'} / abar_s, so the view's alpha_bar coincides with the
    parent's at every selected step.
    """
    T = schedule.T
    if not 1 <= n_steps <= T:
        raise ValueError(f"n_steps must be in 1..{T}, got {n_steps}")
    # i*T/n for i = 1..n, rounded; strictly increasing and ends at T
    steps = np.unique(np.round(np.arange(1, n_steps + 1) * (T / n_steps)).astype(np.int64))
    steps[-1] = T
    if len(steps) != n_steps:
        # rounding collisions can only happen when n_steps is close to T;
        # fall back to an exact linear selection
        steps = np.linspace(1, T, n_steps).round().astype(np.int64)
        steps = np.unique(steps)
        assert len(steps) == n_steps, "could not select distinct steps"
    abar = schedule.alpha_bar[steps - 1]
    prev = np.concatenate(([1.0], abar[:-1]))
    beta_eff = 1.0 - abar / prev
    alpha_eff = 1.0 - beta_eff
    return SamplingScheduleView(
        parent=schedule,
        steps=steps,
        beta=beta_eff,
        alpha=alpha_eff,
        alpha_bar=abar.copy(),
        posterior_variance=_posterior_variance(beta_eff, abar),
    )
