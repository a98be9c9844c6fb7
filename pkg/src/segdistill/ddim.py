"""Deterministic (eta = 0) DDIM sampling and inversion.

Timestep convention: index 0 is clean data with alpha_bar = 1; sampling walks
t = S .. 1 and inversion walks 0 .. S-1. Noise predictors are plain callables
``predictor(z, t, alpha_bar, condition) -> eps``; an optional
``predictor.vjp(z, t, alpha_bar, condition, cotangent)`` supplies the
vector-Jacobian product with respect to ``z``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative signal fractions alpha_bar[0..S] on a DDIM step grid.

    ``timesteps`` records which step of the underlying training schedule each
    grid point corresponds to (0 for the clean end).
    """

    alpha_bar: np.ndarray
    timesteps: np.ndarray | None = None

    def __post_init__(self):
        a = np.asarray(self.alpha_bar, dtype=np.float64)
        if a.ndim != 1 or a.size < 2:
            raise ScheduleError("schedule needs at least alpha_bar[0] and alpha_bar[1]")
        if not (np.all(a > 0) and np.all(a <= 1)):
            raise ScheduleError("alpha_bar values must lie in (0, 1]")
        if not np.all(np.diff(a) < 0):
            raise ScheduleError("alpha_bar must be strictly decreasing in t")
        a.setflags(write=False)
        object.__setattr__(self, "alpha_bar", a)
        ts = np.arange(a.size) if self.timesteps is None else np.asarray(self.timesteps)
        object.__setattr__(self, "timesteps", ts)

    @property
    def steps(self) -> int:
        return self.alpha_bar.size - 1

    def __getitem__(self, t: int) -> float:
        return float(self.alpha_bar[t])


def _base_betas(kind: str, train_steps: int, beta_start: float, beta_end: float, cosine_s: float):
    if kind == "linear":
        return np.linspace(beta_start, beta_end, train_steps, dtype=np.float64)
    if kind == "scaled_linear":
        return np.linspace(beta_start**0.5, beta_end**0.5, train_steps, dtype=np.float64) ** 2
    if kind == "cosine":
        f = lambda u: math.cos((u + cosine_s) / (1 + cosine_s) * math.pi / 2) ** 2
        return np.array(
            [min(1 - f((i + 1) / train_steps) / f(i / train_steps), 0.999) for i in range(train_steps)]
        )
    raise ScheduleError(f"unknown schedule kind {kind!r}")


def build_schedule(
    kind: str = "linear",
    steps: int = 50,
    beta_start: float = 1e-4,
    beta_end: float = 0.02,
    train_steps: int = 1000,
    cosine_s: float = 0.008,
) -> NoiseSchedule:
    """Subsample a ``train_steps``-long beta schedule onto an evenly spaced
    grid of ``steps`` DDIM steps ending at the last training step."""
    if steps < 1:
        raise ScheduleError("steps must be >= 1")
    if steps > train_steps:
        raise ScheduleError(f"cannot place {steps} steps on a {train_steps}-step schedule")
    betas = _base_betas(kind, train_steps, beta_start, beta_end, cosine_s)
    if np.any(betas <= 0) or np.any(betas >= 1):
        raise ScheduleError("betas must lie in (0, 1)")
    base = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    if np.any(base <= 0):
        raise ScheduleError("schedule parameters drive alpha_bar to zero")
    grid = np.round(np.arange(steps + 1) * train_steps / steps).astype(np.int64)
    return NoiseSchedule(base[grid], grid)


@dataclass
class LatentState:
    z: np.ndarray
    t: int


@dataclass(frozen=True)
class Condition:
    """What the predictor is conditioned on: the ordered class list (stands in
    for the text prompt) and the dense layout mask."""

    class_list: tuple[int, ...] = ()
    mask: np.ndarray | None = field(default=None, compare=False)
    unconditional: bool = False

    def null(self) -> "Condition":
        return Condition((), None, True)


class NoisePredictor(Protocol):
    def __call__(self, z: np.ndarray, t: int, alpha_bar: float, condition: Condition) -> np.ndarray: ...


def predict_clean(z_t: np.ndarray, eps: np.ndarray, alpha_bar_t: float) -> np.ndarray:
    if alpha_bar_t <= 0:
        raise ScheduleError("alpha_bar_t = 0: clean-sample estimate is singular")
    return (z_t - math.sqrt(1.0 - alpha_bar_t) * eps) / math.sqrt(alpha_bar_t)


def _move(z_t, eps, a_from, a_to):
    z0 = predict_clean(z_t, eps, a_from)
    return math.sqrt(a_to) * z0 + math.sqrt(1.0 - a_to) * eps


def ddim_step(state: LatentState, eps: np.ndarray, schedule: NoiseSchedule) -> LatentState:
    """One denoising step t -> t-1."""
    t = state.t
    if not 1 <= t <= schedule.steps:
        raise ScheduleError(f"cannot step down from t={t} on a {schedule.steps}-step grid")
    return LatentState(_move(state.z, eps, schedule[t], schedule[t - 1]), t - 1)


def ddim_invert(state: LatentState, eps: np.ndarray, schedule: NoiseSchedule) -> LatentState:
    """One inversion step t -> t+1, reusing the noise predicted at t."""
    t = state.t
    if not 0 <= t <= schedule.steps - 1:
        raise ScheduleError(f"cannot invert past t={t} on a {schedule.steps}-step grid")
    return LatentState(_move(state.z, eps, schedule[t], schedule[t + 1]), t + 1)


def cfg_combine(eps_cond: np.ndarray, eps_uncond: np.ndarray, scale: float) -> np.ndarray:
    return eps_uncond + scale * (eps_cond - eps_uncond)


# -- predictors --------------------------------------------------------------


class ZeroPredictor:
    """eps == 0 everywhere; DDIM then reduces to pure rescaling."""

    def __call__(self, z, t, alpha_bar, condition):
        return np.zeros_like(z, dtype=np.float64)

    def vjp(self, z, t, alpha_bar, condition, cotangent):
        return np.zeros_like(z, dtype=np.float64)


class GaussianPredictor:
    """Bayes-optimal noise predictor for data ~ Normal(mean, variance * I).

    With v = a * var + 1 - a, the posterior mean is
    E[z0 | z_t] = mean + sqrt(a) var / v (z_t - sqrt(a) mean) and the implied
    noise is eps = sqrt(1 - a) / v (z_t - sqrt(a) mean). This form is finite
    at a = 1, where eps = 0.

    ``conditional_mean`` maps a (non-null) condition to a data mean, giving a
    conditional predictor; null conditions fall back to ``mean``.
    """

    def __init__(
        self,
        mean,
        variance: float,
        conditional_mean: Callable[[Condition], np.ndarray] | None = None,
    ):
        if not variance > 0:
            raise ValueError("variance must be positive")
        self.mean = np.asarray(mean, dtype=np.float64)
        self.variance = float(variance)
        self.conditional_mean = conditional_mean

    def _mean(self, condition):
        if self.conditional_mean is not None and condition is not None and not condition.unconditional:
            return np.asarray(self.conditional_mean(condition), dtype=np.float64)
        return self.mean

    def _gain(self, a):
        return math.sqrt(1.0 - a) / (a * self.variance + 1.0 - a)

    def posterior_mean(self, z, alpha_bar, condition=None):
        mu = self._mean(condition)
        a = alpha_bar
        return mu + math.sqrt(a) * self.variance / (a * self.variance + 1 - a) * (z - math.sqrt(a) * mu)

    def __call__(self, z, t, alpha_bar, condition=None):
        mu = self._mean(condition)
        return self._gain(alpha_bar) * (np.asarray(z, dtype=np.float64) - math.sqrt(alpha_bar) * mu)

    def vjp(self, z, t, alpha_bar, condition, cotangent):
        return self._gain(alpha_bar) * np.asarray(cotangent, dtype=np.float64)


def make_linear_gaussian_predictor(mean, variance: float) -> GaussianPredictor:
    return GaussianPredictor(mean, variance)


class CFGPredictor:
    """Classifier-free guidance as a predictor: uncond + s * (cond - uncond)."""

    def __init__(self, base, scale: float):
        self.base = base
        self.scale = float(scale)

    def __call__(self, z, t, alpha_bar, condition):
        eps_c = self.base(z, t, alpha_bar, condition)
        if self.scale == 1.0:
            return eps_c
        eps_u = self.base(z, t, alpha_bar, condition.null())
        return cfg_combine(eps_c, eps_u, self.scale)

    def vjp(self, z, t, alpha_bar, condition, cotangent):
        vjp_c = predictor_vjp(self.base, z, t, alpha_bar, condition, cotangent)
        if self.scale == 1.0:
            return vjp_c
        vjp_u = predictor_vjp(self.base, z, t, alpha_bar, condition.null(), cotangent)
        return cfg_combine(vjp_c, vjp_u, self.scale)


def fd_step(x: np.ndarray) -> float:
    # cube root of machine epsilon balances truncation against cancellation
    return np.finfo(np.float64).eps ** (1 / 3) * (1.0 + float(np.max(np.abs(x), initial=0.0)))


def finite_difference_vjp(fn: Callable[[np.ndarray], np.ndarray], x: np.ndarray, cotangent, h: float | None = None):
    """Central-difference estimate of cotangent^T J_fn(x)."""
    x = np.asarray(x, dtype=np.float64)
    h = fd_step(x) if h is None else h
    out = np.empty(x.size)
    xp = x.copy().ravel()
    for i in range(x.size):
        orig = xp[i]
        xp[i] = orig + h
        fp = np.vdot(cotangent, fn(xp.reshape(x.shape)))
        xp[i] = orig - h
        fm = np.vdot(cotangent, fn(xp.reshape(x.shape)))
        xp[i] = orig
        out[i] = (fp - fm) / (2 * h)
    return out.reshape(x.shape)


def predictor_vjp(predictor, z, t, alpha_bar, condition, cotangent, allow_fd: bool = True):
    if hasattr(predictor, "vjp"):
        return predictor.vjp(z, t, alpha_bar, condition, cotangent)
    if not allow_fd:
        raise NotImplementedError(f"{type(predictor).__name__} has no gradient and finite differences are disabled")
    return finite_difference_vjp(lambda zz: predictor(zz, t, alpha_bar, condition), z, cotangent)


# -- trajectories ------------------------------------------------------------

StepHook = Callable[[int, np.ndarray, np.ndarray], np.ndarray]


def invert(z0, predictor, schedule: NoiseSchedule, condition: Condition | None = None) -> np.ndarray:
    """Map a clean latent to z_S along the deterministic DDIM trajectory."""
    state = LatentState(np.asarray(z0, dtype=np.float64), 0)
    while state.t < schedule.steps:
        eps = predictor(state.z, state.t, schedule[state.t], condition)
        state = ddim_invert(state, eps, schedule)
    return state.z


def sample(
    z_T,
    predictor,
    schedule: NoiseSchedule,
    condition: Condition | None = None,
    guide: StepHook | None = None,
    trace: list | None = None,
) -> np.ndarray:
    """Run t = S .. 1. ``guide(t, z_t, eps)`` may return a modified noise."""
    state = LatentState(np.asarray(z_T, dtype=np.float64), schedule.steps)
    while state.t > 0:
        eps = predictor(state.z, state.t, schedule[state.t], condition)
        if guide is not None:
            eps = guide(state.t, state.z, eps)
        if trace is not None:
            trace.append({"t": state.t, "alpha_bar": schedule[state.t], "z_norm": float(np.linalg.norm(state.z))})
        state = ddim_step(state, eps, schedule)
    return state.z


def round_trip_error(z0, predictor, schedule, condition=None) -> float:
    z0 = np.asarray(z0, dtype=np.float64)
    back = sample(invert(z0, predictor, schedule, condition), predictor, schedule, condition)
    return float(np.linalg.norm(back - z0) / np.linalg.norm(z0))
