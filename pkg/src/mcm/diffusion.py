"""Discrete noise schedules, forward diffusion, and the deterministic DDIM
solver with classifier-free guidance.

Timesteps are integer indices n in [0, N]; alpha_bar[0] is exactly 1 so the
index 0 means "clean data". Conditioning tokens are class ids (int) or None
for the unconditional token. Denoiser models are duck-typed: anything with
`predict_eps_batch(xs, ns, cs) -> array` works, which keeps this module
independent of any particular backbone.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, StructuralError
from .rng import rng_for


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear-beta schedule over N discrete steps.

    beta has length N; alpha_bar has length N+1 with alpha_bar[0] = 1 and
    alpha_bar[n] = prod_{i<n} (1 - beta[i]), strictly decreasing.
    """

    beta: np.ndarray
    alpha_bar: np.ndarray

    @property
    def n_steps(self) -> int:
        return len(self.beta)

    def sqrt_ab(self, n: int) -> float:
        return float(np.sqrt(self.alpha_bar[n]))

    def sqrt_one_minus_ab(self, n: int) -> float:
        return float(np.sqrt(1.0 - self.alpha_bar[n]))


def make_schedule(n: int, beta_min: float, beta_max: float) -> NoiseSchedule:
    if n < 1:
        raise ConfigError(f"schedule needs at least one step, got {n}")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ConfigError(f"need 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]")
    beta = np.linspace(beta_min, beta_max, n)
    alpha_bar = np.empty(n + 1, dtype=np.float64)
    alpha_bar[0] = 1.0
    alpha_bar[1:] = np.cumprod(1.0 - beta)
    return NoiseSchedule(beta=beta, alpha_bar=alpha_bar)


def _check_index(n: int, sched: NoiseSchedule) -> None:
    if not (0 <= n <= sched.n_steps):
        raise ContractError(f"timestep {n} outside [0, {sched.n_steps}]")


def add_noise(x0: np.ndarray, eps: np.ndarray, n: int, sched: NoiseSchedule) -> np.ndarray:
    """Forward diffusion: sqrt(ab_n) * x0 + sqrt(1 - ab_n) * eps."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise StructuralError(f"x0 shape {x0.shape} != eps shape {eps.shape}")
    _check_index(n, sched)
    return sched.sqrt_ab(n) * x0 + sched.sqrt_one_minus_ab(n) * eps


# DDIM -----------------------------------------------------------------------


def _eps_batch(model, xs: np.ndarray, n: int, cs) -> np.ndarray:
    ns = np.full(xs.shape[0], n, dtype=np.int64)
    return model.predict_eps_batch(xs, ns, cs)


def ddim_step_batch(model, xs: np.ndarray, n_from: int, n_to: int, cs,
                    sched: NoiseSchedule) -> np.ndarray:
    """Deterministic DDIM update for a batch sharing one (n_from, n_to) pair."""
    _check_index(n_from, sched)
    _check_index(n_to, sched)
    if n_to > n_from:
        raise ContractError(f"ddim step must go backward in time: {n_from} -> {n_to}")
    if n_to == n_from:  # degenerate zero-length step, used by identity checks
        return np.array(xs, dtype=np.float64)
    eps = _eps_batch(model, xs, n_from, cs)
    sa_f, so_f = sched.sqrt_ab(n_from), sched.sqrt_one_minus_ab(n_from)
    sa_t, so_t = sched.sqrt_ab(n_to), sched.sqrt_one_minus_ab(n_to)
    x0_pred = (xs - so_f * eps) / sa_f
    return sa_t * x0_pred + so_t * eps


def ddim_step(model, x: np.ndarray, n_from: int, n_to: int, c,
              sched: NoiseSchedule) -> np.ndarray:
    return ddim_step_batch(model, np.asarray(x, dtype=np.float64)[None], n_from, n_to,
                           [c], sched)[0]


def cfg_ddim_step_batch(model, xs: np.ndarray, n_from: int, n_to: int, cs, w: float,
                        sched: NoiseSchedule) -> np.ndarray:
    """Classifier-free-guided DDIM: combine the conditional and unconditional
    solver increments as (1+w) * d_cond - w * d_uncond on top of x."""
    if any(c is None for c in cs):
        raise ContractError("guided step needs a class token, not the null token")
    if w < 0:
        raise ContractError(f"guidance weight must be >= 0, got {w}")
    if w == 0.0:  # exact reduction to the conditional step
        return ddim_step_batch(model, xs, n_from, n_to, cs, sched)
    d_c = ddim_step_batch(model, xs, n_from, n_to, cs, sched) - xs
    d_u = ddim_step_batch(model, xs, n_from, n_to, [None] * len(cs), sched) - xs
    return xs + (1.0 + w) * d_c - w * d_u


def cfg_ddim_step(model, x: np.ndarray, n_from: int, n_to: int, c, w: float,
                  sched: NoiseSchedule) -> np.ndarray:
    return cfg_ddim_step_batch(model, np.asarray(x, dtype=np.float64)[None], n_from,
                               n_to, [c], w, sched)[0]


def uniform_step_list(n_total: int, count: int) -> list[int]:
    """`count` solver steps on an evenly spaced grid from n_total down to 0."""
    if count < 1 or count > n_total:
        raise ContractError(f"step count {count} outside [1, {n_total}]")
    pts = np.rint(np.linspace(n_total, 0, count + 1)).astype(int)
    return [int(p) for p in pts]


def ddim_sample(model, shape, c, w: float, steps, seed: int,
                sched: NoiseSchedule) -> np.ndarray:
    """Iterated guided DDIM from Gaussian noise along a decreasing step list."""
    steps = [int(s) for s in steps]
    if not steps:
        raise ContractError("empty step list")
    if steps[-1] != 0:
        raise ContractError("step list must end at 0")
    if any(b >= a for a, b in zip(steps, steps[1:])):
        raise ContractError("step list must be strictly decreasing")
    _check_index(steps[0], sched)
    rng = rng_for(seed, "ddim_sample")
    x = rng.standard_normal(shape)
    for n_from, n_to in zip(steps, steps[1:]):
        x = cfg_ddim_step_batch(model, x[None], n_from, n_to, [c], w, sched)[0]
    return x
