"""Consistency-function parameterization, distillation and adversarial
losses, the distillation training loop, and few-step sampling.

The consistency function maps a noisy grid at any timestep to a clean-data
estimate, with skip/output coefficients chosen so that at index 0 the map is
exactly the identity. Distillation pulls the student's output at n+k toward
the EMA student's output at n, where the intermediate state is produced by
one guided DDIM step of the frozen teacher. An adversarial hinge loss with
an R1 penalty on the head inputs pushes the student's clean estimates onto
the data manifold.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tape
from .diffusion import NoiseSchedule, add_noise, cfg_ddim_step_batch
from .errors import ConfigError, ContractError
from .models import (DenoiserModel, DiscHeadSet, FeatureNet, disc_score_batch,
                     head_input_grad_batch)
from .optim import AdamWState, adamw_step, ema_update
from .params import ParamSet
from .rng import rng_for
from .tape import Tensor


@dataclass(frozen=True)
class ConsistencySchedule:
    """Skip/output coefficients per timestep plus the noise-schedule factors
    needed to turn an epsilon prediction into a clean-data estimate.

    c_skip[0] == 1 and c_out[0] == 0 exactly, so the map at index 0 is the
    identity regardless of the model.
    """

    c_skip: np.ndarray
    c_out: np.ndarray
    sqrt_ab: np.ndarray
    sqrt_one_minus_ab: np.ndarray

    def __post_init__(self):
        if self.c_skip[0] != 1.0 or self.c_out[0] != 0.0:
            raise ConfigError("boundary condition violated: need c_skip[0]=1, c_out[0]=0")
        if not (np.all(np.isfinite(self.c_skip)) and np.all(np.isfinite(self.c_out))):
            raise ConfigError("non-finite consistency coefficients")

    @property
    def n_steps(self) -> int:
        return len(self.c_skip) - 1

    @staticmethod
    def from_noise_schedule(sched: NoiseSchedule, sigma_data: float = 0.5) -> "ConsistencySchedule":
        ab = sched.alpha_bar
        tau = np.sqrt((1.0 - ab) / ab)  # 0 at n=0, increasing in n
        c_skip = sigma_data ** 2 / (tau ** 2 + sigma_data ** 2)
        c_out = tau / np.sqrt(tau ** 2 + sigma_data ** 2)
        return ConsistencySchedule(c_skip=c_skip, c_out=c_out,
                                   sqrt_ab=np.sqrt(ab),
                                   sqrt_one_minus_ab=np.sqrt(1.0 - ab))


@dataclass(frozen=True)
class DistillConfig:
    k: int = 20                 # timestep skip between student input and teacher target
    w: float = 2.0              # guidance weight for the teacher solver step
    lam: float = 3.0            # distillation-loss weight in the total objective
    gamma: float = 1.0          # R1 penalty coefficient
    ema_rate: float = 0.95      # retained fraction of the EMA student per step
    lr: float = 1e-5            # student learning rate
    d_lr: float = 1e-3          # discriminator-head learning rate
    distance: str = "l2"        # "l2" or "huber"
    huber_delta: float = 0.01
    batch: int = 16

    def validate(self, n_steps: int) -> None:
        if not (1 <= self.k <= n_steps):
            raise ConfigError(f"skip interval {self.k} outside [1, {n_steps}]")
        if self.lam < 0:
            raise ConfigError("distillation weight must be >= 0")
        if self.gamma < 0:
            raise ConfigError("R1 coefficient must be >= 0")
        if not (0.0 <= self.ema_rate <= 1.0):
            raise ConfigError("ema rate must lie in [0, 1]")
        if self.distance not in ("l2", "huber"):
            raise ConfigError(f"unknown distance {self.distance!r}")


@dataclass
class TrainState:
    student: ParamSet
    ema: ParamSet
    disc: ParamSet
    opt_student: AdamWState
    opt_disc: AdamWState
    step: int = 0
    history: list = field(default_factory=list)


# consistency function -------------------------------------------------------


def consistency_fn_batch(model: DenoiserModel, csched: ConsistencySchedule, xs, n: int,
                         cs, leaves: dict[str, Tensor] | None = None) -> Tensor:
    """c_skip[n] * x + c_out[n] * x0_estimate(x, n, c) for a shared timestep n."""
    if not (0 <= n <= csched.n_steps):
        raise ContractError(f"timestep {n} outside [0, {csched.n_steps}]")
    x = xs if isinstance(xs, Tensor) else Tensor(np.asarray(xs, dtype=np.float64))
    c_out = float(csched.c_out[n])
    c_skip = float(csched.c_skip[n])
    if c_out == 0.0:
        return x if c_skip == 1.0 else tape.mul(x, tape.constant(c_skip))
    b = x.shape[0]
    eps = model.forward_batch(x, np.full(b, n, dtype=np.int64), cs, leaves)
    # x0 estimate from the epsilon prediction under the noise schedule
    inv_sa = 1.0 / float(csched.sqrt_ab[n])
    so = float(csched.sqrt_one_minus_ab[n])
    x0_head = tape.mul(tape.sub(x, tape.mul(eps, tape.constant(so))), tape.constant(inv_sa))
    return tape.add(tape.mul(x, tape.constant(c_skip)), tape.mul(x0_head, tape.constant(c_out)))


def consistency_fn(model: DenoiserModel, csched: ConsistencySchedule, x, n: int, c,
                   leaves: dict[str, Tensor] | None = None) -> Tensor:
    """Single-grid consistency map; identity at n = 0."""
    if isinstance(x, Tensor):
        xs = tape.reshape(x, (1,) + x.shape)
    else:
        xs = np.asarray(x, dtype=np.float64)[None]
    out = consistency_fn_batch(model, csched, xs, n, [c], leaves)
    return tape.reshape(out, out.shape[1:])


# losses ----------------------------------------------------------------------


def _distance(a: Tensor, b: Tensor, cfg: DistillConfig) -> Tensor:
    d = tape.sub(a, b)
    if cfg.distance == "l2":
        return tape.reduce_mean(tape.mul(d, d))
    return tape.reduce_mean(tape.huber(d, cfg.huber_delta))


def distill_pair(teacher: DenoiserModel, student: DenoiserModel, ema_model: DenoiserModel,
                 x0: np.ndarray, cs, n: int, cfg: DistillConfig, sched: NoiseSchedule,
                 csched: ConsistencySchedule, rng: np.random.Generator,
                 student_leaves: dict[str, Tensor] | None = None) -> tuple[Tensor, Tensor]:
    """One distillation pairing on a batch sharing timestep n.

    Draws a single Gaussian noise tensor, noises the batch to n+k, runs the
    student there, runs the guided teacher step down to n, and evaluates the
    EMA student on the result with no gradient flow. Returns the distance
    loss and the student's clean-data estimate (which feeds the adversarial
    generator loss).
    """
    n_total = sched.n_steps
    if n + cfg.k > n_total:
        raise ContractError(f"n + k = {n + cfg.k} exceeds {n_total}")
    if n < 0:
        raise ContractError("timestep must be >= 0")
    x0 = np.asarray(x0, dtype=np.float64)
    eps = rng.standard_normal(x0.shape)
    x_nk = add_noise(x0, eps, n + cfg.k, sched)
    x_hat = cfg_ddim_step_batch(teacher, x_nk, n + cfg.k, n, cs, cfg.w, sched)
    if student_leaves is None:
        student_leaves = student.lift(requires_grad=True)
    a = consistency_fn_batch(student, csched, x_nk, n + cfg.k, cs, student_leaves)
    b = consistency_fn_batch(ema_model, csched, x_hat, n, cs).detach()
    return _distance(a, b, cfg), a


def adv_generator_loss(heads: DiscHeadSet, fnet: FeatureNet, x0_pred: Tensor, cs) -> Tensor:
    """Hinge generator objective: minus the summed head scores on the student's
    clean estimates, batch-meaned. Head parameters stay frozen on this tape."""
    taps = fnet.features_batch(x0_pred)
    head_leaves = heads.lift(requires_grad=False)
    total = None
    for k, h in enumerate(taps):
        s = disc_score_batch(heads, h, k, cs, head_leaves)
        total = s if total is None else tape.add(total, s)
    return tape.neg(tape.reduce_mean(total))


def adv_discriminator_loss(heads: DiscHeadSet, fnet: FeatureNet, x0_real: np.ndarray,
                           x0_fake: np.ndarray, cs, gamma: float,
                           head_leaves: dict[str, Tensor] | None = None) -> Tensor:
    """Hinge discriminator objective with an R1 penalty on each head's input,
    evaluated at the real samples. Gradients flow into the head parameters
    only; the fake batch must already be detached from the student."""
    if gamma < 0:
        raise ConfigError(f"R1 coefficient must be >= 0, got {gamma}")
    if head_leaves is None:
        head_leaves = heads.lift(requires_grad=True)
    taps_real = fnet.features_batch(np.asarray(x0_real, dtype=np.float64))
    taps_fake = fnet.features_batch(np.asarray(x0_fake, dtype=np.float64))
    real_term = None
    fake_term = None
    for k in range(heads.k_heads):
        s_real = disc_score_batch(heads, taps_real[k].detach(), k, cs, head_leaves)
        hinge_r = tape.relu(tape.sub(tape.constant(1.0), s_real))
        term = hinge_r
        if gamma != 0.0:
            g_in = head_input_grad_batch(heads, taps_real[k].detach(), k, cs, head_leaves)
            r1 = tape.sum_squares(g_in, axis=1)
            term = tape.add(term, tape.mul(r1, tape.constant(gamma)))
        real_term = term if real_term is None else tape.add(real_term, term)
        s_fake = disc_score_batch(heads, taps_fake[k].detach(), k, cs, head_leaves)
        hinge_f = tape.relu(tape.add(tape.constant(1.0), s_fake))
        fake_term = hinge_f if fake_term is None else tape.add(fake_term, hinge_f)
    return tape.add(tape.reduce_mean(real_term), tape.reduce_mean(fake_term))


def total_loss(loss_adv_g: Tensor, loss_distil: Tensor, lam: float) -> Tensor:
    """Total student objective: adversarial generator term plus lam times the
    distillation distance."""
    if lam < 0:
        raise ConfigError(f"balancing factor must be >= 0, got {lam}")
    return tape.add(loss_adv_g, tape.mul(loss_distil, tape.constant(lam)))


# training loop ----------------------------------------------------------------


def distill_train(teacher: DenoiserModel, dataset, cfg: DistillConfig, steps: int, seed: int,
                  sched: NoiseSchedule, fnet: FeatureNet,
                  csched: ConsistencySchedule | None = None,
                  heads: DiscHeadSet | None = None,
                  on_step: Callable[[int, dict], None] | None = None) -> TrainState:
    """Run consistency distillation for `steps` steps.

    Each step does (a) a student AdamW update on the total objective,
    (b) a discriminator-head AdamW update on the hinge + R1 objective using
    the same (detached) student estimates as fakes, and (c) an EMA update of
    the target parameters. Deterministic for a fixed seed.
    """
    if not dataset:
        raise ConfigError("distillation needs a non-empty dataset")
    cfg.validate(sched.n_steps)
    if csched is None:
        csched = ConsistencySchedule.from_noise_schedule(sched)

    rng = rng_for(seed, "distill")
    student = DenoiserModel.from_arch(teacher.arch(), params=teacher.params.copy())
    ema_model = DenoiserModel.from_arch(teacher.arch(), params=teacher.params.copy())
    if heads is None:
        heads = DiscHeadSet(k_heads=fnet.k_taps, feat_dim=fnet.dim, hidden=32,
                            num_classes=teacher.num_classes)
        heads.init_params(rng_for(seed, "disc"))

    opt_s = AdamWState.init(student.params, lr=cfg.lr)
    opt_d = AdamWState.init(heads.params, lr=cfg.d_lr)
    state = TrainState(student=student.params, ema=ema_model.params, disc=heads.params,
                       opt_student=opt_s, opt_disc=opt_d)

    grids = np.stack([s.grid for s in dataset])
    labels = [s.label for s in dataset]

    for step in range(steps):
        idx = rng.integers(0, len(dataset), size=cfg.batch)
        x0 = grids[idx]
        cs = [labels[i] for i in idx]
        n = int(rng.integers(0, sched.n_steps - cfg.k + 1))

        # student update on the total objective
        student_leaves = student.lift(requires_grad=True)
        loss_distil, x0_pred = distill_pair(teacher, student, ema_model, x0, cs, n,
                                            cfg, sched, csched, rng, student_leaves)
        loss_g = adv_generator_loss(heads, fnet, x0_pred, cs)
        loss = total_loss(loss_g, loss_distil, cfg.lam)
        grads_s = tape.grad(loss, student_leaves)
        new_params, opt_s = adamw_step(student.params, ParamSet(grads_s), opt_s)
        student.params = new_params

        # discriminator update on the same fakes, detached from the student
        head_leaves = heads.lift(requires_grad=True)
        loss_d = adv_discriminator_loss(heads, fnet, x0, x0_pred.detach().data, cs,
                                        cfg.gamma, head_leaves)
        grads_d = tape.grad(loss_d, head_leaves)
        new_disc, opt_d = adamw_step(heads.params, ParamSet(grads_d), opt_d)
        heads.params = new_disc

        # EMA target
        ema_model.params = ema_update(ema_model.params, student.params, cfg.ema_rate)

        state.student = student.params
        state.ema = ema_model.params
        state.disc = heads.params
        state.opt_student = opt_s
        state.opt_disc = opt_d
        state.step = step + 1
        metrics = {"distil": loss_distil.item(), "adv_g": loss_g.item(), "adv_d": loss_d.item()}
        state.history.append({"step": step, **metrics})
        if on_step is not None:
            on_step(step, metrics)
    return state


# few-step sampling -------------------------------------------------------------


def sample_levels(n_total: int, num_steps: int) -> list[int]:
    """Timesteps visited by multistep consistency sampling: a uniform grid
    from n_total down to n_total/num_steps (the clean point is the output)."""
    if not (1 <= num_steps <= 8):
        raise ContractError(f"num_steps {num_steps} outside [1, 8]")
    if num_steps > n_total:
        raise ContractError("more sampling steps than schedule steps")
    return [int(round(n_total * (num_steps - i) / num_steps)) for i in range(num_steps)]


def cm_sample(student: DenoiserModel, csched: ConsistencySchedule, shape, c,
              num_steps: int, sched: NoiseSchedule, seed: int) -> np.ndarray:
    """Few-step consistency sampling: map pure noise to a clean estimate, then
    re-noise to the next lower level with fresh noise and repeat. Exactly
    num_steps model evaluations; deterministic for a fixed seed."""
    levels = sample_levels(sched.n_steps, num_steps)
    rng = rng_for(seed, "sample")
    x = rng.standard_normal(shape)
    x0 = x
    for i, n in enumerate(levels):
        x0 = consistency_fn_batch(student, csched, x[None], n, [c]).data[0]
        if i + 1 < len(levels):
            eps = rng.standard_normal(shape)
            x = add_noise(x0, eps, levels[i + 1], sched)
    return x0
