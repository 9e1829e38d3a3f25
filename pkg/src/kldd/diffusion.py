"""Denoising diffusion machinery.

A linear noise schedule, the closed-form forward noising step, its
inversion to an x0 estimate, the stochastic reverse step, and the full
ancestral sampling loop. Steps are indexed t = 1..T; array slot t-1
holds the step-t constants.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

DEFAULT_T = 100


@dataclass(frozen=True)
class DiffusionSchedule:
    """Per-step noise constants; immutable and shareable across threads."""

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray

    def check_t(self, t: int) -> None:
        if not (isinstance(t, (int, np.integer)) and 1 <= t <= self.T):
            raise ValueError(f"step t={t} outside 1..{self.T}")


def default_beta_range(T: int) -> tuple[float, float]:
    """Endpoints scaled so T steps destroy as much signal as the usual
    thousand-step [1e-4, 0.02] ramp. Valid (end < 1) only for T > 20;
    shorter schedules need explicit endpoints."""
    return 0.1 / T, 20.0 / T


def build_schedule(T: int, beta_start: float | None = None, beta_end: float | None = None) -> DiffusionSchedule:
    """Linear beta ramp and every derived per-step constant.

    sigma_t is the posterior std sqrt((1 - abar_{t-1})/(1 - abar_t) * beta_t)
    with abar_0 taken as 1, which makes the t=1 step deterministic.
    """
    if not (isinstance(T, (int, np.integer)) and T >= 1):
        raise ValueError(f"step count must be a positive integer, got {T}")
    if beta_start is None and beta_end is None:
        beta_start, beta_end = default_beta_range(T)
    if beta_start is None or beta_end is None:
        raise ValueError("give both beta endpoints or neither")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    alpha_bar_prev = np.concatenate([[1.0], alpha_bar[:-1]])
    sigma = np.sqrt((1.0 - alpha_bar_prev) / (1.0 - alpha_bar) * beta)
    return DiffusionSchedule(T=int(T), beta=beta, alpha=alpha, alpha_bar=alpha_bar, sigma=sigma)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def q_sample(x0, t: int, eps, sched: DiffusionSchedule) -> Tensor:
    """Noise x0 straight to step t: x_t = sqrt(abar_t) x0 + sqrt(1-abar_t) eps."""
    sched.check_t(t)
    x0, eps = _as_tensor(x0), _as_tensor(eps)
    if x0.shape != eps.shape:
        raise ValueError(f"x0 {x0.shape} and eps {eps.shape} must match")
    ab = sched.alpha_bar[t - 1]
    return ad.add(ad.scale(x0, np.sqrt(ab)), ad.scale(eps, np.sqrt(1.0 - ab)))


def predict_x0(xt, t: int, eps_pred, sched: DiffusionSchedule) -> Tensor:
    """Invert the forward step and clip the estimate into [-1, 1]."""
    sched.check_t(t)
    xt, eps_pred = _as_tensor(xt), _as_tensor(eps_pred)
    if xt.shape != eps_pred.shape:
        raise ValueError(f"xt {xt.shape} and eps_pred {eps_pred.shape} must match")
    ab = sched.alpha_bar[t - 1]
    raw = ad.scale(ad.sub(xt, ad.scale(eps_pred, np.sqrt(1.0 - ab))), 1.0 / np.sqrt(ab))
    return ad.clip(raw, -1.0, 1.0)


def p_sample_step(xt, t: int, eps_pred, z, sched: DiffusionSchedule) -> Tensor:
    """One reverse transition.

    x_{t-1} = (x_t - ((1-alpha_t)/sqrt(1-abar_t)) eps_pred)/sqrt(alpha_t)
              + sigma_t z, with z forced to zero at t=1.
    """
    sched.check_t(t)
    xt, eps_pred = _as_tensor(xt), _as_tensor(eps_pred)
    if xt.shape != eps_pred.shape:
        raise ValueError(f"xt {xt.shape} and eps_pred {eps_pred.shape} must match")
    a = sched.alpha[t - 1]
    ab = sched.alpha_bar[t - 1]
    mean = ad.scale(ad.sub(xt, ad.scale(eps_pred, (1.0 - a) / np.sqrt(1.0 - ab))), 1.0 / np.sqrt(a))
    if t == 1:
        return mean
    z = _as_tensor(z)
    if z.shape != xt.shape:
        raise ValueError(f"z {z.shape} must match xt {xt.shape}")
    return ad.add(mean, ad.scale(z, sched.sigma[t - 1]))


def sample_loop(denoiser, condition, sched: DiffusionSchedule, rng_seed: int) -> np.ndarray:
    """Ancestral sampling from pure noise down to an x0 estimate.

    denoiser is called as denoiser(xt, t, condition) and must return the
    predicted noise with xt's shape. Each step clips the implied x0
    estimate into [-1, 1] before stepping (the predicted noise is
    re-derived from the clipped estimate), which keeps early steps from
    drifting far outside the mask range. Deterministic per rng_seed.

    Returns a numpy array: one channel per condition batch entry, in
    [-1, 1], spatial shape matching the condition.
    """
    cond = _as_tensor(condition)
    squeeze = cond.ndim == 3
    if squeeze:
        cond = Tensor(cond.data[None])
    if cond.ndim != 4:
        raise ValueError(f"condition must be (C,H,W) or (N,C,H,W), got {cond.shape}")
    n, _, h, w = cond.shape
    rng = np.random.default_rng(rng_seed)
    x = Tensor(rng.standard_normal((n, 1, h, w)))
    with ad.no_grad():
        for t in range(sched.T, 0, -1):
            eps = denoiser(x, t, cond)
            x0_hat = predict_x0(x, t, eps, sched)
            # Noise consistent with the clipped estimate: when the clip was
            # inactive this equals eps exactly and the step is the raw
            # reverse formula.
            ab = sched.alpha_bar[t - 1]
            eps_adj = ad.scale(ad.sub(x, ad.scale(x0_hat, np.sqrt(ab))), 1.0 / np.sqrt(1.0 - ab))
            z = rng.standard_normal(x.shape) if t > 1 else np.zeros(x.shape)
            x = p_sample_step(x, t, eps_adj, z, sched)
    out = np.clip(x.data, -1.0, 1.0)
    return out[0] if squeeze else out
