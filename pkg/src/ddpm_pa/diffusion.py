"""Gaussian diffusion mathematics: forward noising, posterior, reverse steps, losses.

Timesteps are 1-based throughout (``1 <= t <= T``).  Schedule arrays are stored
0-based, so step ``t`` lives at index ``t - 1``.  All schedule arrays are kept in
float64 and cast to the working dtype of the batch on use.

Forward process::

    x_t = sqrt(abar_t) * x_0 + sqrt(1 - abar_t) * eps

Posterior ``q(x_{t-1} | x_t, x_0) = N(mu_hat, beta_hat)`` with::

    mu_hat   = sqrt(abar_{t-1}) beta_t / (1 - abar_t) * x_0
             + sqrt(alpha_t) (1 - abar_{t-1}) / (1 - abar_t) * x_t
    beta_hat = (1 - abar_{t-1}) / (1 - abar_t) * beta_t
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import torch

Generator = Union[torch.Generator, Sequence[torch.Generator], None]

VARIANCE_MODES = ("posterior", "beta", "learned")


@dataclass(frozen=True)
class DenoiserOutput:
    """What a denoiser returns for a batch of noised images.

    ``var_interp`` is the interpolation coefficient ``v`` in ``[0, 1]`` for the
    learned variance ``exp(v log beta_t + (1 - v) log beta_hat_t)``.  It is
    ``None`` for fixed-variance models.
    """

    eps_pred: torch.Tensor
    var_interp: Optional[torch.Tensor] = None


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    T: int
    beta: torch.Tensor
    alpha: torch.Tensor
    alpha_bar: torch.Tensor
    alpha_bar_prev: torch.Tensor
    posterior_beta_hat: torch.Tensor
    posterior_log_var_clipped: torch.Tensor
    posterior_coef_x0: torch.Tensor
    posterior_coef_xt: torch.Tensor

    @classmethod
    def from_betas(cls, beta: torch.Tensor) -> "NoiseSchedule":
        beta = torch.as_tensor(beta, dtype=torch.float64).clone()
        if beta.ndim != 1 or beta.numel() < 1:
            raise ValueError("beta must be a non-empty 1-D array")
        if not bool(((beta > 0) & (beta < 1)).all()):
            raise ValueError("every beta_t must lie in (0, 1)")
        T = beta.numel()
        alpha = 1.0 - beta
        alpha_bar = torch.cumprod(alpha, dim=0)
        alpha_bar_prev = torch.cat([torch.ones(1, dtype=torch.float64), alpha_bar[:-1]])
        beta_hat = beta * (1.0 - alpha_bar_prev) / (1.0 - alpha_bar)
        # beta_hat_1 == 0; the log is clipped to beta_hat_2 (beta_1 when T == 1).
        first = beta_hat[1] if T > 1 else beta[0]
        log_var_clipped = torch.log(torch.cat([first.reshape(1), beta_hat[1:]]))
        coef_x0 = beta * torch.sqrt(alpha_bar_prev) / (1.0 - alpha_bar)
        coef_xt = (1.0 - alpha_bar_prev) * torch.sqrt(alpha) / (1.0 - alpha_bar)
        # beta_1 / (1 - alpha_bar_1) rounds away from 1; pin the t = 1 coefficients.
        coef_x0[0], coef_xt[0] = 1.0, 0.0
        return cls(
            T=T,
            beta=beta,
            alpha=alpha,
            alpha_bar=alpha_bar,
            alpha_bar_prev=alpha_bar_prev,
            posterior_beta_hat=beta_hat,
            posterior_log_var_clipped=log_var_clipped,
            posterior_coef_x0=coef_x0,
            posterior_coef_xt=coef_xt,
        )


def default_beta_range(T: int) -> tuple[float, float]:
    """Linear-schedule endpoints (1e-4, 0.02) rescaled by ``1000 / T``.

    Both endpoints are capped at 0.999 so that very short chains stay valid.
    """
    scale = 1000.0 / T
    return min(1e-4 * scale, 0.999), min(0.02 * scale, 0.999)


def build_schedule(
    T: int, beta_start: Optional[float] = None, beta_end: Optional[float] = None
) -> NoiseSchedule:
    """Linear beta schedule over ``T`` steps with all derived coefficients."""
    if not isinstance(T, int) or isinstance(T, bool) or T < 1:
        raise ValueError(f"T must be a positive integer, got {T!r}")
    d_start, d_end = default_beta_range(T)
    beta_start = d_start if beta_start is None else float(beta_start)
    beta_end = d_end if beta_end is None else float(beta_end)
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    beta = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
    return NoiseSchedule.from_betas(beta)


def _timesteps(t, n: int, s: NoiseSchedule) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=torch.long)
    if t.ndim == 0:
        t = t.expand(n)
    if t.shape != (n,):
        raise ValueError(f"t must be a scalar or have shape ({n},), got {tuple(t.shape)}")
    if bool(((t < 1) | (t > s.T)).any()):
        raise ValueError(f"timesteps must lie in [1, {s.T}]")
    return t


def _extract(arr: torch.Tensor, t: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    out = arr[t - 1].to(dtype=like.dtype, device=like.device)
    return out.reshape((-1,) + (1,) * (like.ndim - 1))


def _check_same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def q_sample(x0: torch.Tensor, t, eps: torch.Tensor, s: NoiseSchedule) -> torch.Tensor:
    """Draw ``x_t ~ q(x_t | x_0)`` given the noise ``eps``."""
    _check_same_shape(x0, eps, "q_sample")
    t = _timesteps(t, x0.shape[0], s)
    return (
        _extract(torch.sqrt(s.alpha_bar), t, x0) * x0
        + _extract(torch.sqrt(1.0 - s.alpha_bar), t, x0) * eps
    )


def posterior_params(
    x0: torch.Tensor, xt: torch.Tensor, t, s: NoiseSchedule
) -> tuple[torch.Tensor, torch.Tensor]:
    """Mean and variance of ``q(x_{t-1} | x_t, x_0)``; variance is per-sample."""
    _check_same_shape(x0, xt, "posterior_params")
    t = _timesteps(t, x0.shape[0], s)
    mu = _extract(s.posterior_coef_x0, t, x0) * x0 + _extract(s.posterior_coef_xt, t, xt) * xt
    return mu, s.posterior_beta_hat[t - 1].to(dtype=x0.dtype)


def predict_x0_from_eps(
    xt: torch.Tensor, t, eps_pred: torch.Tensor, s: NoiseSchedule
) -> torch.Tensor:
    """Invert the forward process for ``x_0``.  Never clamped."""
    _check_same_shape(xt, eps_pred, "predict_x0_from_eps")
    t = _timesteps(t, xt.shape[0], s)
    return (
        _extract(torch.sqrt(1.0 / s.alpha_bar), t, xt) * xt
        - _extract(torch.sqrt(1.0 / s.alpha_bar - 1.0), t, xt) * eps_pred
    )


def predict_mu_from_eps(
    xt: torch.Tensor, t, eps_pred: torch.Tensor, s: NoiseSchedule
) -> torch.Tensor:
    """Reverse-process mean ``(x_t - beta_t / sqrt(1 - abar_t) * eps) / sqrt(alpha_t)``."""
    _check_same_shape(xt, eps_pred, "predict_mu_from_eps")
    t = _timesteps(t, xt.shape[0], s)
    coef = _extract(s.beta / torch.sqrt(1.0 - s.alpha_bar), t, xt)
    return (xt - coef * eps_pred) / _extract(torch.sqrt(s.alpha), t, xt)


def model_log_variance(
    t: torch.Tensor, s: NoiseSchedule, like: torch.Tensor, mode: str, var_interp=None
) -> torch.Tensor:
    """Log of the reverse-process variance for the chosen variance mode."""
    log_beta = _extract(torch.log(s.beta), t, like)
    log_beta_hat = _extract(s.posterior_log_var_clipped, t, like)
    if mode == "learned":
        if var_interp is None:
            raise ValueError("learned variance mode needs var_interp from the model")
        return var_interp * log_beta + (1.0 - var_interp) * log_beta_hat
    if mode == "beta":
        return log_beta.expand_as(like)
    if mode == "posterior":
        return log_beta_hat.expand_as(like)
    raise ValueError(f"unknown variance mode {mode!r}; expected one of {VARIANCE_MODES}")


def randn_like(x: torch.Tensor, rng: Generator) -> torch.Tensor:
    """Standard normal noise shaped like ``x``.

    ``rng`` may be a single generator or one generator per batch element; the
    latter makes each sample independent of the batch it is drawn in.
    """
    if rng is None or isinstance(rng, torch.Generator):
        return torch.randn(x.shape, generator=rng, dtype=x.dtype)
    if len(rng) != x.shape[0]:
        raise ValueError("need one generator per batch element")
    return torch.stack(
        [torch.randn(x.shape[1:], generator=g, dtype=x.dtype) for g in rng]
    )


def _as_output(out) -> DenoiserOutput:
    return out if isinstance(out, DenoiserOutput) else DenoiserOutput(out)


def p_sample_step(
    model: Callable,
    xt: torch.Tensor,
    t,
    s: NoiseSchedule,
    rng: Generator = None,
    *,
    variance: str = "learned",
    clip_x0: bool = True,
) -> torch.Tensor:
    """One ancestral step ``x_t -> x_{t-1}``.

    ``variance`` selects ``"learned"`` (uses the model's ``var_interp``),
    ``"posterior"`` (beta_hat_t) or ``"beta"`` (beta_t).  In learned mode a
    model without a variance head falls back to ``"posterior"``.  At ``t = 1``
    the mean is returned without noise.
    """
    t = _timesteps(t, xt.shape[0], s)
    out = _as_output(model(xt, t))
    _check_same_shape(xt, out.eps_pred, "p_sample_step")
    x0_pred = predict_x0_from_eps(xt, t, out.eps_pred, s)
    if clip_x0:
        x0_pred = x0_pred.clamp(-1.0, 1.0)
    mean, _ = posterior_params(x0_pred, xt, t, s)
    if variance == "learned" and out.var_interp is None:
        variance = "posterior"
    log_var = model_log_variance(t, s, xt, variance, out.var_interp)
    noise = randn_like(xt, rng)
    nonzero = (t > 1).to(xt.dtype).reshape((-1,) + (1,) * (xt.ndim - 1))
    return mean + nonzero * torch.exp(0.5 * log_var) * noise


def p_sample_loop(
    model: Callable,
    shape: Sequence[int],
    s: NoiseSchedule,
    rng: Generator = None,
    *,
    variance: str = "learned",
    clip_x0: bool = True,
    dtype: torch.dtype = torch.float32,
    progress: Optional[Callable[[int], None]] = None,
) -> torch.Tensor:
    """Full ancestral sampling from ``x_T ~ N(0, I)`` down to ``x_0``."""
    x = randn_like(torch.empty(tuple(shape), dtype=dtype), rng)
    with torch.no_grad():
        for t in range(s.T, 0, -1):
            x = p_sample_step(model, x, t, s, rng, variance=variance, clip_x0=clip_x0)
            if progress is not None:
                progress(t)
    return x


def loss_simple(eps: torch.Tensor, eps_pred: torch.Tensor) -> torch.Tensor:
    """Mean squared error between true and predicted noise."""
    _check_same_shape(eps, eps_pred, "loss_simple")
    return torch.mean((eps - eps_pred) ** 2)


def normal_kl(mean1, logvar1, mean2, logvar2) -> torch.Tensor:
    """Elementwise ``KL(N(mean1, exp(logvar1)) || N(mean2, exp(logvar2)))``."""
    return 0.5 * (
        -1.0
        + logvar2
        - logvar1
        + torch.exp(logvar1 - logvar2)
        + (mean1 - mean2) ** 2 * torch.exp(-logvar2)
    )


def discretized_gaussian_log_likelihood(
    x0: torch.Tensor, mean: torch.Tensor, log_scale: torch.Tensor
) -> torch.Tensor:
    """Log-probability of 8-bit pixel bins of width 2/255 on [-1, 1].

    The outermost bins are open-ended, so probabilities over all 256 bins sum
    to one.
    """
    centered = x0 - mean
    inv_std = torch.exp(-log_scale)
    upper = inv_std * (centered + 1.0 / 255.0)
    lower = inv_std * (centered - 1.0 / 255.0)
    log_cdf_upper = torch.special.log_ndtr(upper)
    log_sf_lower = torch.special.log_ndtr(-lower)
    delta = torch.special.ndtr(upper) - torch.special.ndtr(lower)
    log_delta = torch.log(delta.clamp(min=1e-12))
    return torch.where(
        x0 < -0.999, log_cdf_upper, torch.where(x0 > 0.999, log_sf_lower, log_delta)
    )


def _mean_flat(x: torch.Tensor) -> torch.Tensor:
    return x.reshape(x.shape[0], -1).mean(dim=1)


def vlb_terms(
    x0: torch.Tensor, xt: torch.Tensor, t, model_out: DenoiserOutput, s: NoiseSchedule
) -> torch.Tensor:
    """Per-sample variational-bound term in nats per dimension.

    ``KL(q(x_{t-1}|x_t,x_0) || p(x_{t-1}|x_t))`` for ``t >= 2`` and the
    discretized negative log-likelihood of ``x_0`` for ``t = 1``.  The model
    mean is detached so only the variance head receives gradients.
    """
    if model_out.var_interp is None:
        raise ValueError("loss_vlb requires a learned-variance model output")
    _check_same_shape(x0, xt, "loss_vlb")
    _check_same_shape(xt, model_out.eps_pred, "loss_vlb")
    t = _timesteps(t, x0.shape[0], s)
    true_mean, _ = posterior_params(x0, xt, t, s)
    true_log_var = _extract(s.posterior_log_var_clipped, t, x0)
    x0_pred = predict_x0_from_eps(xt, t, model_out.eps_pred.detach(), s)
    model_mean, _ = posterior_params(x0_pred, xt, t, s)
    log_var = model_log_variance(t, s, xt, "learned", model_out.var_interp)
    kl = _mean_flat(normal_kl(true_mean, true_log_var, model_mean, log_var))
    nll = -_mean_flat(discretized_gaussian_log_likelihood(x0, model_mean, 0.5 * log_var))
    return torch.where(t == 1, nll, kl)


def loss_vlb(
    x0: torch.Tensor, xt: torch.Tensor, t, model_out: DenoiserOutput, s: NoiseSchedule
) -> torch.Tensor:
    """Batch mean of :func:`vlb_terms`."""
    return vlb_terms(x0, xt, t, model_out, s).mean()


def prior_kl(x0: torch.Tensor, s: NoiseSchedule) -> torch.Tensor:
    """``KL(q(x_T | x_0) || N(0, I))`` per sample; a diagnostic with no parameters."""
    t = torch.full((x0.shape[0],), s.T, dtype=torch.long)
    mean = _extract(torch.sqrt(s.alpha_bar), t, x0) * x0
    log_var = _extract(torch.log(1.0 - s.alpha_bar), t, x0).expand_as(x0)
    zeros = torch.zeros_like(x0)
    return _mean_flat(normal_kl(mean, log_var, zeros, zeros))


class GaussianDataOracle:
    """Bayes-optimal predictor for data distributed as ``N(mean, std^2 I)``.

    With ``x_t ~ N(sqrt(abar) m, (abar s^2 + 1 - abar) I)`` the posterior mean
    of the noise is ``sqrt(1 - abar) (x_t - sqrt(abar) m) / (abar s^2 + 1 - abar)``.
    The exact reverse conditional ``q(x_{t-1} | x_t)`` is Gaussian with variance
    ``beta_hat_t + coef_x0^2 Var(x_0 | x_t)``; ``var_interp`` reproduces it
    under the learned log-space interpolation.
    """

    def __init__(self, mean: float, std: float, s: NoiseSchedule):
        if std <= 0:
            raise ValueError("std must be positive")
        self.mean = float(mean)
        self.std = float(std)
        self.schedule = s

    def __call__(self, xt: torch.Tensor, t) -> DenoiserOutput:
        s = self.schedule
        t = _timesteps(t, xt.shape[0], s)
        abar = _extract(s.alpha_bar, t, xt)
        var_xt = abar * self.std**2 + 1.0 - abar
        eps = torch.sqrt(1.0 - abar) * (xt - torch.sqrt(abar) * self.mean) / var_xt
        post_var_x0 = self.std**2 * (1.0 - abar) / var_xt
        exact_var = _extract(s.posterior_beta_hat, t, xt) + _extract(
            s.posterior_coef_x0, t, xt
        ) ** 2 * post_var_x0
        log_beta = _extract(torch.log(s.beta), t, xt)
        log_beta_hat = _extract(s.posterior_log_var_clipped, t, xt)
        v = (torch.log(exact_var) - log_beta_hat) / (log_beta - log_beta_hat)
        # t == 1 has no noise; any v in [0, 1] is fine there.
        v = torch.where(torch.isfinite(v), v, torch.zeros_like(v)).clamp(0.0, 1.0)
        return DenoiserOutput(eps, v.expand_as(xt))


def reverse_moments(
    mean: float, std: float, s: NoiseSchedule, variance: str = "posterior"
) -> tuple[float, float]:
    """Exact mean/variance of the sampler's output under :class:`GaussianDataOracle`.

    Propagates the scalar linear-Gaussian recursion of the unclamped sampler
    from ``x_T ~ N(0, 1)``.  ``variance`` is ``"posterior"`` or ``"beta"``.
    """
    m, v = 0.0, 1.0
    for i in range(s.T - 1, -1, -1):
        abar = float(s.alpha_bar[i])
        gain = math.sqrt(abar) * std**2 / (abar * std**2 + 1.0 - abar)
        c0 = float(s.posterior_coef_x0[i])
        ct = float(s.posterior_coef_xt[i])
        a = c0 * gain + ct
        b = c0 * (mean - gain * math.sqrt(abar) * mean)
        step_var = float(s.posterior_beta_hat[i] if variance == "posterior" else s.beta[i])
        m = a * m + b
        v = a * a * v + (step_var if i > 0 else 0.0)
    return m, v
