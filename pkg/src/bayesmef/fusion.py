"""Conventional and Bayesian multi-exposure fusion of Poisson count images.

The Bayesian route is an EM iteration over a censored Poisson model with a
known additive background:

* saturated readings are replaced by the mean of the right-truncated
  Poisson at the current rate (E-step, censoring),
* the expected counts are split between signal and background in
  proportion to their rates (E-step, background),
* flux factors and the fused intensity are set to their conditional gamma
  posterior means (M-step), flux first, intensity second.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence, Union

import numpy as np
from scipy.special import xlogy

from .stack import StackError, check_stack, saturation_mask
from .stats import poisson_sf_log, truncated_poisson_mean

__all__ = [
    "ModelError",
    "NumericalError",
    "FusionConfig",
    "TraceRecord",
    "FusionResult",
    "conventional_mef",
    "heuristic_flux",
    "estimate_uncensored",
    "em_step",
    "log_posterior",
    "bayesian_mef",
    "initial_intensity",
]

logger = logging.getLogger(__name__)

FluxInit = Union[str, Sequence[float], np.ndarray]


class ModelError(ValueError):
    """Data that the Poisson model assigns zero probability."""


class NumericalError(ArithmeticError):
    """Non-finite values produced during fusion."""


@dataclass
class FusionConfig:
    """Hyperparameters and iteration control for :func:`bayesian_mef`.

    ``flux_alpha`` / ``flux_beta`` are the gamma prior on each flux factor;
    ``None`` for ``flux_beta`` means ``1 / t_i`` so the prior mean is the
    acquisition time. ``flux_init`` is ``"times"``, ``"heuristic"`` or an
    explicit sequence of K values.
    """

    alpha_I: float = 1e-3
    beta_I: float = 1e-3
    flux_alpha: Union[float, Sequence[float]] = 1.0
    flux_beta: Union[None, float, Sequence[float]] = None
    flux_mode: str = "fixed"
    flux_init: FluxInit = "times"
    reference_index: Union[int, None] = None
    max_iterations: int = 200
    tolerance: float = 1e-6

    def validate(self, n_measurements):
        if self.alpha_I < 0 or self.beta_I < 0:
            raise ValueError("alpha_I and beta_I must be nonnegative")
        if self.flux_mode not in ("fixed", "estimate"):
            raise ValueError(f"flux_mode must be 'fixed' or 'estimate', got {self.flux_mode!r}")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be positive")
        if not self.tolerance >= 0:
            raise ValueError("tolerance must be nonnegative")
        if isinstance(self.flux_init, str):
            if self.flux_init not in ("times", "heuristic"):
                raise ValueError(f"unknown flux_init {self.flux_init!r}")
        elif np.shape(self.flux_init) != (n_measurements,):
            raise ValueError(f"explicit flux_init needs {n_measurements} values")

    def flux_priors(self, times):
        """Per-measurement (alpha_i, beta_i) arrays."""
        times = np.asarray(times, dtype=float)
        alpha = np.broadcast_to(np.asarray(self.flux_alpha, dtype=float), times.shape).copy()
        if self.flux_beta is None:
            beta = 1.0 / times
        else:
            beta = np.broadcast_to(np.asarray(self.flux_beta, dtype=float), times.shape).copy()
        if self.flux_mode == "estimate" and (np.any(alpha <= 0) or np.any(beta <= 0)):
            raise ValueError("flux priors must be positive when estimating flux factors")
        return alpha, beta


@dataclass(frozen=True)
class TraceRecord:
    iteration: int
    log_posterior: float
    max_rel_change: float
    flux_factors: tuple


@dataclass
class FusionResult:
    """Fused intensity with the flux factors it is expressed against."""

    fused: np.ndarray
    flux_factors: np.ndarray
    iterations_run: int
    converged: bool
    trace: list = field(default_factory=list)
    initial_flux: Union[np.ndarray, None] = None
    fallback_pixels: int = 0
    method: str = "bayes"

    def anchored(self, index, value):
        """Rescale so that flux factor ``index`` equals ``value``.

        Flux factors and intensity are only determined up to a common unit;
        this fixes the unit by one measurement (e.g. its acquisition time).
        """
        scale = value / self.flux_factors[index]
        return replace(
            self,
            fused=self.fused / scale,
            flux_factors=self.flux_factors * scale,
        )


def _locate(bad):
    i = [int(v) for v in np.argwhere(bad)[0]]
    if len(i) == 3:
        return f"measurement {i[0]}, pixel ({i[1]}, {i[2]})"
    return f"pixel {tuple(i) if len(i) != 1 else i[0]}"


def _fallback_intensity(stack, flux):
    """Lower-bound intensity for pixels saturated in every measurement."""
    b_min = stack.background.min(axis=0)
    return np.maximum(stack.n_max - b_min, 0.0) / np.min(flux)


def conventional_mef(stack, flux_factors):
    """Weighted MLE over unsaturated, background-subtracted counts.

    Pixels saturated in every measurement have no unsaturated data; they get
    ``(n_max - min_i b_i) / min_i c_i`` and are counted in
    ``FusionResult.fallback_pixels``.
    """
    check_stack(stack)
    c = np.asarray(flux_factors, dtype=float)
    if c.shape != (stack.n_measurements,) or np.any(c <= 0):
        raise ValueError(f"need {stack.n_measurements} positive flux factors")
    w = saturation_mask(stack)
    n_plus = np.maximum(0.0, stack.counts - stack.background)
    num = np.sum(np.where(w, n_plus, 0.0), axis=0)
    den = np.sum(np.where(w, c[:, None, None], 0.0), axis=0)
    empty = den == 0
    fused = np.empty(stack.shape)
    fused[~empty] = num[~empty] / den[~empty]
    fused[empty] = _fallback_intensity(stack, c)[empty]
    cfg = FusionConfig(alpha_I=0.0, beta_I=0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        logpost = log_posterior(stack, w, fused, c, cfg)
    record = TraceRecord(1, logpost, 0.0, tuple(c.tolist()))
    return FusionResult(
        fused=fused,
        flux_factors=c.copy(),
        iterations_run=1,
        converged=True,
        trace=[record],
        initial_flux=c.copy(),
        fallback_pixels=int(empty.sum()),
        method="conventional",
    )


def heuristic_flux(stack, reference_index=None):
    """Flux factors as ratios of summed counts to a reference measurement.

    Sums run over pixels unsaturated in both the measurement and the
    reference. The reference defaults to the middle measurement and gets
    exactly 1.
    """
    k = stack.n_measurements
    ref = k // 2 if reference_index is None else int(reference_index)
    if not 0 <= ref < k:
        raise ValueError(f"reference_index {ref} outside [0, {k})")
    w = saturation_mask(stack)
    counts = stack.counts.astype(float)
    flux = np.empty(k)
    for i in range(k):
        valid = w[i] & w[ref]
        if not valid.any():
            raise StackError(f"measurements {i} and {ref} share no unsaturated pixel")
        s_ref = counts[ref][valid].sum()
        if s_ref == 0:
            raise StackError(
                f"reference measurement {ref} has zero counts on pixels shared with {i}"
            )
        flux[i] = counts[i][valid].sum() / s_ref
    flux[ref] = 1.0
    return flux


def initial_flux(stack, config):
    init = config.flux_init
    if isinstance(init, str):
        if init == "times":
            return stack.times.astype(float).copy()
        return heuristic_flux(stack, config.reference_index)
    c = np.asarray(init, dtype=float).copy()
    if np.any(c <= 0) or not np.all(np.isfinite(c)):
        raise ValueError("explicit flux factors must be finite and positive")
    return c


def initial_intensity(stack, mask, flux, config):
    """Posterior mean using unsaturated raw counts only."""
    c = flux[:, None, None]
    num = config.alpha_I + np.sum(np.where(mask, stack.counts, 0.0), axis=0)
    den = config.beta_I + np.sum(np.where(mask, c, 0.0), axis=0)
    empty = den == 0
    out = np.empty(stack.shape)
    out[~empty] = num[~empty] / den[~empty]
    out[empty] = _fallback_intensity(stack, flux)[empty]
    return out


def estimate_uncensored(rate, counts, mask, n_max):
    """Expected latent counts: observed where unsaturated, truncated mean otherwise."""
    rate = np.asarray(rate, dtype=float)
    nu = np.asarray(counts, dtype=float).copy()
    sat = ~np.asarray(mask, dtype=bool)
    if sat.any():
        r = rate[sat]
        if np.any(r <= 0):
            raise ModelError(
                f"zero rate at saturated {_locate(sat & (rate <= 0))}: truncated mean undefined"
            )
        nu[sat] = truncated_poisson_mean(r, n_max - 1)
    return nu


def em_step(stack, mask, intensity, flux, config, flux_alpha=None, flux_beta=None):
    """One EM sweep; returns ``(intensity, flux, nu_signal)``.

    The flux update uses the pre-update intensity, the intensity update uses
    the new flux factors.
    """
    c = np.asarray(flux, dtype=float)
    signal = c[:, None, None] * intensity[None]
    rate = signal + stack.background
    nu = estimate_uncensored(rate, stack.counts, mask, stack.n_max)

    zero = rate == 0
    if np.any(zero & (nu > 0)):
        raise ModelError(
            f"nonzero counts with zero rate at {_locate(zero & (nu > 0))}"
        )
    with np.errstate(invalid="ignore", divide="ignore"):
        nu_signal = np.where(zero, 0.0, signal / rate * nu)

    if config.flux_mode == "estimate":
        if flux_alpha is None or flux_beta is None:
            flux_alpha, flux_beta = config.flux_priors(stack.times)
        c = (flux_alpha + nu_signal.sum(axis=(1, 2))) / (flux_beta + intensity.sum())
    new_intensity = (config.alpha_I + nu_signal.sum(axis=0)) / (config.beta_I + c.sum())
    return new_intensity, c, nu_signal


def log_posterior(stack, mask, intensity, flux, config):
    """Observed-data log posterior, up to parameter-free constants.

    Unsaturated pixels contribute the Poisson log pmf without its ``-log n!``
    term, saturated pixels the log tail mass above ``n_max - 1``. The priors
    enter as ``alpha log x - beta x``, the form whose maximizer is the gamma
    update used in the M-step.
    """
    c = np.asarray(flux, dtype=float)
    rate = c[:, None, None] * intensity[None] + stack.background
    total = 0.0
    if mask.any():
        lam = rate[mask]
        total += np.sum(xlogy(stack.counts[mask], lam) - lam)
    sat = ~mask
    if sat.any():
        total += np.sum(poisson_sf_log(rate[sat], stack.n_max - 1))
    total += np.sum(xlogy(config.alpha_I, intensity) - config.beta_I * intensity)
    if config.flux_mode == "estimate":
        a, b = config.flux_priors(stack.times)
        total += np.sum(xlogy(a, c) - b * c)
    return float(total)


def _max_rel_change(old_i, new_i, old_c, new_c):
    scale = np.max(np.abs(new_i))
    d_i = np.max(np.abs(new_i - old_i)) / scale if scale > 0 else float(np.max(np.abs(new_i - old_i)))
    d_c = np.max(np.abs(new_c - old_c) / new_c)
    return float(max(d_i, d_c))


def bayesian_mef(stack, config=None):
    """Fuse a stack with the censored-Poisson EM algorithm.

    Iterates :func:`em_step` until the largest relative change of intensity
    (sup-norm, relative to the peak) and flux factors falls to
    ``config.tolerance`` or ``config.max_iterations`` is reached.
    """
    config = FusionConfig() if config is None else config
    check_stack(stack)
    config.validate(stack.n_measurements)
    mask = saturation_mask(stack)
    c = initial_flux(stack, config)
    c0 = c.copy()
    alpha, beta = config.flux_priors(stack.times)
    intensity = initial_intensity(stack, mask, c, config)

    trace = []
    converged = False
    previous = None
    for k in range(1, config.max_iterations + 1):
        try:
            new_i, new_c, nu_signal = em_step(stack, mask, intensity, c, config, alpha, beta)
        except (ModelError, ArithmeticError) as exc:
            raise type(exc)(f"iteration {k}: {exc}") from exc
        if not np.all(np.isfinite(nu_signal)):
            raise NumericalError(
                f"iteration {k}: non-finite expected counts at {_locate(~np.isfinite(nu_signal))}"
            )
        if not np.all(np.isfinite(new_i)):
            raise NumericalError(
                f"iteration {k}: non-finite intensity at {_locate(~np.isfinite(new_i))}"
            )
        if not np.all(np.isfinite(new_c)) or np.any(new_c <= 0):
            raise NumericalError(f"iteration {k}: invalid flux factors {new_c.tolist()}")
        delta = _max_rel_change(intensity, new_i, c, new_c)
        intensity, c = new_i, new_c
        lp = log_posterior(stack, mask, intensity, c, config)
        if previous is not None and lp < previous - 1e-8 * max(1.0, abs(previous)):
            logger.debug("log posterior decreased at iteration %d: %r -> %r", k, previous, lp)
        previous = lp
        trace.append(TraceRecord(k, lp, delta, tuple(c.tolist())))
        if delta <= config.tolerance:
            converged = True
            break

    return FusionResult(
        fused=intensity,
        flux_factors=c,
        iterations_run=len(trace),
        converged=converged,
        trace=trace,
        initial_flux=c0,
        fallback_pixels=int((~mask.any(axis=0)).sum()),
        method="bayes",
    )
