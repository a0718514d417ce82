"""Discrete tail-risk measures and the normalized mean-CVaR certainty equivalent.

All evaluators work on finite distributions given as parallel arrays of
values and probabilities.  The sort-based CVaR is the canonical evaluator;
the Rockafellar-Uryasev form is kept for reformulations and as a cross-check.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

PROB_TOL = 1e-12


class RiskError(ValueError):
    pass


def _check_alpha(alpha: float) -> float:
    alpha = float(alpha)
    if not 0.0 < alpha < 1.0:
        raise RiskError(f"tail level alpha must lie in (0, 1), got {alpha}")
    return alpha


@dataclass(frozen=True)
class DiscreteDistribution:
    values: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float).ravel()
        p = np.asarray(self.probs, dtype=float).ravel()
        if v.shape != p.shape or v.size == 0:
            raise RiskError("values and probabilities must be nonempty and aligned")
        if np.any(p < -PROB_TOL) or abs(p.sum() - 1.0) > 1e-9:
            raise RiskError("probabilities must be nonnegative and sum to one")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "probs", np.clip(p, 0.0, None))

    def mean(self) -> float:
        return float(self.probs @ self.values)


def effective_weight(alpha: float, lam: float) -> float:
    """Weight on CVaR in the normalized certainty equivalent.

    Returns ``(alpha - lam) / (1 + alpha - 2 lam)``, which is zero at
    ``lam == alpha`` (risk neutral) and ``alpha / (1 + alpha)`` at ``lam == 0``.
    """
    alpha = _check_alpha(alpha)
    lam = float(lam)
    if lam < 0.0 or lam > 1.0:
        raise RiskError(f"lambda must lie in [0, 1], got {lam}")
    if lam > alpha:
        raise RiskError(f"lambda={lam} exceeds alpha={alpha}; convexity is not guaranteed")
    if lam == alpha:
        return 0.0
    return (alpha - lam) / (1.0 + alpha - 2.0 * lam)


def tail_amplification_cap(alpha: float) -> tuple[float, float]:
    """Largest admissible CVaR weight and the induced bound on ``w / (1 - alpha)``."""
    alpha = _check_alpha(alpha)
    lam_max = alpha / (1.0 + alpha)
    return lam_max, alpha / (1.0 - alpha * alpha)


@dataclass(frozen=True)
class RiskProfile:
    """Tail level, mixing parameter, logit dispersion and per-OD budgets."""

    alpha: float
    lam: float
    theta: float = 1.0
    budgets: tuple[float, ...] = ()
    enforce_cap: bool = True
    lam_bar: float = field(init=False)

    def __post_init__(self):
        if self.theta <= 0:
            raise RiskError("theta must be positive")
        w = effective_weight(self.alpha, self.lam)
        if self.enforce_cap:
            lam_max, _ = tail_amplification_cap(self.alpha)
            if w > lam_max + 1e-12:
                raise RiskError(f"effective weight {w} exceeds the cap {lam_max}")
        object.__setattr__(self, "lam_bar", w)
        object.__setattr__(self, "budgets", tuple(float(b) for b in self.budgets))

    @property
    def tail_scale(self) -> float:
        """Coefficient ``lam_bar / (1 - alpha)`` multiplying tail expectations."""
        return self.lam_bar / (1.0 - self.alpha)


class TailSummary(NamedTuple):
    var: float
    cvar: float
    weights: np.ndarray
    index: int


def var_cvar(d: DiscreteDistribution, alpha: float) -> TailSummary:
    """Exact discrete VaR/CVaR with canonical tail weights.

    The returned ``index`` is the original position of the VaR atom.  Ties in
    values keep their original order (stable sort), so the boundary atom is
    the last one in index order among equal values reaching level alpha.
    """
    alpha = _check_alpha(alpha)
    return _tail(d.values, d.probs, alpha)


def _tail(values: np.ndarray, probs: np.ndarray, alpha: float) -> TailSummary:
    order = np.argsort(values, kind="stable")
    p_sorted = probs[order]
    cum = np.cumsum(p_sorted)
    # guard round-off so that F reaches alpha; cum[-1] == 1 up to PROB_TOL
    cum[-1] = max(cum[-1], 1.0)
    m = int(np.searchsorted(cum, alpha - 1e-15, side="left"))
    m = min(m, len(order) - 1)
    chi_sorted = np.zeros_like(p_sorted)
    chi_sorted[m + 1:] = 1.0
    if p_sorted[m] > 0:
        chi_sorted[m] = min(1.0, max(0.0, (cum[m] - alpha) / p_sorted[m]))
    chi = np.empty_like(chi_sorted)
    chi[order] = chi_sorted
    cvar = float(np.sum(probs * chi * values) / (1.0 - alpha))
    return TailSummary(float(values[order[m]]), cvar, chi, int(order[m]))


def tail_weights(values: np.ndarray, probs: np.ndarray, alpha: float) -> np.ndarray:
    return _tail(np.asarray(values, float), np.asarray(probs, float), alpha).weights


def cvar_ru(d: DiscreteDistribution, alpha: float, gamma: float) -> float:
    """Rockafellar-Uryasev objective ``gamma + E[(Y - gamma)+] / (1 - alpha)``."""
    alpha = _check_alpha(alpha)
    excess = np.maximum(d.values - gamma, 0.0)
    return float(gamma + d.probs @ excess / (1.0 - alpha))


def certainty_equivalent(d: DiscreteDistribution, profile: RiskProfile) -> float:
    w = profile.lam_bar
    if w == 0.0:
        return d.mean()
    return (1.0 - w) * d.mean() + w * var_cvar(d, profile.alpha).cvar


def classify_position(d: DiscreteDistribution, profile: RiskProfile) -> str:
    """Place the effective weight relative to the distribution's buffer ratio.

    Returns ``"buffer"`` when ``lam_bar <= (VaR - E) / (CVaR - E)``,
    ``"mean-excess"`` otherwise, and ``"degenerate"`` when CVaR equals the mean.
    """
    mean = d.mean()
    tail = var_cvar(d, profile.alpha)
    spread = tail.cvar - mean
    if spread <= 1e-12 * max(1.0, abs(mean)):
        return "degenerate"
    ratio = (tail.var - mean) / spread
    return "buffer" if profile.lam_bar <= ratio else "mean-excess"


def buffer_ratio(d: DiscreteDistribution, alpha: float) -> float:
    mean = d.mean()
    tail = var_cvar(d, alpha)
    return (tail.var - mean) / (tail.cvar - mean)


def distorted_probabilities(p, chi, lam_bar: float, alpha: float) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    chi = np.asarray(chi, dtype=float)
    alpha = _check_alpha(alpha)
    return (1.0 - lam_bar) * p + (lam_bar / (1.0 - alpha)) * p * chi
