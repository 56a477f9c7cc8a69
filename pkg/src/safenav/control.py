"""Ancillary tracking controllers and maximum tracking-error tube radii.

The nominal feedback law stabilizes the polar tracking error; the augmented
(disturbance-rejecting) variant subtracts a scaled gradient term that makes
the closed loop input-to-state stable against bounded matched input
disturbances. Tube radii convert calibrated disturbance bounds into a
per-interval bound on tracking deviation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import (
    SMALL_ANGLE,
    Limits,
    PolarError,
    VelocityCmd,
    error_rate_matrix,
    reduced_error_rate_matrix,
)


class TubeBlowupError(ValueError):
    """Tube radius queried past the horizon where its denominator is nonpositive."""


@dataclass(frozen=True)
class Gains:
    """Feedback gains for the polar-error controller.

    lambda1 weights the stabilizing augmentation: the augmented law subtracts
    (1/lambda1) g_p(e)^T e, so large lambda1 means a vanishing correction.
    """

    k1: float = 0.3
    k2: float = 0.15
    k3: float = 1.0
    lambda1: float = 1000.0

    def __post_init__(self):
        if min(self.k1, self.k2, self.k3, self.lambda1) <= 0.0:
            raise ValueError("all gains must be strictly positive")


@dataclass(frozen=True)
class DiscrepancyBounds:
    """Calibrated probabilistic bounds on matched/unmatched model discrepancies."""

    z_matched: float
    z_unmatched: float
    epsilon: float
    sample_count: int

    def __post_init__(self):
        if self.z_matched < 0.0 or self.z_unmatched < 0.0:
            raise ValueError("discrepancy bounds must be nonnegative")
        if not (0.0 < self.epsilon < 1.0):
            raise ValueError(f"epsilon must be in (0, 1), got {self.epsilon}")
        if self.sample_count <= 0:
            raise ValueError(f"sample_count must be positive, got {self.sample_count}")


@dataclass(frozen=True)
class TubeParams:
    """Lyapunov-shape constants and planning interval for tube-radius queries.

    alpha1/alpha2 bound the quadratic Lyapunov function, alpha3_slope is the
    linear decay coefficient, lipschitz_V the Lipschitz constant of V on the
    operating domain.
    """

    alpha1: float = 0.5
    alpha2: float = 0.5
    alpha3_slope: float = 0.0024
    lipschitz_V: float = math.pi / 2.0
    dt: float = 0.05

    def __post_init__(self):
        if not (0.0 < self.alpha1 <= self.alpha2):
            raise ValueError("require 0 < alpha1 <= alpha2")
        if self.alpha3_slope <= 0.0 or self.lipschitz_V <= 0.0 or self.dt <= 0.0:
            raise ValueError("alpha3_slope, lipschitz_V, dt must be positive")

    def check(self, bounds: DiscrepancyBounds) -> None:
        """Validate the smallness condition required before any radius query."""
        growth = bounds.z_unmatched * self.dt * math.exp(self.lipschitz_V * self.dt)
        if growth >= self.alpha1:
            raise TubeBlowupError(
                f"unmatched growth {growth:.4g} over dt={self.dt} reaches alpha1={self.alpha1}: "
                "tube radius undefined"
            )


def kappa(e: PolarError, gains: Gains) -> VelocityCmd:
    """Nominal polar-error feedback law; zero command inside the dead zone."""
    if e.converged:
        return VelocityCmd(0.0, 0.0)
    g = e.gamma
    v = gains.k1 * e.rho * math.cos(g)
    # sin(g)cos(g)/g -> 1 as g -> 0
    sinc_like = 1.0 if abs(g) < SMALL_ANGLE else math.sin(g) * math.cos(g) / g
    w = gains.k2 * g + gains.k1 * sinc_like * (g + gains.k3 * e.delta)
    return VelocityCmd(v, w)


def kappa_reduced(e: PolarError, gains: Gains) -> VelocityCmd:
    """Feedback law for the reduced (rho, gamma) error dynamics."""
    if e.converged:
        return VelocityCmd(0.0, 0.0)
    g = e.gamma
    v = gains.k1 * e.rho * math.cos(g)
    w = gains.k2 * g + gains.k1 * math.sin(g) * math.cos(g)
    return VelocityCmd(v, w)


def kappa_iss(e: PolarError, gains: Gains, reduced: bool = True) -> VelocityCmd:
    """Augmented feedback law kappa(e) - (1/lambda1) g_p(e)^T e.

    The reduced two-state form is the default; the full three-state form uses
    the complete error vector and input matrix.
    """
    if e.converged:
        return VelocityCmd(0.0, 0.0)
    if reduced:
        base = kappa_reduced(e, gains)
        grad = reduced_error_rate_matrix(e).T @ np.array([e.rho, e.gamma])
    else:
        base = kappa(e, gains)
        grad = error_rate_matrix(e).T @ e.as_array()
    return VelocityCmd(
        base.v - grad[0] / gains.lambda1,
        base.omega - grad[1] / gains.lambda1,
    )


def lyapunov(e: PolarError, k3: float = 1.0, reduced: bool = False) -> float:
    """Tracking-error energy V = (rho^2 + gamma^2 + k3 delta^2) / 2."""
    if reduced:
        return 0.5 * (e.rho * e.rho + e.gamma * e.gamma)
    return 0.5 * (e.rho * e.rho + e.gamma * e.gamma + k3 * e.delta * e.delta)


def tube_radius(tau: float, bounds: DiscrepancyBounds, tube: TubeParams) -> float:
    """Maximum tracking-deviation radius r(tau) at elapsed time tau.

    r(tau) = Z^2 / (4 (alpha1 - Zperp tau e^{l_V tau})); r(0) = Z^2 / (4 alpha1).
    Raises TubeBlowupError when the denominator is nonpositive.
    """
    if tau < 0.0:
        raise ValueError(f"tau must be nonnegative, got {tau}")
    growth = bounds.z_unmatched * tau * math.exp(tube.lipschitz_V * tau)
    denom = 4.0 * (tube.alpha1 - growth)
    if denom <= 0.0:
        raise TubeBlowupError(
            f"tube blow-up at tau={tau}: unmatched growth {growth:.4g} >= alpha1={tube.alpha1}"
        )
    return bounds.z_matched ** 2 / denom


def compose_command(u_star: VelocityCmd, e: PolarError, gains: Gains, limits: Limits,
                    reduced: bool = True, augmented: bool = True) -> VelocityCmd:
    """Feedforward plus feedback command, clamped element-wise to the input limits."""
    if augmented:
        fb = kappa_iss(e, gains, reduced=reduced)
    else:
        fb = kappa_reduced(e, gains) if reduced else kappa(e, gains)
    return VelocityCmd(u_star.v + fb.v, u_star.omega + fb.omega).clamped(limits)
