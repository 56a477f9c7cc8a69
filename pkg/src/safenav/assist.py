"""Collision assist for joystick teleoperation.

The latched joystick command is projected forward as a zero-order-hold
trajectory and scored on the cost map. A safe projection passes through
unchanged; an unsafe one triggers a sampling-based override that blends
perturbations of the joystick sequence with turn-in-place primitives, so a
stopping command is always reachable and heading adjustments stay free.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import mppi
from .control import DiscrepancyBounds, Gains, TubeParams, compose_command
from .core import Limits, Pose, VelocityCmd, polar_error
from .gridmap import DiscrepancyCostMap, query_costs

JOYSTICK_V_MAX = 2.0
JOYSTICK_OMEGA_MAX = 2.0


@dataclass(frozen=True)
class JoystickCmd:
    """Operator command; clamped to the joystick envelope on construction."""

    v_joy: float
    omega_joy: float
    timestamp: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "v_joy", min(max(self.v_joy, -JOYSTICK_V_MAX), JOYSTICK_V_MAX))
        object.__setattr__(self, "omega_joy",
                           min(max(self.omega_joy, -JOYSTICK_OMEGA_MAX), JOYSTICK_OMEGA_MAX))


@dataclass(frozen=True)
class AssistParams:
    """Override-planner configuration."""

    horizon: int = 30
    dt: float = 0.05
    sample_count: int = 5000
    sigma: tuple = (0.25, 0.25)
    lam: float = 0.05
    joystick_share: float = 0.8   # fraction of samples warm-started on the joystick
    threshold_schedule: str = "unity"
    override_schedule: str = "inverse_square"
    alpha_joy: float = 1.0
    seed: int = 0
    retry_limit: int = 5


@dataclass(frozen=True)
class AssistDecision:
    """Pass-through or override, with the command and supporting evidence."""

    mode: str                     # "pass-through" | "override"
    command: VelocityCmd
    joystick_cost: float
    projected: np.ndarray         # (horizon+1, 3) joystick trajectory
    plan: mppi.PlanResult | None = None
    emergency: bool = False


def project_joystick(pose: Pose, joy: JoystickCmd, horizon: int, dt: float,
                     limits: Limits | None = None) -> np.ndarray:
    """Zero-order-hold rollout of the joystick command, (horizon+1, 3)."""
    if horizon < 1:
        raise ValueError(f"horizon must be >= 1, got {horizon}")
    limits = limits or Limits()
    inputs = np.tile([joy.v_joy, joy.omega_joy], (horizon, 1))
    return mppi.rollout(pose, inputs, limits, dt)


def joystick_cost(traj: np.ndarray, costmap: DiscrepancyCostMap,
                  schedule: str = "inverse_square", alpha_joy: float = 1.0) -> float:
    """Collision cost of a projected trajectory; no tracking or input terms.

    ``inverse_square`` decays the per-step weight as alpha_joy / k^2;
    ``unity`` weighs every step by alpha_joy.
    """
    traj = np.asarray(traj, float)
    horizon = len(traj) - 1
    cell_costs = query_costs(costmap, traj[1:, :2])
    k = np.arange(1, horizon + 1, dtype=float)
    if schedule == "inverse_square":
        w = alpha_joy / k ** 2
    elif schedule == "unity":
        w = np.full(horizon, alpha_joy)
    else:
        raise ValueError(f"unknown schedule {schedule!r}")
    return float(np.sum(w * cell_costs))


def assist_step(pose: Pose, joy: JoystickCmd, costmap: DiscrepancyCostMap,
                bounds: DiscrepancyBounds, tube: TubeParams, params: AssistParams,
                gains: Gains | None = None, limits: Limits | None = None,
                weights: mppi.CostWeights | None = None,
                rng: np.random.Generator | None = None) -> AssistDecision:
    """Evaluate the latched joystick command and override it when unsafe.

    The threshold check sums unweighted cost-map lookups along the projected
    trajectory, so any buffered-lethal cell within the projection horizon
    forces an override. The override aggregates joystick-warm and
    turn-in-place-warm samples jointly and always restarts from the fresh
    joystick trajectory rather than the previous solution.
    """
    gains = gains or Gains()
    limits = limits or Limits()
    weights = weights or mppi.CostWeights()
    projected = project_joystick(pose, joy, params.horizon, params.dt, limits)
    threshold_cost = joystick_cost(projected, costmap, schedule=params.threshold_schedule,
                                   alpha_joy=params.alpha_joy)

    if threshold_cost < weights.cap:
        cmd = VelocityCmd(joy.v_joy, joy.omega_joy).clamped(limits)
        return AssistDecision("pass-through", cmd, threshold_cost, projected)

    # override: joint aggregation over joystick-warm and TIP-warm samples
    u_joy = np.tile([joy.v_joy, joy.omega_joy], (params.horizon, 1))
    u_tip = np.tile([0.0, joy.omega_joy], (params.horizon, 1))
    n_joy = int(params.joystick_share * params.sample_count)
    offsets = np.zeros((params.sample_count, params.horizon, 2))
    offsets[n_joy:] = u_tip - u_joy

    plan_params = mppi.MppiParams(
        horizon=params.horizon, dt=params.dt, sample_count=params.sample_count,
        sigma=params.sigma, lam=params.lam, seed=params.seed,
        retry_limit=params.retry_limit,
    )
    reference = projected[:, :2]
    result = mppi.plan(pose, reference, costmap, bounds, tube, plan_params, weights,
                       limits, u_joy, rng=rng, delta_offsets=offsets,
                       rho_dz=limits.rho_dz)

    if not result.initial_error_ok:
        stop = VelocityCmd(0.0, joy.omega_joy).clamped(limits)
        return AssistDecision("override", stop, threshold_cost, projected,
                              plan=result, emergency=True)

    e0 = polar_error(pose, Pose.from_array(result.states[1]), rho_dz=limits.rho_dz)
    cmd = compose_command(VelocityCmd.from_array(result.inputs[0]), e0, gains, limits)
    return AssistDecision("override", cmd, threshold_cost, projected, plan=result)
