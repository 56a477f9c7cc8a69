"""Sampling-based receding-horizon planner with discrepancy-aware costs.

Gaussian input perturbations around a warm-start sequence are rolled out
through the nominal model (with per-step input clamping), scored against a
reference and the inflated cost map, and aggregated with exponentiated-cost
importance weights. A plan is certified only when its total cost stays below
the lethal threshold and its first step keeps the initial tracking error
inside the tube entry radius.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .control import DiscrepancyBounds, TubeParams, tube_radius
from .core import (
    HeadingUndefinedError,
    Limits,
    Pose,
    ReferencePoint,
    flat_reference,
    wrap_angle_array,
)
from .gridmap import DiscrepancyCostMap, query_costs


@dataclass(frozen=True)
class MppiParams:
    """Sampling configuration for the planner."""

    horizon: int = 30
    dt: float = 0.05
    sample_count: int = 2000
    sigma: tuple = (0.2, 0.2)     # diagonal input-perturbation std devs
    lam: float = 0.1              # inverse temperature
    seed: int = 0
    weighting: str = "direct"     # "direct" | "tempered" exponent convention
    retry_limit: int = 5

    def __post_init__(self):
        if self.horizon < 1 or self.sample_count < 1:
            raise ValueError("horizon and sample_count must be >= 1")
        if self.sigma[0] <= 0.0 or self.sigma[1] <= 0.0:
            raise ValueError("sigma entries must be positive")
        if self.lam <= 0.0:
            raise ValueError(f"lambda must be positive, got {self.lam}")


@dataclass(frozen=True)
class CostWeights:
    """Tracking, input, and safety cost weights."""

    q_stage: np.ndarray = None
    q_terminal: np.ndarray = None
    r_input: np.ndarray = None
    alpha_iss: float = 10000.0
    cap: float = 13500.0          # lethal threshold, also caps the tracking term

    def __post_init__(self):
        object.__setattr__(self, "q_stage",
                           np.diag([50.0, 50.0]) if self.q_stage is None else np.asarray(self.q_stage, float))
        object.__setattr__(self, "q_terminal",
                           np.diag([200.0, 200.0]) if self.q_terminal is None else np.asarray(self.q_terminal, float))
        object.__setattr__(self, "r_input",
                           np.eye(2) if self.r_input is None else np.asarray(self.r_input, float))
        if self.alpha_iss <= 0.0 or self.cap <= 0.0:
            raise ValueError("alpha_iss and cap must be positive")


def default_lethal_threshold(limits: Limits, horizon: int, q_stage) -> float:
    """Lethal-cost scale inferred from input limits and the planning horizon.

    Uses the stage cost of the largest displacement reachable over the
    horizon, charged at every step: horizon * (horizon * v_max * dt)^2 * max
    eigenvalue of the stage weight.
    """
    max_disp = horizon * limits.v_max * limits.dt
    return horizon * max_disp ** 2 * float(np.max(np.linalg.eigvalsh(np.asarray(q_stage, float))))


@dataclass(frozen=True)
class PlanResult:
    """Planner output: trajectory, inputs, cost breakdown, and safety flags."""

    states: np.ndarray            # (horizon+1, 3)
    inputs: np.ndarray            # (horizon, 2), clamped
    total_cost: float
    collision_free: bool          # total cost below the lethal threshold
    initial_error_ok: bool        # first-step tracking error within r0
    tracking_cost: float = 0.0
    collision_cost: float = 0.0
    iss_penalty: float = 0.0
    initial_error_norm: float = 0.0
    r0: float = 0.0
    retries: int = 0


def clamp_inputs(inputs: np.ndarray, limits: Limits) -> np.ndarray:
    out = np.empty_like(inputs)
    out[..., 0] = np.clip(inputs[..., 0], -limits.v_max, limits.v_max)
    out[..., 1] = np.clip(inputs[..., 1], -limits.omega_max, limits.omega_max)
    return out


def rollout(start: Pose, inputs: np.ndarray, limits: Limits, dt: float) -> np.ndarray:
    """Propagate one clamped input sequence; returns (horizon+1, 3) poses."""
    return rollout_batch(start, np.asarray(inputs, float)[None], limits, dt)[0]


def rollout_batch(start: Pose, inputs: np.ndarray, limits: Limits, dt: float) -> np.ndarray:
    """Vectorized rollout of N input sequences; returns (N, horizon+1, 3)."""
    return _propagate(start, clamp_inputs(np.asarray(inputs, float), limits), dt)


def _propagate(start: Pose, inputs: np.ndarray, dt: float) -> np.ndarray:
    n, horizon, _ = inputs.shape
    states = np.empty((n, horizon + 1, 3))
    states[:, 0] = start.as_array()
    x = np.full(n, start.x)
    y = np.full(n, start.y)
    th = np.full(n, start.theta)
    for k in range(horizon):
        v = inputs[:, k, 0]
        w = inputs[:, k, 1]
        x = x + v * np.cos(th) * dt
        y = y + v * np.sin(th) * dt
        th = th + w * dt
        states[:, k + 1, 0] = x
        states[:, k + 1, 1] = y
        states[:, k + 1, 2] = th
    states[..., 2] = wrap_angle_array(states[..., 2])
    return states


def _quad_sum(vecs: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Sum of v' W v over the middle axis of (n, k, 2) stacks."""
    if w[0, 1] == 0.0 and w[1, 0] == 0.0:
        return (vecs ** 2 @ np.array([w[0, 0], w[1, 1]])).sum(axis=-1)
    return np.einsum("nki,ij,nkj->n", vecs, w, vecs)


def trajectory_cost(traj: np.ndarray, inputs: np.ndarray, reference: np.ndarray,
                    costmap: DiscrepancyCostMap | None, weights: CostWeights,
                    r0: float) -> float:
    """Tracking + collision + initial-error cost of one rollout."""
    return float(trajectory_cost_batch(traj[None], np.asarray(inputs, float)[None],
                                       reference, costmap, weights, r0)[0])


def trajectory_cost_batch(trajs: np.ndarray, inputs: np.ndarray, reference: np.ndarray,
                          costmap: DiscrepancyCostMap | None, weights: CostWeights,
                          r0: float) -> np.ndarray:
    """Vectorized trajectory cost over N rollouts.

    Tracking: stage position terms over steps 0..h-1 plus half-weighted input
    quadratics and a terminal position term, the whole tracking sum capped at
    the lethal threshold. Collision: cost-map lookups over steps 1..h.
    Initial-error penalty: alpha_iss whenever the first planned step moves
    farther than r0.
    """
    reference = np.asarray(reference, float)
    n, hp1, _ = trajs.shape
    horizon = hp1 - 1
    if len(reference) < horizon + 1:
        raise ValueError(f"reference must cover horizon+1 = {horizon + 1} points, got {len(reference)}")
    dp = trajs[:, :, :2] - reference[None, : horizon + 1]
    stage = _quad_sum(dp[:, :horizon], weights.q_stage)
    terminal = _quad_sum(dp[:, horizon:], weights.q_terminal)
    input_cost = 0.5 * _quad_sum(inputs, weights.r_input)
    tracking = np.minimum(stage + terminal + input_cost, weights.cap)

    if costmap is not None:
        collision = query_costs(costmap, trajs[:, 1:, :2]).sum(axis=1)
    else:
        collision = np.zeros(n)

    step0 = np.linalg.norm(trajs[:, 1, :2] - trajs[:, 0, :2], axis=1)
    iss = np.where(step0 >= r0, weights.alpha_iss, 0.0)
    return tracking + collision + iss


def mppi_weights(nominal: np.ndarray, deltas: np.ndarray, costs: np.ndarray,
                 params: MppiParams) -> np.ndarray:
    """Importance weights for sampled perturbations; always a probability vector.

    ``direct`` uses exp(-C/lambda - sum_i u_i' Sigma^-1 (u_i + 2 delta_i));
    ``tempered`` divides the control-coupling term by lambda and halves it.
    The max exponent is subtracted before exponentiation so weights never
    over- or underflow to NaN.
    """
    costs = np.asarray(costs, float)
    sigma_inv = 1.0 / np.asarray(params.sigma, float) ** 2
    u_scaled = nominal * sigma_inv[None, :]                        # (h, 2)
    couple = np.einsum("ki,nki->n", u_scaled, nominal[None] + 2.0 * deltas)
    if params.weighting == "direct":
        exponents = -costs / params.lam - couple
    elif params.weighting == "tempered":
        exponents = -(costs + 0.5 * couple) / params.lam
    else:
        raise ValueError(f"unknown weighting {params.weighting!r}")
    exponents -= exponents.max()
    w = np.exp(exponents)
    return w / w.sum()


def aggregate(nominal: np.ndarray, deltas: np.ndarray, costs: np.ndarray,
              params: MppiParams) -> np.ndarray:
    """Weighted perturbation update of the nominal input sequence."""
    w = mppi_weights(np.asarray(nominal, float), np.asarray(deltas, float), costs, params)
    return nominal + np.einsum("n,nki->ki", w, deltas)


def plan(state: Pose, reference: np.ndarray, costmap: DiscrepancyCostMap | None,
         bounds: DiscrepancyBounds, tube: TubeParams, params: MppiParams,
         weights: CostWeights, limits: Limits, warm: np.ndarray,
         rng: np.random.Generator | None = None,
         delta_offsets: np.ndarray | None = None,
         rho_dz: float = 0.05) -> PlanResult:
    """One receding-horizon planning cycle.

    Samples perturbation sequences around the warm start, aggregates by
    importance weights, and re-rolls the aggregated sequence. The initial
    tracking error is the magnitude of the first planned position step (the
    same quantity the cost indicator penalizes); when it exceeds the tube
    entry radius r0 the perturbations are resampled, up to
    ``params.retry_limit`` attempts; exhausting the budget clears
    initial_error_ok (the caller must not certify safety). ``delta_offsets``
    shifts individual samples' means, for mixing alternative warm starts into
    one aggregation.
    """
    warm = np.asarray(warm, float)
    if warm.shape != (params.horizon, 2):
        raise ValueError(f"warm start must be ({params.horizon}, 2), got {warm.shape}")
    if rng is None:
        rng = np.random.default_rng(params.seed)
    r0 = tube_radius(0.0, bounds, tube)
    sigma = np.asarray(params.sigma, float)

    retries = 0
    while True:
        deltas = rng.normal(0.0, 1.0, size=(params.sample_count, params.horizon, 2)) * sigma
        if delta_offsets is not None:
            deltas = deltas + delta_offsets
        clamped = clamp_inputs(warm[None] + deltas, limits)
        trajs = _propagate(state, clamped, params.dt)
        costs = trajectory_cost_batch(trajs, clamped, reference, costmap, weights, r0)
        u_star = aggregate(warm, deltas, costs, params)
        u_star = clamp_inputs(u_star, limits)
        states = rollout(state, u_star, limits, params.dt)
        e0_norm = float(np.linalg.norm(states[1, :2] - states[0, :2]))
        if e0_norm <= r0 or retries >= params.retry_limit:
            break
        retries += 1

    dp = states[:, :2] - reference[: params.horizon + 1]
    stage = np.einsum("ki,ij,kj->", dp[:-1], weights.q_stage, dp[:-1])
    terminal = float(dp[-1] @ weights.q_terminal @ dp[-1])
    input_cost = 0.5 * np.einsum("ki,ij,kj->", u_star, weights.r_input, u_star)
    tracking = min(stage + terminal + input_cost, weights.cap)
    collision = float(query_costs(costmap, states[1:, :2]).sum()) if costmap is not None else 0.0
    step0 = float(np.linalg.norm(states[1, :2] - states[0, :2]))
    iss_pen = weights.alpha_iss if step0 >= r0 else 0.0
    total = float(tracking + collision + iss_pen)

    return PlanResult(
        states=states,
        inputs=u_star,
        total_cost=total,
        collision_free=total < weights.cap,
        initial_error_ok=e0_norm <= r0,
        tracking_cost=float(tracking),
        collision_cost=collision,
        iss_penalty=float(iss_pen),
        initial_error_norm=float(e0_norm),
        r0=float(r0),
        retries=retries,
    )


def shift_warm_start(previous: PlanResult, reference_tail: ReferencePoint) -> np.ndarray:
    """Left-shift the previous solution; fill the last slot from flatness."""
    inputs = previous.inputs
    shifted = np.empty_like(inputs)
    shifted[:-1] = inputs[1:]
    try:
        _, cmd = flat_reference(reference_tail)
        shifted[-1] = (cmd.v, cmd.omega)
    except HeadingUndefinedError:
        shifted[-1] = (0.0, 0.0)
    return shifted


def flat_warm_start(path, t0: float, params: MppiParams) -> np.ndarray:
    """Initial warm start from the flatness inputs along a reference path."""
    warm = np.zeros((params.horizon, 2))
    for k in range(params.horizon):
        try:
            _, cmd = flat_reference(path.point(t0 + k * params.dt))
            warm[k] = (cmd.v, cmd.omega)
        except HeadingUndefinedError:
            warm[k] = (0.0, 0.0)
    return warm
