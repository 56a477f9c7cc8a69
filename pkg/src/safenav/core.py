"""Unicycle kinematics, flatness-based reference generation, and polar tracking errors.

Everything in this module is a pure function of its arguments. Angles are
wrapped to (-pi, pi] at the point of computation; the polar angle errors
gamma and delta live in [-pi/2, pi/2] and carry a saturation flag when the
wrapped value fell outside that window.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * math.pi
HALF_PI = 0.5 * math.pi

# |gamma| below this uses the limit value of sin(g)cos(g)/g in the feedback law
SMALL_ANGLE = 1e-6


class DeadZoneError(ValueError):
    """Polar error representation queried inside its ill-conditioned dead zone."""


class HeadingUndefinedError(ValueError):
    """Flat reference requested at a point with zero planar velocity."""


def wrap_angle(a: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    w = (a + math.pi) % TWO_PI - math.pi
    if w <= -math.pi:
        w += TWO_PI
    return w


def wrap_angle_array(a: np.ndarray) -> np.ndarray:
    """Vectorized wrap to (-pi, pi]."""
    w = (np.asarray(a) + math.pi) % TWO_PI - math.pi
    return np.where(w <= -math.pi, w + TWO_PI, w)


@dataclass(frozen=True)
class Pose:
    """Planar vehicle state (x, y, heading), heading wrapped to (-pi, pi]."""

    x: float
    y: float
    theta: float

    def __post_init__(self):
        object.__setattr__(self, "theta", wrap_angle(self.theta))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta], dtype=float)

    @staticmethod
    def from_array(arr) -> "Pose":
        return Pose(float(arr[0]), float(arr[1]), float(arr[2]))

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y], dtype=float)


@dataclass(frozen=True)
class VelocityCmd:
    """Body-frame linear and angular velocity command."""

    v: float
    omega: float

    def as_array(self) -> np.ndarray:
        return np.array([self.v, self.omega], dtype=float)

    @staticmethod
    def from_array(arr) -> "VelocityCmd":
        return VelocityCmd(float(arr[0]), float(arr[1]))

    def clamped(self, limits: "Limits") -> "VelocityCmd":
        return VelocityCmd(
            min(max(self.v, -limits.v_max), limits.v_max),
            min(max(self.omega, -limits.omega_max), limits.omega_max),
        )


@dataclass(frozen=True)
class Limits:
    """Symmetric input bounds, polar-error domain bounds, and control period."""

    v_max: float = 2.0
    omega_max: float = 2.0
    rho_dz: float = 0.05
    rho_max: float = 0.5
    dt: float = 0.05

    def __post_init__(self):
        if not (0.0 < self.rho_dz < self.rho_max):
            raise ValueError(f"require 0 < rho_dz < rho_max, got {self.rho_dz}, {self.rho_max}")
        if self.dt <= 0.0:
            raise ValueError(f"dt must be positive, got {self.dt}")


@dataclass(frozen=True)
class PolarError:
    """Tracking error (rho, gamma, delta) of a pose relative to a target pose.

    rho is the planar distance to the target position, gamma the angle from
    the body x-axis to the line of sight toward the target, delta the same
    angle measured against the target heading. ``converged`` marks errors
    inside the dead zone where the representation is ill-conditioned;
    ``saturated`` marks gamma/delta clipped into [-pi/2, pi/2].
    """

    rho: float
    gamma: float
    delta: float
    converged: bool = False
    saturated: bool = False

    def as_array(self) -> np.ndarray:
        return np.array([self.rho, self.gamma, self.delta], dtype=float)

    def norm(self, reduced: bool = True) -> float:
        if reduced:
            return math.hypot(self.rho, self.gamma)
        return math.sqrt(self.rho * self.rho + self.gamma * self.gamma + self.delta * self.delta)


@dataclass(frozen=True)
class ReferencePoint:
    """Sampled reference position with its first two time derivatives."""

    position: tuple
    velocity: tuple
    acceleration: tuple


def integrate_twist(pose: Pose, v: float, omega: float, dt: float,
                    v_lateral: float = 0.0) -> Pose:
    """Closed-form pose advance under constant body velocities.

    Exact for any dt (constant-twist motion is an arc), so callers that need
    zero integration error use this instead of a stepped scheme.
    """
    th0 = pose.theta
    if abs(omega) < 1e-12:
        dx = (v * math.cos(th0) - v_lateral * math.sin(th0)) * dt
        dy = (v * math.sin(th0) + v_lateral * math.cos(th0)) * dt
        return Pose(pose.x + dx, pose.y + dy, wrap_angle(th0 + omega * dt))
    th1 = th0 + omega * dt
    int_cos = (math.sin(th1) - math.sin(th0)) / omega
    int_sin = (math.cos(th0) - math.cos(th1)) / omega
    dx = v * int_cos - v_lateral * int_sin
    dy = v * int_sin + v_lateral * int_cos
    return Pose(pose.x + dx, pose.y + dy, wrap_angle(th1))


def step_exact(pose: Pose, cmd: VelocityCmd, dt: float) -> Pose:
    """Exact constant-twist step of the nominal model."""
    return integrate_twist(pose, cmd.v, cmd.omega, dt)


def step_nominal(pose: Pose, cmd: VelocityCmd, dt: float, method: str = "euler") -> Pose:
    """Propagate the nominal unicycle model one step.

    ``euler`` is the default explicit scheme; ``rk4`` is available for
    accuracy studies behind the same contract.
    """
    if dt <= 0.0:
        raise ValueError(f"dt must be positive, got {dt}")
    v, w = cmd.v, cmd.omega
    if method == "euler":
        return Pose(
            pose.x + v * math.cos(pose.theta) * dt,
            pose.y + v * math.sin(pose.theta) * dt,
            wrap_angle(pose.theta + w * dt),
        )
    if method == "rk4":
        def f(th):
            return np.array([v * math.cos(th), v * math.sin(th), w])

        th0 = pose.theta
        k1 = f(th0)
        k2 = f(th0 + 0.5 * dt * k1[2])
        k3 = f(th0 + 0.5 * dt * k2[2])
        k4 = f(th0 + dt * k3[2])
        d = (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        return Pose(pose.x + d[0], pose.y + d[1], wrap_angle(pose.theta + d[2]))
    raise ValueError(f"unknown integration method {method!r}")


def flat_reference(ref: ReferencePoint) -> tuple:
    """Reference pose and input from a position path via differential flatness.

    The heading follows the velocity direction; the angular rate is the
    signed path curvature times the speed, omega = (xd*ydd - yd*xdd) / speed^2.
    Raises HeadingUndefinedError when the planar velocity vanishes.
    """
    xd, yd = ref.velocity
    xdd, ydd = ref.acceleration
    speed_sq = xd * xd + yd * yd
    if speed_sq == 0.0:
        raise HeadingUndefinedError("zero reference velocity: heading undefined")
    theta = math.atan2(yd, xd)
    # pick the better-conditioned quotient; both equal the path speed
    if abs(math.cos(theta)) >= abs(math.sin(theta)):
        v = xd / math.cos(theta)
    else:
        v = yd / math.sin(theta)
    omega = (xd * ydd - yd * xdd) / speed_sq
    pose = Pose(ref.position[0], ref.position[1], theta)
    return pose, VelocityCmd(v, omega)


def polar_error(current: Pose, target: Pose, rho_dz: float = 0.05) -> PolarError:
    """Polar tracking error of ``current`` relative to ``target``.

    gamma is measured from the body x-axis to the vector pointing from the
    vehicle to the target position. Errors with rho below ``rho_dz`` are
    flagged converged.
    """
    dx = target.x - current.x
    dy = target.y - current.y
    rho = math.hypot(dx, dy)
    gamma = wrap_angle(math.atan2(dy, dx) - current.theta)
    delta = wrap_angle(gamma + current.theta - target.theta)
    saturated = abs(gamma) > HALF_PI or abs(delta) > HALF_PI
    gamma = min(max(gamma, -HALF_PI), HALF_PI)
    delta = min(max(delta, -HALF_PI), HALF_PI)
    return PolarError(rho, gamma, delta, converged=rho < rho_dz, saturated=saturated)


def error_rate_matrix(e: PolarError) -> np.ndarray:
    """3x2 input matrix of the polar error dynamics, edot = g_p(e) du."""
    s, c = math.sin(e.gamma), math.cos(e.gamma)
    return np.array([
        [-c, 0.0],
        [s / e.rho, -1.0],
        [s / e.rho, 0.0],
    ])


def reduced_error_rate_matrix(e: PolarError) -> np.ndarray:
    """2x2 input matrix of the reduced (rho, gamma) error dynamics."""
    s, c = math.sin(e.gamma), math.cos(e.gamma)
    return np.array([
        [-c, 0.0],
        [s / e.rho, -1.0],
    ])


def polar_error_rate(e: PolarError, du: VelocityCmd, reduced: bool = False,
                     min_rho: float = 0.05) -> np.ndarray:
    """Time derivative of the polar tracking error under input offset ``du``.

    Returns a 3-vector (rho, gamma, delta rates) or, with ``reduced``, the
    2-vector (rho, gamma) rates. Raises DeadZoneError when rho < ``min_rho``
    where the 1/rho terms are ill-conditioned.
    """
    if e.rho < min_rho:
        raise DeadZoneError(f"rho={e.rho:.4g} below dead zone {min_rho:.4g}: rates ill-conditioned")
    g = reduced_error_rate_matrix(e) if reduced else error_rate_matrix(e)
    return g @ du.as_array()


# ---------------------------------------------------------------------------
# Reference paths


class ReferencePath:
    """Analytic planar path; subclasses provide position/velocity/acceleration."""

    def point(self, t: float) -> ReferencePoint:
        raise NotImplementedError

    def pose_and_cmd(self, t: float) -> tuple:
        return flat_reference(self.point(t))

    def positions(self, times) -> np.ndarray:
        return np.array([self.point(t).position for t in np.atleast_1d(times)], dtype=float)


@dataclass(frozen=True)
class FigureEightPath(ReferencePath):
    """Lemniscate-like loop x = ax cos(2 pi t / T), y = ay sin(4 pi t / T)."""

    lap_time: float = 30.0
    ax: float = 2.5
    ay: float = 1.25

    def point(self, t: float) -> ReferencePoint:
        w1 = TWO_PI / self.lap_time
        w2 = 2.0 * w1
        return ReferencePoint(
            position=(self.ax * math.cos(w1 * t), self.ay * math.sin(w2 * t)),
            velocity=(-self.ax * w1 * math.sin(w1 * t), self.ay * w2 * math.cos(w2 * t)),
            acceleration=(-self.ax * w1 * w1 * math.cos(w1 * t), -self.ay * w2 * w2 * math.sin(w2 * t)),
        )


@dataclass(frozen=True)
class CirclePath(ReferencePath):
    """Circle of radius R traversed at constant angular rate."""

    radius: float
    rate: float
    center: tuple = (0.0, 0.0)

    def point(self, t: float) -> ReferencePoint:
        r, w = self.radius, self.rate
        a = w * t
        return ReferencePoint(
            position=(self.center[0] + r * math.cos(a), self.center[1] + r * math.sin(a)),
            velocity=(-r * w * math.sin(a), r * w * math.cos(a)),
            acceleration=(-r * w * w * math.cos(a), -r * w * w * math.sin(a)),
        )


@dataclass(frozen=True)
class LinePath(ReferencePath):
    """Straight line from a start point at constant velocity."""

    start: tuple = (0.0, 0.0)
    velocity: tuple = (1.0, 0.0)

    def point(self, t: float) -> ReferencePoint:
        return ReferencePoint(
            position=(self.start[0] + self.velocity[0] * t, self.start[1] + self.velocity[1] * t),
            velocity=self.velocity,
            acceleration=(0.0, 0.0),
        )
