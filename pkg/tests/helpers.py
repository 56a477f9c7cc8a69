"""Shared oracles and harnesses, kept independent of the code paths they check."""

import math

import numpy as np

from safenav.conformal import TrainingTuple
from safenav.core import Pose, VelocityCmd, polar_error
from safenav.gridmap import OccupancyGrid


def numeric_flat_oracle(path, t, h=1e-6):
    """Speed, angular rate, and heading of a path by central differences.

    Independent of the analytic flatness formulas: velocity and heading come
    from differentiating positions, the angular rate from differentiating the
    numeric heading.
    """
    p = lambda tt: np.array(path.point(tt).position)
    v_vec = (p(t + h) - p(t - h)) / (2 * h)
    speed = float(np.linalg.norm(v_vec))
    theta = math.atan2(v_vec[1], v_vec[0])

    def heading(tt):
        vv = (p(tt + h) - p(tt - h)) / (2 * h)
        return math.atan2(vv[1], vv[0])

    th_p, th_m = heading(t + h), heading(t - h)
    dth = (th_p - th_m + math.pi) % (2 * math.pi) - math.pi
    omega = dth / (2 * h)
    return speed, omega, theta


def simulate_iss_invariance(z_matched, lambda1=0.5, k1=0.3, k2=0.15, seed=0,
                            trials=100, steps=10000, dt=0.002, substeps=16,
                            dz=0.05, rho_floor=1e-4):
    """Worst-case Lyapunov ratio of the reduced perturbed error dynamics.

    Integrates the two-state error ODE under the augmented feedback law with
    the pointwise worst-case matched disturbance (norm z_matched, aligned with
    the Lyapunov gradient through the input matrix). Starts are uniform in
    the invariant ball intersected with rho >= dz. Returns max over the run
    of V / (z^2/4). The rho floor only guards the coordinate singularity deep
    inside the ball (V there is below a third of the ball level).
    """
    z = z_matched
    v_ball = z * z / 4.0

    def rates(rho, gam):
        c, s = np.cos(gam), np.sin(gam)
        r = np.maximum(rho, rho_floor)
        gte1 = -c * rho + s * gam / r
        gte2 = -gam
        sn = np.hypot(gte1, gte2)
        sn = np.where(sn > 1e-12, sn, 1.0)
        u1 = k1 * rho * c - gte1 / lambda1 + z * gte1 / sn
        u2 = k2 * gam + k1 * s * c - gte2 / lambda1 + z * gte2 / sn
        return -c * u1, s / r * u1 - u2

    rng = np.random.default_rng(seed)
    rho = np.empty(trials)
    gam = np.empty(trials)
    filled = 0
    while filled < trials:
        r = math.sqrt(2 * v_ball) * math.sqrt(rng.uniform())
        a = rng.uniform(0.0, 2 * math.pi)
        rr, gg = abs(r * math.cos(a)), r * math.sin(a)
        if rr >= dz:
            rho[filled], gam[filled] = rr, gg
            filled += 1

    worst = 0.0
    h = dt / substeps
    for _ in range(steps):
        for _ in range(substeps):
            dr, dg = rates(rho, gam)
            rho = rho + h * dr
            gam = gam + h * dg
        v = 0.5 * (rho ** 2 + gam ** 2)
        worst = max(worst, float(v.max()) / v_ball)
    return worst


def brute_force_lethal_mask(grid: OccupancyGrid, n_eps: int) -> np.ndarray:
    """Disc-intersection oracle for the lethal tier.

    A cell is lethal exactly when the Euclidean disc of radius
    n_eps * resolution around its center intersects the square area of some
    occupied cell. Direct enumeration over occupied cells, no dilation.
    """
    geo = grid.geometry
    occ = np.argwhere(grid.occupied_mask())
    mask = np.zeros((geo.height, geo.width), dtype=bool)
    if occ.size == 0:
        return mask
    radius = n_eps * geo.resolution
    half = geo.resolution / 2.0
    ii, jj = np.meshgrid(np.arange(geo.height), np.arange(geo.width), indexing="ij")
    centers_x = (ii - geo.height / 2 + 0.5) * geo.resolution + geo.origin[0]
    centers_y = (jj - geo.width / 2 + 0.5) * geo.resolution + geo.origin[1]
    for oi, oj in occ:
        ox = (oi - geo.height / 2 + 0.5) * geo.resolution + geo.origin[0]
        oy = (oj - geo.width / 2 + 0.5) * geo.resolution + geo.origin[1]
        dx = np.maximum(np.abs(centers_x - ox) - half, 0.0)
        dy = np.maximum(np.abs(centers_y - oy) - half, 0.0)
        mask |= np.hypot(dx, dy) <= radius + 1e-12
    return mask


def soft_tier_oracle(grid: OccupancyGrid, n_eps: int, alpha_shift: float) -> np.ndarray:
    """Shifted-occupancy sum by direct loops over the shift window."""
    geo = grid.geometry
    occ = grid.cells.astype(float) / 100.0
    out = np.zeros_like(occ)
    for i in range(-n_eps, n_eps + 1):
        for j in range(-n_eps, n_eps + 1):
            shifted = np.zeros_like(occ)
            src = occ[max(0, -i):geo.height - max(0, i), max(0, -j):geo.width - max(0, j)]
            shifted[max(0, i):geo.height - max(0, -i), max(0, j):geo.width - max(0, -j)] = src
            out += alpha_shift * shifted / math.sqrt(i * i + j * j + 1.0)
    return out


def make_injected_tuple(rng, dt=0.05, matched=None, unmatched=None):
    """Training tuple whose extraction recovers exactly the injected scores.

    Builds a random previous error with a zero input offset (applied equals
    optimal, so every propagation rule leaves the nominal error unchanged),
    then displaces the measured error by G d_u + m nhat with nhat a unit
    vector orthogonal to the columns of G. Returns the tuple and the injected
    (|d_u|, m).
    """
    from safenav.core import error_rate_matrix

    rho = rng.uniform(0.15, 0.45)
    gamma = rng.uniform(-1.0, 1.0)
    delta = rng.uniform(-1.0, 1.0)
    theta_opt = rng.uniform(-math.pi, math.pi)

    opt = Pose(rng.uniform(-1, 1), rng.uniform(-1, 1), theta_opt)
    # delta = gamma + theta - theta* so theta = theta* + delta - gamma;
    # the line of sight to the target sits at gamma + theta
    theta_cur = theta_opt + (delta - gamma)
    los = gamma + theta_cur
    cur = Pose(opt.x - rho * math.cos(los), opt.y - rho * math.sin(los), theta_cur)

    e_prev = polar_error(cur, opt)
    assert not e_prev.converged
    G = error_rate_matrix(e_prev) * dt
    e_nom = e_prev.as_array()

    if matched is None:
        matched = rng.uniform(0.0, 0.4)
    if unmatched is None:
        unmatched = rng.uniform(0.0, 0.03)
    ang = rng.uniform(0, 2 * math.pi)
    d_u = matched * np.array([math.cos(ang), math.sin(ang)])
    # unit vector orthogonal to both columns of G
    u_svd, _, _ = np.linalg.svd(G)
    nhat = u_svd[:, 2]
    e_meas_vec = e_nom + G @ d_u + unmatched * nhat

    # realize e_meas_vec as a measured pose against opt
    rho_m, gam_m, del_m = e_meas_vec
    theta_m = theta_opt + (del_m - gam_m)
    los_m = gam_m + theta_m
    meas = Pose(opt.x - rho_m * math.cos(los_m), opt.y - rho_m * math.sin(los_m), theta_m)

    u_apply = VelocityCmd(rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5))
    tup = TrainingTuple(prev_state=cur, measured_state=meas, optimal_state=opt,
                        applied_input=u_apply, optimal_input=u_apply, dt=dt)
    return tup, float(np.linalg.norm(d_u)), float(unmatched)


def make_injected_dataset(n, rng, matched_high=0.4, unmatched_high=0.03, dt=0.05):
    """Dataset with uniform injected disturbance magnitudes; returns tuples and truths."""
    tuples, ms, us = [], [], []
    for _ in range(n):
        m = rng.uniform(0.0, matched_high)
        u = rng.uniform(0.0, unmatched_high)
        tup, minj, uinj = make_injected_tuple(rng, dt=dt, matched=m, unmatched=u)
        tuples.append(tup)
        ms.append(minj)
        us.append(uinj)
    return tuples, np.array(ms), np.array(us)
