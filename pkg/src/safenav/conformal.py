"""Discrepancy extraction from closed-loop data and split conformal calibration.

Each training tuple compares the measured one-step tracking error against the
nominal prediction; the residual is split into a matched part (attributable
to an input offset, recovered by least squares through the error-dynamics
input matrix) and an unmatched remainder. Split conformal prediction turns
the two score lists into distribution-free probabilistic upper bounds.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass

import numpy as np

from .control import DiscrepancyBounds
from .core import Pose, PolarError, VelocityCmd, error_rate_matrix, polar_error, step_exact


class InsufficientDataError(ValueError):
    """Calibration dataset smaller than the requested subsample."""


@dataclass(frozen=True)
class TrainingTuple:
    """One closed-loop training record over a single control interval."""

    prev_state: Pose
    measured_state: Pose
    optimal_state: Pose
    applied_input: VelocityCmd
    optimal_input: VelocityCmd
    dt: float
    timestamp: float = 0.0

    def __post_init__(self):
        if self.dt <= 0.0:
            raise ValueError(f"dt must be positive, got {self.dt}")


@dataclass(frozen=True)
class DiscrepancySample:
    """Matched input-discrepancy norm and unmatched residual magnitude."""

    matched_norm: float
    unmatched_mag: float


@dataclass(frozen=True)
class CalibrationConfig:
    """Risk level, subsample size, seed, and extraction options.

    integration_rule selects how the nominal error is propagated across the
    interval: "pose" advances the previous pose by the recorded input offset
    with the exact constant-twist step and re-derives the polar error (exact
    for disturbance-free data), while "start" and "midpoint" Euler-integrate
    the polar error rates directly.
    """

    epsilon: float = 0.01
    subsample: int = 3000
    seed: int = 0
    integration_rule: str = "pose"       # "pose" | "start" | "midpoint"
    score_offset: str = "zero_mean"      # "zero_mean" | "mean_offset"
    drop_angle_outliers: bool = False
    angle_outlier_threshold: float = math.pi / 2

    def __post_init__(self):
        if not (0.0 < self.epsilon < 1.0):
            raise ValueError(f"epsilon must be in (0, 1), got {self.epsilon}")
        if self.subsample < 1:
            raise ValueError(f"subsample must be positive, got {self.subsample}")


@dataclass
class CalibrationScores:
    """Extracted score lists plus bookkeeping from one calibration pass."""

    matched: np.ndarray
    unmatched: np.ndarray
    config: CalibrationConfig
    skipped_dead_zone: int = 0
    skipped_outliers: int = 0
    dataset_digest: str = ""

    def bounds(self, epsilon: float | None = None) -> DiscrepancyBounds:
        eps = self.config.epsilon if epsilon is None else epsilon
        zm = conformal_quantile(self.matched, eps)
        zu = conformal_quantile(self.unmatched, eps)
        return DiscrepancyBounds(zm, zu, eps, len(self.matched))


def _propagated_nominal_error(tup: TrainingTuple, e_prev: PolarError, du: np.ndarray,
                              rule: str, rho_dz: float) -> np.ndarray:
    """Nominal error at the end of the interval under the recorded input offset."""
    if rule == "pose":
        stepped = step_exact(tup.prev_state, VelocityCmd(du[0], du[1]), tup.dt)
        return polar_error(stepped, tup.optimal_state, rho_dz=rho_dz).as_array()
    g0 = error_rate_matrix(e_prev)
    if rule == "start":
        return e_prev.as_array() + (g0 * tup.dt) @ du
    if rule == "midpoint":
        e_half = e_prev.as_array() + 0.5 * tup.dt * (g0 @ du)
        mid = PolarError(max(e_half[0], 1e-9), e_half[1], e_half[2])
        return e_prev.as_array() + (error_rate_matrix(mid) * tup.dt) @ du
    raise ValueError(f"unknown integration rule {rule!r}")


def extract_discrepancy(tup: TrainingTuple, rho_dz: float = 0.05,
                        integration_rule: str = "pose") -> DiscrepancySample | None:
    """Split one tuple's prediction residual into matched and unmatched scores.

    Returns None for tuples whose previous state sits in the dead zone of the
    optimal state (callers count and skip those).

    The matched input offset solves the least-squares problem
    min_d || dehat - G d ||, i.e. the largest residual share attributable to
    an input discrepancy; the unmatched magnitude is the remaining residual
    norm. G is the one-point (interval-start) approximation of the integrated
    input matrix.
    """
    e_prev = polar_error(tup.prev_state, tup.optimal_state, rho_dz=rho_dz)
    if e_prev.converged:
        return None
    e_meas = polar_error(tup.measured_state, tup.optimal_state, rho_dz=rho_dz)
    du = tup.applied_input.as_array() - tup.optimal_input.as_array()
    e_nom = _propagated_nominal_error(tup, e_prev, du, integration_rule, rho_dz)
    G = error_rate_matrix(e_prev) * tup.dt
    dehat = e_meas.as_array() - e_nom
    d_u, *_ = np.linalg.lstsq(G, dehat, rcond=None)
    residual = dehat - G @ d_u
    return DiscrepancySample(float(np.linalg.norm(d_u)), float(np.linalg.norm(residual)))


def conformal_quantile(scores, epsilon: float) -> float:
    """Finite-sample-adjusted (1 - epsilon) quantile of nonnegative scores.

    Appends +inf, sorts nondecreasing, and returns the element at 1-based
    order index ceil((n + 1)(1 - epsilon)). Returns inf when the index lands
    on the appended sentinel (insufficient samples for this epsilon).
    """
    scores = np.asarray(scores, dtype=float)
    if scores.size == 0:
        raise ValueError("scores must be nonempty")
    if not (0.0 < epsilon < 1.0):
        raise ValueError(f"epsilon must be in (0, 1), got {epsilon}")
    n = scores.size
    q = math.ceil((n + 1) * (1.0 - epsilon))
    if q >= n + 1:
        return math.inf
    ordered = np.sort(scores)
    return float(ordered[q - 1])


def quantile_index(n: int, epsilon: float) -> int:
    """1-based order index used by the conformal quantile for n scores."""
    return math.ceil((n + 1) * (1.0 - epsilon))


def calibrate_scores(dataset, config: CalibrationConfig, rho_dz: float = 0.05) -> CalibrationScores:
    """Subsample the dataset, extract scores, and keep the lists for reuse."""
    n = len(dataset)
    if n < config.subsample:
        raise InsufficientDataError(
            f"calibration needs {config.subsample} tuples, dataset has only {n}"
        )
    rng = np.random.default_rng(config.seed)
    idx = rng.choice(n, size=config.subsample, replace=False)
    matched, unmatched = [], []
    skipped = 0
    outliers = 0
    for i in idx:
        tup = dataset[i]
        e_prev = polar_error(tup.prev_state, tup.optimal_state, rho_dz=rho_dz)
        if e_prev.converged:
            skipped += 1
            continue
        if config.drop_angle_outliers:
            e_meas = polar_error(tup.measured_state, tup.optimal_state, rho_dz=rho_dz)
            if (abs(e_meas.gamma - e_prev.gamma) > config.angle_outlier_threshold
                    or abs(e_meas.delta - e_prev.delta) > config.angle_outlier_threshold):
                outliers += 1
                continue
        sample = extract_discrepancy(tup, rho_dz=rho_dz, integration_rule=config.integration_rule)
        if sample is None:
            skipped += 1
            continue
        matched.append(sample.matched_norm)
        unmatched.append(sample.unmatched_mag)
    matched = np.asarray(matched)
    unmatched = np.asarray(unmatched)
    if config.score_offset == "mean_offset":
        matched = np.abs(matched - matched.mean()) if matched.size else matched
        unmatched = np.abs(unmatched - unmatched.mean()) if unmatched.size else unmatched
    return CalibrationScores(matched, unmatched, config, skipped, outliers,
                             dataset_digest=dataset_digest(dataset))


def calibrate(dataset, config: CalibrationConfig, rho_dz: float = 0.05) -> DiscrepancyBounds:
    """Calibrate matched and unmatched discrepancy bounds at config.epsilon."""
    return calibrate_scores(dataset, config, rho_dz=rho_dz).bounds()


# ---------------------------------------------------------------------------
# Persistence

DATASET_COLUMNS = [
    "t", "prev_x", "prev_y", "prev_theta",
    "meas_x", "meas_y", "meas_theta",
    "opt_x", "opt_y", "opt_theta",
    "applied_v", "applied_omega", "optimal_v", "optimal_omega", "dt",
]


def save_dataset(path, dataset) -> None:
    """Write tuples as line-delimited records, one tuple per line."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(DATASET_COLUMNS)
        for s in dataset:
            writer.writerow([
                f"{s.timestamp:.9g}",
                f"{s.prev_state.x:.17g}", f"{s.prev_state.y:.17g}", f"{s.prev_state.theta:.17g}",
                f"{s.measured_state.x:.17g}", f"{s.measured_state.y:.17g}", f"{s.measured_state.theta:.17g}",
                f"{s.optimal_state.x:.17g}", f"{s.optimal_state.y:.17g}", f"{s.optimal_state.theta:.17g}",
                f"{s.applied_input.v:.17g}", f"{s.applied_input.omega:.17g}",
                f"{s.optimal_input.v:.17g}", f"{s.optimal_input.omega:.17g}",
                f"{s.dt:.9g}",
            ])


def load_dataset(path) -> list:
    """Read tuples written by save_dataset."""
    out = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != DATASET_COLUMNS:
            raise ValueError(f"{path}: unexpected dataset header {header!r}")
        for row in reader:
            vals = [float(v) for v in row]
            out.append(TrainingTuple(
                prev_state=Pose(vals[1], vals[2], vals[3]),
                measured_state=Pose(vals[4], vals[5], vals[6]),
                optimal_state=Pose(vals[7], vals[8], vals[9]),
                applied_input=VelocityCmd(vals[10], vals[11]),
                optimal_input=VelocityCmd(vals[12], vals[13]),
                dt=vals[14],
                timestamp=vals[0],
            ))
    return out


def dataset_digest(dataset) -> str:
    """Stable sha256 digest of a tuple list (order-sensitive)."""
    h = hashlib.sha256()
    for s in dataset:
        h.update(np.array([
            s.timestamp,
            s.prev_state.x, s.prev_state.y, s.prev_state.theta,
            s.measured_state.x, s.measured_state.y, s.measured_state.theta,
            s.optimal_state.x, s.optimal_state.y, s.optimal_state.theta,
            s.applied_input.v, s.applied_input.omega,
            s.optimal_input.v, s.optimal_input.omega, s.dt,
        ], dtype=float).tobytes())
    return h.hexdigest()


def save_bounds(path, bounds: DiscrepancyBounds, seed: int, digest: str,
                extra: dict | None = None) -> None:
    """Persist a calibration result as a small structured text document."""
    doc = {
        "z_matched": bounds.z_matched,
        "z_unmatched": bounds.z_unmatched,
        "epsilon": bounds.epsilon,
        "sample_count": bounds.sample_count,
        "seed": seed,
        "dataset_digest": digest,
    }
    if extra:
        doc.update(extra)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def load_bounds(path) -> DiscrepancyBounds:
    with open(path) as fh:
        doc = json.load(fh)
    return DiscrepancyBounds(
        z_matched=doc["z_matched"],
        z_unmatched=doc["z_unmatched"],
        epsilon=doc["epsilon"],
        sample_count=doc["sample_count"],
    )
