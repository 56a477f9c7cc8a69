"""Run configuration: strict YAML schema with location-aware errors.

Unknown keys are rejected with their dotted path so config typos fail loudly.
parse -> serialize -> parse is stable, which keeps run artifacts replayable.
"""

from __future__ import annotations

from dataclasses import dataclass

import yaml

from . import mppi
from .assist import AssistParams
from .control import Gains, TubeParams
from .core import Limits
from .gridmap import Box, Disc, GridGeometry, ObstacleSet
from .simulator import DISTURBANCE_PRESETS, DisturbanceModel, Scenario


class ConfigError(ValueError):
    """Invalid or unknown configuration content, with its dotted location."""


@dataclass(frozen=True)
class TrainingConfig:
    lap_times: tuple = (20.0, 30.0, 40.0, 50.0)
    duration: float = 300.0
    lookahead: float = 0.4
    subsample: int = 3000


@dataclass(frozen=True)
class ExperimentConfig:
    laps: int = 10
    lap_time: float = 30.0
    r_ego: float = 0.39
    map_update_hz: float = 2.0
    beam_count: int = 60
    max_range: float = 5.0
    inflation_enabled: bool = True
    augmented_controller: bool = True
    abort_on_contact: bool = False


@dataclass(frozen=True)
class ServeConfig:
    port: int = 8750
    hz: float = 20.0
    realtime: bool = True
    start: tuple = (-1.5, 0.0, 0.0)


@dataclass(frozen=True)
class SeedConfig:
    sim: int = 0
    planner: int = 0
    calibration: int = 0


@dataclass(frozen=True)
class RunConfig:
    name: str = "run"
    epsilon: float = 0.01
    output_dir: str = "runs/run"
    bounds_file: str | None = None
    seeds: SeedConfig = SeedConfig()
    disturbance: DisturbanceModel = DisturbanceModel()
    training: TrainingConfig = TrainingConfig()
    limits: Limits = Limits()
    gains: Gains = Gains()
    tube: TubeParams = TubeParams()
    geometry: GridGeometry = GridGeometry()
    mppi_params: mppi.MppiParams = mppi.MppiParams()
    weights: mppi.CostWeights = None
    alpha_shift: float = 0.1
    obstacles: ObstacleSet = ObstacleSet()
    experiment: ExperimentConfig = ExperimentConfig()
    assist: AssistParams = AssistParams()
    serve: ServeConfig = ServeConfig()

    def scenario(self) -> Scenario:
        return Scenario(
            obstacles=self.obstacles,
            disturbance=self.disturbance,
            epsilon=self.epsilon,
            laps=self.experiment.laps,
            lap_time=self.experiment.lap_time,
            gains=self.gains,
            limits=self.limits,
            tube=self.tube,
            mppi_params=self.mppi_params,
            weights=self.weights if self.weights is not None else mppi.CostWeights(),
            geometry=self.geometry,
            r_ego=self.experiment.r_ego,
            map_update_hz=self.experiment.map_update_hz,
            beam_count=self.experiment.beam_count,
            max_range=self.experiment.max_range,
            inflation_enabled=self.experiment.inflation_enabled,
            augmented_controller=self.experiment.augmented_controller,
            abort_on_contact=self.experiment.abort_on_contact,
            sim_seed=self.seeds.sim,
        )

    def with_seed(self, seed: int) -> "RunConfig":
        from dataclasses import replace
        return replace(
            self,
            seeds=SeedConfig(sim=seed, planner=seed + 1000, calibration=seed + 2000),
            mppi_params=mppi.MppiParams(
                **{**_mppi_dict(self.mppi_params), "seed": seed + 1000}),
        )


def _mppi_dict(p: mppi.MppiParams) -> dict:
    return dict(horizon=p.horizon, dt=p.dt, sample_count=p.sample_count,
                sigma=tuple(p.sigma), lam=p.lam, seed=p.seed,
                weighting=p.weighting, retry_limit=p.retry_limit)


def _reject_unknown(d: dict, allowed, where: str):
    for k in d:
        if k not in allowed:
            hints = ", ".join(sorted(allowed))
            raise ConfigError(f"{where}: unknown key {k!r} (expected one of: {hints})")


def _section(raw: dict, name: str) -> dict:
    v = raw.get(name, {})
    if v is None:
        return {}
    if not isinstance(v, dict):
        raise ConfigError(f"{name}: expected a mapping, got {type(v).__name__}")
    return v


def _parse_obstacles(items, where="obstacles") -> ObstacleSet:
    if items is None:
        return ObstacleSet()
    obs = []
    for i, item in enumerate(items):
        loc = f"{where}[{i}]"
        if not isinstance(item, dict) or "type" not in item:
            raise ConfigError(f"{loc}: expected a mapping with a 'type' key")
        kind = item["type"]
        if kind == "box":
            if "center" in item:
                _reject_unknown(item, {"type", "center", "size"}, loc)
                cx, cy = item["center"]
                sx, sy = item.get("size", (0.5, 0.5))
                obs.append(Box(cx - sx / 2, cy - sy / 2, cx + sx / 2, cy + sy / 2))
            else:
                _reject_unknown(item, {"type", "xmin", "ymin", "xmax", "ymax"}, loc)
                obs.append(Box(item["xmin"], item["ymin"], item["xmax"], item["ymax"]))
        elif kind == "disc":
            _reject_unknown(item, {"type", "center", "radius"}, loc)
            cx, cy = item["center"]
            obs.append(Disc(cx, cy, item["radius"]))
        else:
            raise ConfigError(f"{loc}: unknown obstacle type {kind!r}")
    return ObstacleSet(tuple(obs))


def _parse_disturbance(d: dict) -> DisturbanceModel:
    if "preset" in d:
        _reject_unknown(d, {"preset", "seed"}, "disturbance")
        name = d["preset"]
        if name not in DISTURBANCE_PRESETS:
            raise ConfigError(f"disturbance.preset: unknown preset {name!r} "
                              f"(available: {', '.join(sorted(DISTURBANCE_PRESETS))})")
        base = DISTURBANCE_PRESETS[name]
        from dataclasses import replace
        return replace(base, seed=int(d.get("seed", base.seed)))
    allowed = {"slip_gain", "omega_gain", "input_delay", "lag_tau",
               "lateral_skid", "noise_std", "seed"}
    _reject_unknown(d, allowed, "disturbance")
    kw = dict(d)
    if "noise_std" in kw:
        kw["noise_std"] = tuple(kw["noise_std"])
    return DisturbanceModel(**kw)


def parse_config(source) -> RunConfig:
    """Build a RunConfig from a YAML path or an already-loaded mapping."""
    if isinstance(source, dict):
        raw = source
    else:
        with open(source) as fh:
            raw = yaml.safe_load(fh) or {}
    if not isinstance(raw, dict):
        raise ConfigError("top level: expected a mapping")
    top_allowed = {"name", "epsilon", "output_dir", "bounds_file", "seeds",
                   "disturbance", "training", "limits", "gains", "tube", "map",
                   "mppi", "weights", "alpha_shift", "obstacles", "experiment",
                   "assist", "serve"}
    _reject_unknown(raw, top_allowed, "top level")

    try:
        seeds_d = _section(raw, "seeds")
        _reject_unknown(seeds_d, {"sim", "planner", "calibration"}, "seeds")
        seeds = SeedConfig(**{k: int(v) for k, v in seeds_d.items()})

        tr_d = _section(raw, "training")
        _reject_unknown(tr_d, {"lap_times", "duration", "lookahead", "subsample"}, "training")
        tr_kw = dict(tr_d)
        if "lap_times" in tr_kw:
            tr_kw["lap_times"] = tuple(float(t) for t in tr_kw["lap_times"])
        training = TrainingConfig(**tr_kw)

        lim_d = _section(raw, "limits")
        _reject_unknown(lim_d, {"v_max", "omega_max", "rho_dz", "rho_max", "dt"}, "limits")
        limits = Limits(**lim_d)

        g_d = _section(raw, "gains")
        _reject_unknown(g_d, {"k1", "k2", "k3", "lambda1"}, "gains")
        gains = Gains(**g_d)

        tube_d = _section(raw, "tube")
        _reject_unknown(tube_d, {"alpha1", "alpha2", "alpha3_slope", "lipschitz_v", "dt"}, "tube")
        tube_kw = dict(tube_d)
        if "lipschitz_v" in tube_kw:
            tube_kw["lipschitz_V"] = tube_kw.pop("lipschitz_v")
        tube = TubeParams(**tube_kw)

        map_d = _section(raw, "map")
        _reject_unknown(map_d, {"height", "width", "resolution", "origin"}, "map")
        map_kw = dict(map_d)
        if "origin" in map_kw:
            map_kw["origin"] = tuple(map_kw["origin"])
        geometry = GridGeometry(**map_kw)

        m_d = _section(raw, "mppi")
        _reject_unknown(m_d, {"horizon", "dt", "sample_count", "sigma", "lambda",
                              "seed", "weighting", "retry_limit"}, "mppi")
        m_kw = dict(m_d)
        if "lambda" in m_kw:
            m_kw["lam"] = m_kw.pop("lambda")
        if "sigma" in m_kw:
            m_kw["sigma"] = tuple(m_kw["sigma"])
        mppi_params = mppi.MppiParams(**m_kw)

        w_d = _section(raw, "weights")
        _reject_unknown(w_d, {"q_stage", "q_terminal", "r_input", "alpha_iss", "lethal"}, "weights")
        import numpy as np
        lethal = w_d.get("lethal")
        if lethal is None:
            lethal = mppi.default_lethal_threshold(
                limits, m_kw.get("horizon", 30),
                np.diag(w_d.get("q_stage", [50.0, 50.0])))
        weights = mppi.CostWeights(
            q_stage=np.diag(w_d["q_stage"]) if "q_stage" in w_d else None,
            q_terminal=np.diag(w_d["q_terminal"]) if "q_terminal" in w_d else None,
            r_input=np.diag(w_d["r_input"]) if "r_input" in w_d else None,
            alpha_iss=float(w_d.get("alpha_iss", 10000.0)),
            cap=float(lethal),
        )

        ex_d = _section(raw, "experiment")
        _reject_unknown(ex_d, {"laps", "lap_time", "r_ego", "map_update_hz", "beam_count",
                               "max_range", "inflation_enabled", "augmented_controller",
                               "abort_on_contact"}, "experiment")
        experiment = ExperimentConfig(**ex_d)

        a_d = _section(raw, "assist")
        _reject_unknown(a_d, {"horizon", "dt", "sample_count", "sigma", "lambda",
                              "joystick_share", "threshold_schedule", "override_schedule",
                              "alpha_joy", "seed", "retry_limit"}, "assist")
        a_kw = dict(a_d)
        if "lambda" in a_kw:
            a_kw["lam"] = a_kw.pop("lambda")
        if "sigma" in a_kw:
            a_kw["sigma"] = tuple(a_kw["sigma"])
        assist = AssistParams(**a_kw)

        s_d = _section(raw, "serve")
        _reject_unknown(s_d, {"port", "hz", "realtime", "start"}, "serve")
        s_kw = dict(s_d)
        if "start" in s_kw:
            s_kw["start"] = tuple(s_kw["start"])
        serve = ServeConfig(**s_kw)

        disturbance = _parse_disturbance(_section(raw, "disturbance"))
        obstacles = _parse_obstacles(raw.get("obstacles"))
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc

    epsilon = float(raw.get("epsilon", 0.01))
    if not (0.0 < epsilon < 1.0):
        raise ConfigError(f"epsilon: must be in (0, 1), got {epsilon}")

    return RunConfig(
        name=str(raw.get("name", "run")),
        epsilon=epsilon,
        output_dir=str(raw.get("output_dir", f"runs/{raw.get('name', 'run')}")),
        bounds_file=raw.get("bounds_file"),
        seeds=seeds,
        disturbance=disturbance,
        training=training,
        limits=limits,
        gains=gains,
        tube=tube,
        geometry=geometry,
        mppi_params=mppi_params,
        weights=weights,
        alpha_shift=float(raw.get("alpha_shift", 0.1)),
        obstacles=obstacles,
        experiment=experiment,
        assist=assist,
        serve=serve,
    )


def config_to_dict(cfg: RunConfig) -> dict:
    """Canonical mapping form of a RunConfig (inverse of parse_config)."""
    def obstacle_dict(ob):
        if isinstance(ob, Box):
            return {"type": "box", "xmin": ob.xmin, "ymin": ob.ymin,
                    "xmax": ob.xmax, "ymax": ob.ymax}
        return {"type": "disc", "center": [ob.cx, ob.cy], "radius": ob.radius}

    d = cfg.disturbance
    w = cfg.weights
    return {
        "name": cfg.name,
        "epsilon": cfg.epsilon,
        "output_dir": cfg.output_dir,
        "bounds_file": cfg.bounds_file,
        "seeds": {"sim": cfg.seeds.sim, "planner": cfg.seeds.planner,
                  "calibration": cfg.seeds.calibration},
        "disturbance": {"slip_gain": d.slip_gain, "omega_gain": d.omega_gain,
                        "input_delay": d.input_delay, "lag_tau": d.lag_tau,
                        "lateral_skid": d.lateral_skid,
                        "noise_std": list(d.noise_std), "seed": d.seed},
        "training": {"lap_times": list(cfg.training.lap_times),
                     "duration": cfg.training.duration,
                     "lookahead": cfg.training.lookahead,
                     "subsample": cfg.training.subsample},
        "limits": {"v_max": cfg.limits.v_max, "omega_max": cfg.limits.omega_max,
                   "rho_dz": cfg.limits.rho_dz, "rho_max": cfg.limits.rho_max,
                   "dt": cfg.limits.dt},
        "gains": {"k1": cfg.gains.k1, "k2": cfg.gains.k2, "k3": cfg.gains.k3,
                  "lambda1": cfg.gains.lambda1},
        "tube": {"alpha1": cfg.tube.alpha1, "alpha2": cfg.tube.alpha2,
                 "alpha3_slope": cfg.tube.alpha3_slope,
                 "lipschitz_v": cfg.tube.lipschitz_V, "dt": cfg.tube.dt},
        "map": {"height": cfg.geometry.height, "width": cfg.geometry.width,
                "resolution": cfg.geometry.resolution,
                "origin": list(cfg.geometry.origin)},
        "mppi": {"horizon": cfg.mppi_params.horizon, "dt": cfg.mppi_params.dt,
                 "sample_count": cfg.mppi_params.sample_count,
                 "sigma": list(cfg.mppi_params.sigma), "lambda": cfg.mppi_params.lam,
                 "seed": cfg.mppi_params.seed, "weighting": cfg.mppi_params.weighting,
                 "retry_limit": cfg.mppi_params.retry_limit},
        "weights": {"q_stage": [float(w.q_stage[0, 0]), float(w.q_stage[1, 1])],
                    "q_terminal": [float(w.q_terminal[0, 0]), float(w.q_terminal[1, 1])],
                    "r_input": [float(w.r_input[0, 0]), float(w.r_input[1, 1])],
                    "alpha_iss": w.alpha_iss, "lethal": w.cap},
        "alpha_shift": cfg.alpha_shift,
        "obstacles": [obstacle_dict(ob) for ob in cfg.obstacles.obstacles],
        "experiment": {"laps": cfg.experiment.laps, "lap_time": cfg.experiment.lap_time,
                       "r_ego": cfg.experiment.r_ego,
                       "map_update_hz": cfg.experiment.map_update_hz,
                       "beam_count": cfg.experiment.beam_count,
                       "max_range": cfg.experiment.max_range,
                       "inflation_enabled": cfg.experiment.inflation_enabled,
                       "augmented_controller": cfg.experiment.augmented_controller,
                       "abort_on_contact": cfg.experiment.abort_on_contact},
        "assist": {"horizon": cfg.assist.horizon, "dt": cfg.assist.dt,
                   "sample_count": cfg.assist.sample_count,
                   "sigma": list(cfg.assist.sigma), "lambda": cfg.assist.lam,
                   "joystick_share": cfg.assist.joystick_share,
                   "threshold_schedule": cfg.assist.threshold_schedule,
                   "override_schedule": cfg.assist.override_schedule,
                   "alpha_joy": cfg.assist.alpha_joy, "seed": cfg.assist.seed,
                   "retry_limit": cfg.assist.retry_limit},
        "serve": {"port": cfg.serve.port, "hz": cfg.serve.hz,
                  "realtime": cfg.serve.realtime, "start": list(cfg.serve.start)},
    }


def save_config(path, cfg: RunConfig) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(config_to_dict(cfg), fh, sort_keys=False)
