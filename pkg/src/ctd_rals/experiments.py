"""Seeded experiment runners behind the ``ctd-rals`` command.

A run is described by a flat ``key = value`` config. Experiment parameters
(tensor sizes, tolerance lists, ...) use the names in ``PARAMS``; any other
key must be a field of one of the solver configs. Unprefixed field names go to
every config the experiment uses; ``als.``, ``rals.`` and ``fp.`` prefixes
target :class:`AlsConfig`, :class:`RandAlsConfig` and
:class:`FixedPointConfig` alone.
"""
from __future__ import annotations

import csv
import io
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from functools import lru_cache

import numpy as np

from .als import AlsConfig, max_condition, reduce
from .ctd import Ctd, relative_error
from .rals import RandAlsConfig, reduce_randomized
from .spde import FixedPointConfig, build_mesh, build_problem, choose_damping, fixed_point_solve, kl_eigenpairs

EXPERIMENTS = ("sine", "manufactured", "spde-fixed-tol", "spde-fixed-rank")
REDUCERS = ("standard", "randomized")
COLUMNS = ("experiment", "trial", "seed", "reducer", "final_residual", "final_rank", "iterations", "max_cond", "wall_ms")
TRACE_COLUMNS = ("trial", "sweep", "direction", "residual", "cond")

# one fixed-point run per table row; each takes minutes to hours
_SPDE = {"n": 32, "d": 5, "m": 8, "a0": 0.1, "sigma_a": 0.01, "l_c": 2.0 / 3.0, "trials": 1}
PARAMS = {
    "sine": {"d": 5, "m": 64},
    "manufactured": {"d": 10, "m": 128, "r": 50},
    "spde-fixed-tol": {**_SPDE, "epsilons": (1e-3, 1e-4, 1e-5)},
    "spde-fixed-rank": {**_SPDE, "ranks": (10, 20, 30), "epsilons": (1e-5, 5e-6, 1e-6)},
}
_COMMON = {"reducers": REDUCERS, "trials": 100, "seed": 0}

# solver settings that differ from the library defaults, per experiment
_DEFAULTS = {
    "sine": {"epsilon": 1e-5, "stuck_tol": 1e-8, "max_rank": 16, "max_iter": 1000, "max_tries": 50},
    "manufactured": {"epsilon": 1e-4, "stuck_tol": 1e-8, "max_rank": 50, "max_iter": 1000, "start_rank": 9},
    "spde-fixed-tol": {"fp.mu": 1e-6, "fp.max_iter": 2000, "fp.max_rank": 80},
    # at a fixed rank the tolerance is usually out of reach, so each reduction
    # gets a sweep budget; randomized ALS has no stall test to stop it earlier
    "spde-fixed-rank": {
        "fp.mu": 1e-6,
        "fp.max_iter": 2000,
        "fp.warm_start": True,
        "als.max_iter": 20,
        "rals.max_iter": 20,
    },
}
_PREFIX = {"als": AlsConfig, "rals": RandAlsConfig, "fp": FixedPointConfig}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentRecord:
    experiment: str
    trial: int
    seed: int
    reducer: str
    final_residual: float
    final_rank: int
    iterations: int
    max_cond: float
    wall_ms: float
    # not part of the CSV schema
    peak_rank: int = field(default=0, compare=False)

    def row(self):
        return [getattr(self, c) for c in COLUMNS]


@dataclass(frozen=True)
class TraceRow:
    trial: int
    sweep: int
    direction: int
    residual: float
    cond: float


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str
    params: dict
    solver: dict

    @property
    def trials(self) -> int:
        return self.params["trials"]

    @property
    def seed(self) -> int:
        return self.params["seed"]


def _reserved(experiment):
    if experiment == "spde-fixed-rank":
        return {"rng_seed", "seed", "epsilon", "reducer", "reducer_cfg", "max_rank", "start_rank"}
    if experiment == "spde-fixed-tol":
        return {"rng_seed", "seed", "epsilon", "reducer", "reducer_cfg"}
    return {"rng_seed"}


def _parse_value(text: str):
    text = text.strip()
    if "," in text:
        return tuple(_parse_value(t) for t in text.split(",") if t.strip())
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def _solver_classes(experiment):
    if experiment.startswith("spde"):
        return (FixedPointConfig,)
    return (AlsConfig, RandAlsConfig)


def _field_names(cls):
    return {f.name for f in fields(cls)}


def parse_config(text: str, experiment: str | None = None) -> ExperimentConfig:
    """Parse a flat config; ``experiment`` overrides an ``experiment`` key."""
    raw = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        if key in raw:
            raise ConfigError(f"duplicate key {key!r}")
        raw[key] = _parse_value(value)
    name = experiment or raw.get("experiment")
    raw.pop("experiment", None)
    if name not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment {name!r}; choose from {', '.join(EXPERIMENTS)}")

    params = {**_COMMON, **PARAMS[name]}
    solver = dict(_DEFAULTS[name])
    for key, value in raw.items():
        if key in params:
            params[key] = value
            continue
        prefix, dot, fname = key.partition(".")
        if dot:
            if prefix not in _PREFIX or fname not in _field_names(_PREFIX[prefix]):
                raise ConfigError(f"unknown config key {key!r}")
        elif not any(key in _field_names(c) for c in _solver_classes(name)):
            raise ConfigError(f"unknown config key {key!r}")
        if key.rpartition(".")[2] in _reserved(name):
            raise ConfigError(f"config key {key!r} is set by the experiment")
        if not dot:
            # a plain key replaces any prefixed default of the same field
            for pre in _PREFIX:
                solver.pop(f"{pre}.{key}", None)
        solver[key] = value

    for key in ("reducers", "epsilons", "ranks"):
        if key in params and not isinstance(params[key], tuple):
            params[key] = (params[key],)
    bad = [r for r in params["reducers"] if r not in REDUCERS]
    if bad:
        raise ConfigError(f"config key 'reducers': unknown reducer {bad[0]!r}")
    for key in ("trials", "seed"):
        if not isinstance(params[key], int) or params[key] < 0:
            raise ConfigError(f"config key {key!r} must be a non-negative integer")
    if name == "spde-fixed-rank" and len(params["ranks"]) != len(params["epsilons"]):
        raise ConfigError("config keys 'ranks' and 'epsilons' must have equal length")
    cfg = ExperimentConfig(name, params, solver)
    # surface invalid values now rather than inside a worker
    for _, group in experiment_groups(cfg):
        for reducer in params["reducers"]:
            solver_config(cfg, reducer, group, 0)
    return cfg


def _build(cls, solver: dict, prefix: str, extra: dict):
    names = _field_names(cls)
    kw = {k: v for k, v in solver.items() if "." not in k and k in names}
    kw.update({k.split(".", 1)[1]: v for k, v in solver.items() if k.startswith(prefix + ".")})
    for name, value in kw.items():
        kw[name] = _coerce(cls, name, value)
    kw.update(extra)
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        bad = next((k for k in kw if k in str(exc)), None)
        where = f"config key {bad!r}: " if bad else ""
        raise ConfigError(f"{where}{exc}") from exc


def _coerce(cls, name, value):
    default = _field_defaults(cls)[name]
    ok = True
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int) and default is not None:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        if isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        ok = isinstance(value, float) or (name == "c" and value == "auto")
    elif isinstance(default, str) and name != "c":
        ok = isinstance(value, str)
    if name == "c" and not (value == "auto" or isinstance(value, (int, float))):
        ok = False
    if not ok:
        raise ConfigError(f"config key {name!r}: invalid value {value!r}")
    return value


def experiment_groups(cfg: ExperimentConfig):
    """Row groups of an experiment: ``(label, parameters)`` pairs."""
    p = cfg.params
    if cfg.experiment == "spde-fixed-tol":
        return [(f"{cfg.experiment}/eps={e:g}", {"epsilon": float(e)}) for e in p["epsilons"]]
    if cfg.experiment == "spde-fixed-rank":
        return [
            (f"{cfg.experiment}/rank={r}", {"rank": int(r), "epsilon": float(e)})
            for r, e in zip(p["ranks"], p["epsilons"])
        ]
    return [(cfg.experiment, {})]


def solver_config(cfg: ExperimentConfig, reducer: str, group: dict, seed: int):
    """Solver config for one trial."""
    solver = cfg.solver
    if not cfg.experiment.startswith("spde"):
        if reducer == "standard":
            return _build(AlsConfig, solver, "als", {"rng_seed": seed})
        return _build(RandAlsConfig, solver, "rals", {"rng_seed": seed})

    eps = group["epsilon"]
    fp_kw = _only(solver, FixedPointConfig, "fp")
    cls, prefix = (AlsConfig, "als") if reducer == "standard" else (RandAlsConfig, "rals")
    extra = {"epsilon": eps, "residual_noise": eps * 1e-2}
    if "rank" in group:
        extra.update(max_rank=group["rank"], start_rank=group["rank"])
    else:
        extra["max_rank"] = fp_kw.get("max_rank", _field_defaults(FixedPointConfig)["max_rank"])
    prefixed = {k: v for k, v in solver.items() if k.startswith(prefix + ".")}
    rcfg = _build(cls, prefixed, prefix, extra)
    fp_extra = {"epsilon": eps, "reducer": reducer, "reducer_cfg": rcfg, "seed": seed}
    if "rank" in group:
        fp_extra["max_rank"] = group["rank"]
    return _build(FixedPointConfig, solver, "fp", fp_extra)


def _field_defaults(cls):
    return {f.name: f.default for f in fields(cls)}


def _only(solver, cls, prefix):
    names = _field_names(cls)
    out = {k: v for k, v in solver.items() if "." not in k and k in names}
    out.update({k.split(".", 1)[1]: v for k, v in solver.items() if k.startswith(prefix + ".")})
    return out


def gen_sine_tensor(d: int, m: int) -> Ctd:
    """Samples of ``sin(z_1 + ... + z_d)`` on ``m`` points per direction in ``[0, 2 pi]``.

    Angle addition expands the sum into ``2**(d-1)`` separable terms.
    """
    if d < 2:
        raise ValueError("d must be >= 2")
    z = np.linspace(0.0, 2.0 * np.pi, m)
    sin, cos = np.sin(z), np.cos(z)
    # each list holds (sign, [vectors]) products for sin and cos of the partial sum
    s_terms = [(1.0, [sin])]
    c_terms = [(1.0, [cos])]
    for _ in range(1, d):
        s_terms, c_terms = (
            [(a, v + [cos]) for a, v in s_terms] + [(a, v + [sin]) for a, v in c_terms],
            [(a, v + [cos]) for a, v in c_terms] + [(-a, v + [sin]) for a, v in s_terms],
        )
    factors = [np.stack([v[k] for _, v in s_terms], axis=1) for k in range(d)]
    return Ctd(factors, [a for a, _ in s_terms])


def gen_manufactured_tensor(d: int, m: int, r: int, seed=None) -> Ctd:
    """Gaussian factors with unit columns and s-values ``exp(-l)``, ``l = 0..r-1``."""
    if r < 1:
        raise ValueError("r must be >= 1")
    rng = np.random.default_rng(seed)
    factors = [rng.standard_normal((m, r)) for _ in range(d)]
    factors = [f / np.linalg.norm(f, axis=0) for f in factors]
    return Ctd(factors, np.exp(-np.arange(r, dtype=float)), normalize=False)


@lru_cache(maxsize=4)
def _spde_problem(n, d, m, a0, sigma_a, l_c):
    mesh = build_mesh(n)
    return build_problem(mesh, kl_eigenpairs(mesh, l_c, d), m, a0, sigma_a)


def spde_problem(params: dict):
    return _spde_problem(
        params["n"], params["d"], params["m"], float(params["a0"]), float(params["sigma_a"]), float(params["l_c"])
    )


def _trace_rows(trial, reports, start):
    rows = []
    for i, rep in enumerate(reports):
        for k, cond in enumerate(rep.conds):
            rows.append(TraceRow(trial, start + i + 1, k, rep.residual, cond))
    return rows


@dataclass(frozen=True)
class _Task:
    cfg: ExperimentConfig
    label: str
    group: dict
    reducer: str
    trial: int
    timing: bool
    trace: bool
    damping: float | None = None


def _run_task(task: _Task):
    cfg, p = task.cfg, task.cfg.params
    seed = p["seed"] + task.trial
    trace = []
    t0 = time.perf_counter()
    scfg = solver_config(cfg, task.reducer, task.group, seed)
    if cfg.experiment in ("sine", "manufactured"):
        if cfg.experiment == "sine":
            g = gen_sine_tensor(p["d"], p["m"])
        else:
            g = gen_manufactured_tensor(p["d"], p["m"], p["r"], seed)
        run = reduce if task.reducer == "standard" else reduce_randomized
        out, reports = run(g, scfg)
        if task.trace:
            trace = _trace_rows(task.trial, reports, 0)
        residual, rank = relative_error(out, g), out.rank
        iterations, kappa, peak = len(reports), max_condition(reports), max((r.rank for r in reports), default=rank)
    else:
        problem = spde_problem(p)
        if task.damping is not None and scfg.c == "auto":
            scfg = replace(scfg, c=task.damping)
        hook = None
        if task.trace:
            done = [0]

            def hook(reports):
                trace.extend(_trace_rows(task.trial, reports, done[0]))
                done[0] += len(reports)
        result = fixed_point_solve(problem, scfg, trace=hook)
        residual, rank = result.final_residual, result.solution.rank
        iterations, kappa, peak = len(result.history) - 1, result.max_cond, result.peak_rank
    wall = (time.perf_counter() - t0) * 1e3 if task.timing else 0.0
    rec = ExperimentRecord(
        task.label, task.trial, seed, task.reducer, float(residual), int(rank), int(iterations), float(kappa),
        float(round(wall, 3)), int(peak),
    )
    return rec, trace


def _tasks(cfg: ExperimentConfig, timing: bool, trace: bool, damping):
    out = []
    for label, group in experiment_groups(cfg):
        for reducer in cfg.params["reducers"]:
            for trial in range(cfg.trials):
                out.append(_Task(cfg, label, group, reducer, trial, timing, trace, damping))
    return out


def run_experiment(cfg: ExperimentConfig, *, jobs: int | None = None, timing: bool = False, trace: bool = False):
    """Run every trial; returns ``(records, traces)`` in a fixed order.

    Rows are ordered by group, then reducer, then trial. ``traces`` maps
    ``(group label, reducer)`` to the per-sweep rows of all its trials.
    Trial ``i`` uses seed ``cfg.seed + i``. With ``timing`` off, ``wall_ms``
    is 0 so that reruns are byte-identical.
    """
    damping = None
    if cfg.experiment.startswith("spde") and _only(cfg.solver, FixedPointConfig, "fp").get("c", "auto") == "auto":
        # shared by all trials; each run still certifies the contraction
        pm_tol = _only(cfg.solver, FixedPointConfig, "fp").get("pm_tol", 1e-6)
        damping = choose_damping(spde_problem(cfg.params).operator, pm_tol, seed=cfg.seed).c
    tasks = _tasks(cfg, timing, trace, damping)
    if jobs == 1 or len(tasks) <= 1:
        results = [_run_task(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_task, tasks))
    records = [r for r, _ in results]
    traces: dict = {}
    for task, (_, rows) in zip(tasks, results):
        traces.setdefault((task.label, task.reducer), []).extend(rows)
    return records, traces


def write_csv(records, stream):
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(COLUMNS)
    for rec in records:
        w.writerow([repr(v) if isinstance(v, float) else v for v in rec.row()])


def write_trace(rows, stream):
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(TRACE_COLUMNS)
    for t in rows:
        w.writerow([t.trial, t.sweep, t.direction, repr(float(t.residual)), repr(float(t.cond))])


def records_to_csv(records) -> str:
    buf = io.StringIO()
    write_csv(records, buf)
    return buf.getvalue()
