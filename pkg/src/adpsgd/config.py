"""Typed INI run configuration.

A config file has up to five sections, each holding flat ``key = value``
pairs.  Every key has a type and a default; unknown sections or keys are
rejected.  :func:`write_resolved` writes the config back with every default
filled in, so an output directory carries everything needed to reproduce it.

Sections and keys::

    [run]        experiment, seed, tol
    [engine]     strategy, L, M, epochs, base_lr, peak_lr, warmup_epochs,
                 anneal_factor, anneal_start_epoch, tau_max, generic_mixing
    [objectives] kind, D, condition_number, noise_sigma, data_seed, N,
                 heldout_fraction, D_in, H, classes, separation, init_scale
    [chronos]    compute_time, pair_comm_time, allreduce_time, sync_overhead,
                 multipliers, straggler_id, factors, iterations_per_learner,
                 strategies, coupled
    [mixing]     learners, k_max, trials
"""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field
from pathlib import Path

from . import engine
from .chronos import ClusterProfile
from .errors import ConfigError

EXPERIMENTS = ("analyze-mixing", "train", "stragglers", "verify")


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _ints(s: str) -> tuple:
    return tuple(int(x) for x in s.split(",") if x.strip())


def _floats(s: str) -> tuple:
    return tuple(float(x) for x in s.split(",") if x.strip())


def _strs(s: str) -> tuple:
    return tuple(x.strip() for x in s.split(",") if x.strip())


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ",".join(_fmt(x) for x in v)
    return str(v)


# section -> key -> (parser, default)
SCHEMA = {
    "run": {
        "experiment": (str, "train"),
        "seed": (int, 0),
        "tol": (float, 1e-3),
    },
    "engine": {
        "strategy": (str, engine.SDPSGD),
        "L": (int, 8),
        "M": (int, 8),
        "epochs": (int, 10),
        "base_lr": (float, 0.05),
        "peak_lr": (float, 0.05),
        "warmup_epochs": (int, 0),
        "anneal_factor": (float, 1.0 / math.sqrt(2.0)),
        "anneal_start_epoch": (int, 10**9),
        "tau_max": (int, 0),
        "generic_mixing": (str, "fixed"),
    },
    "objectives": {
        "kind": (str, "quadratic"),
        "D": (int, 10),
        "condition_number": (float, 10.0),
        "noise_sigma": (float, 0.1),
        "data_seed": (int, 0),
        "N": (int, 4096),
        "heldout_fraction": (float, 0.1),
        "D_in": (int, 10),
        "H": (int, 16),
        "classes": (int, 3),
        "separation": (float, 4.0),
        "init_scale": (float, 0.5),
    },
    "chronos": {
        "compute_time": (float, 1.0),
        "pair_comm_time": (float, 0.1),
        "allreduce_time": (float, 0.1),
        "sync_overhead": (float, 0.0),
        "multipliers": (_floats, ()),
        "straggler_id": (int, 0),
        "factors": (_floats, (1.0, 5.0, 10.0, 100.0)),
        "iterations_per_learner": (int, 20),
        "strategies": (_strs, (engine.SDPSGD, engine.FM, engine.RM, engine.D1D)),
        "coupled": (_bool, False),
    },
    "mixing": {
        "learners": (_ints, (16, 32, 64)),
        "k_max": (int, 60),
        "trials": (int, 100),
    },
}


@dataclass
class RunConfig:
    values: dict = field(default_factory=lambda: {s: {k: d for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()})

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    @property
    def experiment(self) -> str:
        return self.values["run"]["experiment"]

    @property
    def seed(self) -> int:
        return self.values["run"]["seed"]

    def set(self, section: str, key: str, value) -> None:
        if section not in SCHEMA or key not in SCHEMA[section]:
            raise ConfigError(f"unknown config key [{section}] {key}")
        self.values[section][key] = value

    def schedule(self) -> engine.LrSchedule:
        e = self.values["engine"]
        return engine.LrSchedule(
            e["base_lr"], e["peak_lr"], e["warmup_epochs"], e["anneal_factor"], e["anneal_start_epoch"]
        )

    def strategy_config(self, strategy: str | None = None) -> engine.StrategyConfig:
        e = self.values["engine"]
        return engine.StrategyConfig(
            strategy or e["strategy"],
            e["L"],
            e["M"],
            e["epochs"],
            self.schedule(),
            seed=self.seed,
            tau_max=e["tau_max"],
            generic_mixing=e["generic_mixing"],
        )

    def objective_spec(self) -> dict:
        return dict(self.values["objectives"])

    def cluster_profile(self) -> ClusterProfile:
        c = self.values["chronos"]
        return ClusterProfile(
            self.values["engine"]["L"],
            c["compute_time"],
            c["pair_comm_time"],
            c["allreduce_time"],
            c["sync_overhead"],
            c["multipliers"],
        )

    def validate(self) -> None:
        """Check cross-field constraints before anything runs."""
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"experiment must be one of {EXPERIMENTS}, got {self.experiment!r}")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        e = self.values["engine"]
        if min(e["base_lr"], e["peak_lr"]) <= 0 or not 0 < e["anneal_factor"] <= 1:
            raise ConfigError("learning rates must be positive and anneal_factor in (0, 1]")
        if e["warmup_epochs"] < 0 or e["anneal_start_epoch"] < 0:
            raise ConfigError("warmup_epochs and anneal_start_epoch must be non-negative")
        if e["generic_mixing"] not in ("fixed", "random", "uniform"):
            raise ConfigError(f"generic_mixing must be fixed, random or uniform, got {e['generic_mixing']!r}")
        self.strategy_config()
        o = self.values["objectives"]
        if o["kind"] not in ("quadratic", "logistic", "mlp"):
            raise ConfigError(f"objective kind must be quadratic, logistic or mlp, got {o['kind']!r}")
        if not 0 < o["heldout_fraction"] < 1:
            raise ConfigError("heldout_fraction must lie in (0, 1)")
        if self.experiment == "stragglers":
            c = self.values["chronos"]
            self.cluster_profile()
            if not 0 <= c["straggler_id"] < e["L"]:
                raise ConfigError(f"straggler_id must lie in 0..{e['L'] - 1}")
            if not c["factors"] or min(c["factors"]) < 1:
                raise ConfigError("factors must be a non-empty list of values >= 1")
            if c["iterations_per_learner"] < 1:
                raise ConfigError("iterations_per_learner must be >= 1")
            for s in c["strategies"]:
                if s not in (engine.SDPSGD, engine.FM, engine.RM, engine.D1D):
                    raise ConfigError(f"no timing model for strategy {s!r}")
        m = self.values["mixing"]
        if m["k_max"] < 0 or m["trials"] < 1:
            raise ConfigError("need k_max >= 0 and trials >= 1")
        if any(L < 3 for L in m["learners"]):
            raise ConfigError("mixing analysis needs every L >= 3")


def parse_text(text: str, source: str = "<config>") -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, default_section="__none__")
    cp.optionxform = str  # keys are case-sensitive (L, M, D)
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    cfg = RunConfig()
    for section in cp.sections():
        if section not in SCHEMA:
            raise ConfigError(f"{source}: unknown section [{section}]")
        for key, raw in cp.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"{source}: unknown key {key!r} in [{section}]")
            parser = SCHEMA[section][key][0]
            try:
                cfg.values[section][key] = parser(raw)
            except ValueError as exc:
                raise ConfigError(f"{source}: bad value for [{section}] {key}: {raw!r}") from exc
    return cfg


def load(path) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc}") from exc
    return parse_text(text, str(p))


def dumps(cfg: RunConfig) -> str:
    lines = []
    for section, keys in SCHEMA.items():
        lines.append(f"[{section}]")
        lines.extend(f"{k} = {_fmt(cfg.values[section][k])}" for k in keys)
        lines.append("")
    return "\n".join(lines)


def write_resolved(cfg: RunConfig, out_dir) -> Path:
    path = Path(out_dir) / "config.ini"
    path.write_text(dumps(cfg), encoding="utf-8")
    return path
