"""JSON run configuration: schema, validation and object construction.

A configuration mirrors :class:`~sbmhe.sim.Scenario` plus output options.
Unknown keys anywhere in the document are rejected.  Relative file paths
inside a configuration are resolved against the configuration's directory.
"""
from __future__ import annotations

import importlib
import json
import re
import sys as _sys
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import jsonschema
import numpy as np

from .lm import LMSettings
from .mhe import EstimatorConfig
from .model import GapSequence, LinearSystem, NonlinearSystem, SamplingSchedule, linear_as_nonlinear
from .sim import Scenario, ScheduleSpec
from .thyroid import ThyroidParams, build_thyroid, load_thyroid_params, medication_inputs, params_from_dict

__all__ = ["ConfigError", "RunConfig", "SCHEMA", "load_config", "parse_config"]


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key."""


_NUM = {"type": "number"}
_VEC = {"type": "array", "items": _NUM, "minItems": 1}
_MAT = {"type": "array", "items": _VEC, "minItems": 1}
_MAT_OR_SCALAR = {"oneOf": [_MAT, _NUM]}
_POSINT = {"type": "integer", "minimum": 1}


def _obj(properties, required=()):
    return {"type": "object", "properties": properties, "required": list(required), "additionalProperties": False}


_SCHEDULE = {
    "oneOf": [
        _obj({"pattern": {"type": "array", "items": _POSINT, "minItems": 1}, "offset": _POSINT,
              "label": {"type": "string"}}, ["pattern"]),
        _obj({"times": {"type": "array", "items": {"type": "integer", "minimum": 0}},
              "label": {"type": "string"}}, ["times"]),
        _obj({"csv": {"type": "string"}, "label": {"type": "string"}}, ["csv"]),
    ]
}

_THYROID_PARAMS = _obj({k: _NUM for k in ("p1", "p2", "s1", "s2", "d1", "d2", "U", "tau")},
                       ["p1", "p2", "s1", "s2", "d1", "d2", "U", "tau"])

SCHEMA = _obj(
    {
        "system": {
            "oneOf": [
                _obj({"kind": {"const": "linear"}, "A": _MAT, "C": _MAT, "B": _MAT, "D": _MAT}, ["kind", "A", "C"]),
                _obj({"kind": {"const": "thyroid"}, "params": _THYROID_PARAMS}, ["kind", "params"]),
                _obj({"kind": {"const": "thyroid"}, "params_file": {"type": "string"}}, ["kind", "params_file"]),
                _obj({"kind": {"const": "plugin"}, "factory": {"type": "string", "pattern": r"^[\w.]+:\w+$"},
                      "args": {"type": "object"}}, ["kind", "factory"]),
            ]
        },
        "schedule": _SCHEDULE,
        "inputs": {
            "oneOf": [
                _obj({"kind": {"const": "zero"}}, ["kind"]),
                _obj({"kind": {"const": "table"},
                      "steps": {"type": "array", "minItems": 1,
                                "items": _obj({"from": {"type": "integer", "minimum": 0}, "value": _VEC},
                                              ["from", "value"])}},
                     ["kind", "steps"]),
                _obj({"kind": {"const": "medication"}, "start_day": {"type": "number", "minimum": 0},
                      "dose": _NUM, "skipped_days": {"type": "array", "items": {"type": "integer"}}}, ["kind"]),
            ]
        },
        "x0": _VEC,
        "x_hat0": _VEC,
        "disturbance_bounds": {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 1},
        "T_sim": _POSINT,
        "seed": {"type": "integer", "minimum": 0},
        "estimator": _obj(
            {
                "M": _POSINT,
                "eta": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "P2": _MAT_OR_SCALAR,
                "Q": _MAT_OR_SCALAR,
                "R": _MAT_OR_SCALAR,
                "constraints": {"enum": ["unconstrained", "projected"]},
                "solver": _obj({
                    "max_iter": _POSINT,
                    "gtol": {"type": "number", "minimum": 0},
                    "xtol": {"type": "number", "minimum": 0},
                    "step_tol": {"type": "number", "minimum": 0},
                    "damping_init": {"type": "number", "exclusiveMinimum": 0},
                    "damping_scale": {"type": "number", "exclusiveMinimum": 1},
                }),
            },
            ["M", "eta"],
        ),
        "output_dir": {"type": "string"},
        "plot": {"type": "boolean"},
        "sweep": _obj(
            {
                "schedules": {"type": "array", "items": _SCHEDULE},
                "seeds": {"oneOf": [
                    {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 1},
                    _obj({"count": _POSINT, "start": {"type": "integer", "minimum": 0}}, ["count"]),
                ]},
            },
            ["schedules", "seeds"],
        ),
    },
    ["system", "x0", "x_hat0", "disturbance_bounds", "T_sim", "estimator"],
)


def _key_path(err: jsonschema.ValidationError) -> str:
    return "/".join(str(p) for p in err.absolute_path) or "<root>"


def _describe(err: jsonschema.ValidationError) -> str:
    # oneOf failures: ignore branches whose "kind" does not match, then report the
    # branch error that got furthest into the document
    if err.context:
        branches: dict = {}
        for sub in err.context:
            branches.setdefault(sub.relative_schema_path[0], []).append(sub)
        live = [e for errs in branches.values() if not any(x.validator == "const" for x in errs) for e in errs]
        candidates = live or list(err.context)
        deepest = max(candidates, key=lambda e: (len(e.absolute_path), e.validator == "additionalProperties"))
        if live or len(deepest.absolute_path) > len(err.absolute_path):
            return _describe(deepest)
    if err.validator == "additionalProperties":
        extra = sorted(set(err.instance) - set(err.schema.get("properties", {})))
        path = _key_path(err)
        keys = ", ".join(extra)
        return f"unknown key(s) {keys}" + ("" if path == "<root>" else f" in {path}")
    return f"{_key_path(err)}: {err.message}"


@dataclass(frozen=True)
class RunConfig:
    """A validated configuration document."""

    raw: dict
    base_dir: Path

    @property
    def seed(self) -> int:
        return int(self.raw.get("seed", 0))

    @property
    def plot(self) -> bool:
        return bool(self.raw.get("plot", True))

    @property
    def output_dir(self) -> Optional[Path]:
        out = self.raw.get("output_dir")
        return None if out is None else self._path(out)

    def _path(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    def system(self) -> NonlinearSystem:
        spec = self.raw["system"]
        kind = spec["kind"]
        try:
            if kind == "linear":
                lin = LinearSystem.from_matrices(spec["A"], spec["C"], spec.get("B"), spec.get("D"))
                return linear_as_nonlinear(lin)
            if kind == "thyroid":
                return build_thyroid(self.thyroid_params())
            return self._plugin(spec)
        except ConfigError:
            raise
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"system: {exc}") from None

    def thyroid_params(self) -> ThyroidParams:
        spec = self.raw["system"]
        if "params" in spec:
            return params_from_dict(spec["params"])
        if spec["params_file"] == "bundled":
            return load_thyroid_params()
        return load_thyroid_params(self._path(spec["params_file"]))

    def _plugin(self, spec) -> NonlinearSystem:
        module, func = spec["factory"].split(":")
        added = str(self.base_dir) not in _sys.path
        if added:
            _sys.path.insert(0, str(self.base_dir))
        try:
            factory = getattr(importlib.import_module(module), func)
        except (ImportError, AttributeError) as exc:
            raise ConfigError(f"system/factory: cannot load {spec['factory']}: {exc}") from None
        finally:
            if added:
                _sys.path.remove(str(self.base_dir))
        obj = factory(**spec.get("args", {}))
        if isinstance(obj, LinearSystem):
            obj = linear_as_nonlinear(obj)
        if not isinstance(obj, NonlinearSystem):
            raise ConfigError("system/factory: factory must return a NonlinearSystem or LinearSystem")
        return obj

    def estimator(self, system: NonlinearSystem) -> EstimatorConfig:
        est = self.raw["estimator"]

        def weight(name, dim):
            val = est.get(name, 1.0)
            return np.eye(dim) * val if np.isscalar(val) else np.asarray(val, float)

        try:
            cfg = EstimatorConfig(
                M=est["M"], eta=est["eta"],
                P2=weight("P2", system.n), Q=weight("Q", system.q), R=weight("R", system.p),
                solver=LMSettings(**est.get("solver", {})),
                constraints=est.get("constraints", "unconstrained"),
            )
            cfg.check_dims(system)
        except ValueError as exc:
            raise ConfigError(f"estimator: {exc}") from None
        return cfg

    def schedule_spec(self, spec: Optional[dict] = None) -> ScheduleSpec:
        spec = self.raw.get("schedule") if spec is None else spec
        if spec is None:
            return ScheduleSpec(times=(), label="none")
        label = spec.get("label", "")
        if "pattern" in spec:
            gaps = GapSequence(tuple(spec["pattern"]))
            return ScheduleSpec(gaps=gaps, offset=spec.get("offset", 1),
                                label=label or "pattern " + "-".join(map(str, gaps.pattern)))
        if "csv" in spec:
            try:
                times = SamplingSchedule.from_csv(self._path(spec["csv"])).times
            except ValueError as exc:
                raise ConfigError(f"schedule/csv: {exc}") from None
            return ScheduleSpec(times=tuple(times), label=label or Path(spec["csv"]).stem)
        times = spec["times"]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ConfigError("schedule/times: must be strictly increasing")
        return ScheduleSpec(times=tuple(times), label=label or "times")

    def inputs(self, system: NonlinearSystem, T: Optional[int] = None) -> np.ndarray:
        """Input rows for ``t = 0 .. T`` (default ``T_sim``)."""
        T = int(self.raw["T_sim"]) if T is None else int(T)
        spec = self.raw.get("inputs", {"kind": "zero"})
        if spec["kind"] == "zero":
            return np.zeros((T + 1, system.m))
        if spec["kind"] == "medication":
            if self.raw["system"]["kind"] != "thyroid" or system.m != 1:
                raise ConfigError("inputs/kind: medication inputs need the thyroid system")
            return medication_inputs(
                T, self.thyroid_params().steps_per_day, spec.get("start_day", 83),
                spec.get("dose", 0.75), tuple(spec.get("skipped_days", (130,))),
            )
        U = np.zeros((T + 1, system.m))
        steps = sorted(spec["steps"], key=lambda s: s["from"])
        for i, s in enumerate(steps):
            if len(s["value"]) != system.m:
                raise ConfigError(f"inputs/steps/{i}/value: expected {system.m} entries")
            U[s["from"]:] = s["value"]
        return U

    def scenario(self, seed: Optional[int] = None) -> Scenario:
        system = self.system()
        cfg = self.estimator(system)
        raw = self.raw
        try:
            return Scenario(
                system=system, schedule=self.schedule_spec(),
                x0=_vector(raw, "x0", system.n), x_hat0=_vector(raw, "x_hat0", system.n),
                T_sim=int(raw["T_sim"]), config=cfg,
                disturbance_bounds=_vector(raw, "disturbance_bounds", system.q),
                seed=self.seed if seed is None else int(seed), inputs=self.inputs(system),
            )
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def sweep_schedules(self) -> list:
        sw = self.raw.get("sweep")
        if sw is None:
            raise ConfigError("sweep: missing")
        if not sw["schedules"]:
            raise ConfigError("sweep/schedules: at least one schedule is required")
        return [self.schedule_spec(s) for s in sw["schedules"]]

    def sweep_seeds(self, base: Optional[int] = None) -> list:
        seeds = self.raw["sweep"]["seeds"]
        if isinstance(seeds, list):
            return [int(s) for s in seeds]
        start = seeds.get("start", self.seed) if base is None else base
        return list(range(start, start + seeds["count"]))


def _vector(raw, key, dim):
    v = np.asarray(raw[key], float)
    if v.shape != (dim,):
        raise ConfigError(f"{key}: expected {dim} entries, got {v.size}")
    return v


def parse_config(doc: dict, base_dir=".") -> RunConfig:
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: (list(map(str, e.absolute_path)), e.message))
    if errors:
        raise ConfigError(_describe(errors[0]))
    return RunConfig(doc, Path(base_dir))


def load_config(path) -> RunConfig:
    """Read and validate a configuration file.

    Raises :class:`ConfigError` for malformed JSON or schema violations and
    ``OSError`` when the file cannot be read.
    """
    path = Path(path)
    text = path.read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        keys = re.findall(r'"([^"\\]*)"\s*:', text[:exc.pos])
        near = f" (after key '{keys[-1]}')" if keys else ""
        raise ConfigError(f"malformed JSON at line {exc.lineno}, column {exc.colno}{near}: {exc.msg}") from None
    return parse_config(doc, path.parent)
