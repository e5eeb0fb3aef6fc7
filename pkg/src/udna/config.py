"""JSON run configuration: schema, validation and object construction."""
from __future__ import annotations

import copy
import json
import math
import re
from dataclasses import dataclass, fields
from pathlib import Path

import jsonschema

from .directions import SchemeParams
from .engine import AlgoConfig, make_config, preset
from .network import MixingMatrix, PolySpec, build_graph, metropolis_weights, path_graph
from .problems import logistic_problem, parse_libsvm, synthetic_problem

__all__ = ["ConfigError", "RunConfig", "DEFAULTS", "load_config", "parse_config"]

_SCHEME_FIELDS = [f.name for f in fields(SchemeParams)]
_num = {"type": "number"}
_num_or_null = {"type": ["number", "null"]}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["problem", "network", "algorithm"],
    "properties": {
        "problem": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["synthetic-logistic", "synthetic-quadratic", "libsvm"]},
                "path": {"type": ["string", "null"]},
                "m": {"type": "integer"},
                "p": {"type": "integer"},
                "reg": _num,
                "feature_scale": _num_or_null,
                "partition": {"enum": ["contiguous", "strided"]},
                "seed": {"type": "integer"},
            },
        },
        "network": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n": {"type": "integer"},
                "density": _num,
                "topology": {"enum": ["random", "path"]},
                "seed": {"type": "integer"},
            },
        },
        "algorithm": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "preset": {"type": ["string", "null"]},
                "polys": {
                    "type": ["object", "null"],
                    "additionalProperties": False,
                    "properties": {k: {"type": "array", "items": _num} for k in "ABCD"},
                },
                "scheme": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {k: {} for k in _SCHEME_FIELDS},
                },
                "alpha": {"anyOf": [_num, {"const": "auto"}]},
                "max_iters": {"type": "integer"},
                "stop_tol": _num,
                "psi": _num_or_null,
                "Psi": _num_or_null,
                "lipschitz": _num_or_null,
            },
        },
        "output": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "trace": {"type": "string"},
                "summary": {"type": "string"},
                "record_every": {"type": "integer"},
            },
        },
    },
}

DEFAULTS = {
    "problem": {
        "kind": "synthetic-logistic",
        "path": None,
        "m": 200,
        "p": 10,
        "reg": 1.0,
        "feature_scale": None,
        "partition": "contiguous",
        "seed": 0,
    },
    "network": {"n": 5, "density": 0.8, "topology": "random", "seed": 0},
    "algorithm": {
        "preset": "udna2",
        "polys": None,
        "scheme": {},
        "alpha": "auto",
        "max_iters": 1000,
        "stop_tol": 0.0,
        "psi": None,
        "Psi": None,
        "lipschitz": None,
    },
    "output": {"trace": "trace.csv", "summary": "summary.json", "record_every": 1},
}


class ConfigError(ValueError):
    """Invalid configuration; ``field`` is the dotted path of the culprit."""

    def __init__(self, field: str, msg: str, line: int | None = None):
        self.field = field
        self.line = line
        where = f" (line {line})" if line else ""
        super().__init__(f"{field}{where}: {msg}")


def _line_of(text: str | None, field: str) -> int | None:
    if not text:
        return None
    key = field.split(".")[-1]
    for i, line in enumerate(text.splitlines(), 1):
        if re.search(rf'"{re.escape(key)}"\s*:', line):
            return i
    return None


@dataclass
class RunConfig:
    """A validated configuration with all defaults filled in."""

    data: dict
    base_dir: Path

    def canonical(self) -> dict:
        return copy.deepcopy(self.data)

    def section(self, name: str) -> dict:
        return self.data[name]

    def build_mixing(self) -> MixingMatrix:
        net = self.data["network"]
        if net["topology"] == "path":
            g = path_graph(net["n"])
        else:
            g = build_graph(net["n"], net["density"], net["seed"])
        return metropolis_weights(g)

    def build_problem(self):
        pr, n = self.data["problem"], self.data["network"]["n"]
        if pr["kind"] == "libsvm":
            path = Path(pr["path"])
            if not path.is_absolute():
                path = self.base_dir / path
            with open(path) as fh:
                d = parse_libsvm(fh)
            return logistic_problem(d, n, pr["reg"], pr["partition"], pr["seed"])
        kind = "logistic" if pr["kind"] == "synthetic-logistic" else "quadratic"
        return synthetic_problem(
            pr["seed"], n, pr["p"], pr["m"], kind, reg=pr["reg"], feature_scale=pr["feature_scale"]
        )

    def build_algo(self, preset_name: str | None = None) -> AlgoConfig:
        al = self.data["algorithm"]
        params = dict(al["scheme"])
        kw = {
            "alpha": al["alpha"],
            "max_iters": al["max_iters"],
            "stop_tol": al["stop_tol"],
            "psi": al["psi"],
            "Psi": al["Psi"],
            "lipschitz": al["lipschitz"],
            "record_every": self.data["output"]["record_every"],
        }
        name = preset_name or al["preset"]
        if name is not None:
            params.pop("scheme", None)
            return make_config(name, SchemeParams(**params), **kw)
        polys = al["polys"]
        specs = [PolySpec(tuple(polys[k]), k) for k in "ABCD"]
        return AlgoConfig(*specs, SchemeParams(**params), name="custom", **kw)


def _merge_defaults(doc: dict) -> dict:
    out = copy.deepcopy(DEFAULTS)
    for sec, vals in doc.items():
        out[sec].update(vals)
    if doc["algorithm"].get("polys") is not None and "preset" not in doc["algorithm"]:
        out["algorithm"]["preset"] = None
    return out


def parse_config(doc: dict, text: str | None = None, base_dir: Path | str = ".") -> RunConfig:
    try:
        jsonschema.validate(doc, SCHEMA)
    except jsonschema.ValidationError as e:
        path = ".".join(str(p) for p in e.absolute_path)
        if e.validator == "additionalProperties":
            extra = sorted(set(e.instance) - set(e.schema.get("properties", {})))
            path = ".".join(filter(None, [path, extra[0] if extra else ""]))
            raise ConfigError(path, "unknown key", _line_of(text, path)) from None
        if e.validator == "required":
            missing = [k for k in e.validator_value if k not in e.instance][0]
            raise ConfigError(missing, "missing section", None) from None
        raise ConfigError(path or "<root>", e.message, _line_of(text, path)) from None
    data = _merge_defaults(doc)
    _check_semantics(data, text)
    return RunConfig(data, Path(base_dir))


def _fail(field, msg, text):
    raise ConfigError(field, msg, _line_of(text, field))


def _check_semantics(data: dict, text: str | None) -> None:
    pr, net, al, out = data["problem"], data["network"], data["algorithm"], data["output"]
    n = net["n"]
    if n < 1:
        _fail("network.n", "must be >= 1", text)
    if not (0 < net["density"] <= 1):
        _fail("network.density", f"must lie in (0, 1], got {net['density']}", text)
    if net["topology"] == "random" and n > 1 and net["density"] * n < 2:
        _fail("network.density", "density * n must be >= 2 for a connected graph", text)
    if pr["kind"] == "libsvm" and not pr["path"]:
        _fail("problem.path", "required for kind 'libsvm'", text)
    if pr["p"] < 1:
        _fail("problem.p", "must be >= 1", text)
    if pr["kind"] == "synthetic-logistic" and pr["m"] < n:
        _fail("problem.m", "need at least one sample per node", text)
    if pr["reg"] < 0:
        _fail("problem.reg", "must be nonnegative", text)
    if pr["feature_scale"] is not None and not pr["feature_scale"] > 0:
        _fail("problem.feature_scale", "must be positive", text)
    if (al["preset"] is None) == (al["polys"] is None):
        _fail("algorithm.preset", "give exactly one of 'preset' and 'polys'", text)
    if al["preset"] is not None:
        try:
            preset(al["preset"])
        except ValueError as e:
            _fail("algorithm.preset", str(e), text)
    if al["polys"] is not None:
        missing = [k for k in "ABCD" if k not in al["polys"]]
        if missing:
            _fail("algorithm.polys", f"missing polynomial(s) {missing}", text)
        for k in "ABCD":
            try:
                PolySpec(tuple(al["polys"][k]), k)
            except ValueError as e:
                _fail(f"algorithm.polys.{k}", str(e), text)
    sch = dict(al["scheme"])
    if al["preset"] is not None:
        sch["scheme"] = preset(al["preset"])[4]
        sch["experimental"] = sch.get("experimental", False) or sch["scheme"] == "dqn"
    try:
        SchemeParams(**sch)
    except (TypeError, ValueError) as e:
        _fail("algorithm.scheme", str(e), text)
    if al["alpha"] != "auto" and not (al["alpha"] > 0 and math.isfinite(al["alpha"])):
        _fail("algorithm.alpha", "must be positive or 'auto'", text)
    if al["alpha"] == "auto" and sch.get("scheme") == "dqn":
        _fail("algorithm.alpha", "the dqn scheme needs an explicit alpha", text)
    if al["max_iters"] < 0:
        _fail("algorithm.max_iters", "must be >= 0", text)
    if al["stop_tol"] < 0:
        _fail("algorithm.stop_tol", "must be >= 0", text)
    if (al["psi"] is None) != (al["Psi"] is None):
        _fail("algorithm.psi", "psi and Psi must be given together", text)
    if al["psi"] is not None and not 0 < al["psi"] <= al["Psi"]:
        _fail("algorithm.psi", "need 0 < psi <= Psi", text)
    if al["lipschitz"] is not None and not al["lipschitz"] > 0:
        _fail("algorithm.lipschitz", "must be positive", text)
    if out["record_every"] < 1:
        _fail("output.record_every", "must be >= 1", text)


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError("<file>", f"cannot read {path}: {e.strerror}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError("<json>", e.msg, e.lineno) from None
    if not isinstance(doc, dict):
        raise ConfigError("<root>", "config must be a JSON object", 1)
    return parse_config(doc, text, path.parent)

