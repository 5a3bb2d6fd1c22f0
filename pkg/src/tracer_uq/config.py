"""Experiment configuration: INI files with sections, typed keys and presets.

Resolution order is schema defaults, then the preset named by
``[run] preset``, then the file, then ``section.key=value`` overrides.
Unknown sections or keys are rejected with a message naming them.
"""

from __future__ import annotations

import configparser
import hashlib
import io
import json
import math
from dataclasses import dataclass, field

from .fields import FieldError, MaternParams
from .grids import BoxDomain, GridError, all_faces
from .problem import ModelSpec
from .rng import parse_seed
from .transport import TransportConfig


class ConfigError(ValueError):
    pass


def _floats(text):
    return tuple(float(t) for t in text.replace(" ", "").split(",") if t)


def _ints(text):
    return tuple(int(t) for t in text.replace(" ", "").split(",") if t)


def _box(text):
    return tuple(_floats(part) for part in text.split(";") if part.strip())


def _strs(text):
    return tuple(t.strip() for t in text.split(",") if t.strip())


def _bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_float(text):
    t = text.strip().lower()
    return None if t in ("", "none", "auto") else float(t)


def _opt_int(text):
    t = text.strip().lower()
    return None if t in ("", "none", "auto") else int(t)


def _cap(text):
    t = text.strip().lower()
    return math.inf if t in ("", "none", "inf") else float(t)


# section -> key -> (parser, default text)
SCHEMA = {
    "run": {
        "preset": (str, ""),
        "seed": (parse_seed, "20240601"),
        "parallelism": (int, "1"),
        "output": (str, "results"),
        "cache": (_bool, "true"),
    },
    "model": {
        "model": (int, "2"),
        "ordering": (str, "hierarchical"),
        "d_gad": (float, "1.2e-10"),
        "v_avg": (_opt_float, "auto"),
        "v_f": (_opt_float, "auto"),
        "radius": (_opt_float, "auto"),
        "dir_length_scale": (_opt_float, "auto"),
        "drainage": (float, "1e-5"),
    },
    "domain": {
        "extents": (_floats, "0.02, 0.02"),
        "padding": (float, "0.01"),
        "gray_thickness": (float, "0.0025"),
        "gray_roi": (_box, "0.0075, 0.0125; 0.0175, 0.02"),
        "white_roi": (_box, "0.0075, 0.0125; 0.0075, 0.0125"),
        "zero_flux_faces": (_strs, "-x"),
    },
    "hierarchy": {
        "base_cells": (int, "16"),
        "max_level": (int, "4"),
        "max_vertices": (int, "4000000"),
        "reference_level": (_opt_int, "auto"),
    },
    "diffusion": {
        "sigma": (float, "1.0"),
        "nu": (float, "3.0"),
        "lambda": (float, "0.01"),
    },
    "velocity": {
        "sigma": (float, "1.0"),
        "nu": (float, "3.0"),
        "lambda": (float, "0.005"),
    },
    "transport": {
        "scaling": (str, "desk"),
        "T": (float, "86400"),
        "dt1": (float, "1800"),
        "qoi_interval": (float, "1800"),
        "dt_reference": (float, "28.125"),
        "n0": (_opt_float, "auto"),
        "v_csf": (_opt_float, "auto"),
        "front_speed": (_opt_float, "auto"),
        "front_steepness": (_opt_float, "auto"),
        "front_offset": (_opt_float, "auto"),
        "front_origin": (_opt_float, "auto"),
        "solver": (str, "direct"),
    },
    "estimator": {
        "eps": (float, "0.01"),
        "eps_list": (_floats, "0.04, 0.02, 0.01, 0.005"),
        "theta": (float, "0.5"),
        "l_init": (int, "2"),
        "l_max": (int, "4"),
        "n_init": (int, "100"),
        "finest_cap": (_cap, "inf"),
        "alpha0": (float, "2.0"),
        "beta0": (float, "4.0"),
        "max_iterations": (int, "50"),
        "pilot": (_ints, "500, 500, 100"),
        "mc_samples": (int, "100"),
        "mc_level": (_opt_int, "auto"),
        "qmc_level": (_opt_int, "auto"),
        "qmc_randomizations": (int, "32"),
        "qmc_max_points": (int, "16384"),
        "qmc_points": (_opt_int, "auto"),
    },
    "sample_field": {
        "samples": (int, "2000"),
        "level": (_opt_int, "auto"),
        "field": (str, "diffusion"),
        "snapshots": (int, "2"),
        "batch": (int, "500"),
    },
}

PRESETS = {
    "desk-model2": """
[model]
model = 2
""",
    "desk-model1": """
[model]
model = 1
[estimator]
eps_list = 0.04, 0.02, 0.01
""",
    # unit-square Ĝ for the covariance study
    "matern-2d": """
[domain]
extents = 0.6, 0.6
padding = 0.2
gray_thickness = 0.05
gray_roi = 0.25, 0.35; 0.55, 0.6
white_roi = 0.25, 0.35; 0.25, 0.35
[hierarchy]
base_cells = 12
max_level = 4
reference_level = 1
[diffusion]
nu = 1
lambda = 0.2
[sample_field]
samples = 20000
level = 4
""",
    # small 3-D grids for the QMC dimensionality study
    "qmc3d-model2": """
[model]
model = 2
[domain]
extents = 0.02, 0.02, 0.02
padding = 0.01
gray_thickness = 0.005
gray_roi = 0.005, 0.015; 0.005, 0.015; 0.015, 0.02
white_roi = 0.005, 0.015; 0.005, 0.015; 0.005, 0.015
[hierarchy]
base_cells = 4
max_level = 1
[diffusion]
nu = 2.5
[velocity]
nu = 2.5
[transport]
dt1 = 1800
dt_reference = 1800
[estimator]
l_init = 1
l_max = 1
qmc_level = 1
qmc_points = 1024
""",
    "qmc3d-model1": """
[run]
preset = qmc3d-model2
[model]
model = 1
""",
    # full-size constants on a box; not runnable at desk scale (vertex cap)
    "fullsize-model2": """
[model]
model = 2
radius = 0.08
dir_length_scale = 1.0
[domain]
extents = 0.16, 0.16, 0.16
padding = 0.01
gray_thickness = 0.005
gray_roi = 0.06, 0.1; 0.06, 0.1; 0.155, 0.16
white_roi = 0.06, 0.1; 0.06, 0.1; 0.06, 0.1
zero_flux_faces = -z
[hierarchy]
base_cells = 32
max_level = 3
[diffusion]
nu = 2.5
lambda = 0.01
[velocity]
nu = 2.5
lambda = 0.00102
[transport]
scaling = full
[estimator]
eps = 2.5e-3
theta = 0.72
n_init = 100
l_max = 3
""",
    "fullsize-model1": """
[run]
preset = fullsize-model2
[model]
model = 1
[estimator]
eps = 3.3e-4
theta = 0.041
""",
}


@dataclass
class ExperimentConfig:
    values: dict
    spec: ModelSpec
    seed: int
    parallelism: int
    output: str
    cache: bool
    estimator: dict = field(default_factory=dict)
    sample_field: dict = field(default_factory=dict)

    @property
    def fingerprint(self) -> str:
        """Hash of every setting that changes sample values."""
        keep = {s: self.values[s] for s in ("model", "domain", "hierarchy", "diffusion", "velocity", "transport")}
        text = json.dumps(keep, sort_keys=True, default=repr)
        return hashlib.sha256(("tracer-uq-samples-v1" + text).encode()).hexdigest()

    def to_dict(self) -> dict:
        return json.loads(json.dumps(self.values, default=_json_default))


def _json_default(x):
    if isinstance(x, float) and math.isinf(x):
        return "inf"
    if isinstance(x, tuple):
        return list(x)
    return repr(x)


def _read_parser(text: str, source: str) -> configparser.ConfigParser:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";;"))
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    return cp


def _merge(raw: dict, cp: configparser.ConfigParser, source: str) -> None:
    for sec in cp.sections():
        if sec not in SCHEMA:
            raise ConfigError(f"{source}: unknown section [{sec}]")
        for key, val in cp.items(sec):
            if key not in SCHEMA[sec]:
                raise ConfigError(f"{source}: unknown key {sec}.{key}")
            raw[sec][key] = val


def _apply_preset(raw: dict, name: str, seen=()) -> None:
    if name not in PRESETS:
        raise ConfigError(f"run.preset: unknown preset {name!r}; choose from {sorted(PRESETS)}")
    if name in seen:
        raise ConfigError(f"run.preset: preset cycle through {name!r}")
    cp = _read_parser(PRESETS[name], f"preset {name}")
    parent = cp.get("run", "preset", fallback="")
    if parent:
        _apply_preset(raw, parent, seen + (name,))
    _merge(raw, cp, f"preset {name}")


def load_config(path=None, preset: str | None = None, overrides=()) -> ExperimentConfig:
    """Read, merge and validate a configuration."""
    raw = {sec: {k: d for k, (_, d) in keys.items()} for sec, keys in SCHEMA.items()}
    file_cp = None
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read configuration {path}: {exc}") from exc
        file_cp = _read_parser(text, str(path))
        _merge({s: {} for s in SCHEMA}, file_cp, str(path))  # key check before anything else
    ov = []
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        k, v = item.split("=", 1)
        sec, key = k.strip().split(".", 1)
        if sec not in SCHEMA or key not in SCHEMA[sec]:
            raise ConfigError(f"override: unknown key {sec}.{key}")
        ov.append((sec, key, v.strip()))
    name = preset
    if name is None and file_cp is not None:
        name = file_cp.get("run", "preset", fallback="") or None
    for sec, key, v in ov:
        if (sec, key) == ("run", "preset"):
            name = v or None
    if name:
        _apply_preset(raw, name)
        raw["run"]["preset"] = name
    if file_cp is not None:
        _merge(raw, file_cp, str(path))
    for sec, key, v in ov:
        raw[sec][key] = v
    if name:
        raw["run"]["preset"] = name
    values = {}
    for sec, keys in SCHEMA.items():
        values[sec] = {}
        for key, (parse, _) in keys.items():
            try:
                values[sec][key] = parse(raw[sec][key])
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"{sec}.{key}: cannot parse {raw[sec][key]!r} ({exc})") from exc
    return _build(values)


def _build(v: dict) -> ExperimentConfig:
    m, dom, hi, tr, est = v["model"], v["domain"], v["hierarchy"], v["transport"], v["estimator"]
    try:
        domain = BoxDomain(dom["extents"], dom["padding"], dom["gray_thickness"], dom["gray_roi"],
                           dom["white_roi"], dom["zero_flux_faces"])
    except (GridError, ValueError) as exc:
        raise ConfigError(f"domain: {exc}") from exc
    d = domain.dim
    faces = set(all_faces(d))
    for f in dom["zero_flux_faces"]:
        if f not in faces:
            raise ConfigError(f"domain.zero_flux_faces: unknown face {f!r}")
    s = domain.extents[-1] / 0.17
    if tr["scaling"] not in ("desk", "full"):
        raise ConfigError("transport.scaling must be desk or full")
    base = dict(T=tr["T"], dt1=tr["dt1"], qoi_interval=tr["qoi_interval"], dt_reference=tr["dt_reference"],
                solver=tr["solver"])
    for key in ("n0", "v_csf", "front_speed", "front_steepness", "front_offset", "front_origin"):
        if tr[key] is not None:
            base[key] = tr[key]
    reaction = m["drainage"] if m["model"] == 2 else 0.0
    try:
        if tr["scaling"] == "desk":
            transport = TransportConfig.desk(domain.extents, reaction, **base)
        else:
            transport = TransportConfig(reaction=reaction, **base)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"transport: {exc}") from exc
    scale = s if tr["scaling"] == "desk" else 1.0
    # desk scaling keeps v T / L: lengths and speeds shrink by the same factor
    v_avg = m["v_avg"] if m["v_avg"] is not None else 0.17e-6 * scale
    v_f = m["v_f"] if m["v_f"] is not None else 2e-6 * scale
    radius = m["radius"] if m["radius"] is not None else 0.08 * scale
    dls = m["dir_length_scale"] if m["dir_length_scale"] is not None else scale
    try:
        diff = MaternParams(v["diffusion"]["sigma"], v["diffusion"]["nu"], v["diffusion"]["lambda"], d)
        vel = None
        if m["model"] == 1:
            vel = MaternParams(v["velocity"]["sigma"], v["velocity"]["nu"], v["velocity"]["lambda"], d)
    except (FieldError, ValueError) as exc:
        raise ConfigError(f"matern: {exc}") from exc
    if hi["max_level"] < 1 or hi["base_cells"] < 1:
        raise ConfigError("hierarchy.max_level and hierarchy.base_cells must be positive")
    try:
        spec = ModelSpec(m["model"], domain, hi["base_cells"], hi["max_level"], transport, diff, vel,
                         d_gad=m["d_gad"], v_avg=v_avg, v_f=v_f, dir_length_scale=dls, R=radius,
                         drainage=m["drainage"], reference_level=hi["reference_level"],
                         ordering=m["ordering"], max_vertices=hi["max_vertices"])
    except ValueError as exc:
        raise ConfigError(f"model: {exc}") from exc
    if not 0 < est["theta"] < 1:
        raise ConfigError("estimator.theta must lie in (0, 1)")
    if est["eps"] <= 0 or any(e <= 0 for e in est["eps_list"]):
        raise ConfigError("estimator.eps and estimator.eps_list must be positive")
    if est["n_init"] < 2:
        raise ConfigError("estimator.n_init must be at least 2")
    if not 1 <= est["l_init"] <= est["l_max"] <= hi["max_level"]:
        raise ConfigError("need 1 <= estimator.l_init <= estimator.l_max <= hierarchy.max_level")
    if est["qmc_randomizations"] < 2:
        raise ConfigError("estimator.qmc_randomizations must be at least 2")
    if v["run"]["parallelism"] < 1:
        raise ConfigError("run.parallelism must be at least 1")
    if v["sample_field"]["field"] not in ("diffusion", "velocity"):
        raise ConfigError("sample_field.field must be diffusion or velocity")
    if v["sample_field"]["samples"] < 0:
        raise ConfigError("sample_field.samples must be non-negative")
    return ExperimentConfig(v, spec, v["run"]["seed"], v["run"]["parallelism"], v["run"]["output"],
                            v["run"]["cache"], est, v["sample_field"])


def render_config(cfg: ExperimentConfig) -> str:
    """Full INI text with every key resolved."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    for sec, keys in cfg.values.items():
        cp[sec] = {k: _fmt(val) for k, val in keys.items()}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def _fmt(x):
    if x is None:
        return "auto"
    if isinstance(x, bool):
        return "true" if x else "false"
    if isinstance(x, tuple):
        if x and isinstance(x[0], tuple):
            return "; ".join(", ".join(repr(t) for t in p) for p in x)
        return ", ".join(str(t) for t in x)
    return str(x)


def render_preset(name: str) -> str:
    return render_config(load_config(preset=name))
