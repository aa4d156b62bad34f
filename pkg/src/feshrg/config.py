"""Run configuration: JSON schema, strict validation, object builders.

The config file is JSON with the nested sections model / grid / rg /
oracle / output plus a top-level seed.  Validation is strict: unknown
keys, wrong types and violated cross-field invariants all raise
ConfigError naming the offending dotted field, which the CLI turns into
the usage exit code.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import fock, kernels, model, rg
from .errors import ConfigError

__all__ = ["RunConfig", "load_config", "parse_config"]

_COMPLEX = object()     # sentinel: {re, im} sub-object

# section -> key -> (type or _COMPLEX, default); None default means required
_SCHEMA = {
    "model": {
        "mode": (str, "matrix"),
        "d": (int, 2),
        "n_grid": (int, 320),
        "box": (float, 40.0),
        "gap": (float, 1.0),
        "dipole_strength": (float, 0.2),
        "dipole_diag": (float, 0.0),
        "g": (_COMPLEX, 0.0),
        "theta": (_COMPLEX, 0.0),
        "alpha": (_COMPLEX, 0.0),
        "kappa": (dict, None),
        "beta": (float, 1.0),
    },
    "kappa": {                 # nested under model.kappa
        "type": (str, "exponential"),
        "scale": (float, 1.0),
        "amp": (float, 0.1),
    },
    "grid": {
        "J": (int, 6),
        "rho_grid": (float, 0.25),
        "k_max": (float, 1.0),
        "n_r": (int, 33),
        "angular_mode": (str, "radial"),
        "n_dirs": (int, 6),
    },
    "rg": {
        "rho": (float, 0.25),
        "xi": (float, 0.25),
        "eps0": (float, 1.0 / 32.0),
        "L_max": (int, 4),
        "M_max": (int, 2),
        "tol_e": (float, 1e-9),
        "max_iters": (int, 40),
        "min_iters": (int, 0),
        "n_z": (int, 8),
        "r_z": (float, 0.4),
    },
    "oracle": {
        "n_max": (int, 2),
        "enabled": (bool, True),
    },
    "output": {
        "dir": (str, "out"),
        "formats": (list, ["json", "csv"]),
    },
}


def _coerce(path, spec, value):
    typ, _ = spec
    if typ is _COMPLEX:
        if isinstance(value, (int, float)):
            return complex(value)
        if isinstance(value, dict):
            extra = set(value) - {"re", "im"}
            if extra:
                raise ConfigError(
                    f"{path}: unknown key {sorted(extra)[0]!r} "
                    "(expected re/im)")
            try:
                return complex(float(value.get("re", 0.0)),
                               float(value.get("im", 0.0)))
            except (TypeError, ValueError):
                raise ConfigError(f"{path}: re/im must be numbers")
        raise ConfigError(f"{path}: expected a number or {{re, im}} object")
    if typ is float and isinstance(value, int) \
            and not isinstance(value, bool):
        return float(value)
    if typ is int and isinstance(value, bool):
        raise ConfigError(f"{path}: expected an integer, got a boolean")
    if not isinstance(value, typ):
        raise ConfigError(
            f"{path}: expected {typ.__name__}, got {type(value).__name__}")
    return value


def _validate_section(name, schema, data):
    if not isinstance(data, dict):
        raise ConfigError(f"{name}: expected an object")
    out = {}
    for key in data:
        if key not in schema:
            raise ConfigError(f"unknown config field {name}.{key}")
    for key, spec in schema.items():
        path = f"{name}.{key}"
        if key in data:
            out[key] = _coerce(path, spec, data[key])
        else:
            out[key] = spec[1]
    return out


@dataclass
class RunConfig:
    """Validated run configuration plus builders for the pipeline objects."""

    model: dict
    grid: dict
    rg: dict
    oracle: dict
    output: dict
    seed: int = 0
    raw: dict = field(default_factory=dict, repr=False)

    def atom(self):
        m = self.model
        if m["mode"] == "matrix":
            a = model.matrix_atom(m["d"], gap=m["gap"],
                                  dipole_strength=m["dipole_strength"],
                                  dipole_diag=m["dipole_diag"])
        else:
            a = model.hydrogen_atom(n_grid=m["n_grid"], box=m["box"])
        return model.normalize_gap(a)

    def coupling(self):
        m = self.model
        k = m["kappa"]
        return model.CouplingSpec(
            g=m["g"], theta=m["theta"], alpha=m["alpha"],
            kappa=k["type"], kappa_scale=k["scale"], kappa_amp=k["amp"],
            beta=m["beta"])

    def mode_grid(self):
        g = self.grid
        return fock.build_grid(g["J"], g["rho_grid"], g["k_max"],
                               g["angular_mode"], g["n_dirs"])

    def r_grid(self):
        return kernels.make_r_grid(self.grid["n_r"])

    def rg_config(self):
        r = self.rg
        return rg.RGConfig(rho=r["rho"], xi=r["xi"], eps0=r["eps0"],
                           L_max=r["L_max"], M_feed=r["M_max"],
                           tol_e=r["tol_e"], max_iters=r["max_iters"],
                           min_iters=r["min_iters"])

    def with_coupling_value(self, param, value):
        """Copy of the normalized raw config with one coupling replaced."""
        raw = json.loads(json.dumps(self.raw))
        raw.setdefault("model", {})[param] = {"re": value.real,
                                              "im": value.imag}
        return parse_config(raw)


def parse_config(data) -> RunConfig:
    """Validate a configuration mapping and return a RunConfig."""
    if not isinstance(data, dict):
        raise ConfigError("config root: expected an object")
    known = set(_SCHEMA) - {"kappa"} | {"seed"}
    for key in data:
        if key not in known:
            raise ConfigError(f"unknown config field {key}")
    sections = {}
    for name in ("model", "grid", "rg", "oracle", "output"):
        sections[name] = _validate_section(name, _SCHEMA[name],
                                           data.get(name, {}))
    mk = sections["model"]["kappa"]
    sections["model"]["kappa"] = _validate_section(
        "model.kappa", _SCHEMA["kappa"], mk if mk is not None else {})
    seed = data.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int):
        raise ConfigError("seed: expected an integer")

    if sections["model"]["mode"] not in ("matrix", "hydrogen_radial"):
        raise ConfigError(
            f"model.mode: unknown mode {sections['model']['mode']!r}")
    if sections["model"]["kappa"]["type"] not in ("exponential", "gaussian",
                                                  "sharp"):
        raise ConfigError(
            "model.kappa.type: must be exponential, gaussian or sharp")
    if abs(sections["rg"]["rho"] - sections["grid"]["rho_grid"]) > 1e-12:
        raise ConfigError(
            f"rg.rho: must equal grid.rho_grid "
            f"({sections['rg']['rho']} != {sections['grid']['rho_grid']})")

    cfg = RunConfig(seed=seed, raw=data, **sections)
    cfg.rg_config()            # surfaces RGConfig constraint violations
    return cfg


def load_config(path) -> RunConfig:
    """Read and validate a JSON config file."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return parse_config(data)
