"""Config-file parsing, validation and run manifests for the CLI.

Config files are flat key = value text with one section per subcommand
(INI syntax).  Every key is validated against the subcommand schema; an
unknown key is a configuration error naming the key.  Input paths must
resolve at parse time.
"""

import configparser
import hashlib
import json
import os

__all__ = ["ConfigError", "load_section", "SCHEMAS", "write_manifest"]


class ConfigError(ValueError):
    """Invalid or unparsable pipeline configuration."""


def _parse_int_list(raw):
    return tuple(int(v) for v in raw.replace(" ", "").split(",") if v)


def _parse_float_list(raw):
    return tuple(float(v) for v in raw.replace(" ", "").split(",") if v)


_PARSERS = {
    "int": int,
    "float": float,
    "str": str,
    "bool": lambda raw: configparser.ConfigParser.BOOLEAN_STATES[raw.lower()],
    "path": str,
    "out_path": str,
    "int_list": _parse_int_list,
    "float_list": _parse_float_list,
}


def _field(kind, required=False, default=None):
    return {"kind": kind, "required": required, "default": default}


SCHEMAS = {
    "simulate": {
        "kind": _field("str", required=True),
        "out_dir": _field("out_path", required=True),
        "grid": _field("int_list", default=(10, 10)),
        "n_sensors": _field("int", default=32),
        "n_times": _field("int", default=400),
        "n_atoms": _field("int", default=2),
        "n_freq": _field("int", default=24),
        "n_shared": _field("int", default=40),
        "snr_db": _field("float", default=20.0),
        "seed": _field("int", default=0),
        "fs": _field("float", default=100.0),
        "atom_width": _field("float", default=1.8),
        "envelope": _field("str", default="smooth"),
        "fmri_step": _field("int", default=5),
        "n_lags": _field("int", default=2),
        "n_nodes": _field("int", default=5),
        "density": _field("float", default=0.4),
        "window": _field("int", default=64),
        "coupled": _field("bool", default=True),
        "lead_width": _field("float", default=2.5),
    },
    "parafac": {
        "in_tensor": _field("path", required=True),
        "out_dir": _field("out_path", required=True),
        "rank": _field("int", required=True),
        "seed": _field("int", default=0),
        "nonneg_modes": _field("int_list", default=()),
        "ortho_modes": _field("int_list", default=()),
        "penalty_mode": _field("int", default=-1),
        "lam1": _field("float", default=0.0),
        "lam2": _field("float", default=0.0),
        "smoother": _field("path", default=None),
        "tol": _field("float", default=1e-8),
        "max_sweeps": _field("int", default=500),
    },
    "stonnica": {
        "in_v": _field("path", required=True),
        "lead_field": _field("path", required=True),
        "laplacian": _field("path", required=True),
        "out_dir": _field("out_path", required=True),
        "rank": _field("int", required=True),
        "lam1": _field("float", default=0.0),
        "lam2": _field("float", default=0.0),
        "seed": _field("int", default=0),
        "max_sweeps": _field("int", default=500),
    },
    "tstonnica": {
        "in_tensor": _field("path", required=True),
        "lead_field": _field("path", required=True),
        "laplacian": _field("path", required=True),
        "out_dir": _field("out_path", required=True),
        "rank": _field("int", required=True),
        "lam1": _field("float", default=0.0),
        "lam2": _field("float", default=0.0),
        "seed": _field("int", default=0),
        "max_sweeps": _field("int", default=500),
    },
    "deconvolve": {
        "in_b": _field("path", required=True),
        "hemodynamic": _field("path", required=True),
        "out_dir": _field("out_path", required=True),
        "penalty": _field("str", default="ridge"),
        "lam": _field("float", default=1.0),
        "laplacian": _field("path", default=None),
        "tol": _field("float", default=1e-6),
    },
    "fuse-matrix": {
        "in_v": _field("path", required=True),
        "in_b": _field("path", required=True),
        "lead_field": _field("path", required=True),
        "hemodynamic": _field("path", required=True),
        "out_dir": _field("out_path", required=True),
        "alpha": _field("float", required=True),
        "penalty": _field("str", default="loreta"),
        "lam": _field("float", default=0.0),
        "lam2": _field("float", default=0.0),
        "laplacian": _field("path", default=None),
        "tol": _field("float", default=1e-6),
    },
    "granger": {
        "in_series": _field("path", required=True),
        "out_dir": _field("out_path", required=True),
        "method": _field("str", default="naive"),
        "n_lags": _field("int", required=True),
        "lam": _field("float", default=0.0),
        "rank": _field("int", default=3),
        "lams": _field("float_list", default=(0, 0, 0, 0, 0, 0)),
        "laplacian": _field("path", default=None),
        "alpha": _field("float", default=0.05),
        "seed": _field("int", default=0),
        "max_sweeps": _field("int", default=200),
        "edge_threshold": _field("float", default=0.0),
    },
    "npls": {
        "in_x": _field("path", required=True),
        "in_y": _field("path", required=True),
        "out_dir": _field("out_path", required=True),
        "rank": _field("int", required=True),
        "shared_mode": _field("int", required=True),
        "shared_mode_y": _field("int", default=-1),
        "n_perm": _field("int", default=1000),
        "seed": _field("int", default=0),
        "logit": _field("bool", default=False),
    },
    "cmtf": {
        "in_tensor": _field("path", required=True),
        "in_b": _field("path", required=True),
        "lead_field": _field("path", required=True),
        "laplacian": _field("path", required=True),
        "out_dir": _field("out_path", required=True),
        "rank_common": _field("int", required=True),
        "rank_tensor": _field("int", default=0),
        "rank_matrix": _field("int", default=0),
        "lams": _field("float_list", default=(0, 0, 0, 0, 0, 0)),
        "gamma": _field("float", default=-1.0),
        "seed": _field("int", default=0),
        "max_sweeps": _field("int", default=200),
    },
    "tsvd": {
        "in_tensor": _field("path", required=True),
        "out_dir": _field("out_path", required=True),
        "truncate": _field("int", default=0),
    },
    "select": {
        "kind": _field("str", required=True),
        "out_dir": _field("out_path", required=True),
        "in_tensor": _field("path", default=None),
        "r_max": _field("int", default=4),
        "threshold": _field("float", default=85.0),
        "seed": _field("int", default=0),
        "in_v": _field("path", default=None),
        "lead_field": _field("path", default=None),
        "laplacian": _field("path", default=None),
        "lam1_grid": _field("float_list", default=(0.0,)),
        "lam2_grid": _field("float_list", default=(0.0,)),
        "bic_classical": _field("bool", default=False),
    },
}


def load_section(path, section):
    """Parse and validate one subcommand section of a config file."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config file {path}: {exc}") from exc
    if section not in parser:
        raise ConfigError(f"config file {path} has no [{section}] section")
    schema = SCHEMAS[section]
    raw = parser[section]
    for key in raw:
        if key not in schema:
            raise ConfigError(f"unknown key '{key}' in section [{section}]")
    out = {}
    base = os.path.dirname(os.path.abspath(path))
    for key, spec in schema.items():
        if key in raw:
            try:
                value = _PARSERS[spec["kind"]](raw[key])
            except (ValueError, KeyError) as exc:
                raise ConfigError(
                    f"invalid value for '{key}' in [{section}]: {raw[key]!r}"
                ) from exc
        elif spec["required"]:
            raise ConfigError(f"missing required key '{key}' in [{section}]")
        else:
            value = spec["default"]
        if spec["kind"] in ("path", "out_path") and isinstance(value, str):
            value = value if os.path.isabs(value) else os.path.join(base, value)
        out[key] = value
    for key, spec in schema.items():
        if spec["kind"] == "path" and out[key] is not None and not os.path.exists(out[key]):
            raise ConfigError(f"input path for '{key}' does not exist: {out[key]}")
    return out


def _sha256(path):
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(out_dir, command, params, input_paths, extra=None):
    """Provenance manifest: parameters, input hashes and the package version.

    Deliberately carries no timestamps so reruns are bit-identical.
    """
    from . import __version__

    manifest = {
        "command": command,
        "package_version": __version__,
        "parameters": {k: _jsonable(v) for k, v in sorted(params.items())},
        "inputs": {os.path.basename(p): _sha256(p) for p in sorted(set(input_paths))},
    }
    if extra:
        manifest["results"] = {k: _jsonable(v) for k, v in sorted(extra.items())}
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _jsonable(v):
    import numpy as np

    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, tuple):
        return list(v)
    return v
