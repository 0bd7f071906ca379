"""``mvsde`` experiment runner.

Usage::

    mvsde <simulate|converge|occupation|transform-check|chaos> --config cfg.json
          [--set key=value]... [--seed N] [--out DIR] [--threads K]

The config is a JSON object; ``--set`` overrides one key (dotted keys reach
into ``model_params``, values are parsed as JSON when possible). Every
output file starts with ``# config: {...}`` echoing the resolved config, so
a run can be repeated exactly. Floats are written with ``repr``, the
shortest string that round-trips. The thread hint (``--threads``, the
``threads`` key or ``MVSDE_THREADS``) and the output directory never change
results and are left out of the echo.

On failure a JSON error object goes to stderr, partial outputs are removed,
and the exit status is nonzero (2 for config errors, 1 otherwise).
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from pathlib import Path

import jsonschema

from . import analysis
from .errors import ConfigError, MVSDEError
from .model import MODEL_DEFAULTS, DecomposableModel, GeneralModel, build_model
from .simulate import (
    LEVEL_MAX_GUARD,
    SCHEMES,
    SchemeConfig,
    brownian_lattice,
    run_scheme,
)
from .transform import TransformSpec, choose_c, general_spec_for

COMMANDS = ("simulate", "converge", "occupation", "transform-check", "chaos")
NOT_ECHOED = ("threads", "out")
ROUNDTRIP_LIMIT = 1e-10

DEFAULTS = {
    "model": "systemic_risk",
    "model_params": {},
    "scheme": "scheme1_decomposable",
    "seed": 0,
    "n_particles": 1000,
    "level": 8,
    "level_min": 4,
    "level_max": 9,
    "T": 1.0,
    "inversion_tol": 1e-12,
    "implicit_tol": 1e-10,
    "implicit_max_iter": 50,
    "c_safety": 0.9,
    "out": ".",
    "threads": None,
    "path_stride": 0,
    "eps_values": [0.025, 0.05, 0.1, 0.2],
    "n_values": [100, 200, 400, 800, 1600],
    "chaos_replicas": 3,
    "chaos_level": 6,
    "grid_points": 100000,
    "grid_min": -10.0,
    "grid_max": 10.0,
    "transform_alpha": None,
    "transform_c": None,
}

_pos = {"type": "number", "exclusiveMinimum": 0}

_MODEL_PARAM_SCHEMAS = {
    "systemic_risk": {
        "a": {"type": "number"}, "kappa1": {"type": "number"}, "kappa2": {"type": "number"},
        "sigma0": {"type": "number"}, "x0": {"type": "number"},
    },
    "modulated_jump": {
        "a": {"type": "number"}, "k1": {"type": "number"}, "k2": {"type": "number"},
        "sigma0": {"type": "number"}, "x0_mean": {"type": "number"}, "x0_sd": {"type": "number"},
    },
    "neuronal": {
        "lambda_hat": {"type": "number"}, "kappa": {"type": "number"},
        "epsilon": {"type": "number"}, "sigma_variant": {"enum": ["constant", "affine"]},
        "eta_mean": {"type": "number"}, "eta_sd": {"type": "number"},
        "xi_mean": {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3},
        "xi_cov": {"type": "array", "minItems": 3, "maxItems": 3,
                   "items": {"type": "array", "items": {"type": "number"},
                             "minItems": 3, "maxItems": 3}},
    },
}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "model": {"enum": sorted(MODEL_DEFAULTS)},
        "model_params": {"type": "object"},
        "scheme": {"enum": list(SCHEMES)},
        "seed": {"type": "integer", "minimum": 0, "maximum": 2**64 - 1},
        "n_particles": {"type": "integer", "minimum": 1},
        "level": {"type": "integer", "minimum": 0, "maximum": LEVEL_MAX_GUARD},
        "level_min": {"type": "integer", "minimum": 2, "maximum": LEVEL_MAX_GUARD},
        "level_max": {"type": "integer", "minimum": 2, "maximum": LEVEL_MAX_GUARD},
        "T": _pos,
        "inversion_tol": _pos,
        "implicit_tol": _pos,
        "implicit_max_iter": {"type": "integer", "minimum": 1},
        "c_safety": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "out": {"type": "string"},
        "threads": {"type": ["integer", "null"], "minimum": 1},
        "path_stride": {"type": "integer", "minimum": 0},
        "eps_values": {"type": "array", "items": _pos, "minItems": 1},
        "n_values": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1},
        "chaos_replicas": {"type": "integer", "minimum": 1},
        "chaos_level": {"type": "integer", "minimum": 0, "maximum": LEVEL_MAX_GUARD},
        "grid_points": {"type": "integer", "minimum": 2},
        "grid_min": {"type": "number"},
        "grid_max": {"type": "number"},
        "transform_alpha": {"type": ["number", "null"]},
        "transform_c": {"type": ["number", "null"], "exclusiveMinimum": 0},
    },
}

_SCHEME_MODELS = {
    "scheme2_direct": ("systemic_risk", "modulated_jump", "neuronal"),
    "scheme1_decomposable": ("systemic_risk",),
    "scheme1_general_hybrid": ("systemic_risk", "modulated_jump"),
}


def _path(err) -> str:
    return ".".join(str(p) for p in err.absolute_path) or "<root>"


def _schema_errors(doc) -> list:
    errors = []
    for err in sorted(jsonschema.Draft202012Validator(SCHEMA).iter_errors(doc), key=str):
        if err.validator == "additionalProperties":
            extra = sorted(set(err.instance) - set(SCHEMA["properties"]))
            errors.append(f"unknown key(s): {', '.join(extra)}")
        else:
            errors.append(f"{_path(err)}: {err.message}")
    model = doc.get("model") if isinstance(doc, dict) else None
    params = doc.get("model_params") if isinstance(doc, dict) else None
    if model in _MODEL_PARAM_SCHEMAS and isinstance(params, dict):
        sub = {"type": "object", "additionalProperties": False,
               "properties": _MODEL_PARAM_SCHEMAS[model]}
        for err in sorted(jsonschema.Draft202012Validator(sub).iter_errors(params), key=str):
            if err.validator == "additionalProperties":
                extra = sorted(set(err.instance) - set(sub["properties"]))
                errors.append(f"unknown {model} parameter(s): {', '.join(extra)}")
            else:
                errors.append(f"model_params.{_path(err)}: {err.message}")
    return errors


def _domain_errors(cfg) -> list:
    """Cross-field and model-domain checks; each runs even if others fail."""
    errors = []

    def scheme_fits():
        if cfg["scheme"] in _SCHEME_MODELS and cfg["model"] not in _SCHEME_MODELS[cfg["scheme"]]:
            errors.append(f"scheme {cfg['scheme']} does not apply to model {cfg['model']}")

    def levels():
        if cfg["level_min"] + 2 > cfg["level_max"]:
            errors.append("level_max must be at least level_min + 2")
        for key in ("level", "level_min", "chaos_level"):
            if not float(cfg["T"] * 2 ** (cfg[key] - (key == "level_min"))).is_integer():
                errors.append(f"T * 2**{key} must be an integer number of steps")

    def grid():
        if cfg["grid_min"] >= cfg["grid_max"]:
            errors.append("grid_min must be < grid_max")

    def model():
        if cfg["model"] not in MODEL_DEFAULTS:
            return
        try:
            build_model(cfg["model"], cfg["model_params"], 1, 0)
        except (MVSDEError, ValueError) as exc:
            errors.append(f"model_params: {type(exc).__name__}: {exc}")

    for check in (scheme_fits, levels, grid, model):
        try:
            check()
        except (TypeError, KeyError, ValueError, OverflowError):
            # ill-typed values are reported by the schema pass
            pass
    return errors


def parse_config(text: str, overrides: dict | None = None) -> dict:
    """Parse and validate a config document; raise :class:`ConfigError` listing every problem."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError([f"malformed JSON: {exc}"]) from exc
    if not isinstance(doc, dict):
        raise ConfigError(["config must be a JSON object"])
    for key, value in (overrides or {}).items():
        if "." in key:
            head, sub = key.split(".", 1)
            if head != "model_params":
                raise ConfigError([f"only model_params accepts dotted keys, got {key}"])
            doc.setdefault("model_params", {})
            if isinstance(doc["model_params"], dict):
                doc["model_params"][sub] = value
        else:
            doc[key] = value
    errors = _schema_errors(doc)
    cfg = {**DEFAULTS, **doc}
    if isinstance(cfg["model_params"], dict):
        cfg["model_params"] = dict(cfg["model_params"])
    errors += _domain_errors(cfg)
    if errors:
        raise ConfigError(errors)
    return cfg


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def config_echo(cfg: dict) -> dict:
    return {k: v for k, v in cfg.items() if k not in NOT_ECHOED}


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


class Outputs:
    """Collect output files, writing each to a temporary name until commit."""

    def __init__(self, out_dir: Path, cfg: dict):
        self.dir = out_dir
        self.header = "# config: " + json.dumps(config_echo(cfg), sort_keys=True,
                                                  separators=(",", ":")) + "\n"
        self.pending = []

    def _tmp(self, name):
        self.dir.mkdir(parents=True, exist_ok=True)
        final = self.dir / name
        tmp = self.dir / (name + ".partial")
        self.pending.append((tmp, final))
        return tmp

    def csv(self, name, header, rows):
        with open(self._tmp(name), "w", newline="\n") as fh:
            fh.write(self.header)
            fh.write(",".join(header) + "\n")
            for row in rows:
                fh.write(",".join(_fmt(v) for v in row) + "\n")

    def json(self, name, payload, cfg):
        body = {**payload, "config": config_echo(cfg), "seed": cfg["seed"]}
        with open(self._tmp(name), "w") as fh:
            json.dump(body, fh, sort_keys=True, indent=2, default=_json_default)
            fh.write("\n")

    def commit(self):
        for tmp, final in self.pending:
            os.replace(tmp, final)
        return [str(final) for _, final in self.pending]

    def discard(self):
        for tmp, final in self.pending:
            for p in (tmp, final):
                try:
                    p.unlink()
                except FileNotFoundError:
                    pass


def _json_default(obj):
    if hasattr(obj, "tolist"):
        return obj.tolist()
    raise TypeError(f"not JSON serialisable: {type(obj).__name__}")


def _scheme_kwargs(cfg):
    return {
        "inversion_tol": cfg["inversion_tol"],
        "implicit_tol": cfg["implicit_tol"],
        "implicit_max_iter": cfg["implicit_max_iter"],
        "safety": cfg["c_safety"],
        "threads": cfg["threads"],
    }


def _instance(cfg, n=None):
    return build_model(cfg["model"], cfg["model_params"], n or cfg["n_particles"], cfg["seed"])


def _run_one(cfg, level, stride=1):
    inst = _instance(cfg)
    lattice = brownian_lattice(cfg["seed"], cfg["n_particles"], level, cfg["T"])
    sc = SchemeConfig(cfg["scheme"], level, cfg["n_particles"], cfg["T"],
                      path_stride=stride, **_scheme_kwargs(cfg))
    return run_scheme(inst.model, lattice, sc, inst.x0)


def cmd_simulate(cfg, out: Outputs):
    stride = cfg["path_stride"]
    paths = _run_one(cfg, cfg["level"], stride or 1)
    out.csv("terminal.csv", ("particle", "state"), enumerate(paths.terminal.tolist()))
    if stride:
        rows = ((int(s), float(s) * paths.h, i, x)
                for s, row in zip(paths.steps.tolist(), paths.states.tolist())
                for i, x in enumerate(row))
        out.csv("paths.csv", ("step", "t", "particle", "state"), rows)
    return {"terminal_mean": float(paths.terminal.mean())}


def cmd_converge(cfg, out: Outputs):
    report = analysis.convergence_study(_instance(cfg), cfg["scheme"], cfg["seed"],
                                        cfg["level_min"], cfg["level_max"], cfg["T"],
                                        **_scheme_kwargs(cfg))
    rows = report.csv_rows()
    out.csv("report.csv", rows[0], rows[1:])
    summary = report.summary()
    summary.pop("config")
    out.json("report.json", summary, cfg)
    return {"fitted_order": report.fitted_order, "trimmed": report.trimmed}


def cmd_occupation(cfg, out: Outputs):
    paths = _run_one(cfg, cfg["level"])
    rows = [(float(e), analysis.occupation_estimate(paths, e)) for e in cfg["eps_values"]]
    out.csv("occupation.csv", ("eps", "estimate"), rows)
    return {"estimates": [r[1] for r in rows]}


def _transform_spec(cfg) -> TransformSpec:
    if cfg["transform_alpha"] is not None:
        alpha = float(cfg["transform_alpha"])
        c = cfg["transform_c"] or choose_c(abs(alpha), 0.0, cfg["c_safety"])
        return TransformSpec(alpha, c)
    model = _instance(cfg, 1).model
    if isinstance(model, DecomposableModel):
        alpha = model.alpha
        c = cfg["transform_c"] or choose_c(abs(alpha), 0.0, cfg["c_safety"])
        return TransformSpec(alpha, c)
    if isinstance(model, GeneralModel):
        gspec = general_spec_for(model.alpha.alpha_sup, model.alpha.dalpha_sup, cfg["c_safety"])
        # the largest admissible |alpha| is the hardest case for the inversion
        return TransformSpec(model.alpha.alpha_sup, cfg["transform_c"] or gspec.c)
    raise ConfigError([f"model {cfg['model']} has no jump at 0; set transform_alpha"])


def cmd_transform_check(cfg, out: Outputs):
    spec = _transform_spec(cfg)
    grid = analysis.transform_grid(spec, cfg["grid_points"], cfg["grid_min"], cfg["grid_max"],
                                   cfg["inversion_tol"])
    out.csv("transform_grid.csv", ("x", "G", "dG", "d2G", "roundtrip_error"),
            zip(grid.x.tolist(), grid.g.tolist(), grid.g1.tolist(), grid.g2.tolist(),
                grid.roundtrip_error.tolist()))
    result = {
        "alpha": spec.alpha,
        "c": spec.c,
        "max_roundtrip_error": grid.max_roundtrip_error,
        "min_dG": float(grid.g1.min()),
        "roundtrip_ok": grid.max_roundtrip_error <= ROUNDTRIP_LIMIT,
        "monotone_ok": float(grid.g1.min()) > 0.5,
    }
    out.json("transform_check.json", result, cfg)
    if not (result["roundtrip_ok"] and result["monotone_ok"]):
        raise CheckFailed(result)
    return result


def cmd_chaos(cfg, out: Outputs):
    rows = analysis.chaos_study(cfg["model"], cfg["model_params"], cfg["scheme"], cfg["seed"],
                                cfg["n_values"], cfg["chaos_replicas"], cfg["chaos_level"],
                                cfg["T"], **_scheme_kwargs(cfg))
    out.csv("chaos.csv", ("n", "w2"), rows)
    return {"w2": [r[1] for r in rows]}


class CheckFailed(MVSDEError):
    def __init__(self, result):
        super().__init__("transform check failed")
        self.result = result


HANDLERS = {
    "simulate": cmd_simulate,
    "converge": cmd_converge,
    "occupation": cmd_occupation,
    "transform-check": cmd_transform_check,
    "chaos": cmd_chaos,
}


def _error(kind, message, **extra):
    payload = {"error": kind, "message": message, **extra}
    sys.stderr.write(json.dumps(payload, sort_keys=True, default=_json_default) + "\n")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mvsde", description=__doc__.split("\n")[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="JSON experiment config")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("--seed", type=int, help="override the seed")
    p.add_argument("--out", help="output directory")
    p.add_argument("--threads", type=int, help="thread-count hint (results do not depend on it)")
    return p


def run(command: str, cfg: dict) -> dict:
    out = Outputs(Path(cfg["out"]), cfg)
    try:
        info = HANDLERS[command](cfg, out)
        files = out.commit()
    except BaseException:
        out.discard()
        raise
    return {"command": command, "files": files, **info}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {}
    try:
        for item in args.set:
            if "=" not in item:
                raise ConfigError([f"--set expects KEY=VALUE, got {item!r}"])
            key, raw = item.split("=", 1)
            overrides[key.strip()] = _parse_value(raw)
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.out is not None:
            overrides["out"] = args.out
        if args.threads is not None:
            overrides["threads"] = args.threads
        try:
            text = Path(args.config).read_text()
        except OSError as exc:
            raise ConfigError([f"cannot read config: {exc}"]) from exc
        cfg = parse_config(text, overrides)
    except ConfigError as exc:
        _error("ConfigError", str(exc), errors=exc.errors)
        return 2
    except ValueError as exc:
        _error("ConfigError", str(exc), errors=[str(exc)])
        return 2
    try:
        info = run(args.command, cfg)
    except CheckFailed as exc:
        _error("CheckFailed", str(exc), result=exc.result)
        return 1
    except (MVSDEError, ValueError, ArithmeticError, MemoryError) as exc:
        extra = {k: getattr(exc, k) for k in ("step", "level", "contraction", "required_bytes")
                 if getattr(exc, k, None) is not None}
        if isinstance(extra.get("contraction"), float) and math.isnan(extra["contraction"]):
            extra.pop("contraction")
        _error(type(exc).__name__, str(exc), **extra)
        return 1
    print(json.dumps(info, sort_keys=True, default=_json_default))
    return 0


if __name__ == "__main__":
    sys.exit(main())
