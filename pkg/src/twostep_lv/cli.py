"""Command-line front end: fit models on CSV data and run studies.

Three commands are exposed through the ``twostep-lv`` entry point:

* ``fit-lca``: two-step latent class fit (covariate or distal form);
* ``fit-irt``: two-step latent trait fit (recursive/SUR systems);
* ``study``: Monte Carlo scenario grid from a study file.

Configuration files are JSON or TOML.  A fit configuration has three
optional tables.  ``data`` holds the CSV path plus layout declarations
understood by the loader (``n_categories``, ``item_blocks``,
``trait_names``).  ``model`` declares the latent structure: for
``fit-lca``, ``n_classes`` and ``structural`` (``covariate`` or
``distal``); for ``fit-irt``, an ``equations`` list (each entry:
``trait``, optional ``on`` traits, optional ``covariates``) and an
optional ``correlated`` list of residual pairs.  ``estimation`` holds
``variance`` (method labels, ``simulation:M`` for the simulation
method), ``seed``, and optimizer knobs passed through to the fit
configuration (for example ``nodes``, ``n_starts``, ``gtol``).

A study file has a ``study`` table (defaults: ``seed``,
``replications``, ``m_values``, ``estimators``, ``jobs``) and one
``scenario`` entry per cell with a ``kind`` of ``trait`` or ``class``
plus the scenario fields.

Fit results are emitted as JSON validating against ``RESULT_SCHEMA``,
with the seed and a hash of the effective configuration embedded so any
output is reproducible from its header.  Tables printed to stdout carry
6 significant digits; the JSON keeps full precision.  ``--step1-cache``
names a single-file JSON artifact holding the step-1 estimates, their
covariance, layout labels, and the simulation draw matrix; when the
file exists the fit skips step 1 and reuses the stored draws, which
reproduces a fresh equal-seed run bitwise.

Exit codes: 0 success, 2 convergence or numeric failure, 3 input error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import fields as dataclass_fields
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .data import Dataset, load_config_file, load_dataset
from .errors import ConvergenceError, DataError, NumericError, TwoStepError
from .latent_class import (
    LcaConfig,
    LcaMeasurementParams,
    LcaStep1Nuisance,
    lca_covariate_model,
    lca_distal_model,
    lca_step1_em,
    lca_step2_covariate,
    lca_step2_distal,
)
from .latent_trait import (
    IrtConfig,
    IrtMeasurementParams,
    TraitEquation,
    TraitStructuralSpec,
    combine_trait_blocks,
    irt_step1_fit,
    irt_step2_fit,
    trait_model,
)
from .model_core import CovMatrix, ParamVector, RngStream, mvn_sample, psd_repair
from .sim_study import (
    ClassScenario,
    TraitScenario,
    format_study,
    metrics_frame,
    records_frame,
    run_study,
)
from .variance import (
    asymptotic_variance,
    assemble_sigma11,
    naive_variance,
    simulation_variance_multi,
    wald_interval,
)

__all__ = ["main", "RESULT_SCHEMA", "CACHE_SCHEMA"]

EXIT_OK = 0
EXIT_CONVERGENCE = 2
EXIT_INPUT = 3

_SEED_ENV = "TWOSTEP_LV_SEED"

# Stream ids inside one fit run: 0 drives the optimizer multistarts,
# 1 drives the simulation draw matrix.
_FIT_STREAM = 0
_DRAW_STREAM = 1

_MATRIX_SCHEMA = {
    "type": "object",
    "required": ["names", "matrix"],
    "properties": {
        "names": {"type": "array", "items": {"type": "string"}},
        "matrix": {
            "type": "array",
            "items": {"type": "array", "items": {"type": "number"}},
        },
    },
}

RESULT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "twostep-lv fit result",
    "type": "object",
    "required": [
        "tool", "version", "command", "seed", "config", "config_hash",
        "data", "step1", "step2", "variance",
    ],
    "properties": {
        "tool": {"const": "twostep-lv"},
        "version": {"type": "string"},
        "command": {"enum": ["fit-lca", "fit-irt"]},
        "seed": {"type": "integer"},
        "config": {"type": "object"},
        "config_hash": {"type": "string", "pattern": "^sha256:[0-9a-f]{64}$"},
        "data": {
            "type": "object",
            "required": ["path", "n_units", "n_items", "item_names"],
            "properties": {
                "path": {"type": "string"},
                "n_units": {"type": "integer"},
                "n_items": {"type": "integer"},
                "item_names": {"type": "array", "items": {"type": "string"}},
            },
        },
        "step1": {
            "type": "object",
            "required": ["parameters", "converged", "from_cache"],
            "properties": {
                "parameters": {
                    "type": "object",
                    "additionalProperties": {"type": "number"},
                },
                "nuisance": {"type": "object"},
                "loglik": {"type": ["number", "null"]},
                "converged": {"type": "boolean"},
                "from_cache": {"type": "boolean"},
                "cache_seed": {"type": ["integer", "null"]},
            },
        },
        "step2": {
            "type": "object",
            "required": ["parameters", "loglik", "converged"],
            "properties": {
                "parameters": {
                    "type": "object",
                    "additionalProperties": {"type": "number"},
                },
                "loglik": {"type": "number"},
                "converged": {"type": "boolean"},
            },
        },
        "variance": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["method", "label", "m", "n_failed", "se", "ci", "total"],
                "properties": {
                    "method": {"enum": ["naive", "asymptotic", "simulation"]},
                    "label": {"type": "string"},
                    "m": {"type": "integer"},
                    "n_failed": {"type": "integer"},
                    "se": {
                        "type": "object",
                        "additionalProperties": {"type": "number"},
                    },
                    "ci": {
                        "type": "object",
                        "additionalProperties": {
                            "type": "array",
                            "items": {"type": "number"},
                            "minItems": 2,
                            "maxItems": 2,
                        },
                    },
                    "total": _MATRIX_SCHEMA,
                },
            },
        },
    },
}

CACHE_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "twostep-lv step-1 cache",
    "type": "object",
    "required": ["tool", "kind", "seed", "layout", "theta1", "sigma11"],
    "properties": {
        "tool": {"const": "twostep-lv"},
        "kind": {"enum": ["lca", "irt"]},
        "seed": {"type": "integer"},
        "layout": {"type": "object"},
        "theta1": {
            "type": "object",
            "required": ["names", "values"],
            "properties": {
                "names": {"type": "array", "items": {"type": "string"}},
                "values": {"type": "array", "items": {"type": "number"}},
            },
        },
        "nuisance": {"type": "object"},
        "sigma11": _MATRIX_SCHEMA,
        "draws": {
            "type": "object",
            "required": ["count", "values"],
            "properties": {
                "count": {"type": "integer"},
                "values": {
                    "type": "array",
                    "items": {"type": "array", "items": {"type": "number"}},
                },
            },
        },
        "loglik": {"type": ["number", "null"]},
    },
}


def _validate_json(payload: dict, schema: dict, what: str) -> None:
    import jsonschema

    try:
        jsonschema.validate(payload, schema)
    except jsonschema.ValidationError as exc:
        raise DataError(f"{what} does not match its schema: {exc.message}") from None


def _fmt(v: float) -> str:
    return f"{float(v):.6g}"


def _config_hash(config: dict) -> str:
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return "sha256:" + hashlib.sha256(canonical.encode()).hexdigest()


class _Parser(argparse.ArgumentParser):
    """Argument parser whose usage errors map to the input exit code."""

    def error(self, message):
        raise DataError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="twostep-lv", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", metavar="command")

    def add_fit(name: str, help_text: str):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--data", help="CSV data file (role-prefixed columns)")
        p.add_argument("--config", help="fit configuration file (JSON or TOML)")
        p.add_argument(
            "--variance",
            action="append",
            default=None,
            help="variance methods, comma separated; repeatable "
            "(naive, asymptotic, simulation:M)",
        )
        p.add_argument("--seed", type=int, default=None,
                       help=f"random seed (fallback: config, then ${_SEED_ENV})")
        p.add_argument("--jobs", type=int, default=1,
                       help="replication parallelism (study command)")
        p.add_argument("--out", help="result JSON path (default: stdout)")
        p.add_argument("--step1-cache", dest="step1_cache",
                       help="step-1 artifact path: reused when present, "
                       "written after a fresh step 1 otherwise")
        return p

    add_fit("fit-lca", "two-step latent class fit")
    add_fit("fit-irt", "two-step latent trait fit")

    p = sub.add_parser("study", help="run a Monte Carlo study file")
    p.add_argument("--config", required=True, help="study file (JSON or TOML)")
    p.add_argument("--seed", type=int, default=None,
                   help=f"override the study seed (fallback: ${_SEED_ENV})")
    p.add_argument("--jobs", type=int, default=None,
                   help="concurrent replications (default: study file, then 1)")
    p.add_argument("--out", help="output directory for CSV tables (default: .)")
    return parser


def _resolve_seed(cli_seed, config_seed) -> int:
    if cli_seed is not None:
        return int(cli_seed)
    if config_seed is not None:
        return int(config_seed)
    env = os.environ.get(_SEED_ENV)
    if env is not None and env != "":
        try:
            return int(env)
        except ValueError:
            raise DataError(f"${_SEED_ENV} must be an integer, got {env!r}") from None
    return 0


def _parse_variance(cli_specs, config_specs) -> list[str]:
    """Normalize variance requests into ordered unique labels."""
    raw: list[str] = []
    source = cli_specs if cli_specs else config_specs
    if source is None:
        source = ["naive", "asymptotic"]
    if isinstance(source, str):
        source = [source]
    for entry in source:
        raw.extend(s.strip() for s in str(entry).split(",") if s.strip())
    labels: list[str] = []
    for spec in raw:
        if spec in ("naive", "asymptotic"):
            label = spec
        elif spec == "simulation" or spec.startswith("simulation:"):
            m_part = spec.split(":", 1)[1] if ":" in spec else "100"
            try:
                m = int(m_part)
            except ValueError:
                raise DataError(
                    f"variance parameter M must be an integer, got {m_part!r}"
                ) from None
            if m < 2:
                raise DataError(f"variance parameter M must be >= 2, got {m}")
            label = f"simulation:{m}"
        else:
            raise DataError(
                f"unknown variance method {spec!r}; choose naive, asymptotic, "
                "or simulation:M"
            )
        if label not in labels:
            labels.append(label)
    if not labels:
        raise DataError("at least one variance method is required")
    return labels


def _sim_m_values(labels) -> list[int]:
    return [int(l.split(":", 1)[1]) for l in labels if l.startswith("simulation:")]


def _make_fit_config(kind: str, est_cfg: dict, seed: int):
    """Map the estimation table onto the fit configuration dataclass."""
    cls = LcaConfig if kind == "lca" else IrtConfig
    allowed = {f.name for f in dataclass_fields(cls)} - {"rng"}
    reserved = {"variance", "seed"}
    overrides = {}
    for key, value in est_cfg.items():
        if key in reserved:
            continue
        if key not in allowed:
            raise DataError(
                f"unknown estimation setting {key!r}; valid settings: "
                f"{sorted(allowed)}"
            )
        overrides[key] = value
    return cls(rng=RngStream(seed, _FIT_STREAM), **overrides)


def _display_variance_label(label: str) -> str:
    if label.startswith("simulation:"):
        return f"M={label.split(':', 1)[1]}"
    return {"asymptotic": "asympt."}.get(label, label)


# ---------------------------------------------------------------------------
# step-1 cache


def _cov_to_json(cov: CovMatrix) -> dict:
    return {"names": list(cov.axis_names), "matrix": cov.m.tolist()}


def _cov_from_json(payload: dict, what: str) -> CovMatrix:
    try:
        return CovMatrix(np.array(payload["matrix"], dtype=float), tuple(payload["names"]))
    except TwoStepError as exc:
        raise DataError(f"{what}: {exc}") from None


def _load_cache(path: Path, kind: str, dataset: Dataset):
    payload = json.loads(path.read_text())
    _validate_json(payload, CACHE_SCHEMA, f"step-1 cache {path}")
    if payload["kind"] != kind:
        raise DataError(
            f"step-1 cache {path} was written for kind {payload['kind']!r}, "
            f"this command needs {kind!r}"
        )
    layout = payload["layout"]
    if tuple(layout.get("item_names", ())) != dataset.item_names:
        raise DataError(
            f"step-1 cache {path} item names {layout.get('item_names')} do not "
            f"match the data's items {list(dataset.item_names)}"
        )
    if tuple(layout.get("n_categories", ())) != dataset.n_categories:
        raise DataError(f"step-1 cache {path} category counts do not match the data")
    theta1 = ParamVector(
        np.array(payload["theta1"]["values"], dtype=float),
        tuple(payload["theta1"]["names"]),
    )
    sigma11 = _cov_from_json(payload["sigma11"], f"step-1 cache {path} sigma11")
    if sigma11.axis_names != theta1.names:
        raise DataError(f"step-1 cache {path}: sigma11 labels do not match theta1")
    draws = None
    if "draws" in payload:
        mat = np.array(payload["draws"]["values"], dtype=float)
        draws = [ParamVector(row, theta1.names) for row in mat]
    return payload, theta1, sigma11, draws


def _write_cache(path: Path, kind: str, dataset: Dataset, seed: int,
                 theta1: ParamVector, sigma11: CovMatrix, nuisance: dict,
                 loglik, draws) -> None:
    layout: dict = {
        "item_names": list(dataset.item_names),
        "n_categories": list(dataset.n_categories),
    }
    if kind == "irt":
        layout["item_blocks"] = [
            [dataset.item_names[i] for i in block] for block in dataset.item_blocks
        ]
        layout["trait_names"] = list(dataset.trait_names)
    payload = {
        "tool": "twostep-lv",
        "version": __version__,
        "kind": kind,
        "seed": seed,
        "layout": layout,
        "theta1": {"names": list(theta1.names), "values": theta1.values.tolist()},
        "nuisance": nuisance,
        "sigma11": _cov_to_json(sigma11),
        "loglik": loglik,
    }
    if draws is not None:
        payload["draws"] = {
            "count": len(draws),
            "values": [d.values.tolist() for d in draws],
        }
    _validate_json(payload, CACHE_SCHEMA, f"step-1 cache {path}")
    path.write_text(json.dumps(payload, indent=2) + "\n")


# ---------------------------------------------------------------------------
# fit commands


def _variance_reports(model, dataset, theta1, theta2, sigma11, v2, labels,
                      step, seed, draws):
    """All requested variance reports, reusing one shared refit pass."""
    if sigma11 is None and any(l != "naive" for l in labels):
        raise DataError(
            "the step-1 covariance was not computed; corrected variance "
            "methods need compute_sigma11 enabled"
        )
    m_values = _sim_m_values(labels)
    if m_values and draws is None:
        top = max(m_values)
        draws = [
            mvn_sample(theta1, psd_repair(sigma11), 1,
                       RngStream(seed, _DRAW_STREAM).child(j))[0]
            for j in range(top)
        ]
    reports = {}
    for label in labels:
        if label == "naive":
            reports[label] = naive_variance(
                model, dataset, theta1, theta2, step=step, v2=v2
            )
        elif label == "asymptotic":
            reports[label] = asymptotic_variance(
                model, dataset, theta1, theta2, sigma11, step=step, v2=v2
            )
    if m_values:
        if any(len(draws) < m for m in m_values):
            raise DataError(
                f"step-1 cache supplies {len(draws)} draws but M="
                f"{max(m_values)} are required; refit without the cache"
            )
        multi = simulation_variance_multi(
            model, dataset, theta1, theta2, sigma11, m_values=m_values,
            rng=RngStream(seed, _DRAW_STREAM), step=step, v2=v2, draws=draws,
        )
        for m in m_values:
            reports[f"simulation:{m}"] = multi[m]
    return [(label, reports[label]) for label in labels], draws


def _print_fit_tables(theta2: ParamVector, reports) -> None:
    rows = []
    last_label = reports[-1][0]
    for name in theta2.names:
        row = {"parameter": name, "estimate": _fmt(theta2[name])}
        for label, rep in reports:
            row[f"se ({_display_variance_label(label)})"] = _fmt(rep.se()[name])
        lo, hi = wald_interval(theta2[name], reports[-1][1].se()[name])
        row[f"95% CI ({_display_variance_label(last_label)})"] = (
            f"[{_fmt(lo)}, {_fmt(hi)}]"
        )
        rows.append(row)
    print(pd.DataFrame(rows).to_string(index=False))


def _result_payload(command, seed, config, data_path, dataset, step1, step2, reports):
    variance = []
    for label, rep in reports:
        se = rep.se()
        ci = {
            name: list(wald_interval(step2["parameters"][name], se[name]))
            for name in se.names
        }
        variance.append({
            "method": rep.method,
            "label": label,
            "m": int(rep.m),
            "n_failed": int(rep.n_failed),
            "se": {name: float(se[name]) for name in se.names},
            "ci": ci,
            "total": _cov_to_json(rep.total),
        })
    payload = {
        "tool": "twostep-lv",
        "version": __version__,
        "command": command,
        "seed": seed,
        "config": config,
        "config_hash": _config_hash(config),
        "data": {
            "path": str(data_path),
            "n_units": int(dataset.n),
            "n_items": int(dataset.n_items),
            "item_names": list(dataset.item_names),
        },
        "step1": step1,
        "step2": step2,
        "variance": variance,
    }
    _validate_json(payload, RESULT_SCHEMA, "result JSON")
    return payload


def _emit_result(payload: dict, out_path) -> None:
    text = json.dumps(payload, indent=2) + "\n"
    if out_path:
        Path(out_path).write_text(text)
        print(f"result JSON written to {out_path}")
    else:
        print(text, end="")


def _load_fit_inputs(args):
    config = load_config_file(args.config) if args.config else {}
    for key in config:
        if key not in ("data", "model", "estimation", "output"):
            raise DataError(
                f"unknown configuration table {key!r}; expected data, model, "
                "estimation, output"
            )
    data_cfg = dict(config.get("data", {}))
    est_cfg = dict(config.get("estimation", {}))
    data_path = args.data or data_cfg.pop("path", None)
    if not data_path:
        raise DataError("no data file: pass --data or set [data] path")
    for key in data_cfg:
        if key not in ("n_categories", "item_blocks", "trait_names"):
            raise DataError(
                f"unknown data setting {key!r}; valid settings: "
                "path, n_categories, item_blocks, trait_names"
            )
    dataset = load_dataset(data_path, data_cfg)
    labels = _parse_variance(args.variance, est_cfg.get("variance"))
    seed = _resolve_seed(args.seed, est_cfg.get("seed"))
    effective = {
        "command": args.command,
        "data": {"path": str(data_path), **data_cfg},
        "model": config.get("model", {}),
        "estimation": {**est_cfg, "variance": labels, "seed": seed},
    }
    return dataset, data_path, config, est_cfg, labels, seed, effective


def cmd_fit_lca(args) -> int:
    dataset, data_path, config, est_cfg, labels, seed, effective = _load_fit_inputs(args)
    model_cfg = dict(config.get("model", {}))
    n_classes = int(model_cfg.get("n_classes", 0))
    if n_classes < 2:
        raise DataError("fit-lca needs [model] n_classes >= 2")
    form = model_cfg.get("structural", "covariate")
    if form not in ("covariate", "distal"):
        raise DataError(
            f"[model] structural must be 'covariate' or 'distal', got {form!r}"
        )
    if form == "covariate" and dataset.covariates.shape[1] == 0:
        raise DataError("the covariate form needs at least one 'z.' column")
    if form == "distal" and dataset.outcomes.shape[1] != 1:
        raise DataError(
            f"the distal form needs exactly one 'y.' column, "
            f"got {dataset.outcomes.shape[1]}"
        )
    cfg = _make_fit_config("lca", est_cfg, seed)

    cache_path = Path(args.step1_cache) if args.step1_cache else None
    draws = None
    if cache_path is not None and cache_path.exists():
        payload, theta1, sigma11, draws = _load_cache(cache_path, "lca", dataset)
        if int(payload["layout"].get("n_classes", n_classes)) != n_classes:
            raise DataError(
                f"step-1 cache {cache_path} was fitted with "
                f"{payload['layout'].get('n_classes')} classes, config says {n_classes}"
            )
        template = LcaMeasurementParams(
            n_classes=n_classes,
            n_categories=dataset.n_categories,
            item_names=dataset.item_names,
            tau=tuple(np.zeros(h - 1) for h in dataset.n_categories),
            lam=tuple(np.zeros((h - 1, n_classes - 1)) for h in dataset.n_categories),
        )
        measurement = template.with_free_values(theta1.values)
        pi = np.array(payload.get("nuisance", {}).get("pi", []), dtype=float)
        nuis_json = {"pi": pi.tolist()} if pi.size else {}
        step1 = {
            "parameters": {n: float(v) for n, v in zip(theta1.names, theta1.values)},
            "nuisance": nuis_json,
            "loglik": payload.get("loglik"),
            "converged": True,
            "from_cache": True,
            "cache_seed": int(payload["seed"]),
        }
        print(f"step 1: loaded from cache {cache_path}")
    else:
        fit1 = lca_step1_em(dataset, n_classes, cfg)
        measurement, theta1 = fit1.measurement, fit1.measurement.free_vector()
        sigma11 = fit1.sigma11
        step1 = {
            "parameters": {n: float(v) for n, v in zip(theta1.names, theta1.values)},
            "nuisance": {"pi": fit1.nuisance.pi.tolist()},
            "loglik": float(fit1.loglik),
            "converged": bool(fit1.converged),
            "from_cache": False,
            "cache_seed": None,
        }
        print(f"step 1: EM converged, loglik {_fmt(fit1.loglik)}")

    if form == "covariate":
        fit2 = lca_step2_covariate(dataset, measurement, cfg)
        model = lca_covariate_model(measurement, cfg)
    else:
        fit2 = lca_step2_distal(dataset, measurement, cfg)
        model = lca_distal_model(measurement, fit2.params, cfg)
    theta2 = fit2.params.free_vector()
    print(f"step 2: converged, loglik {_fmt(fit2.loglik)}")

    reports, draws = _variance_reports(
        model, dataset, theta1, theta2, sigma11, fit2.v2, labels,
        cfg.hessian_step, seed, draws,
    )
    if cache_path is not None and not cache_path.exists():
        _write_cache(cache_path, "lca", dataset, seed, theta1, sigma11,
                     step1["nuisance"], step1["loglik"], draws)
        print(f"step-1 cache written to {cache_path}")
    effective["model"] = {"n_classes": n_classes, "structural": form}
    step2 = {
        "parameters": {n: float(theta2[n]) for n in theta2.names},
        "loglik": float(fit2.loglik),
        "converged": bool(fit2.converged),
    }
    _print_fit_tables(theta2, reports)
    payload = _result_payload(
        "fit-lca", seed, effective, data_path, dataset, step1, step2, reports
    )
    _emit_result(payload, args.out)
    return EXIT_OK


def _trait_spec_from_config(model_cfg: dict, dataset: Dataset) -> TraitStructuralSpec:
    eq_cfg = model_cfg.get("equations")
    if not eq_cfg:
        raise DataError(
            "fit-irt needs [model] equations (one entry per trait with "
            "optional 'on' and 'covariates')"
        )
    equations = []
    for entry in eq_cfg:
        unknown = set(entry) - {"trait", "on", "covariates"}
        if unknown:
            raise DataError(
                f"unknown equation key {sorted(unknown)[0]!r}; valid keys: "
                "trait, on, covariates"
            )
        trait = entry.get("trait")
        if trait not in dataset.trait_names:
            raise DataError(
                f"equation trait {trait!r} is not a declared trait; "
                f"data has {list(dataset.trait_names)}"
            )
        for z in entry.get("covariates", ()):
            if z not in dataset.covariate_names:
                raise DataError(
                    f"equation covariate {z!r} has no 'z.{z}' column in the data"
                )
        for t0 in entry.get("on", ()):
            if t0 not in dataset.trait_names:
                raise DataError(f"equation regressor {t0!r} is not a declared trait")
        equations.append(TraitEquation(
            trait=trait,
            covariates=tuple(entry.get("covariates", ())),
            on_traits=tuple(entry.get("on", ())),
        ))
    correlated = tuple(
        (str(a), str(b)) for a, b in model_cfg.get("correlated", ())
    )
    return TraitStructuralSpec(tuple(equations), correlated_residuals=correlated)


def cmd_fit_irt(args) -> int:
    dataset, data_path, config, est_cfg, labels, seed, effective = _load_fit_inputs(args)
    spec = _trait_spec_from_config(dict(config.get("model", {})), dataset)
    cfg = _make_fit_config("irt", est_cfg, seed)

    cache_path = Path(args.step1_cache) if args.step1_cache else None
    draws = None
    if cache_path is not None and cache_path.exists():
        payload, theta1, sigma11, draws = _load_cache(cache_path, "irt", dataset)
        blocks_cached = payload["layout"].get("item_blocks")
        blocks_data = [
            [dataset.item_names[i] for i in block] for block in dataset.item_blocks
        ]
        if blocks_cached != blocks_data:
            raise DataError(
                f"step-1 cache {cache_path} item blocks do not match the data"
            )
        template = IrtMeasurementParams(
            item_names=dataset.item_names,
            trait_names=dataset.trait_names,
            blocks=dataset.item_blocks,
            tau=np.zeros(dataset.n_items),
            lam=np.ones(dataset.n_items),
        )
        measurement = template.with_free_values(theta1.values)
        step1 = {
            "parameters": {n: float(v) for n, v in zip(theta1.names, theta1.values)},
            "nuisance": {"mu": 0.0, "var": 1.0},
            "loglik": payload.get("loglik"),
            "converged": True,
            "from_cache": True,
            "cache_seed": int(payload["seed"]),
        }
        print(f"step 1: loaded from cache {cache_path}")
    else:
        fits = [
            irt_step1_fit(dataset, j, cfg) for j in range(len(dataset.item_blocks))
        ]
        measurement = combine_trait_blocks(dataset, fits)
        theta1 = measurement.free_vector()
        sigma11 = assemble_sigma11([f.sigma11 for f in fits])
        total_ll = float(sum(f.loglik for f in fits))
        step1 = {
            "parameters": {n: float(v) for n, v in zip(theta1.names, theta1.values)},
            "nuisance": {"mu": 0.0, "var": 1.0},
            "loglik": total_ll,
            "converged": all(f.converged for f in fits),
            "from_cache": False,
            "cache_seed": None,
        }
        print(
            f"step 1: {len(fits)} block(s) converged, summed loglik {_fmt(total_ll)}"
        )

    fit2 = irt_step2_fit(dataset, measurement, spec, cfg)
    theta2 = fit2.params.vector
    print(f"step 2: converged, loglik {_fmt(fit2.loglik)}")
    model = trait_model(measurement, spec, cfg)

    reports, draws = _variance_reports(
        model, dataset, theta1, theta2, sigma11, fit2.v2, labels,
        cfg.hessian_step, seed, draws,
    )
    if cache_path is not None and not cache_path.exists():
        _write_cache(cache_path, "irt", dataset, seed, theta1, sigma11,
                     step1["nuisance"], step1["loglik"], draws)
        print(f"step-1 cache written to {cache_path}")
    step2 = {
        "parameters": {n: float(theta2[n]) for n in theta2.names},
        "loglik": float(fit2.loglik),
        "converged": bool(fit2.converged),
    }
    _print_fit_tables(theta2, reports)
    payload = _result_payload(
        "fit-irt", seed, effective, data_path, dataset, step1, step2, reports
    )
    _emit_result(payload, args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# study command


_SCENARIO_KINDS = {"trait": TraitScenario, "class": ClassScenario}


def _build_scenarios(config: dict):
    study_cfg = dict(config.get("study", {}))
    for key in config:
        if key not in ("study", "scenario"):
            raise DataError(
                f"unknown study table {key!r}; expected study, scenario"
            )
    entries = config.get("scenario", [])
    if not entries:
        raise DataError("the study file declares no [[scenario]] entries")
    defaults = {
        "replications": study_cfg.get("replications"),
        "m_values": study_cfg.get("m_values"),
        "seed": study_cfg.get("seed"),
    }
    scenarios = []
    for i, entry in enumerate(entries):
        entry = dict(entry)
        kind = entry.pop("kind", None)
        if kind not in _SCENARIO_KINDS:
            raise DataError(
                f"scenario {i + 1} needs kind 'trait' or 'class', got {kind!r}"
            )
        cls = _SCENARIO_KINDS[kind]
        allowed = {f.name for f in dataclass_fields(cls)}
        unknown = set(entry) - allowed
        if unknown:
            raise DataError(
                f"scenario {i + 1} has unknown field {sorted(unknown)[0]!r}; "
                f"valid fields: {sorted(allowed)}"
            )
        for key, value in defaults.items():
            if key not in entry and value is not None:
                entry[key] = value
        if "m_values" in entry:
            entry["m_values"] = tuple(int(m) for m in entry["m_values"])
        try:
            scenarios.append(cls(**entry))
        except TypeError as exc:
            raise DataError(f"scenario {i + 1} is incomplete: {exc}") from None
    return scenarios, study_cfg


def cmd_study(args) -> int:
    config = load_config_file(args.config)
    scenarios, study_cfg = _build_scenarios(config)
    estimators = tuple(study_cfg.get("estimators",
                                     ("naive", "asymptotic", "simulation")))
    jobs = args.jobs if args.jobs is not None else int(study_cfg.get("jobs", 1))
    seed_override = _resolve_seed(args.seed, None) if (
        args.seed is not None or os.environ.get(_SEED_ENV)
    ) else None
    out_dir = Path(args.out) if args.out else Path(".")
    out_dir.mkdir(parents=True, exist_ok=True)

    results = []
    for sc in scenarios:
        rng = RngStream(seed_override, 0) if seed_override is not None else None
        results.append(run_study(sc, estimators=estimators, rng=rng, jobs=jobs))

    records = records_frame(results)
    records_path = out_dir / "records.csv"
    records.to_csv(records_path, index=False)

    metrics = metrics_frame(results)
    metrics.columns = [f"{field}:{label}" for field, label in metrics.columns]
    metrics_path = out_dir / "metrics.csv"
    metrics.to_csv(metrics_path)

    print(format_study(results))
    print(f"\nper-replication records: {records_path}")
    print(f"aggregate metrics: {metrics_path}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise DataError("a command is required: fit-lca, fit-irt, or study")
        if getattr(args, "jobs", None) is not None and args.jobs == 0:
            raise DataError("--jobs must be a positive count or -1 (all cores)")
        if args.command == "fit-lca":
            return cmd_fit_lca(args)
        if args.command == "fit-irt":
            return cmd_fit_irt(args)
        return cmd_study(args)
    except DataError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (ConvergenceError, NumericError) as exc:
        print(f"estimation failed: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except OSError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
