"""Monte Carlo study engine: data generators and the replication runner.

Two scenario families are provided.  The trait family generates a
two-trait recursive system (eta2 regressed on eta1) with four binary
items per trait, calibrated through two variance-explained quantities:
``R_eta_sq`` for the structural slope and ``R_Y_sq`` for the common item
loading.  The class family generates a three-class model with ten binary
items whose per-class response profile is controlled by a separation
probability, plus one standard-normal covariate driving class
membership through a multinomial logit.

``run_study`` runs the full two-step pipeline per replication (optional
one-step baseline), computes every requested variance method, and
aggregates the two headline metrics per estimator: the SE ratio (mean
estimated standard error over the standard deviation of the point
estimates) and the coverage of 95% Wald intervals.  Per-replication
rows are retained so every aggregate can be re-derived from the raw
records.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy.special import expit

from .data import Dataset
from .errors import ConvergenceError, DataError, NumericError, TwoStepError
from .latent_class import (
    LcaConfig,
    LcaMeasurementParams,
    align_classes,
    covariate_relabel_matrix,
    lca_covariate_model,
    lca_item_response_probs,
    lca_onestep,
    lca_step1_em,
    lca_step2_covariate,
    relabel_covariate_structural,
    relabel_step1,
)
from .latent_trait import (
    IrtConfig,
    TraitEquation,
    TraitStructuralSpec,
    combine_trait_blocks,
    irt_onestep,
    irt_step1_fit,
    irt_step2_fit,
    trait_model,
)
from .model_core import RngStream
from .variance import (
    asymptotic_variance,
    assemble_sigma11,
    naive_variance,
    simulation_variance_multi,
    wald_interval,
)

__all__ = [
    "EFFECT_SLOPES",
    "SEPARATION_PROBS",
    "TraitScenario",
    "ClassScenario",
    "TraitSample",
    "ClassSample",
    "EstimatorSummary",
    "StudyMetrics",
    "solve_lambda_from_r2",
    "gen_trait_data",
    "gen_class_data",
    "class_true_probs",
    "entropy_r2",
    "trait_study_spec",
    "run_study",
    "records_frame",
    "metrics_frame",
    "format_study",
]

# Named effect sizes for the class design: slopes sqrt(0), sqrt(0.2), sqrt(0.4).
EFFECT_SLOPES = {
    "none": 0.0,
    "mild": math.sqrt(0.2),
    "strong": math.sqrt(0.4),
}

# Named separation levels: probability of the class-typical response.
SEPARATION_PROBS = {"moderate": 0.87, "large": 0.91}

_ESTIMATOR_TAGS = ("naive", "asymptotic", "simulation", "onestep")

# Stream layout per replication: data generation uses the replication
# index itself; fitting and simulation draws use offset ids so the three
# uses never share a stream.
_FIT_STREAM_BASE = 1_000_000
_DRAW_STREAM_BASE = 2_000_000

_TRAIT_TARGET = "eta2:on.eta1"
_CLASS_TARGETS = ("class2:z.x", "class3:z.x")


def solve_lambda_from_r2(r_y_sq: float) -> float:
    """Common loading giving items the requested variance share.

    Inverts ``R = lam^2 / (lam^2 + pi^2/3)``, the share of latent-response
    variance explained by the trait under a logistic residual.
    """
    r = float(r_y_sq)
    if not 0.0 <= r < 1.0:
        raise DataError(f"R_Y_sq must lie in [0, 1), got {r}")
    return math.sqrt(r / (1.0 - r) * math.pi**2 / 3.0)


@dataclass(frozen=True)
class TraitScenario:
    """One cell of the latent trait design."""

    n: int
    r_eta_sq: float
    r_y_sq: float
    replications: int = 100
    m_values: tuple[int, ...] = (50, 100)
    seed: int = 0
    p: int = 4

    def __post_init__(self):
        if self.n < 2:
            raise DataError(f"sample size must be >= 2, got {self.n}")
        if not 0.0 <= self.r_eta_sq < 1.0:
            raise DataError(f"R_eta_sq must lie in [0, 1), got {self.r_eta_sq}")
        if not 0.0 <= self.r_y_sq < 1.0:
            raise DataError(f"R_Y_sq must lie in [0, 1), got {self.r_y_sq}")
        if self.replications < 1:
            raise DataError("replications must be >= 1")
        if self.p < 2:
            raise DataError("at least 2 items per trait are required")
        ms = tuple(int(m) for m in self.m_values)
        if len(set(ms)) != len(ms) or any(m < 2 for m in ms):
            raise DataError(f"M values must be distinct and >= 2, got {ms}")
        object.__setattr__(self, "m_values", ms)

    @property
    def beta1(self) -> float:
        # var(eta2) = beta1^2 + sigma2^2 = 1, so beta1 = sqrt(R_eta_sq)
        return math.sqrt(self.r_eta_sq)

    @property
    def sigma2_sq(self) -> float:
        return 1.0 - self.r_eta_sq

    @property
    def loading(self) -> float:
        return solve_lambda_from_r2(self.r_y_sq)

    @property
    def scenario_id(self) -> str:
        return f"trait_n{self.n}_re{self.r_eta_sq:g}_ry{self.r_y_sq:g}"

    @property
    def target(self) -> str:
        return _TRAIT_TARGET

    @property
    def true_value(self) -> float:
        return self.beta1


@dataclass(frozen=True)
class ClassScenario:
    """One cell of the latent class design."""

    n: int
    effect: str
    separation: object = "moderate"
    replications: int = 100
    m_values: tuple[int, ...] = (50, 100)
    seed: int = 0
    n_classes: int = 3
    p: int = 10
    intercepts: tuple[float, ...] = (0.1, 0.2)

    def __post_init__(self):
        if self.n < 2:
            raise DataError(f"sample size must be >= 2, got {self.n}")
        if self.effect not in EFFECT_SLOPES:
            raise DataError(
                f"effect must be one of {sorted(EFFECT_SLOPES)}, got {self.effect!r}"
            )
        sep = self.separation
        if isinstance(sep, str):
            if sep not in SEPARATION_PROBS:
                raise DataError(
                    f"separation must be one of {sorted(SEPARATION_PROBS)} "
                    f"or a probability, got {sep!r}"
                )
        elif not 0.5 < float(sep) < 1.0:
            raise DataError(f"separation probability must be in (0.5, 1), got {sep}")
        if self.n_classes != 3:
            raise DataError("the class design is defined for exactly 3 classes")
        if self.p < 2:
            raise DataError("at least 2 items are required")
        if len(self.intercepts) != self.n_classes - 1:
            raise DataError("one intercept per non-reference class is required")
        if self.replications < 1:
            raise DataError("replications must be >= 1")
        ms = tuple(int(m) for m in self.m_values)
        if len(set(ms)) != len(ms) or any(m < 2 for m in ms):
            raise DataError(f"M values must be distinct and >= 2, got {ms}")
        object.__setattr__(self, "m_values", ms)

    @property
    def slope(self) -> float:
        return EFFECT_SLOPES[self.effect]

    @property
    def separation_prob(self) -> float:
        if isinstance(self.separation, str):
            return SEPARATION_PROBS[self.separation]
        return float(self.separation)

    @property
    def scenario_id(self) -> str:
        return f"class_n{self.n}_{self.effect}_sep{self.separation_prob:g}"

    @property
    def target(self) -> str:
        return _CLASS_TARGETS[0]

    @property
    def true_value(self) -> float:
        return self.slope


@dataclass(frozen=True)
class TraitSample:
    """Generated trait dataset with the hidden truth retained."""

    data: Dataset
    eta1: np.ndarray
    eta2: np.ndarray


@dataclass(frozen=True)
class ClassSample:
    """Generated class dataset with the hidden truth retained.

    ``classes`` holds 0-based class indices (index into the class axis).
    """

    data: Dataset
    classes: np.ndarray
    z: np.ndarray


def gen_trait_data(s: TraitScenario, rep: int) -> TraitSample:
    """Draw one trait-scenario dataset.

    eta1 is standard normal; eta2 given eta1 is normal with mean
    ``beta1 * eta1`` and variance ``sigma2_sq`` (zero structural
    intercept).  Items are binary with common intercept 0, which makes
    every marginal response probability exactly one half, and common
    loading ``solve_lambda_from_r2(R_Y_sq)``.  Identical ``(seed, rep)``
    gives an identical sample.
    """
    if rep < 0:
        raise DataError(f"replication index must be >= 0, got {rep}")
    g = RngStream(s.seed, rep).generator()
    n, p = s.n, s.p
    eta1 = g.standard_normal(n)
    eta2 = s.beta1 * eta1 + math.sqrt(s.sigma2_sq) * g.standard_normal(n)
    u = g.random((n, 2 * p))
    probs = expit(s.loading * np.column_stack([np.tile(eta1, (p, 1)).T,
                                              np.tile(eta2, (p, 1)).T]))
    items = 1 + (u < probs).astype(int)
    data = Dataset.from_arrays(
        items,
        n_categories=2,
        item_blocks=(tuple(range(p)), tuple(range(p, 2 * p))),
    )
    return TraitSample(data=data, eta1=eta1, eta2=eta2)


def _class_high_probs(s: ClassScenario) -> np.ndarray:
    """(C, p) probabilities of the high response per class and item.

    Class 1 favors the high response on every item, class 2 on the first
    half only, class 3 on none; "favors" means the separation
    probability.
    """
    sep = s.separation_prob
    half = s.p // 2
    tbl = np.full((s.n_classes, s.p), 1.0 - sep)
    tbl[0, :] = sep
    tbl[1, :half] = sep
    return tbl


def class_true_probs(s: ClassScenario) -> list[np.ndarray]:
    """True item-response tables, one ``(2, C)`` table per item.

    Row 0 is the low response (code 1), row 1 the high response (code
    2).  Used as the alignment reference for estimated classes.
    """
    high = _class_high_probs(s)
    return [np.vstack([1.0 - high[:, k], high[:, k]]) for k in range(s.p)]


def gen_class_data(s: ClassScenario, rep: int) -> ClassSample:
    """Draw one class-scenario dataset.

    Z is standard normal; class membership follows a multinomial logit
    with linear predictors ``0`` and ``intercepts[c] + slope * Z``; items
    are binary with per-class high-response probabilities from the
    separation pattern.  Identical ``(seed, rep)`` gives an identical
    sample.
    """
    if rep < 0:
        raise DataError(f"replication index must be >= 0, got {rep}")
    g = RngStream(s.seed, rep).generator()
    n = s.n
    z = g.standard_normal(n)
    lin = np.zeros((n, s.n_classes))
    for c in range(1, s.n_classes):
        lin[:, c] = s.intercepts[c - 1] + s.slope * z
    lin -= lin.max(axis=1, keepdims=True)
    pr = np.exp(lin)
    pr /= pr.sum(axis=1, keepdims=True)
    cum = np.cumsum(pr, axis=1)
    u = g.random(n)
    classes = np.minimum((u[:, None] > cum).sum(axis=1), s.n_classes - 1)
    high = _class_high_probs(s)[classes]
    items = 1 + (g.random((n, s.p)) < high).astype(int)
    data = Dataset.from_arrays(
        items,
        n_categories=2,
        item_blocks=(tuple(range(s.p)),),
        trait_names=("class",),
        covariates=z[:, None],
        covariate_names=("x",),
    )
    return ClassSample(data=data, classes=classes, z=z)


def entropy_r2(
    m: LcaMeasurementParams,
    pi: np.ndarray,
    rng: RngStream | None = None,
    n_draws: int = 100_000,
) -> float:
    """Entropy-based R-squared of a class measurement model.

    One minus the ratio of expected posterior class entropy to prior
    class entropy, the posterior being taken over the model's own
    pattern distribution.  Exact enumeration for up to 12 binary items;
    Monte Carlo over ``n_draws`` sampled patterns otherwise.  Returns 0
    for a single-class model (no membership information to recover).
    """
    pi = np.asarray(pi, dtype=float).reshape(-1)
    if pi.shape[0] != m.n_classes:
        raise DataError(
            f"{pi.shape[0]} class proportions supplied for {m.n_classes} classes"
        )
    if np.any(pi < 0) or abs(float(pi.sum()) - 1.0) > 1e-8:
        raise DataError("class proportions must be nonnegative and sum to 1")
    h_prior = float(-np.sum(pi[pi > 0] * np.log(pi[pi > 0])))
    if h_prior <= 0.0:
        return 0.0
    probs = lca_item_response_probs(m)

    if all(h == 2 for h in m.n_categories) and m.n_items <= 12:
        # exact: build the (2^p, C) pattern-by-class probability table
        tbl = np.ones((1, m.n_classes))
        for k in range(m.n_items):
            tbl = np.concatenate(
                [tbl * probs[k][0][None, :], tbl * probs[k][1][None, :]], axis=0
            )
        joint = tbl * pi[None, :]
        marg = joint.sum(axis=1)
        keep = marg > 0
        post = joint[keep] / marg[keep, None]
        plogp = np.where(post > 0, post * np.log(np.where(post > 0, post, 1.0)), 0.0)
        expected_h = float(-(marg[keep] * plogp.sum(axis=1)).sum())
    else:
        if n_draws < 2:
            raise DataError(f"n_draws must be >= 2, got {n_draws}")
        g = (rng if rng is not None else RngStream(0, 0)).generator()
        classes = g.choice(m.n_classes, size=n_draws, p=pi / pi.sum())
        logjoint = np.tile(np.log(np.where(pi > 0, pi, 1e-300)), (n_draws, 1))
        for k, h in enumerate(m.n_categories):
            cum = np.cumsum(probs[k][:, classes], axis=0)
            codes = np.minimum((g.random(n_draws)[None, :] > cum).sum(axis=0), h - 1)
            logjoint += np.log(np.maximum(probs[k][codes, :], 1e-300))
        shift = logjoint.max(axis=1, keepdims=True)
        w = np.exp(logjoint - shift)
        post = w / w.sum(axis=1, keepdims=True)
        plogp = np.where(post > 0, post * np.log(np.where(post > 0, post, 1.0)), 0.0)
        expected_h = float(-plogp.sum(axis=1).mean())
    return float(min(1.0, max(0.0, 1.0 - expected_h / h_prior)))


def trait_study_spec() -> TraitStructuralSpec:
    """Structural system of the trait design: eta2 regressed on eta1."""
    return TraitStructuralSpec(
        (TraitEquation("eta1"), TraitEquation("eta2", on_traits=("eta1",)))
    )


@dataclass(frozen=True)
class EstimatorSummary:
    """Aggregated metrics for one estimator column."""

    estimator: str
    n_used: int
    mean_se: float
    sd_estimate: float
    se_ratio: float
    coverage: float

    def __post_init__(self):
        if not 0.0 <= self.coverage <= 1.0:
            raise DataError(f"coverage must lie in [0, 1], got {self.coverage}")
        if not self.se_ratio > 0.0:
            raise DataError(f"SE ratio must be positive, got {self.se_ratio}")


@dataclass(frozen=True)
class StudyMetrics:
    """Aggregated study output plus the raw per-replication records."""

    scenario: str
    target: str
    true_value: float
    n_replications: int
    n_failed: int
    n_omitted: int
    summaries: tuple[EstimatorSummary, ...]
    records: tuple[dict, ...]
    failures: tuple[tuple[int, str], ...] = ()

    def summary(self, estimator: str) -> EstimatorSummary:
        for s in self.summaries:
            if s.estimator == estimator:
                return s
        raise DataError(f"no summary for estimator {estimator!r}")


def _record(
    scenario_id: str,
    rep: int,
    estimator: str,
    parameter: str,
    estimate: float,
    se: float,
    true_value: float,
    m: int = 0,
    n_failed_draws: int = 0,
) -> dict:
    lo, hi = wald_interval(float(estimate), float(se))
    return {
        "scenario": scenario_id,
        "rep": rep,
        "estimator": estimator,
        "parameter": parameter,
        "estimate": float(estimate),
        "se": float(se),
        "ci_low": lo,
        "ci_high": hi,
        "ci_hit": bool(lo <= true_value <= hi),
        "converged": True,
        "m": int(m),
        "n_failed_draws": int(n_failed_draws),
        "omitted": False,
        "note": "",
    }


def _failure_record(scenario_id: str, rep: int, message: str) -> dict:
    return {
        "scenario": scenario_id,
        "rep": rep,
        "estimator": "twostep",
        "parameter": "",
        "estimate": math.nan,
        "se": math.nan,
        "ci_low": math.nan,
        "ci_high": math.nan,
        "ci_hit": False,
        "converged": False,
        "m": 0,
        "n_failed_draws": 0,
        "omitted": False,
        "note": message,
    }


def _variance_rows(
    model,
    data,
    theta1,
    theta2,
    sigma11,
    estimators,
    s,
    rep,
    estimate,
    v2,
    step,
):
    """Rows for the requested two-step variance methods at one solution."""
    rows = []
    sid = s.scenario_id
    if "naive" in estimators:
        rep_n = naive_variance(model, data, theta1, theta2, step=step, v2=v2)
        rows.append(
            _record(sid, rep, "naive", s.target, estimate,
                    rep_n.se()[s.target], s.true_value)
        )
    if "asymptotic" in estimators:
        rep_a = asymptotic_variance(
            model, data, theta1, theta2, sigma11, step=step, v2=v2
        )
        rows.append(
            _record(sid, rep, "asymptotic", s.target, estimate,
                    rep_a.se()[s.target], s.true_value)
        )
    if "simulation" in estimators:
        multi = simulation_variance_multi(
            model, data, theta1, theta2, sigma11,
            m_values=list(s.m_values),
            rng=RngStream(s.seed, _DRAW_STREAM_BASE + rep),
            step=step, v2=v2,
        )
        for m in s.m_values:
            rep_m = multi[m]
            rows.append(
                _record(sid, rep, f"simulation:{m}", s.target, estimate,
                        rep_m.se()[s.target], s.true_value,
                        m=m, n_failed_draws=rep_m.n_failed)
            )
    return rows


def _trait_replication(s: TraitScenario, rep: int, estimators: tuple[str, ...]) -> dict:
    out = {"rep": rep, "rows": [], "failed": None, "omitted": False, "note": ""}
    try:
        sample = gen_trait_data(s, rep)
        data = sample.data
        cfg = IrtConfig(rng=RngStream(s.seed, _FIT_STREAM_BASE + rep))
        spec = trait_study_spec()
        f1 = irt_step1_fit(data, 0, cfg)
        f2 = irt_step1_fit(data, 1, cfg)
        meas = combine_trait_blocks(data, (f1, f2))
        fit2 = irt_step2_fit(data, meas, spec, cfg)
        theta1 = meas.free_vector()
        sigma11 = assemble_sigma11([f1.sigma11, f2.sigma11])
        estimate = fit2.params.vector[s.target]
        model = trait_model(meas, spec, cfg)
        out["rows"] = _variance_rows(
            model, data, theta1, fit2.params.vector, sigma11, estimators,
            s, rep, estimate, fit2.v2, cfg.hessian_step,
        )
    except TwoStepError as exc:
        out["failed"] = f"{type(exc).__name__}: {exc}"
        return out

    if "onestep" in estimators:
        try:
            one = irt_onestep(data, spec, cfg)
        except TwoStepError as exc:
            out["omitted"] = True
            out["note"] = f"one-step failed: {type(exc).__name__}: {exc}"
        else:
            out["rows"].append(
                _record(s.scenario_id, rep, "onestep", s.target,
                        one.beta1, one.beta1_se, s.true_value)
            )
            if abs(one.beta1 - estimate) > 0.3:
                out["omitted"] = True
                out["note"] = (
                    f"one-step and two-step slope differ by "
                    f"{abs(one.beta1 - estimate):.3f} > 0.3"
                )
    return out


def _class_replication(s: ClassScenario, rep: int, estimators: tuple[str, ...]) -> dict:
    out = {"rep": rep, "rows": [], "failed": None, "omitted": False, "note": ""}
    reference = class_true_probs(s)
    try:
        sample = gen_class_data(s, rep)
        data = sample.data
        cfg = LcaConfig(rng=RngStream(s.seed, _FIT_STREAM_BASE + rep))
        f1 = lca_step1_em(data, s.n_classes, cfg)
        f1 = relabel_step1(f1, align_classes(f1.measurement, reference))
        fit2 = lca_step2_covariate(data, f1.measurement, cfg)
        theta1 = f1.measurement.free_vector()
        theta2 = fit2.params.free_vector()
        estimate = theta2[s.target]
        model = lca_covariate_model(f1.measurement, cfg)
        out["rows"] = _variance_rows(
            model, data, theta1, theta2, f1.sigma11, estimators,
            s, rep, estimate, fit2.v2, cfg.hessian_step,
        )
    except TwoStepError as exc:
        out["failed"] = f"{type(exc).__name__}: {exc}"
        return out

    if "onestep" in estimators:
        try:
            one = lca_onestep(data, s.n_classes, "covariate", cfg)
            if one.cov is None:
                raise ConvergenceError("one-step covariance unavailable")
            perm = align_classes(one.measurement, reference)
            coef = relabel_covariate_structural(one.structural, perm)
            names = one.structural.free_names()
            idx = [one.cov.axis_names.index(nm) for nm in names]
            a = covariate_relabel_matrix(s.n_classes, one.structural.coef.shape[1], perm)
            cov = a @ one.cov.m[np.ix_(idx, idx)] @ a.T
            one_vec = coef.free_vector()
            k = names.index(s.target)
            one_est = one_vec[s.target]
            one_se = math.sqrt(max(cov[k, k], 0.0))
        except TwoStepError as exc:
            out["omitted"] = True
            out["note"] = f"one-step failed: {type(exc).__name__}: {exc}"
        else:
            out["rows"].append(
                _record(s.scenario_id, rep, "onestep", s.target,
                        one_est, one_se, s.true_value)
            )
            gaps = [
                abs(one_vec[t] - theta2[t]) for t in _CLASS_TARGETS
            ]
            if max(gaps) > 0.5:
                out["omitted"] = True
                out["note"] = (
                    f"one-step and two-step coefficients differ by "
                    f"{max(gaps):.3f} > 0.5"
                )
    return out


def _estimator_sort_key(label: str) -> tuple[int, int]:
    if label == "onestep":
        return (0, 0)
    if label == "naive":
        return (1, 0)
    if label == "asymptotic":
        return (2, 0)
    if label.startswith("simulation:"):
        return (3, int(label.split(":", 1)[1]))
    return (4, 0)


def run_study(
    scenario,
    estimators: Sequence[str] = ("naive", "asymptotic", "simulation"),
    rng: RngStream | None = None,
    jobs: int = 1,
) -> StudyMetrics:
    """Run one scenario end to end and aggregate per-estimator metrics.

    Replications execute independently (optionally in parallel via
    ``jobs``); each one uses streams keyed by its replication index, so
    results are identical for any job count and any execution order.
    Aggregation drops failed and omitted replications; more than 20%
    failures aborts with the collected diagnostics.
    """
    estimators = tuple(dict.fromkeys(estimators))
    for e in estimators:
        if e not in _ESTIMATOR_TAGS:
            raise DataError(
                f"unknown estimator {e!r}; choose from {_ESTIMATOR_TAGS}"
            )
    if not estimators:
        raise DataError("at least one estimator is required")
    if isinstance(scenario, TraitScenario):
        rep_fn = _trait_replication
    elif isinstance(scenario, ClassScenario):
        rep_fn = _class_replication
    else:
        raise DataError(f"unsupported scenario type {type(scenario).__name__}")
    if rng is not None:
        scenario = replace(scenario, seed=rng.seed)
    r = scenario.replications
    if r < 2:
        raise DataError(f"run_study needs replications >= 2, got {r}")
    if r > _FIT_STREAM_BASE:
        raise DataError(f"replications must be <= {_FIT_STREAM_BASE}")

    if jobs == 1:
        results = [rep_fn(scenario, i, estimators) for i in range(r)]
    else:
        results = Parallel(n_jobs=jobs)(
            delayed(rep_fn)(scenario, i, estimators) for i in range(r)
        )
    results.sort(key=lambda d: d["rep"])

    failures = tuple(
        (d["rep"], d["failed"]) for d in results if d["failed"] is not None
    )
    if len(failures) > 0.2 * r:
        details = "; ".join(f"rep {i}: {msg}" for i, msg in failures[:5])
        raise ConvergenceError(
            f"{len(failures)} of {r} replications failed (> 20%): {details}"
        )

    records: list[dict] = []
    for d in results:
        if d["failed"] is not None:
            records.append(_failure_record(scenario.scenario_id, d["rep"], d["failed"]))
            continue
        for row in d["rows"]:
            row["omitted"] = d["omitted"]
            if d["omitted"] and not row["note"]:
                row["note"] = d["note"]
            records.append(row)

    n_omitted = sum(1 for d in results if d["failed"] is None and d["omitted"])
    labels = sorted(
        {row["estimator"] for row in records if row["converged"]},
        key=_estimator_sort_key,
    )
    summaries = []
    for label in labels:
        rows = [
            row for row in records
            if row["estimator"] == label and row["converged"] and not row["omitted"]
        ]
        if len(rows) < 2:
            raise NumericError(
                f"estimator {label!r} retained {len(rows)} replications; "
                "need at least 2 to aggregate"
            )
        ests = np.array([row["estimate"] for row in rows])
        ses = np.array([row["se"] for row in rows])
        sd = float(np.std(ests, ddof=1))
        if sd <= 0.0:
            raise NumericError(f"degenerate point estimates for {label!r}")
        summaries.append(
            EstimatorSummary(
                estimator=label,
                n_used=len(rows),
                mean_se=float(ses.mean()),
                sd_estimate=sd,
                se_ratio=float(ses.mean()) / sd,
                coverage=float(np.mean([row["ci_hit"] for row in rows])),
            )
        )
    return StudyMetrics(
        scenario=scenario.scenario_id,
        target=scenario.target,
        true_value=scenario.true_value,
        n_replications=r,
        n_failed=len(failures),
        n_omitted=n_omitted,
        summaries=tuple(summaries),
        records=tuple(records),
        failures=failures,
    )


_RECORD_COLUMNS = (
    "scenario", "rep", "estimator", "parameter", "estimate", "se",
    "ci_low", "ci_high", "ci_hit", "converged", "m", "n_failed_draws",
    "omitted", "note",
)


def records_frame(results) -> pd.DataFrame:
    """Per-replication audit rows as a data frame (fixed column order)."""
    if isinstance(results, StudyMetrics):
        results = [results]
    rows = [row for m in results for row in m.records]
    return pd.DataFrame(rows, columns=list(_RECORD_COLUMNS))


def _display_label(estimator: str) -> str:
    if estimator.startswith("simulation:"):
        return f"M={estimator.split(':', 1)[1]}"
    return {"onestep": "one-step", "asymptotic": "asympt."}.get(estimator, estimator)


def metrics_frame(results, fields: Sequence[str] = ("se_ratio", "coverage")) -> pd.DataFrame:
    """Aggregate table: one row per scenario, one column per estimator.

    With several fields the columns are a (field, estimator) MultiIndex,
    mirroring the side-by-side ratio/coverage layout of the study
    tables.
    """
    if isinstance(results, StudyMetrics):
        results = [results]
    labels: list[str] = []
    for m in results:
        for s in m.summaries:
            if s.estimator not in labels:
                labels.append(s.estimator)
    labels.sort(key=_estimator_sort_key)
    data = {}
    for f in fields:
        for label in labels:
            col = []
            for m in results:
                try:
                    col.append(getattr(m.summary(label), f))
                except DataError:
                    col.append(math.nan)
            data[(f, _display_label(label))] = col
    frame = pd.DataFrame(data, index=[m.scenario for m in results])
    frame.index.name = "scenario"
    if len(fields) == 1:
        frame.columns = [c[1] for c in frame.columns]
    return frame


def format_study(results) -> str:
    """Pretty text tables (3 decimals): SE ratios, then coverage."""
    if isinstance(results, StudyMetrics):
        results = [results]
    parts = []
    for f, title in (("se_ratio", "SE ratio"), ("coverage", "Coverage")):
        frame = metrics_frame(results, fields=(f,))
        parts.append(f"{title}:\n{frame.to_string(float_format=lambda v: f'{v:.3f}')}")
    omitted = {m.scenario: (m.n_failed, m.n_omitted) for m in results}
    lines = [
        f"  {sid}: {nf} failed, {no} omitted"
        for sid, (nf, no) in omitted.items()
        if nf or no
    ]
    if lines:
        parts.append("Dropped replications:\n" + "\n".join(lines))
    return "\n\n".join(parts)
