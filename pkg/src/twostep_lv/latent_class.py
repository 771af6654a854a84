"""Latent class measurement and structural models.

The measurement model assigns each unit to one of ``C`` unobserved
classes; item responses are conditionally independent given the class,
with per-item category probabilities parameterized as multinomial
logits (intercepts ``tau`` for the first class, loadings ``lam`` as
class contrasts; the first category and the first class are the fixed
references).

Two structural forms are supported on top of a fitted measurement
model:

* covariate form: class membership follows a multinomial logistic
  regression on observed covariates (class 1 is the reference);
* distal form: class proportions are free parameters and a continuous
  outcome is normal within class with a common residual standard
  deviation (class 1 is the reference mean).

Step 1 fits the measurement model alone by EM.  Step 2 maximizes the
full-model log-likelihood over the structural parameters only, with the
measurement parameters frozen at their step-1 values.  A one-step
(joint) fit is provided as a comparison baseline.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import block_diag
from scipy.special import logsumexp

from .data import Dataset
from .errors import ConvergenceError, DataError, NumericError, SeparationError
from .model_core import CovMatrix, ParamVector, RngStream, numeric_hessian_block
from .model_core import _repair_array
from .variance import RefitResult

__all__ = [
    "LcaMeasurementParams",
    "LcaStep1Nuisance",
    "LcaCovariateStructuralParams",
    "LcaDistalStructuralParams",
    "LcaConfig",
    "LcaStep1Result",
    "LcaStep2Result",
    "LcaOnestepResult",
    "lca_item_response_probs",
    "lca_pattern_prob",
    "lca_step1_em",
    "lca_step2_covariate",
    "lca_step2_distal",
    "lca_onestep",
    "align_classes",
    "lca_covariate_model",
    "lca_distal_model",
    "class_posteriors",
    "relabel_measurement",
    "relabel_nuisance",
    "relabel_step1",
    "relabel_covariate_structural",
    "relabel_distal_structural",
    "measurement_relabel_matrix",
    "covariate_relabel_matrix",
    "distal_relabel_matrix",
]

_PROB_CLAMP = 1e-6
_LOG_FLOOR = 1e-300


@dataclass(frozen=True)
class LcaMeasurementParams:
    """Multinomial-logit item parameters for a ``C``-class model.

    ``tau[k]`` has shape ``(h_k - 1,)`` (categories 2..h of item ``k``)
    and ``lam[k]`` has shape ``(h_k - 1, C - 1)`` (classes 2..C).  The
    first category and first class are fixed at zero.
    """

    n_classes: int
    n_categories: tuple[int, ...]
    item_names: tuple[str, ...]
    tau: tuple[np.ndarray, ...]
    lam: tuple[np.ndarray, ...]

    def __post_init__(self):
        if self.n_classes < 1:
            raise DataError(f"class count must be >= 1, got {self.n_classes}")
        if len(self.n_categories) != len(self.item_names):
            raise DataError("one category count per item is required")
        taus, lams = [], []
        for k, h in enumerate(self.n_categories):
            t = np.array(self.tau[k], dtype=float, copy=True).reshape(h - 1)
            l = np.array(self.lam[k], dtype=float, copy=True).reshape(
                h - 1, max(self.n_classes - 1, 0)
            )
            if not (np.all(np.isfinite(t)) and np.all(np.isfinite(l))):
                raise DataError(f"non-finite parameter for item {self.item_names[k]!r}")
            taus.append(t)
            lams.append(l)
        object.__setattr__(self, "tau", tuple(taus))
        object.__setattr__(self, "lam", tuple(lams))
        object.__setattr__(self, "n_categories", tuple(int(h) for h in self.n_categories))
        object.__setattr__(self, "item_names", tuple(self.item_names))

    @property
    def n_items(self) -> int:
        return len(self.item_names)

    def free_names(self) -> tuple[str, ...]:
        names: list[str] = []
        for k, name in enumerate(self.item_names):
            h = self.n_categories[k]
            for l in range(2, h + 1):
                names.append(f"item.{name}:tau{l}")
            for l in range(2, h + 1):
                for c in range(2, self.n_classes + 1):
                    names.append(f"item.{name}:lam{l}c{c}")
        return tuple(names)

    def free_vector(self) -> ParamVector:
        parts = []
        for k in range(self.n_items):
            parts.append(self.tau[k])
            parts.append(self.lam[k].reshape(-1))
        values = np.concatenate(parts) if parts else np.empty(0)
        return ParamVector(values, self.free_names())

    def with_free_values(self, values: np.ndarray) -> "LcaMeasurementParams":
        values = np.asarray(values, dtype=float).reshape(-1)
        taus, lams = [], []
        at = 0
        cm1 = self.n_classes - 1
        for k, h in enumerate(self.n_categories):
            taus.append(values[at : at + h - 1])
            at += h - 1
            lams.append(values[at : at + (h - 1) * cm1].reshape(h - 1, cm1))
            at += (h - 1) * cm1
        if at != values.shape[0]:
            raise DataError(
                f"free vector has {values.shape[0]} entries, expected {at}"
            )
        return LcaMeasurementParams(
            n_classes=self.n_classes,
            n_categories=self.n_categories,
            item_names=self.item_names,
            tau=tuple(taus),
            lam=tuple(lams),
        )

    @staticmethod
    def from_probs(
        probs: Sequence[np.ndarray],
        item_names: Sequence[str] | None = None,
        clamp: float = _PROB_CLAMP,
    ) -> "LcaMeasurementParams":
        """Build logit parameters from item-response probability tables.

        ``probs[k]`` has shape ``(h_k, C)``.  Probabilities are clamped
        to ``[clamp, 1 - clamp]`` before the log-ratio transform, so
        boundary tables (0/1 entries) stay representable.
        """
        n_classes = int(probs[0].shape[1])
        if item_names is None:
            item_names = tuple(str(k + 1) for k in range(len(probs)))
        taus, lams, cats = [], [], []
        for p in probs:
            q = np.clip(np.asarray(p, dtype=float), clamp, 1.0 - clamp)
            logq = np.log(q)
            contrast = logq[1:, :] - logq[0, :][None, :]
            taus.append(contrast[:, 0].copy())
            lams.append(contrast[:, 1:] - contrast[:, 0][:, None])
            cats.append(p.shape[0])
        return LcaMeasurementParams(
            n_classes=n_classes,
            n_categories=tuple(cats),
            item_names=tuple(item_names),
            tau=tuple(taus),
            lam=tuple(lams),
        )


@dataclass(frozen=True)
class LcaStep1Nuisance:
    """Class proportions from the measurement-only fit."""

    pi: np.ndarray

    def __post_init__(self):
        pi = np.array(self.pi, dtype=float, copy=True).reshape(-1)
        if pi.shape[0] == 0:
            raise DataError("class proportions must be nonempty")
        if pi.shape[0] == 1:
            # Single-class model: the proportion is exactly 1.
            if abs(float(pi[0]) - 1.0) > 1e-12:
                raise DataError("single-class proportion must be 1")
        elif np.any(pi <= 0.0) or np.any(pi >= 1.0):
            raise DataError("class proportions must lie strictly inside (0, 1)")
        if abs(float(pi.sum()) - 1.0) > 1e-12:
            raise DataError(f"class proportions sum to {float(pi.sum())!r}, not 1")
        object.__setattr__(self, "pi", pi)


@dataclass(frozen=True)
class LcaCovariateStructuralParams:
    """Multinomial-logit coefficients for class membership on covariates.

    ``coef`` has shape ``(C - 1, 1 + q)``: one row per non-reference
    class, columns are the intercept followed by the covariates.
    """

    coef: np.ndarray
    covariate_names: tuple[str, ...]

    def __post_init__(self):
        coef = np.array(self.coef, dtype=float, copy=True)
        if coef.ndim != 2 or coef.shape[1] != 1 + len(self.covariate_names):
            raise DataError("coefficient matrix shape does not match covariate names")
        if not np.all(np.isfinite(coef)):
            raise DataError("structural coefficients must be finite")
        object.__setattr__(self, "coef", coef)
        object.__setattr__(self, "covariate_names", tuple(self.covariate_names))

    @property
    def n_classes(self) -> int:
        return self.coef.shape[0] + 1

    def free_names(self) -> tuple[str, ...]:
        cols = ("const",) + tuple(f"z.{z}" for z in self.covariate_names)
        return tuple(
            f"class{c}:{col}" for c in range(2, self.n_classes + 1) for col in cols
        )

    def free_vector(self) -> ParamVector:
        return ParamVector(self.coef.reshape(-1), self.free_names())

    def with_free_values(self, values: np.ndarray) -> "LcaCovariateStructuralParams":
        coef = np.asarray(values, dtype=float).reshape(self.coef.shape)
        return LcaCovariateStructuralParams(coef, self.covariate_names)

    def class_probs(self, covariates: np.ndarray) -> np.ndarray:
        """Class membership probabilities for each covariate row."""
        z = np.asarray(covariates, dtype=float).reshape(-1, len(self.covariate_names))
        x = np.column_stack([np.ones(z.shape[0]), z])
        lin = np.zeros((z.shape[0], self.n_classes))
        lin[:, 1:] = x @ self.coef.T
        lin -= lin.max(axis=1, keepdims=True)
        p = np.exp(lin)
        return p / p.sum(axis=1, keepdims=True)


@dataclass(frozen=True)
class LcaDistalStructuralParams:
    """Structural parameters of the distal-outcome form.

    Class proportions are free here (``pi``); the outcome is normal
    within class: mean ``beta0`` in class 1 and ``beta0 + contrast``
    elsewhere, standard deviation ``sigma`` shared across classes.
    """

    pi: np.ndarray
    beta0: float
    contrasts: np.ndarray
    sigma: float
    outcome_name: str = "y"

    def __post_init__(self):
        pi = np.array(self.pi, dtype=float, copy=True).reshape(-1)
        contrasts = np.array(self.contrasts, dtype=float, copy=True).reshape(-1)
        if contrasts.shape[0] != pi.shape[0] - 1:
            raise DataError("one contrast per non-reference class is required")
        if self.sigma <= 0.0:
            raise DataError(f"residual standard deviation must be > 0, got {self.sigma}")
        object.__setattr__(self, "pi", pi)
        object.__setattr__(self, "contrasts", contrasts)
        object.__setattr__(self, "beta0", float(self.beta0))
        object.__setattr__(self, "sigma", float(self.sigma))

    @property
    def n_classes(self) -> int:
        return self.pi.shape[0]

    def free_names(self) -> tuple[str, ...]:
        c_range = range(2, self.n_classes + 1)
        return (
            tuple(f"class{c}:pi_logit" for c in c_range)
            + ("outcome:const",)
            + tuple(f"outcome:class{c}" for c in c_range)
            + ("outcome:log_sigma",)
        )

    def free_vector(self) -> ParamVector:
        alpha = np.log(self.pi[1:]) - math.log(self.pi[0])
        values = np.concatenate(
            [alpha, [self.beta0], self.contrasts, [math.log(self.sigma)]]
        )
        return ParamVector(values, self.free_names())

    def with_free_values(self, values: np.ndarray) -> "LcaDistalStructuralParams":
        values = np.asarray(values, dtype=float).reshape(-1)
        cm1 = self.n_classes - 1
        alpha = np.concatenate([[0.0], values[:cm1]])
        alpha -= alpha.max()
        pi = np.exp(alpha)
        pi /= pi.sum()
        return LcaDistalStructuralParams(
            pi=pi,
            beta0=float(values[cm1]),
            contrasts=values[cm1 + 1 : 2 * cm1 + 1],
            sigma=max(float(np.exp(values[2 * cm1 + 1])), 1e-6),
            outcome_name=self.outcome_name,
        )

    def class_means(self) -> np.ndarray:
        return self.beta0 + np.concatenate([[0.0], self.contrasts])


@dataclass(frozen=True)
class LcaConfig:
    """Tuning knobs shared by the latent class fits."""

    n_starts: int = 20
    max_iter: int = 2000
    rel_tol: float = 1e-9
    step2_max_iter: int = 500
    gtol: float = 1e-7
    hessian_step: float = 1e-4
    beta_bound: float = 25.0
    prob_clamp: float = _PROB_CLAMP
    rng: RngStream = field(default=RngStream(0, 0))
    compute_sigma11: bool = True


@dataclass(frozen=True)
class LcaStep1Result:
    measurement: LcaMeasurementParams
    nuisance: LcaStep1Nuisance
    sigma11: CovMatrix | None
    loglik: float
    trace: tuple[float, ...]
    n_iter: int
    converged: bool
    boundary: bool
    sigma11_repaired: bool = False


@dataclass(frozen=True)
class LcaStep2Result:
    params: object
    v2: CovMatrix
    loglik: float
    n_iter: int
    converged: bool
    grad_norm: float


@dataclass(frozen=True)
class LcaOnestepResult:
    measurement: LcaMeasurementParams
    structural: object
    theta: ParamVector
    cov: CovMatrix | None
    loglik: float
    converged: bool
    boundary: bool


def lca_item_response_probs(m: LcaMeasurementParams) -> list[np.ndarray]:
    """Item-response probability tables, one ``(h_k, C)`` array per item."""
    tables = []
    for k in range(m.n_items):
        h = m.n_categories[k]
        logits = np.zeros((h, m.n_classes))
        logits[1:, 0] = m.tau[k]
        if m.n_classes > 1:
            logits[1:, 1:] = m.tau[k][:, None] + m.lam[k]
        logits -= logits.max(axis=0, keepdims=True)
        p = np.exp(logits)
        tables.append(p / p.sum(axis=0, keepdims=True))
    return tables


def _log_prob_tables(m: LcaMeasurementParams) -> list[np.ndarray]:
    return [np.log(np.maximum(t, _LOG_FLOOR)) for t in lca_item_response_probs(m)]


def _class_loglik_matrix(
    items: np.ndarray, m: LcaMeasurementParams, log_tables: list[np.ndarray] | None = None
) -> np.ndarray:
    """Per-unit, per-class log-probability of the item responses.

    Missing items (code 0) contribute nothing to their rows.
    """
    if log_tables is None:
        log_tables = _log_prob_tables(m)
    n = items.shape[0]
    out = np.zeros((n, m.n_classes))
    for k in range(m.n_items):
        codes = items[:, k]
        obs = codes > 0
        if np.any(obs):
            out[obs] += log_tables[k][codes[obs] - 1, :]
    return out


def _binary_success_table(values: np.ndarray, n_items: int, n_classes: int) -> np.ndarray:
    """Per-item success probabilities from the free vector (binary items).

    With two categories the free vector is, per item, the intercept
    followed by the class contrasts, so it reshapes to (p, C) directly.
    """
    from scipy.special import expit

    v = values.reshape(n_items, n_classes)
    logits = np.empty((n_items, n_classes))
    logits[:, 0] = v[:, 0]
    if n_classes > 1:
        logits[:, 1:] = v[:, 0][:, None] + v[:, 1:]
    return expit(logits)


def _make_class_loglik_fn(items: np.ndarray, template: LcaMeasurementParams):
    """Build a fast ``theta1 values -> (n, C) log-likelihood`` evaluator.

    All-binary designs use two indicator matmuls; anything else falls
    back to the general per-item path.  Both paths agree on interior
    parameter values.
    """
    if all(h == 2 for h in template.n_categories) and template.n_items > 0:
        obs = items > 0
        s_obs = ((items == 2) & obs).astype(float)
        f_obs = ((items == 1) & obs).astype(float)
        p, n_classes = template.n_items, template.n_classes

        def fn(values: np.ndarray) -> np.ndarray:
            table = _binary_success_table(values, p, n_classes)
            table = np.clip(table, 1e-14, 1.0 - 1e-14)
            return s_obs @ np.log(table) + f_obs @ np.log1p(-table)

        return fn

    def fn(values: np.ndarray) -> np.ndarray:
        return _class_loglik_matrix(items, template.with_free_values(values))

    return fn


def lca_pattern_prob(
    m: LcaMeasurementParams, pi: LcaStep1Nuisance, pattern: Sequence[int]
) -> float:
    """Marginal probability of one response pattern (0 = missing item)."""
    pattern = np.asarray(pattern, dtype=int).reshape(1, -1)
    if pattern.shape[1] != m.n_items:
        raise DataError(
            f"pattern has {pattern.shape[1]} codes for {m.n_items} items"
        )
    for k in range(m.n_items):
        if not 0 <= pattern[0, k] <= m.n_categories[k]:
            raise DataError(
                f"invalid code {pattern[0, k]} for item {m.item_names[k]!r}"
            )
    logl = _class_loglik_matrix(pattern, m)[0]
    return float(np.exp(logsumexp(logl + np.log(pi.pi))))


def _em_core(
    items: np.ndarray,
    n_categories: tuple[int, ...],
    probs0: list[np.ndarray],
    pi0: np.ndarray,
    rel_tol: float,
    max_iter: int,
) -> tuple[list[np.ndarray], np.ndarray, float, list[float], bool]:
    """One EM run for the measurement-only model; returns the trace."""
    n, p = items.shape
    n_classes = pi0.shape[0]
    binary = all(h == 2 for h in n_categories)
    if binary:
        # All-binary items collapse E and M steps into a few matrix
        # products over success/failure indicator matrices.
        obs = (items > 0).astype(float)
        succ = (items == 2).astype(float)
        s_obs = succ * obs
        f_obs = (1.0 - succ) * obs
        table = np.stack([t[1, :] for t in probs0])  # (p, C) success probs
    else:
        obs_masks = [items[:, k] > 0 for k in range(p)]
        onehots = []
        for k in range(p):
            codes = items[obs_masks[k], k] - 1
            onehots.append(np.eye(n_categories[k])[codes])
    probs = [np.array(t, dtype=float) for t in probs0]
    pi = np.array(pi0, dtype=float)
    trace: list[float] = []
    converged = False
    ll = -np.inf
    for _ in range(max_iter):
        if binary:
            logp2 = np.log(np.maximum(table, _LOG_FLOOR))
            logp1 = np.log(np.maximum(1.0 - table, _LOG_FLOOR))
            logl = s_obs @ logp2 + f_obs @ logp1
        else:
            logl = np.zeros((n, n_classes))
            for k in range(p):
                t = np.log(np.maximum(probs[k], _LOG_FLOOR))
                codes = items[obs_masks[k], k] - 1
                logl[obs_masks[k]] += t[codes, :]
        a = logl + np.log(np.maximum(pi, _LOG_FLOOR))[None, :]
        norm = logsumexp(a, axis=1)
        ll_new = float(norm.sum())
        post = np.exp(a - norm[:, None])
        trace.append(ll_new)
        if np.isfinite(ll) and (ll_new - ll) <= rel_tol * max(1.0, abs(ll_new)):
            ll = ll_new
            converged = True
            break
        ll = ll_new
        pi = post.mean(axis=0)
        pi = np.maximum(pi, 1e-12)
        pi /= pi.sum()
        if binary:
            hits = s_obs.T @ post
            seen = obs.T @ post
            table = hits / np.maximum(seen, 1e-12)
        else:
            for k in range(p):
                w = post[obs_masks[k]]
                counts = onehots[k].T @ w
                denom = np.maximum(counts.sum(axis=0, keepdims=True), 1e-12)
                probs[k] = counts / denom
    if binary:
        probs = [np.stack([1.0 - table[k], table[k]]) for k in range(p)]
    return probs, pi, ll, trace, converged


def _canonical_order(probs: list[np.ndarray]) -> np.ndarray:
    """Class order: descending highest-category probability of item 1,
    remaining items breaking ties lexicographically."""
    keys = tuple(-probs[k][-1, :] for k in reversed(range(len(probs))))
    return np.lexsort(keys)


def _sigma11_from_step1(
    items: np.ndarray,
    measurement: LcaMeasurementParams,
    pi: np.ndarray,
    hessian_step: float,
) -> tuple[CovMatrix, bool]:
    """Step-1 covariance of the free measurement parameters.

    The observed information of the measurement-only log-likelihood is
    taken over the free item parameters and the class-proportion
    logits jointly; the inverse's measurement block then accounts for
    the nuisance proportions being estimated alongside.
    """
    t1 = measurement.free_vector()
    alpha = np.log(pi[1:]) - math.log(pi[0])
    alpha_names = tuple(f"class{c}:pi_logit" for c in range(2, pi.shape[0] + 1))
    x = ParamVector.concat(
        [t1, ParamVector(alpha, alpha_names)]
    )
    d1 = len(t1)
    loglik_fn = _make_class_loglik_fn(items, measurement)

    def ll(vec: ParamVector) -> float:
        a = np.concatenate([[0.0], vec.values[d1:]])
        a -= a.max()
        logpi = a - logsumexp(a)
        logl = loglik_fn(vec.values[:d1])
        return float(logsumexp(logl + logpi[None, :], axis=1).sum())

    info = numeric_hessian_block(lambda a, b: ll(a), x, x, step=hessian_step)
    if not np.all(np.isfinite(info)):
        raise NumericError("step-1 information matrix has non-finite entries")
    try:
        full_cov = np.linalg.inv(info)
    except np.linalg.LinAlgError:
        raise NumericError("step-1 information matrix is singular") from None
    block = 0.5 * (full_cov[:d1, :d1] + full_cov[:d1, :d1].T)
    fixed, changed = _repair_array(block, what="step-1 covariance")
    return CovMatrix(fixed, t1.names), changed


def lca_step1_em(data: Dataset, n_classes: int, config: LcaConfig = LcaConfig()) -> LcaStep1Result:
    """Fit the measurement-only model by EM with random multistarts.

    Classes are relabeled into the canonical order before the step-1
    covariance is computed, so parameter labels are stable across runs.
    """
    items = data.items
    n, p = items.shape
    for k in range(p):
        seen = np.unique(items[items[:, k] > 0, k])
        if seen.shape[0] < 2:
            raise DataError(
                f"item {data.item_names[k]!r} shows fewer than 2 categories"
            )
    if n_classes == 1:
        probs = []
        for k in range(p):
            obs = items[:, k] > 0
            counts = np.bincount(items[obs, k] - 1, minlength=data.n_categories[k])
            probs.append((counts / counts.sum()).reshape(-1, 1))
        measurement = LcaMeasurementParams.from_probs(
            probs, data.item_names, clamp=config.prob_clamp
        )
        nuisance = LcaStep1Nuisance(np.array([1.0]))
        sigma11 = None
        repaired = False
        if config.compute_sigma11:
            sigma11, repaired = _sigma11_single_class(items, measurement, config.hessian_step)
        ll = float(
            logsumexp(_class_loglik_matrix(items, measurement), axis=1).sum()
        )
        return LcaStep1Result(
            measurement, nuisance, sigma11, ll, (ll,), 0, True, _near_boundary(probs, config), repaired
        )

    best = None
    for s in range(config.n_starts):
        gen = config.rng.child(s).generator()
        probs0 = [
            gen.dirichlet(np.ones(data.n_categories[k]), size=n_classes).T
            for k in range(p)
        ]
        pi0 = gen.dirichlet(np.ones(n_classes))
        run = _em_core(
            items, data.n_categories, probs0, pi0, config.rel_tol, config.max_iter
        )
        if best is None or run[2] > best[2]:
            best = run
    probs, pi, ll, trace, converged = best

    order = _canonical_order(probs)
    probs = [t[:, order] for t in probs]
    pi = pi[order]
    pi = np.maximum(pi, 1e-9)
    pi /= pi.sum()

    boundary = _near_boundary(probs, config)
    measurement = LcaMeasurementParams.from_probs(
        probs, data.item_names, clamp=config.prob_clamp
    )
    nuisance = LcaStep1Nuisance(pi)

    if not converged:
        raise ConvergenceError(
            f"step-1 EM did not converge in {config.max_iter} iterations",
            best=LcaStep1Result(
                measurement, nuisance, None, ll, tuple(trace), len(trace), False, boundary
            ),
        )

    sigma11 = None
    repaired = False
    if config.compute_sigma11:
        sigma11, repaired = _sigma11_from_step1(items, measurement, pi, config.hessian_step)
    return LcaStep1Result(
        measurement,
        nuisance,
        sigma11,
        ll,
        tuple(trace),
        len(trace),
        True,
        boundary,
        repaired,
    )


def _near_boundary(probs: list[np.ndarray], config: LcaConfig) -> bool:
    lo, hi = config.prob_clamp, 1.0 - config.prob_clamp
    return any(np.any(t < lo) or np.any(t > hi) for t in probs)


def _sigma11_single_class(items, measurement, hessian_step):
    t1 = measurement.free_vector()
    loglik_fn = _make_class_loglik_fn(items, measurement)

    def ll(vec: ParamVector) -> float:
        return float(loglik_fn(vec.values).sum())

    info = numeric_hessian_block(lambda a, b: ll(a), t1, t1, step=hessian_step)
    try:
        cov = np.linalg.inv(info)
    except np.linalg.LinAlgError:
        raise NumericError("step-1 information matrix is singular") from None
    fixed, changed = _repair_array(0.5 * (cov + cov.T), what="step-1 covariance")
    return CovMatrix(fixed, t1.names), changed


def class_posteriors(
    items: np.ndarray, m: LcaMeasurementParams, pi: np.ndarray
) -> np.ndarray:
    """Posterior class membership probabilities given item responses."""
    logl = _class_loglik_matrix(items, m)
    a = logl + np.log(np.maximum(pi, _LOG_FLOOR))[None, :]
    return np.exp(a - logsumexp(a, axis=1, keepdims=True))


def _weighted_mnlogit(
    x: np.ndarray,
    targets: np.ndarray,
    coef0: np.ndarray,
    bound: float,
    gtol: float,
    max_iter: int = 60,
    names: tuple[str, ...] | None = None,
) -> np.ndarray:
    """Newton maximization of a soft-label multinomial logistic likelihood.

    ``targets`` rows are nonnegative weights summing to 1 across classes
    (posterior memberships); ``coef0`` is ``(C-1, q1)``.  The objective
    is concave, so Newton with step halving converges; used as the
    M-step of the structural EM.
    """
    n, q1 = x.shape
    cm1 = coef0.shape[0]
    coef = coef0.copy()

    def objective(b):
        lin = np.zeros((n, cm1 + 1))
        lin[:, 1:] = x @ b.T
        norm = logsumexp(lin, axis=1)
        return float((targets * (lin - norm[:, None])).sum()), lin, norm

    obj, lin, norm = objective(coef)
    for _ in range(max_iter):
        p = np.exp(lin - norm[:, None])
        g = (x.T @ (targets[:, 1:] - p[:, 1:])).T.reshape(-1)
        if np.abs(g).max() <= gtol:
            break
        h = np.zeros((cm1 * q1, cm1 * q1))
        for a in range(cm1):
            for b in range(a, cm1):
                w = p[:, a + 1] * ((1.0 if a == b else 0.0) - p[:, b + 1])
                blockm = x.T @ (x * w[:, None])
                h[a * q1 : (a + 1) * q1, b * q1 : (b + 1) * q1] = blockm
                if a != b:
                    h[b * q1 : (b + 1) * q1, a * q1 : (a + 1) * q1] = blockm.T
        try:
            delta = np.linalg.solve(h + 1e-10 * np.eye(h.shape[0]), g)
        except np.linalg.LinAlgError:
            raise NumericError("singular Newton system in class regression") from None
        scale = 1.0
        for _ in range(30):
            cand = coef + scale * delta.reshape(cm1, q1)
            cand_obj, cand_lin, cand_norm = objective(cand)
            if cand_obj >= obj - 1e-12:
                break
            scale *= 0.5
        coef, obj, lin, norm = cand, cand_obj, cand_lin, cand_norm
        if np.abs(coef).max() > bound:
            flat = np.abs(coef).reshape(-1)
            worst = int(np.argmax(flat))
            label = names[worst] if names else f"coef[{worst}]"
            raise SeparationError(
                f"coefficient {label} diverged "
                f"(|value| = {flat[worst]:.2f} > {bound})",
                name=label,
                value=float(coef.reshape(-1)[worst]),
            )
    return coef


def _covariate_loglik(
    x: np.ndarray, log_a: np.ndarray, coef: np.ndarray
) -> tuple[float, np.ndarray, np.ndarray]:
    """Log-likelihood plus posterior and prior class probabilities."""
    n = x.shape[0]
    lin = np.zeros((n, coef.shape[0] + 1))
    lin[:, 1:] = x @ coef.T
    logprior = lin - logsumexp(lin, axis=1, keepdims=True)
    a = logprior + log_a
    norm = logsumexp(a, axis=1)
    post = np.exp(a - norm[:, None])
    return float(norm.sum()), post, np.exp(logprior)


def lca_step2_covariate(
    data: Dataset,
    m_fixed: LcaMeasurementParams,
    config: LcaConfig = LcaConfig(),
    start: LcaCovariateStructuralParams | None = None,
    skip_v2: bool = False,
) -> LcaStep2Result:
    """Fit the covariate structural form with frozen measurement.

    EM over class posteriors with an inner Newton step for the
    multinomial-logit coefficients; stops when the observed-likelihood
    score is small.  Rows with a missing covariate or outcome are
    excluded.
    """
    mask = data.step2_mask
    items = data.items[mask]
    z = data.covariates[mask]
    n = items.shape[0]
    if n == 0:
        raise DataError("no complete rows available for structural fitting")
    x = np.column_stack([np.ones(n), z])
    log_a = _class_loglik_matrix(items, m_fixed)
    cm1 = m_fixed.n_classes - 1
    if start is not None:
        coef = start.coef.copy()
    else:
        coef = np.zeros((cm1, x.shape[1]))
    coef_names = LcaCovariateStructuralParams(
        np.zeros_like(coef), data.covariate_names
    ).free_names()

    gtol = config.gtol * max(1.0, math.sqrt(n))
    ll = -np.inf
    grad_norm = np.inf
    converged = False
    it = 0
    for it in range(1, config.step2_max_iter + 1):
        ll, post, prior = _covariate_loglik(x, log_a, coef)
        grad = x.T @ (post[:, 1:] - prior[:, 1:])
        grad_norm = float(np.abs(grad).max()) if grad.size else 0.0
        if grad_norm <= gtol:
            converged = True
            break
        coef = _weighted_mnlogit(
            x, post, coef, config.beta_bound, gtol=0.1 * gtol, names=coef_names
        )
    params = LcaCovariateStructuralParams(coef, data.covariate_names)
    if not converged:
        raise ConvergenceError(
            f"covariate structural fit: score norm {grad_norm:.3e} after "
            f"{config.step2_max_iter} iterations",
            best=LcaStep2Result(params, None, ll, it, False, grad_norm),
        )
    if skip_v2:
        return LcaStep2Result(params, None, ll, it, True, grad_norm)

    t2 = params.free_vector()

    def objective(vec: ParamVector) -> float:
        return _covariate_loglik(x, log_a, vec.values.reshape(cm1, x.shape[1]))[0]

    info = numeric_hessian_block(
        lambda a, b: objective(a), t2, t2, step=config.hessian_step
    )
    v2 = _invert_info(info, t2.names)
    return LcaStep2Result(params, v2, ll, it, True, grad_norm)


def _invert_info(info: np.ndarray, names: tuple[str, ...]) -> CovMatrix:
    if not np.all(np.isfinite(info)):
        raise NumericError("observed information has non-finite entries")
    try:
        cov = np.linalg.inv(info)
    except np.linalg.LinAlgError:
        raise NumericError("observed information is singular") from None
    fixed, _ = _repair_array(0.5 * (cov + cov.T), what="inverse information")
    return CovMatrix(fixed, names)


def _distal_loglik(
    y: np.ndarray, log_a: np.ndarray, theta: LcaDistalStructuralParams
) -> tuple[float, np.ndarray]:
    means = theta.class_means()
    resid = y[:, None] - means[None, :]
    logphi = (
        -0.5 * (resid / theta.sigma) ** 2
        - math.log(theta.sigma)
        - 0.5 * math.log(2.0 * math.pi)
    )
    a = np.log(np.maximum(theta.pi, _LOG_FLOOR))[None, :] + logphi + log_a
    norm = logsumexp(a, axis=1)
    return float(norm.sum()), np.exp(a - norm[:, None])


def lca_step2_distal(
    data: Dataset,
    m_fixed: LcaMeasurementParams,
    config: LcaConfig = LcaConfig(),
    start: LcaDistalStructuralParams | None = None,
    skip_v2: bool = False,
) -> LcaStep2Result:
    """Fit the distal-outcome structural form with frozen measurement.

    Class proportions, the class means of the outcome, and the shared
    residual standard deviation are all part of the structural vector.
    EM with closed-form M-steps; the score of the observed likelihood
    is the stopping rule.
    """
    if data.outcomes.shape[1] != 1:
        raise DataError(
            f"distal fit expects exactly one outcome column, got {data.outcomes.shape[1]}"
        )
    mask = data.step2_mask
    items = data.items[mask]
    y = data.outcomes[mask, 0]
    n = items.shape[0]
    if n == 0:
        raise DataError("no complete rows available for structural fitting")
    log_a = _class_loglik_matrix(items, m_fixed)
    n_classes = m_fixed.n_classes
    cm1 = n_classes - 1
    outcome_name = data.outcome_names[0] if data.outcome_names else "y"

    if start is not None:
        theta = start
    else:
        sd = float(np.sqrt(np.mean((y - y.mean()) ** 2)))
        theta = LcaDistalStructuralParams(
            pi=np.full(n_classes, 1.0 / n_classes),
            beta0=float(y.mean()),
            contrasts=np.zeros(cm1),
            sigma=max(sd, 1e-6),
            outcome_name=outcome_name,
        )

    gtol = config.gtol * max(1.0, math.sqrt(n))
    converged = False
    ll = -np.inf
    grad_norm = np.inf
    it = 0
    for it in range(1, config.max_iter + 1):
        ll, post = _distal_loglik(y, log_a, theta)
        grad_norm = _distal_score_norm(y, post, theta)
        if grad_norm <= gtol:
            converged = True
            break
        pi = np.maximum(post.mean(axis=0), 1e-12)
        pi /= pi.sum()
        wsum = np.maximum(post.sum(axis=0), 1e-12)
        mu = (post * y[:, None]).sum(axis=0) / wsum
        resid = y[:, None] - mu[None, :]
        sigma = math.sqrt(max(float((post * resid**2).sum() / n), 1e-12))
        theta = LcaDistalStructuralParams(
            pi=pi,
            beta0=float(mu[0]),
            contrasts=mu[1:] - mu[0],
            sigma=max(sigma, 1e-6),
            outcome_name=outcome_name,
        )
    if not converged:
        raise ConvergenceError(
            f"distal structural fit: score norm {grad_norm:.3e} after "
            f"{config.max_iter} iterations",
            best=LcaStep2Result(theta, None, ll, it, False, grad_norm),
        )
    if skip_v2:
        return LcaStep2Result(theta, None, ll, it, True, grad_norm)

    t2 = theta.free_vector()

    def objective(vec: ParamVector) -> float:
        return _distal_loglik(y, log_a, theta.with_free_values(vec.values))[0]

    info = numeric_hessian_block(
        lambda a, b: objective(a), t2, t2, step=config.hessian_step
    )
    v2 = _invert_info(info, t2.names)
    return LcaStep2Result(theta, v2, ll, it, True, grad_norm)


def _distal_score_norm(
    y: np.ndarray, post: np.ndarray, theta: LcaDistalStructuralParams
) -> float:
    """Infinity norm of the observed score in the free parameterization."""
    pi = theta.pi
    means = theta.class_means()
    s2 = theta.sigma**2
    resid = y[:, None] - means[None, :]
    g_alpha = post[:, 1:].sum(axis=0) - post.shape[0] * pi[1:]
    wres = post * resid
    g_mu = wres.sum(axis=0) / s2
    g_beta0 = float(g_mu.sum())
    g_contr = g_mu[1:]
    g_logsig = float((post * (resid**2 / s2 - 1.0)).sum())
    g = np.concatenate([g_alpha, [g_beta0], g_contr, [g_logsig]])
    return float(np.abs(g).max())


def lca_onestep(
    data: Dataset,
    n_classes: int,
    structural_form: str,
    config: LcaConfig = LcaConfig(),
) -> LcaOnestepResult:
    """Joint (one-step) maximum likelihood over measurement and structure.

    EM over the full model with the same multistart rule as step 1.
    Provided as a comparison baseline; the covariance is the inverse
    observed information of the complete parameter vector.
    """
    if structural_form not in ("covariate", "distal"):
        raise DataError(f"unknown structural form {structural_form!r}")
    mask = data.step2_mask
    items = data.items[mask]
    n, p = items.shape
    if n == 0:
        raise DataError("no complete rows available for joint fitting")
    obs_masks = [items[:, k] > 0 for k in range(p)]
    onehots = [
        np.eye(data.n_categories[k])[items[obs_masks[k], k] - 1] for k in range(p)
    ]
    cm1 = n_classes - 1

    if structural_form == "covariate":
        z = data.covariates[mask]
        x = np.column_stack([np.ones(n), z])
    else:
        if data.outcomes.shape[1] != 1:
            raise DataError("distal form expects exactly one outcome column")
        y = data.outcomes[mask, 0]
        sd_y = float(np.sqrt(np.mean((y - y.mean()) ** 2)))

    gtol = config.gtol * max(1.0, math.sqrt(n))
    best = None
    for s in range(config.n_starts):
        gen = config.rng.child(10_000 + s).generator()
        probs = [
            gen.dirichlet(np.ones(data.n_categories[k]), size=n_classes).T
            for k in range(p)
        ]
        if structural_form == "covariate":
            struct = np.zeros((cm1, x.shape[1]))
        else:
            struct = LcaDistalStructuralParams(
                pi=gen.dirichlet(np.ones(n_classes)),
                beta0=float(y.mean()),
                contrasts=np.zeros(cm1),
                sigma=max(sd_y, 1e-6),
            )
        try:
            run = _onestep_em(
                items,
                data.n_categories,
                obs_masks,
                onehots,
                probs,
                struct,
                structural_form,
                x if structural_form == "covariate" else y,
                config,
                gtol,
            )
        except SeparationError:
            continue
        if best is None or run[3] > best[3]:
            best = run
    if best is None:
        raise ConvergenceError("every one-step start failed")
    probs, struct, converged, ll = best
    if not converged:
        raise ConvergenceError(
            "one-step EM did not converge",
            best=None,
        )

    order = _canonical_order(probs)
    probs = [t[:, order] for t in probs]
    boundary = _near_boundary(probs, config)
    measurement = LcaMeasurementParams.from_probs(
        probs, data.item_names, clamp=config.prob_clamp
    )
    if structural_form == "covariate":
        structural = relabel_covariate_structural(
            LcaCovariateStructuralParams(struct, data.covariate_names), tuple(order)
        )
    else:
        structural = relabel_distal_structural(struct, tuple(order))

    t1 = measurement.free_vector()
    t2 = structural.free_vector()
    theta = ParamVector.concat([t1, t2])
    d1 = len(t1)

    if structural_form == "covariate":

        def full_ll(vec: ParamVector) -> float:
            m = measurement.with_free_values(vec.values[:d1])
            coef = vec.values[d1:].reshape(cm1, x.shape[1])
            return _covariate_loglik(x, _class_loglik_matrix(items, m), coef)[0]

    else:

        def full_ll(vec: ParamVector) -> float:
            m = measurement.with_free_values(vec.values[:d1])
            th = structural.with_free_values(vec.values[d1:])
            return _distal_loglik(y, _class_loglik_matrix(items, m), th)[0]

    info = numeric_hessian_block(
        lambda a, b: full_ll(a), theta, theta, step=config.hessian_step
    )
    try:
        cov = _invert_info(info, theta.names)
    except NumericError:
        cov = None
    return LcaOnestepResult(measurement, structural, theta, cov, ll, True, boundary)


def _onestep_em(
    items,
    n_categories,
    obs_masks,
    onehots,
    probs0,
    struct0,
    structural_form,
    xy,
    config: LcaConfig,
    gtol: float,
):
    n, p = items.shape
    probs = [t.copy() for t in probs0]
    struct = struct0
    n_classes = probs[0].shape[1]
    ll_prev = -np.inf
    converged = False
    ll = -np.inf
    for _ in range(config.max_iter):
        log_a = np.zeros((n, n_classes))
        for k in range(p):
            table = np.log(np.maximum(probs[k], _LOG_FLOOR))
            log_a[obs_masks[k]] += table[items[obs_masks[k], k] - 1, :]
        if structural_form == "covariate":
            ll, post, _ = _covariate_loglik(xy, log_a, struct)
        else:
            ll, post = _distal_loglik(xy, log_a, struct)
        if np.isfinite(ll_prev) and (ll - ll_prev) <= config.rel_tol * max(1.0, abs(ll)):
            converged = True
            break
        ll_prev = ll
        for k in range(p):
            w = post[obs_masks[k]]
            counts = onehots[k].T @ w
            probs[k] = counts / np.maximum(counts.sum(axis=0, keepdims=True), 1e-12)
        if structural_form == "covariate":
            struct = _weighted_mnlogit(
                xy, post, struct, config.beta_bound, gtol=0.1 * gtol
            )
        else:
            pi = np.maximum(post.mean(axis=0), 1e-12)
            pi /= pi.sum()
            wsum = np.maximum(post.sum(axis=0), 1e-12)
            mu = (post * xy[:, None]).sum(axis=0) / wsum
            sigma = math.sqrt(
                max(float((post * (xy[:, None] - mu[None, :]) ** 2).sum() / n), 1e-12)
            )
            struct = LcaDistalStructuralParams(
                pi=pi,
                beta0=float(mu[0]),
                contrasts=mu[1:] - mu[0],
                sigma=max(sigma, 1e-6),
                outcome_name=struct.outcome_name,
            )
    return probs, struct, converged, ll


def align_classes(
    estimated: LcaMeasurementParams, reference: Sequence[np.ndarray]
) -> tuple[int, ...]:
    """Permutation matching estimated classes to reference profiles.

    ``reference[k]`` is an ``(h_k, C)`` probability table.  The result
    ``perm`` places estimated class ``perm[t]`` at reference slot ``t``,
    minimizing the total absolute probability difference.
    """
    est = lca_item_response_probs(estimated)
    n_classes = estimated.n_classes
    if reference[0].shape[1] != n_classes:
        raise DataError("reference table has a different class count")
    best_perm, best_cost = None, np.inf
    for perm in itertools.permutations(range(n_classes)):
        cost = 0.0
        for k in range(estimated.n_items):
            cost += float(np.abs(est[k][:, list(perm)] - reference[k]).sum())
        if cost < best_cost - 1e-15:
            best_cost, best_perm = cost, perm
    return tuple(best_perm)


def relabel_measurement(
    m: LcaMeasurementParams, perm: tuple[int, ...]
) -> LcaMeasurementParams:
    probs = [t[:, list(perm)] for t in lca_item_response_probs(m)]
    return LcaMeasurementParams.from_probs(probs, m.item_names)


def relabel_nuisance(pi: LcaStep1Nuisance, perm: tuple[int, ...]) -> LcaStep1Nuisance:
    return LcaStep1Nuisance(pi.pi[list(perm)])


def measurement_relabel_matrix(
    m: LcaMeasurementParams, perm: tuple[int, ...]
) -> np.ndarray:
    """Linear map on the measurement free vector under class relabeling.

    Relabeling permutes class profiles, so the new logit contrasts are
    exact linear combinations of the old ones: for each item category,
    ``tau`` picks up the old loading of the class moved into slot 1 and
    the loading rows transform by the class-contrast map.  The returned
    ``A`` satisfies ``new_free = A @ old_free`` and transports step-1
    covariance matrices as ``A @ sigma @ A.T``.
    """
    cm1 = m.n_classes - 1
    t_mat = _perm_contrast_matrix(m.n_classes, perm)
    blocks = []
    for h in m.n_categories:
        hm1 = h - 1
        a = np.zeros((hm1 * (1 + cm1), hm1 * (1 + cm1)))
        for li in range(hm1):
            a[li, li] = 1.0
            if perm[0] >= 1:
                a[li, hm1 + li * cm1 + perm[0] - 1] = 1.0
            row0 = hm1 + li * cm1
            a[row0 : row0 + cm1, row0 : row0 + cm1] = t_mat
        blocks.append(a)
    return block_diag(*blocks)


def relabel_step1(result: LcaStep1Result, perm: tuple[int, ...]) -> LcaStep1Result:
    """Apply a class permutation to a step-1 fit, covariance included.

    The measurement parameters are mapped through the exact relabeling
    matrix (no probability round trip), and ``sigma11`` is transported
    through the same map, so downstream corrections refer to the
    relabeled classes.
    """
    if tuple(perm) == tuple(range(result.measurement.n_classes)):
        return result
    a = measurement_relabel_matrix(result.measurement, perm)
    meas = result.measurement.with_free_values(
        a @ result.measurement.free_vector().values
    )
    sigma11 = result.sigma11
    if sigma11 is not None:
        sigma11 = CovMatrix(a @ sigma11.m @ a.T, sigma11.axis_names)
    return LcaStep1Result(
        measurement=meas,
        nuisance=relabel_nuisance(result.nuisance, perm),
        sigma11=sigma11,
        loglik=result.loglik,
        trace=result.trace,
        n_iter=result.n_iter,
        converged=result.converged,
        boundary=result.boundary,
        sigma11_repaired=result.sigma11_repaired,
    )


def _perm_contrast_matrix(n_classes: int, perm: tuple[int, ...]) -> np.ndarray:
    """Linear map sending old class contrasts to relabeled contrasts.

    Contrast ``t`` (for relabeled class ``t+2``) becomes
    old-contrast(perm[t+1]) - old-contrast(perm[0]), where class-1
    contrasts are identically zero.
    """
    cm1 = n_classes - 1
    t_mat = np.zeros((cm1, cm1))
    for slot in range(1, n_classes):
        if perm[slot] >= 1:
            t_mat[slot - 1, perm[slot] - 1] += 1.0
        if perm[0] >= 1:
            t_mat[slot - 1, perm[0] - 1] -= 1.0
    return t_mat


def covariate_relabel_matrix(
    n_classes: int, n_columns: int, perm: tuple[int, ...]
) -> np.ndarray:
    """Matrix ``A`` with relabeled coefficient vector = ``A @ old``."""
    t_mat = _perm_contrast_matrix(n_classes, perm)
    return np.kron(t_mat, np.eye(n_columns))


def relabel_covariate_structural(
    params: LcaCovariateStructuralParams, perm: tuple[int, ...]
) -> LcaCovariateStructuralParams:
    a = covariate_relabel_matrix(params.n_classes, params.coef.shape[1], perm)
    new = (a @ params.coef.reshape(-1)).reshape(params.coef.shape)
    return LcaCovariateStructuralParams(new, params.covariate_names)


def distal_relabel_matrix(n_classes: int, perm: tuple[int, ...]) -> np.ndarray:
    """Linear map on the distal free vector under class relabeling."""
    cm1 = n_classes - 1
    t_mat = _perm_contrast_matrix(n_classes, perm)
    d = 2 * cm1 + 2
    a = np.zeros((d, d))
    a[:cm1, :cm1] = t_mat
    # outcome intercept: new beta0 = old beta0 + old contrast of perm[0]
    a[cm1, cm1] = 1.0
    if perm[0] >= 1:
        a[cm1, cm1 + perm[0]] = 1.0
    a[cm1 + 1 : 2 * cm1 + 1, cm1 + 1 : 2 * cm1 + 1] = t_mat
    a[2 * cm1 + 1, 2 * cm1 + 1] = 1.0
    return a


def relabel_distal_structural(
    params: LcaDistalStructuralParams, perm: tuple[int, ...]
) -> LcaDistalStructuralParams:
    a = distal_relabel_matrix(params.n_classes, perm)
    template = params
    return template.with_free_values(a @ params.free_vector().values)


class _LcaCovariateModel:
    """Likelihood and refit hooks for the covariate form.

    Indicator matrices for the most recent dataset are cached so that
    the thousands of likelihood probes made by the variance module skip
    re-deriving them.
    """

    def __init__(self, template: LcaMeasurementParams, config: LcaConfig):
        self.template = template
        self.config = config
        self._cache_key = None
        self._cache = None

    def _pieces(self, data: Dataset):
        if self._cache_key != id(data):
            mask = data.step2_mask
            items = data.items[mask]
            z = data.covariates[mask]
            x = np.column_stack([np.ones(items.shape[0]), z])
            self._cache = (_make_class_loglik_fn(items, self.template), x)
            self._cache_key = id(data)
        return self._cache

    def full_loglik(self, data: Dataset, theta1: ParamVector, theta2: ParamVector) -> float:
        loglik_fn, x = self._pieces(data)
        coef = theta2.values.reshape(self.template.n_classes - 1, x.shape[1])
        return _covariate_loglik(x, loglik_fn(theta1.values), coef)[0]

    def refit_step2(self, data: Dataset, theta1: ParamVector, warm: ParamVector) -> RefitResult:
        m = self.template.with_free_values(theta1.values)
        start = LcaCovariateStructuralParams(
            warm.values.reshape(self.template.n_classes - 1, -1),
            data.covariate_names,
        )
        fit = lca_step2_covariate(data, m, self.config, start=start, skip_v2=True)
        return RefitResult(fit.params.free_vector(), fit.converged)


class _LcaDistalModel:
    """Likelihood and refit hooks for the distal form."""

    def __init__(
        self,
        template: LcaMeasurementParams,
        structural_template: LcaDistalStructuralParams,
        config: LcaConfig,
    ):
        self.template = template
        self.structural_template = structural_template
        self.config = config
        self._cache_key = None
        self._cache = None

    def _pieces(self, data: Dataset):
        if self._cache_key != id(data):
            mask = data.step2_mask
            items = data.items[mask]
            y = data.outcomes[mask, 0]
            self._cache = (_make_class_loglik_fn(items, self.template), y)
            self._cache_key = id(data)
        return self._cache

    def full_loglik(self, data: Dataset, theta1: ParamVector, theta2: ParamVector) -> float:
        loglik_fn, y = self._pieces(data)
        th = self.structural_template.with_free_values(theta2.values)
        return _distal_loglik(y, loglik_fn(theta1.values), th)[0]

    def refit_step2(self, data: Dataset, theta1: ParamVector, warm: ParamVector) -> RefitResult:
        m = self.template.with_free_values(theta1.values)
        start = self.structural_template.with_free_values(warm.values)
        fit = lca_step2_distal(data, m, self.config, start=start, skip_v2=True)
        return RefitResult(fit.params.free_vector(), fit.converged)


def lca_covariate_model(m_fixed: LcaMeasurementParams, config: LcaConfig = LcaConfig()):
    """Model hooks for the variance module (covariate form)."""
    return _LcaCovariateModel(m_fixed, config)


def lca_distal_model(
    m_fixed: LcaMeasurementParams,
    structural_template: LcaDistalStructuralParams,
    config: LcaConfig = LcaConfig(),
):
    """Model hooks for the variance module (distal form)."""
    return _LcaDistalModel(m_fixed, structural_template, config)
