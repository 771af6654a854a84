"""Latent trait (binary-item IRT) measurement and structural models.

Each latent trait is measured by a block of binary items through
two-parameter logistic response curves.  Step 1 fits one trait at a
time by marginal maximum likelihood with the trait standardized to
N(0, 1), integrating over the trait with Gauss-Hermite quadrature.
Step 2 freezes the item parameters and fits a recursive linear Gaussian
system over the traits (intercepts, coefficients on covariates and on
prior traits, log residual variances, and optionally a residual
correlation between two traits when neither regresses on the other).

The structural likelihood integrates over a product quadrature grid
factorized as p(first trait) p(second trait | first), with the second
grid centered on the conditional mean so it stays effective for strong
dependence.  At most two traits are supported on the grid.

Response patterns are collapsed to unique rows whenever the structural
model has no covariates, which makes the repeated refits used by the
simulation variance method cheap.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.polynomial.hermite import hermgauss
from scipy.optimize import minimize
from scipy.special import expit

from .data import Dataset
from .errors import ConvergenceError, DataError, NumericError, SeparationError
from .model_core import CovMatrix, ParamVector, RngStream, numeric_gradient, numeric_hessian_block
from .model_core import _repair_array
from .variance import RefitResult

__all__ = [
    "IrtMeasurementParams",
    "IrtStep1Nuisance",
    "TraitEquation",
    "TraitStructuralSpec",
    "TraitStructuralParams",
    "IrtConfig",
    "IrtStep1Result",
    "TraitStep2Result",
    "TraitOnestepResult",
    "irt_item_prob",
    "gh_marginal_loglik",
    "irt_step1_fit",
    "irt_step2_fit",
    "irt_onestep",
    "combine_trait_blocks",
    "trait_model",
]

_SQRT2 = math.sqrt(2.0)
_P_CLIP = 1e-14
_GH_CACHE: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def _gh_rule(nodes: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Hermite nodes and probability weights for N(0, 1).

    A standard normal integral becomes ``sum_q w_q f(sqrt(2) x_q)``
    with ``w = raw_weights / sqrt(pi)``.
    """
    if nodes < 2:
        raise DataError(f"quadrature needs at least 2 nodes, got {nodes}")
    if nodes not in _GH_CACHE:
        x, w = hermgauss(nodes)
        _GH_CACHE[nodes] = (x, w / math.sqrt(math.pi))
    return _GH_CACHE[nodes]


def irt_item_prob(tau: float, lam: float, eta) -> np.ndarray | float:
    """Success probability ``logistic(tau + lam * eta)``, overflow-safe."""
    out = expit(tau + lam * np.asarray(eta, dtype=float))
    if out.ndim == 0:
        return float(out)
    return out


@dataclass(frozen=True)
class IrtMeasurementParams:
    """Item intercepts and loadings, grouped into per-trait blocks.

    ``blocks[j]`` holds indices into ``tau`` / ``lam`` / ``item_names``
    for the items measuring trait ``j``.  Sign convention: the loading
    of the first item in each block is nonnegative.
    """

    item_names: tuple[str, ...]
    trait_names: tuple[str, ...]
    blocks: tuple[tuple[int, ...], ...]
    tau: np.ndarray
    lam: np.ndarray

    def __post_init__(self):
        tau = np.array(self.tau, dtype=float, copy=True).reshape(-1)
        lam = np.array(self.lam, dtype=float, copy=True).reshape(-1)
        p = len(self.item_names)
        if tau.shape[0] != p or lam.shape[0] != p:
            raise DataError("one (tau, lam) pair per item is required")
        if not (np.all(np.isfinite(tau)) and np.all(np.isfinite(lam))):
            raise DataError("item parameters must be finite")
        covered = sorted(i for b in self.blocks for i in b)
        if covered != list(range(p)):
            raise DataError("item blocks must partition the items")
        if len(self.blocks) != len(self.trait_names):
            raise DataError("one trait name per block is required")
        object.__setattr__(self, "tau", tau)
        object.__setattr__(self, "lam", lam)
        object.__setattr__(self, "item_names", tuple(self.item_names))
        object.__setattr__(self, "trait_names", tuple(self.trait_names))
        object.__setattr__(
            self, "blocks", tuple(tuple(int(i) for i in b) for b in self.blocks)
        )

    @property
    def n_items(self) -> int:
        return len(self.item_names)

    def free_names(self) -> tuple[str, ...]:
        names: list[str] = []
        for block in self.blocks:
            for i in block:
                names.append(f"item.{self.item_names[i]}:tau")
                names.append(f"item.{self.item_names[i]}:lam")
        return tuple(names)

    def free_vector(self) -> ParamVector:
        values: list[float] = []
        for block in self.blocks:
            for i in block:
                values.extend((self.tau[i], self.lam[i]))
        return ParamVector(np.array(values), self.free_names())

    def with_free_values(self, values: np.ndarray) -> "IrtMeasurementParams":
        values = np.asarray(values, dtype=float).reshape(-1)
        if values.shape[0] != 2 * self.n_items:
            raise DataError(
                f"free vector has {values.shape[0]} entries, expected {2 * self.n_items}"
            )
        tau = np.empty(self.n_items)
        lam = np.empty(self.n_items)
        at = 0
        for block in self.blocks:
            for i in block:
                tau[i] = values[at]
                lam[i] = values[at + 1]
                at += 2
        return IrtMeasurementParams(
            self.item_names, self.trait_names, self.blocks, tau, lam
        )

    def block_arrays(self, j: int) -> tuple[np.ndarray, np.ndarray]:
        idx = list(self.blocks[j])
        return self.tau[idx], self.lam[idx]


@dataclass(frozen=True)
class IrtStep1Nuisance:
    """Trait distribution used in step 1; fixed to N(0, 1) here."""

    mu: float = 0.0
    var: float = 1.0

    def __post_init__(self):
        if self.var <= 0.0:
            raise DataError(f"trait variance must be > 0, got {self.var}")


@dataclass(frozen=True)
class TraitEquation:
    """One trait's structural equation.

    A trait with no covariates, no prior traits, and no residual
    correlation is exogenous and fixed to N(0, 1).
    """

    trait: str
    covariates: tuple[str, ...] = ()
    on_traits: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "covariates", tuple(self.covariates))
        object.__setattr__(self, "on_traits", tuple(self.on_traits))


@dataclass(frozen=True)
class TraitStructuralSpec:
    """Ordered, acyclic system of trait equations.

    Equation order defines the quadrature factorization; a trait may
    regress only on traits from earlier equations.  A residual
    correlation is allowed between two traits when neither regresses on
    the other (the seemingly-unrelated form).
    """

    equations: tuple[TraitEquation, ...]
    correlated_residuals: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        eqs = tuple(self.equations)
        names = [e.trait for e in eqs]
        if len(set(names)) != len(names):
            raise DataError("each trait may appear in exactly one equation")
        seen: set[str] = set()
        for e in eqs:
            for t in e.on_traits:
                if t not in seen:
                    raise DataError(
                        f"equation for {e.trait!r} uses {t!r} before it is defined"
                    )
            seen.add(e.trait)
        pairs = tuple((str(a), str(b)) for a, b in self.correlated_residuals)
        for a, b in pairs:
            if a not in names or b not in names:
                raise DataError(f"correlated pair ({a}, {b}) names unknown traits")
            if a == b:
                raise DataError("a residual correlation needs two distinct traits")
            ea = eqs[names.index(a)]
            eb = eqs[names.index(b)]
            if a in eb.on_traits or b in ea.on_traits:
                raise DataError(
                    "correlated residuals require that neither trait regresses "
                    "on the other"
                )
        object.__setattr__(self, "equations", eqs)
        object.__setattr__(self, "correlated_residuals", pairs)

    @property
    def trait_names(self) -> tuple[str, ...]:
        return tuple(e.trait for e in self.equations)

    def is_exogenous(self, trait: str) -> bool:
        eq = self.equations[self.trait_names.index(trait)]
        in_pair = any(trait in pair for pair in self.correlated_residuals)
        return not eq.covariates and not eq.on_traits and not in_pair

    def free_names(self) -> tuple[str, ...]:
        names: list[str] = []
        for eq in self.equations:
            if self.is_exogenous(eq.trait):
                continue
            names.append(f"{eq.trait}:const")
            names.extend(f"{eq.trait}:z.{z}" for z in eq.covariates)
            names.extend(f"{eq.trait}:on.{t}" for t in eq.on_traits)
            names.append(f"{eq.trait}:log_var")
        names.extend(f"corr:{a}.{b}" for a, b in self.correlated_residuals)
        return tuple(names)

    def default_vector(self) -> ParamVector:
        names = self.free_names()
        return ParamVector(np.zeros(len(names)), names)


@dataclass(frozen=True)
class TraitStructuralParams:
    """Structural estimates in their unconstrained parameterization.

    Residual variances are stored as logs and correlations through
    atanh, so every vector value implies a valid (positive definite)
    joint trait distribution.
    """

    spec: TraitStructuralSpec
    vector: ParamVector

    def __post_init__(self):
        if self.vector.names != self.spec.free_names():
            raise DataError("structural vector labels do not match the spec")

    def residual_var(self, trait: str) -> float:
        if self.spec.is_exogenous(trait):
            return 1.0
        return float(math.exp(self.vector[f"{trait}:log_var"]))

    def residual_corr(self, a: str, b: str) -> float:
        for pa, pb in self.spec.correlated_residuals:
            if {pa, pb} == {a, b}:
                return float(math.tanh(self.vector[f"corr:{pa}.{pb}"]))
        return 0.0

    def coefficient(self, trait: str, name: str) -> float:
        return float(self.vector[f"{trait}:{name}"])


@dataclass(frozen=True)
class IrtConfig:
    """Tuning knobs shared by the latent trait fits."""

    nodes: int = 31
    gtol: float = 1e-5
    refit_gtol: float = 1e-5
    max_iter: int = 300
    hessian_step: float = 1e-4
    lambda_bound: float = 15.0
    n_starts: int = 5
    jitter_sd: float = 0.05
    rng: RngStream = field(default=RngStream(0, 0))


@dataclass(frozen=True)
class IrtStep1Result:
    measurement: IrtMeasurementParams
    nuisance: IrtStep1Nuisance
    sigma11: CovMatrix
    loglik: float
    grad_norm: float
    n_patterns: int
    converged: bool
    sigma11_repaired: bool = False


@dataclass(frozen=True)
class TraitStep2Result:
    params: TraitStructuralParams
    v2: CovMatrix | None
    loglik: float
    grad_norm: float
    converged: bool


@dataclass(frozen=True)
class TraitOnestepResult:
    measurement: IrtMeasurementParams
    theta: ParamVector
    cov: CovMatrix | None
    beta1: float
    beta1_se: float
    loglik: float
    converged: bool


def _collapse_patterns(items: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    patterns, inverse, counts = np.unique(
        items, axis=0, return_inverse=True, return_counts=True
    )
    return patterns, inverse.reshape(-1), counts.astype(float)


def _pattern_indicators(patterns: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    succ = (patterns == 2).astype(float)
    fail = (patterns == 1).astype(float)
    return succ, fail


def _pattern_logprobs(
    succ: np.ndarray, fail: np.ndarray, tau: np.ndarray, lam: np.ndarray, eta: np.ndarray
) -> np.ndarray:
    """Log probability of each pattern at each trait value.

    ``eta`` is flat of length G; returns ``(u, G)``.
    """
    logits = tau[:, None] + lam[:, None] * eta[None, :]
    p = expit(logits)
    np.clip(p, _P_CLIP, 1.0 - _P_CLIP, out=p)
    return succ @ np.log(p) + fail @ np.log1p(-p)


def gh_marginal_loglik(
    items_j: np.ndarray,
    params: IrtMeasurementParams,
    dist: tuple[float, float] = (0.0, 1.0),
    nodes: int = 31,
    block: int = 0,
) -> float:
    """Total log-likelihood of one trait's items, trait integrated out.

    ``items_j`` is ``(n, p_j)`` with codes 1/2 and 0 for missing; the
    trait is normal with mean and variance from ``dist``.
    """
    mu, var = float(dist[0]), float(dist[1])
    if var <= 0.0:
        raise DataError(f"trait variance must be > 0, got {var}")
    tau, lam = params.block_arrays(block)
    items_j = np.asarray(items_j, dtype=int)
    if items_j.ndim != 2 or items_j.shape[1] != tau.shape[0]:
        raise DataError(
            f"items have {items_j.shape} shape for a {tau.shape[0]}-item block"
        )
    x, w = _gh_rule(nodes)
    eta = mu + math.sqrt(var) * _SQRT2 * x
    patterns, inverse, counts = _collapse_patterns(items_j)
    succ, fail = _pattern_indicators(patterns)
    logp = _pattern_logprobs(succ, fail, tau, lam, eta)
    probs = np.exp(logp) @ w
    return float(counts @ np.log(np.maximum(probs, 1e-300)))


def _single_block(
    item_names: Sequence[str], trait_name: str, tau: np.ndarray, lam: np.ndarray
) -> IrtMeasurementParams:
    p = len(item_names)
    return IrtMeasurementParams(
        item_names=tuple(item_names),
        trait_names=(trait_name,),
        blocks=(tuple(range(p)),),
        tau=tau,
        lam=lam,
    )


def irt_step1_fit(
    data: Dataset, trait: int | str, config: IrtConfig = IrtConfig()
) -> IrtStep1Result:
    """Fit one trait's measurement block by marginal maximum likelihood.

    The trait is standardized to N(0, 1); all item intercepts and
    loadings are free.  The step-1 covariance is the inverse observed
    information of this block's marginal log-likelihood.
    """
    j = trait if isinstance(trait, int) else data.trait_names.index(trait)
    block = data.item_blocks[j]
    if len(block) < 2:
        raise DataError(
            f"trait {data.trait_names[j]!r} needs at least 2 items, has {len(block)}"
        )
    items_j = data.block_items(j)
    names = [data.item_names[i] for i in block]
    for col, name in enumerate(names):
        seen = np.unique(items_j[items_j[:, col] > 0, col])
        if seen.shape[0] < 2:
            raise DataError(f"item {name!r} shows only one response category")
    n = items_j.shape[0]
    patterns, inverse, counts = _collapse_patterns(items_j)
    succ, fail = _pattern_indicators(patterns)
    x, w = _gh_rule(config.nodes)
    eta = _SQRT2 * x
    p_j = len(block)

    def objective(values: np.ndarray) -> float:
        tau = values[0::2]
        lam = values[1::2]
        logp = _pattern_logprobs(succ, fail, tau, lam, eta)
        probs = np.exp(logp) @ w
        return float(counts @ np.log(np.maximum(probs, 1e-300)))

    obs_rate = np.zeros(p_j)
    for col in range(p_j):
        seen_col = items_j[:, col] > 0
        obs_rate[col] = np.mean(items_j[seen_col, col] == 2)
    x0 = np.empty(2 * p_j)
    x0[0::2] = np.clip(np.log(obs_rate / (1.0 - obs_rate)), -3.0, 3.0)
    x0[1::2] = 1.0

    free_names = tuple(
        part for name in names for part in (f"item.{name}:tau", f"item.{name}:lam")
    )

    def neg(v: np.ndarray) -> float:
        return -objective(v)

    def neg_grad(v: np.ndarray) -> np.ndarray:
        pv = ParamVector(v, free_names)
        return -numeric_gradient(lambda q: objective(q.values), pv).values

    res = minimize(
        neg,
        x0,
        jac=neg_grad,
        method="L-BFGS-B",
        options={"maxiter": config.max_iter, "gtol": config.gtol, "ftol": 1e-12},
    )
    values = res.x
    grad_norm = float(np.abs(res.jac).max())
    if not np.all(np.isfinite(values)):
        raise NumericError("step-1 fit produced non-finite parameters")
    if grad_norm > 1e-4 * max(1.0, n):
        raise ConvergenceError(
            f"step-1 fit for trait {data.trait_names[j]!r}: score norm "
            f"{grad_norm:.3e} too large"
        )
    tau = values[0::2].copy()
    lam = values[1::2].copy()
    if lam[0] < 0.0:
        lam = -lam
    worst = int(np.argmax(np.abs(lam)))
    if abs(lam[worst]) > config.lambda_bound:
        raise SeparationError(
            f"loading for item {names[worst]!r} diverged "
            f"(|value| = {abs(lam[worst]):.2f} > {config.lambda_bound})",
            name=f"item.{names[worst]}:lam",
            value=float(lam[worst]),
        )
    measurement = _single_block(names, data.trait_names[j], tau, lam)
    t1 = measurement.free_vector()

    info = numeric_hessian_block(
        lambda a, b: objective(a.values), t1, t1, step=config.hessian_step
    )
    if not np.all(np.isfinite(info)):
        raise NumericError("step-1 information matrix has non-finite entries")
    try:
        cov = np.linalg.inv(info)
    except np.linalg.LinAlgError:
        raise NumericError("step-1 information matrix is singular") from None
    fixed, repaired = _repair_array(0.5 * (cov + cov.T), what="step-1 covariance")
    sigma11 = CovMatrix(fixed, t1.names)
    return IrtStep1Result(
        measurement=measurement,
        nuisance=IrtStep1Nuisance(),
        sigma11=sigma11,
        loglik=float(-res.fun),
        grad_norm=grad_norm,
        n_patterns=patterns.shape[0],
        converged=bool(res.success or grad_norm <= 1e-4 * max(1.0, n)),
        sigma11_repaired=repaired,
    )


def combine_trait_blocks(data: Dataset, fits: Sequence[IrtStep1Result]) -> IrtMeasurementParams:
    """Merge per-trait step-1 fits into one measurement object aligned
    to the dataset's item layout."""
    if len(fits) != len(data.item_blocks):
        raise DataError(
            f"{len(fits)} step-1 fits supplied for {len(data.item_blocks)} blocks"
        )
    p = data.n_items
    tau = np.zeros(p)
    lam = np.zeros(p)
    for j, fit in enumerate(fits):
        idx = list(data.item_blocks[j])
        expect = tuple(data.item_names[i] for i in idx)
        if fit.measurement.item_names != expect:
            raise DataError(
                f"step-1 fit {j} covers items {fit.measurement.item_names}, "
                f"dataset block has {expect}"
            )
        tau[idx] = fit.measurement.tau
        lam[idx] = fit.measurement.lam
    return IrtMeasurementParams(
        item_names=data.item_names,
        trait_names=data.trait_names,
        blocks=data.item_blocks,
        tau=tau,
        lam=lam,
    )


class _TraitEvaluator:
    """Full-model log-likelihood for a measurement template plus a
    structural spec, bound to one dataset.

    Splits evaluation so that the measurement-dependent pattern tables
    are computed once per measurement vector during refits.
    """

    def __init__(self, data: Dataset, template: IrtMeasurementParams, spec: TraitStructuralSpec, config: IrtConfig):
        if len(spec.equations) > 2:
            raise DataError("the quadrature grid supports at most two traits")
        self.template = template
        self.spec = spec
        self.config = config
        self.free_names = spec.free_names()
        self.layout = {n: i for i, n in enumerate(self.free_names)}
        for t in spec.trait_names:
            if t not in data.trait_names:
                raise DataError(f"spec names trait {t!r} not present in the data")
        # Map equations to dataset blocks by trait name.
        self.block_of = [data.trait_names.index(t) for t in spec.trait_names]
        mask = data.step2_mask
        self.n = int(mask.sum())
        if self.n == 0:
            raise DataError("no complete rows available for structural fitting")
        covars_needed: list[str] = []
        for eq in spec.equations:
            for z in eq.covariates:
                if z not in data.covariate_names:
                    raise DataError(f"equation for {eq.trait!r} names unknown covariate {z!r}")
                covars_needed.append(z)
        self.z = {
            z: data.covariates[mask, data.covariate_names.index(z)]
            for z in set(covars_needed)
        }
        self.collapsed = not covars_needed
        self.x1, self.w1 = _gh_rule(config.nodes)
        self.x2, self.w2 = _gh_rule(config.nodes)

        blocks_items = [data.block_items(j)[mask] for j in self.block_of]
        if self.collapsed:
            joint = np.hstack(blocks_items)
            patterns, inverse, counts = _collapse_patterns(joint)
            self.counts = counts
            split = np.cumsum([b.shape[1] for b in blocks_items])[:-1]
            parts = np.hsplit(patterns, split)
            self.block_tabs = []
            for part in parts:
                sub, sub_inv, _ = _collapse_patterns(part)
                succ, fail = _pattern_indicators(sub)
                self.block_tabs.append((succ, fail, sub_inv))
        else:
            self.unit_ind = []
            for b in blocks_items:
                succ, fail = _pattern_indicators(b)
                self.unit_ind.append((succ, fail))

    # -- structural parameter parsing ---------------------------------

    def _eq_pieces(self, t2: np.ndarray, eq: TraitEquation):
        """(mean per unit or scalar, residual sd) for one equation,
        before any trait-on-trait terms."""
        if self.spec.is_exogenous(eq.trait):
            return 0.0, 1.0
        lay = self.layout
        mean = t2[lay[f"{eq.trait}:const"]]
        for z in eq.covariates:
            mean = mean + t2[lay[f"{eq.trait}:z.{z}"]] * self.z[z]
        sd = math.exp(0.5 * t2[lay[f"{eq.trait}:log_var"]])
        return mean, sd

    def _structure(self, t2: np.ndarray):
        """Quadrature geometry: first-trait nodes plus the second
        trait's base mean, grid coupling, and conditional sd."""
        eqs = self.spec.equations
        mu1, s1 = self._eq_pieces(t2, eqs[0])
        out = {"mu1": mu1, "s1": s1}
        if len(eqs) == 2:
            eq2 = eqs[1]
            mu2, s2 = self._eq_pieces(t2, eq2)
            if eq2.on_traits:
                b21 = t2[self.layout[f"{eq2.trait}:on.{eqs[0].trait}"]]
                base2 = mu2 + b21 * mu1
                gamma = b21 * s1
                cond_sd = s2
            elif self.spec.correlated_residuals:
                a, b = self.spec.correlated_residuals[0]
                rho = math.tanh(t2[self.layout[f"corr:{a}.{b}"]])
                base2 = mu2
                gamma = rho * s2
                cond_sd = s2 * math.sqrt(max(1.0 - rho * rho, 1e-12))
            else:
                base2 = mu2
                gamma = 0.0
                cond_sd = s2
            out.update(base2=base2, gamma=gamma, cond_sd=cond_sd)
        return out

    # -- likelihood paths ----------------------------------------------

    def loglik(self, t1_values: np.ndarray, t2_values: np.ndarray) -> float:
        return self.bind_theta1(t1_values)(t2_values)

    def bind_theta1(self, t1_values: np.ndarray):
        m = self.template.with_free_values(np.asarray(t1_values, dtype=float))
        # block_arrays indexes the template's (dataset-order) blocks;
        # map equation order through block_of.
        taus = [
            (m.tau[list(self.template.blocks[j])], m.lam[list(self.template.blocks[j])])
            for j in self.block_of
        ]
        if self.collapsed:
            return self._collapsed_fn(taus)
        return self._unit_fn(taus)

    def _collapsed_fn(self, taus):
        eqs = self.spec.equations
        if len(eqs) == 1:
            succ, fail, inv = self.block_tabs[0]
            tau1, lam1 = taus[0]

            def fn1(t2_values: np.ndarray) -> float:
                st = self._structure(np.asarray(t2_values, dtype=float))
                e1 = st["mu1"] + st["s1"] * _SQRT2 * self.x1
                logp = _pattern_logprobs(succ, fail, tau1, lam1, e1)
                probs = np.exp(logp) @ self.w1
                return float(self.counts @ np.log(np.maximum(probs[inv], 1e-300)))

            return fn1

        (s1m, f1m, inv1), (s2m, f2m, inv2) = self.block_tabs
        (tau1, lam1), (tau2, lam2) = taus
        q1 = self.x1.shape[0]
        q2 = self.x2.shape[0]

        def fn2(t2_values: np.ndarray) -> float:
            st = self._structure(np.asarray(t2_values, dtype=float))
            e1 = st["mu1"] + st["s1"] * _SQRT2 * self.x1
            a1 = np.exp(_pattern_logprobs(s1m, f1m, tau1, lam1, e1))
            grid = (
                st["base2"]
                + (st["gamma"] * _SQRT2 * self.x1)[:, None]
                + (st["cond_sd"] * _SQRT2 * self.x2)[None, :]
            )
            b2 = _pattern_logprobs(s2m, f2m, tau2, lam2, grid.reshape(-1))
            inner = np.exp(b2).reshape(-1, q1, q2) @ self.w2
            mixed = a1[inv1] * inner[inv2]
            probs = mixed @ self.w1
            return float(self.counts @ np.log(np.maximum(probs, 1e-300)))

        return fn2

    def _unit_fn(self, taus):
        eqs = self.spec.equations
        q1 = self.x1.shape[0]
        q2 = self.x2.shape[0]

        def accumulate(succ, fail, tau, lam, eta_flat, shape):
            """Per-unit log item-block likelihood over a unit-major grid."""
            out = np.zeros(shape)
            flat = out.reshape(shape[0], -1)
            for k in range(tau.shape[0]):
                p = expit(tau[k] + lam[k] * eta_flat)
                np.clip(p, _P_CLIP, 1.0 - _P_CLIP, out=p)
                flat += succ[:, k][:, None] * np.log(p) + fail[:, k][:, None] * np.log1p(-p)
            return out

        if len(eqs) == 1:
            succ, fail = self.unit_ind[0]
            tau1, lam1 = taus[0]

            def fn1(t2_values: np.ndarray) -> float:
                st = self._structure(np.asarray(t2_values, dtype=float))
                e1 = np.add.outer(
                    np.broadcast_to(st["mu1"], (self.n,)), st["s1"] * _SQRT2 * self.x1
                )
                la = accumulate(succ, fail, tau1, lam1, e1.reshape(self.n, -1), (self.n, q1))
                shift = la.max(axis=1, keepdims=True)
                probs = np.exp(la - shift) @ self.w1
                return float(np.sum(shift[:, 0] + np.log(np.maximum(probs, 1e-300))))

            return fn1

        (s1m, f1m), (s2m, f2m) = self.unit_ind
        (tau1, lam1), (tau2, lam2) = taus

        def fn2(t2_values: np.ndarray) -> float:
            st = self._structure(np.asarray(t2_values, dtype=float))
            e1 = np.add.outer(
                np.broadcast_to(st["mu1"], (self.n,)), st["s1"] * _SQRT2 * self.x1
            )
            la1 = accumulate(s1m, f1m, tau1, lam1, e1.reshape(self.n, -1), (self.n, q1))
            grid = (st["gamma"] * _SQRT2 * self.x1)[:, None] + (
                st["cond_sd"] * _SQRT2 * self.x2
            )[None, :]
            e2 = np.broadcast_to(st["base2"], (self.n,))[:, None] + grid.reshape(-1)[None, :]
            la2 = accumulate(s2m, f2m, tau2, lam2, e2, (self.n, q1, q2))
            inner = np.exp(la2 - la2.max(axis=2, keepdims=True)) @ self.w2
            log_inner = np.log(np.maximum(inner, 1e-300)) + la2.max(axis=2)
            total = la1 + log_inner
            shift = total.max(axis=1, keepdims=True)
            probs = np.exp(total - shift) @ self.w1
            return float(np.sum(shift[:, 0] + np.log(np.maximum(probs, 1e-300))))

        return fn2


def _optimize_t2(
    bound_fn, x0: np.ndarray, names: tuple[str, ...], config: IrtConfig, gtol: float
):
    def neg(v: np.ndarray) -> float:
        return -bound_fn(v)

    def neg_grad(v: np.ndarray) -> np.ndarray:
        pv = ParamVector(v, names)
        return -numeric_gradient(lambda q: bound_fn(q.values), pv).values

    res = minimize(
        neg,
        x0,
        jac=neg_grad,
        method="L-BFGS-B",
        options={"maxiter": config.max_iter, "gtol": gtol, "ftol": 1e-12},
    )
    return res


def irt_step2_fit(
    data: Dataset,
    m_fixed: IrtMeasurementParams,
    spec: TraitStructuralSpec,
    config: IrtConfig = IrtConfig(),
    start: ParamVector | None = None,
    skip_v2: bool = False,
) -> TraitStep2Result:
    """Fit the structural system with frozen item parameters.

    Quasi-Newton maximization over the unconstrained structural vector;
    the transformed scales keep every iterate's implied trait
    distribution valid, so no constrained steps are needed.
    """
    ev = _TraitEvaluator(data, m_fixed, spec, config)
    names = ev.free_names
    if not names:
        raise DataError("the structural spec has no free parameters")
    bound = ev.bind_theta1(m_fixed.free_vector().values)
    x0 = start.values if start is not None else spec.default_vector().values
    res = _optimize_t2(bound, x0, names, config, config.gtol)
    grad_norm = float(np.abs(res.jac).max())
    if not np.all(np.isfinite(res.x)):
        raise NumericError("structural fit produced non-finite parameters")
    if grad_norm > 1e-4 * max(1.0, ev.n):
        raise ConvergenceError(
            f"structural fit: score norm {grad_norm:.3e} too large",
            best=TraitStep2Result(
                TraitStructuralParams(spec, ParamVector(res.x, names)),
                None,
                float(-res.fun),
                grad_norm,
                False,
            ),
        )
    params = TraitStructuralParams(spec, ParamVector(res.x, names))
    if skip_v2:
        return TraitStep2Result(params, None, float(-res.fun), grad_norm, True)
    t2 = params.vector
    info = numeric_hessian_block(
        lambda a, b: bound(a.values), t2, t2, step=config.hessian_step
    )
    if not np.all(np.isfinite(info)):
        raise NumericError("structural information matrix has non-finite entries")
    try:
        cov = np.linalg.inv(info)
    except np.linalg.LinAlgError:
        raise NumericError("structural information matrix is singular") from None
    fixed, _ = _repair_array(0.5 * (cov + cov.T), what="structural covariance")
    v2 = CovMatrix(fixed, t2.names)
    return TraitStep2Result(params, v2, float(-res.fun), grad_norm, True)


class _TraitModel:
    """Likelihood and refit hooks for the variance module."""

    def __init__(self, template: IrtMeasurementParams, spec: TraitStructuralSpec, config: IrtConfig):
        self.template = template
        self.spec = spec
        self.config = config
        self._cache_key = None
        self._cache: _TraitEvaluator | None = None

    def _evaluator(self, data: Dataset) -> _TraitEvaluator:
        if self._cache_key != id(data):
            self._cache = _TraitEvaluator(data, self.template, self.spec, self.config)
            self._cache_key = id(data)
        return self._cache

    def full_loglik(self, data: Dataset, theta1: ParamVector, theta2: ParamVector) -> float:
        return self._evaluator(data).loglik(theta1.values, theta2.values)

    def refit_step2(self, data: Dataset, theta1: ParamVector, warm: ParamVector) -> RefitResult:
        ev = self._evaluator(data)
        bound = ev.bind_theta1(theta1.values)
        res = _optimize_t2(bound, warm.values, ev.free_names, self.config, self.config.refit_gtol)
        ok = bool(
            np.all(np.isfinite(res.x))
            and float(np.abs(res.jac).max()) <= 1e-4 * max(1.0, ev.n)
        )
        if not ok:
            return RefitResult(None, False, "refit did not reach a stationary point")
        return RefitResult(ParamVector(res.x, ev.free_names), True)


def trait_model(m_fixed: IrtMeasurementParams, spec: TraitStructuralSpec, config: IrtConfig = IrtConfig()):
    """Model hooks for the variance module (trait structural forms)."""
    return _TraitModel(m_fixed, spec, config)


def _recursive_pair_spec(spec: TraitStructuralSpec) -> None:
    eqs = spec.equations
    ok = (
        len(eqs) == 2
        and not eqs[0].covariates
        and not eqs[0].on_traits
        and not eqs[1].covariates
        and eqs[1].on_traits == (eqs[0].trait,)
        and not spec.correlated_residuals
    )
    if not ok:
        raise DataError(
            "the one-step baseline supports exactly the two-trait form: an "
            "exogenous first trait and a second trait regressed on it"
        )


def irt_onestep(
    data: Dataset, spec: TraitStructuralSpec, config: IrtConfig = IrtConfig()
) -> TraitOnestepResult:
    """Joint (one-step) fit of the two-trait recursive system.

    Identification matches step 1: both traits have unit marginal
    variance and zero marginal mean, so the structural slope is
    ``tanh`` of the single free structural coordinate.  Starts are
    jittered around the internally computed two-step solution.
    """
    _recursive_pair_spec(spec)
    fits = [irt_step1_fit(data, data.trait_names.index(t), config) for t in spec.trait_names]
    # combine_trait_blocks wants fits in dataset block order
    by_block = sorted(
        zip([data.trait_names.index(t) for t in spec.trait_names], fits)
    )
    m = combine_trait_blocks(data, [f for _, f in by_block])
    two = irt_step2_fit(data, m, spec, config, skip_v2=True)
    eq2 = spec.equations[1]
    b1 = two.params.coefficient(eq2.trait, f"on.{spec.equations[0].trait}")
    b0 = two.params.coefficient(eq2.trait, "const")
    s2 = math.sqrt(two.params.residual_var(eq2.trait))
    scale = math.sqrt(b1 * b1 + s2 * s2)
    beta_std = np.clip(b1 / scale, -0.99, 0.99)

    ev = _TraitEvaluator(data, m, spec, config)
    t1_two = m.free_vector()
    # Standardize the second trait: absorb its marginal location/scale
    # into that block's item parameters so the mapped start reproduces
    # the two-step log-likelihood exactly.
    mapped = t1_two.values.copy()
    lay = t1_two.layout
    eq2_block = data.item_blocks[data.trait_names.index(eq2.trait)]
    for i in eq2_block:
        name = data.item_names[i]
        ti, li = lay[f"item.{name}:tau"], lay[f"item.{name}:lam"]
        lam_old = mapped[li]
        mapped[ti] = mapped[ti] + lam_old * b0
        mapped[li] = lam_old * scale
    names = t1_two.names + (f"{eq2.trait}:on.{spec.equations[0].trait}:atanh",)
    center = np.concatenate([mapped, [math.atanh(float(beta_std))]])

    def full_values(theta: np.ndarray) -> float:
        g = theta[-1]
        b = math.tanh(g)
        t2 = np.array([0.0, b, math.log1p(-b * b)])
        return ev.loglik(theta[:-1], t2)

    def neg(v: np.ndarray) -> float:
        return -full_values(v)

    def neg_grad(v: np.ndarray) -> np.ndarray:
        pv = ParamVector(v, names)
        return -numeric_gradient(lambda q: full_values(q.values), pv).values

    best = None
    for s in range(config.n_starts):
        if s == 0:
            x0 = center
        else:
            gen = config.rng.child(20_000 + s).generator()
            x0 = center + config.jitter_sd * gen.standard_normal(center.shape[0])
        res = minimize(
            neg,
            x0,
            jac=neg_grad,
            method="L-BFGS-B",
            options={"maxiter": config.max_iter, "gtol": config.gtol, "ftol": 1e-12},
        )
        if not np.all(np.isfinite(res.x)):
            continue
        if best is None or -res.fun > best[0]:
            best = (-res.fun, res)
    if best is None:
        raise ConvergenceError("every one-step start failed")
    ll, res = best
    grad_norm = float(np.abs(res.jac).max())
    converged = bool(res.success or grad_norm <= 1e-4 * max(1.0, ev.n))
    theta = res.x.copy()

    # Sign convention per block; flipping a trait flips the slope once
    # per flipped trait.
    for j, block in enumerate(data.item_blocks):
        first = data.item_names[block[0]]
        li = lay[f"item.{first}:lam"]
        if theta[li] < 0.0:
            for i in block:
                nm = data.item_names[i]
                theta[lay[f"item.{nm}:lam"]] *= -1.0
            theta[-1] *= -1.0

    lam_all = np.array(
        [abs(theta[lay[f"item.{nm}:lam"]]) for nm in data.item_names]
    )
    if lam_all.max() > config.lambda_bound:
        worst = data.item_names[int(np.argmax(lam_all))]
        raise SeparationError(
            f"one-step loading for item {worst!r} diverged",
            name=f"item.{worst}:lam",
            value=float(lam_all.max()),
        )

    theta_pv = ParamVector(theta, names)
    info = numeric_hessian_block(
        lambda a, b: full_values(a.values), theta_pv, theta_pv, step=config.hessian_step
    )
    cov = None
    se_b1 = float("nan")
    beta1 = math.tanh(theta[-1])
    try:
        raw = np.linalg.inv(info)
        fixed, _ = _repair_array(0.5 * (raw + raw.T), what="one-step covariance")
        cov = CovMatrix(fixed, names)
        se_g = math.sqrt(max(cov.m[-1, -1], 0.0))
        se_b1 = (1.0 - beta1 * beta1) * se_g
    except (np.linalg.LinAlgError, NumericError):
        converged = False

    measurement = m.with_free_values(theta[:-1])
    return TraitOnestepResult(
        measurement=measurement,
        theta=theta_pv,
        cov=cov,
        beta1=beta1,
        beta1_se=se_b1,
        loglik=ll,
        converged=converged,
    )
