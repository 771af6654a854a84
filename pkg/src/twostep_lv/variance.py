"""Variance estimation for two-step fits.

Three methods are offered for the covariance of the structural
estimates:

* ``naive_variance``: the inverse observed information of the step-2
  objective alone.  It ignores that the measurement parameters were
  themselves estimated, so it understates uncertainty.
* ``asymptotic_variance``: adds the closed-form correction
  ``V2 + V2 I12' S11 I12 V2`` where ``V2`` is the naive matrix, ``I12``
  the cross information block between measurement and structural
  parameters, and ``S11`` the step-1 covariance.  The information
  blocks come from central finite differences of the full-model
  log-likelihood at the two-step solution; observed information is used
  throughout.
* ``simulation_variance``: draws measurement vectors from
  ``N(theta1, S11)``, refits step 2 for each draw warm-started at the
  two-step solution, and adds the sample covariance of the refitted
  structural vectors to ``V2``.

A "model" here is any object with two methods::

    full_loglik(data, theta1: ParamVector, theta2: ParamVector) -> float
    refit_step2(data, theta1: ParamVector, warm: ParamVector) -> RefitResult

The latent class and latent trait modules provide factories producing
such objects for each supported structural form.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

from .errors import ConvergenceError, DataError, NumericError, TwoStepError
from .model_core import (
    CovMatrix,
    ParamVector,
    RngStream,
    mvn_sample,
    numeric_hessian_block,
    psd_repair,
    sample_covariance,
)

__all__ = [
    "InformationBlocks",
    "VarianceReport",
    "RefitResult",
    "assemble_sigma11",
    "full_information",
    "naive_variance",
    "asymptotic_variance",
    "simulation_variance",
    "simulation_variance_multi",
    "wald_interval",
]


@dataclass(frozen=True)
class RefitResult:
    """Outcome of one warm-started step-2 refit."""

    theta2: ParamVector | None
    converged: bool
    message: str = ""


@dataclass(frozen=True)
class InformationBlocks:
    """Observed information blocks of the full-model log-likelihood.

    ``i11``, ``i12``, ``i22`` are the measurement/measurement, cross,
    and structural/structural blocks evaluated at the two-step solution.
    The assembled matrix must be symmetric within 1e-6, which checks the
    finite-difference stencils against each other.
    """

    i11: np.ndarray
    i12: np.ndarray
    i22: np.ndarray
    theta1_names: tuple[str, ...]
    theta2_names: tuple[str, ...]

    def __post_init__(self):
        d1, d2 = len(self.theta1_names), len(self.theta2_names)
        if self.i11.shape != (d1, d1) or self.i12.shape != (d1, d2) or self.i22.shape != (d2, d2):
            raise DataError("information block shapes do not match the name layouts")
        full = self.assembled()
        asym = float(np.max(np.abs(full - full.T))) if full.size else 0.0
        if asym > 1e-6 * max(1.0, float(np.max(np.abs(full)))):
            raise NumericError(
                f"assembled information matrix asymmetric by {asym:.3e}"
            )

    def assembled(self) -> np.ndarray:
        top = np.hstack([self.i11, self.i12])
        bottom = np.hstack([self.i12.T, self.i22])
        return np.vstack([top, bottom])


@dataclass(frozen=True)
class VarianceReport:
    """One variance method's output for a structural parameter vector.

    ``total`` is constructed as ``v2 + v1`` so the additive identity is
    exact; ``n_failed`` counts dropped refits (simulation method only).
    """

    method: str
    v2: CovMatrix
    v1: CovMatrix
    total: CovMatrix
    m: int = 0
    n_failed: int = 0

    def __post_init__(self):
        if self.method not in ("naive", "asymptotic", "simulation"):
            raise DataError(f"unknown variance method {self.method!r}")
        if not (self.v2.axis_names == self.v1.axis_names == self.total.axis_names):
            raise DataError("variance blocks have mismatched axis labels")
        gap = float(np.max(np.abs(self.total.m - (self.v2.m + self.v1.m))))
        if gap > 1e-12 * max(1.0, float(np.max(np.abs(self.total.m)))):
            raise NumericError(f"total variance is not v2 + v1 (off by {gap:.3e})")
        if np.any(np.diag(self.total.m) < np.diag(self.v2.m) - 1e-12):
            raise NumericError(
                "total variance diagonal fell below the naive diagonal"
            )

    def se(self) -> ParamVector:
        return self.total.diag_sqrt()


def _report(method: str, v2: CovMatrix, v1_m: np.ndarray, m: int = 0, n_failed: int = 0) -> VarianceReport:
    names = v2.axis_names
    v1_m = 0.5 * (v1_m + v1_m.T)
    # A sandwich or sample covariance is PSD up to rounding; wash out
    # any tiny negative eigenvalues so downstream checks see clean PSD.
    fixed, _ = _repair_if_needed(v1_m)
    v1 = CovMatrix(fixed, names)
    total = CovMatrix(v1.m + v2.m, names)
    return VarianceReport(method=method, v2=v2, v1=v1, total=total, m=m, n_failed=n_failed)


def _repair_if_needed(a: np.ndarray) -> tuple[np.ndarray, bool]:
    if a.size == 0:
        return a, False
    eigs = np.linalg.eigvalsh(a)
    top = max(float(eigs[-1]), 0.0)
    if float(eigs[0]) >= -1e-8 * max(top, 1e-300):
        return a, False
    from .model_core import _repair_array

    return _repair_array(a, what="variance term")


def assemble_sigma11(blocks: list[CovMatrix]) -> CovMatrix:
    """Block-diagonal step-1 covariance with concatenated labels.

    Measurement models fitted separately (one per latent variable) are
    treated as independent, so cross-block covariances are exactly zero.
    """
    if not blocks:
        raise DataError("assemble_sigma11 needs at least one block")
    names: list[str] = []
    for b in blocks:
        names.extend(b.axis_names)
    if len(set(names)) != len(names):
        raise DataError("duplicate parameter labels across step-1 blocks")
    d = len(names)
    out = np.zeros((d, d))
    at = 0
    for b in blocks:
        k = len(b)
        out[at : at + k, at : at + k] = b.m
        at += k
    return CovMatrix(out, tuple(names))


def _inverse_information(info: np.ndarray, names: tuple[str, ...], what: str) -> CovMatrix:
    if not np.all(np.isfinite(info)):
        raise NumericError(f"{what} contains non-finite entries")
    try:
        inv = np.linalg.inv(info)
    except np.linalg.LinAlgError:
        raise NumericError(f"{what} is singular") from None
    inv = 0.5 * (inv + inv.T)
    fixed, _ = _repair_if_needed(inv)
    return CovMatrix(fixed, names)


def full_information(model, data, theta1: ParamVector, theta2: ParamVector, step: float = 1e-4) -> InformationBlocks:
    """All observed information blocks of the full-model log-likelihood."""

    def ll12(a: ParamVector, b: ParamVector) -> float:
        return model.full_loglik(data, a, b)

    i11 = numeric_hessian_block(lambda a, b: model.full_loglik(data, a, theta2), theta1, theta1, step=step)
    i22 = numeric_hessian_block(lambda a, b: model.full_loglik(data, theta1, a), theta2, theta2, step=step)
    i12 = numeric_hessian_block(ll12, theta1, theta2, step=step)
    return InformationBlocks(
        i11=i11, i12=i12, i22=i22, theta1_names=theta1.names, theta2_names=theta2.names
    )


def naive_variance(model, data, theta1: ParamVector, theta2: ParamVector, step: float = 1e-4, v2: CovMatrix | None = None) -> VarianceReport:
    """Inverse observed information of the step-2 objective alone."""
    if v2 is None:
        i22 = numeric_hessian_block(
            lambda a, b: model.full_loglik(data, theta1, a), theta2, theta2, step=step
        )
        v2 = _inverse_information(i22, theta2.names, "structural information")
    zero = np.zeros_like(v2.m)
    return _report("naive", v2, zero)


def _check_sigma11(sigma11: CovMatrix, theta1: ParamVector) -> None:
    if sigma11.axis_names != theta1.names:
        raise DataError(
            "step-1 covariance labels do not match the measurement vector: "
            f"{sigma11.axis_names[:3]}... vs {theta1.names[:3]}..."
        )


def asymptotic_variance(
    model,
    data,
    theta1: ParamVector,
    theta2: ParamVector,
    sigma11: CovMatrix,
    step: float = 1e-4,
    v2: CovMatrix | None = None,
) -> VarianceReport:
    """Closed-form corrected covariance ``V2 + V2 I12' S11 I12 V2``.

    ``I12`` and (when not supplied) ``V2`` come from central-difference
    information blocks of the full-model log-likelihood at the two-step
    solution.
    """
    _check_sigma11(sigma11, theta1)
    if v2 is None:
        i22 = numeric_hessian_block(
            lambda a, b: model.full_loglik(data, theta1, a), theta2, theta2, step=step
        )
        v2 = _inverse_information(i22, theta2.names, "structural information")
    i12 = numeric_hessian_block(
        lambda a, b: model.full_loglik(data, a, b), theta1, theta2, step=step
    )
    inner = i12.T @ sigma11.m @ i12
    v1 = v2.m @ inner @ v2.m
    return _report("asymptotic", v2, v1)


def _simulation_refits(
    model,
    data,
    theta1: ParamVector,
    theta2: ParamVector,
    sigma11: CovMatrix,
    m: int,
    rng: RngStream,
    draws: list[ParamVector] | None = None,
) -> tuple[list[ParamVector], int]:
    """Draw measurement vectors and refit step 2 once per draw.

    Draw ``j`` always uses sub-stream ``rng.child(j)``, so the first
    ``m`` draws of a larger run coincide with a smaller run's draws and
    the result is invariant to refit execution order.
    """
    repaired = psd_repair(sigma11)
    if draws is None:
        draws = [
            mvn_sample(theta1, repaired, 1, rng.child(j))[0] for j in range(m)
        ]
    else:
        if len(draws) < m:
            raise DataError(f"supplied draw matrix has {len(draws)} rows, need {m}")
        draws = list(draws[:m])
    kept: list[ParamVector] = []
    n_failed = 0
    for draw in draws:
        try:
            out = model.refit_step2(data, draw, theta2)
        except TwoStepError:
            n_failed += 1
            continue
        if (
            not out.converged
            or out.theta2 is None
            or not np.all(np.isfinite(out.theta2.values))
        ):
            n_failed += 1
            continue
        kept.append(out.theta2)
    if n_failed > 0.10 * m:
        raise ConvergenceError(
            f"simulation variance: {n_failed} of {m} step-2 refits failed "
            "(more than the 10% ceiling)"
        )
    return kept, n_failed


def simulation_variance(
    model,
    data,
    theta1: ParamVector,
    theta2: ParamVector,
    sigma11: CovMatrix,
    m: int,
    rng: RngStream,
    step: float = 1e-4,
    v2: CovMatrix | None = None,
    draws: list[ParamVector] | None = None,
) -> VarianceReport:
    """Partially simulation-based covariance ``V2 + V1M``.

    ``V1M`` is the sample covariance (divisor: successes minus one) of
    structural refits across ``m`` draws from ``N(theta1, S11)``.
    Failed refits are dropped and counted; more than 10% failures is a
    hard error.  No de-biasing is applied to the sample covariance.
    """
    if m < 2:
        raise DataError(f"simulation variance needs M >= 2, got {m}")
    _check_sigma11(sigma11, theta1)
    if v2 is None:
        i22 = numeric_hessian_block(
            lambda a, b: model.full_loglik(data, theta1, a), theta2, theta2, step=step
        )
        v2 = _inverse_information(i22, theta2.names, "structural information")
    kept, n_failed = _simulation_refits(model, data, theta1, theta2, sigma11, m, rng, draws=draws)
    spread = max(
        float(np.max(np.abs(np.stack([k.values for k in kept]) - theta2.values[None, :])))
        if kept
        else 0.0,
        0.0,
    )
    if len(kept) >= 2 and spread > 0.0:
        v1m = sample_covariance(kept).m
    else:
        # Degenerate S11 (for example all-zero): every refit returns the
        # two-step solution and the spread is exactly zero.
        v1m = np.zeros_like(v2.m)
    return _report("simulation", v2, v1m, m=m, n_failed=n_failed)


def simulation_variance_multi(
    model,
    data,
    theta1: ParamVector,
    theta2: ParamVector,
    sigma11: CovMatrix,
    m_values: list[int],
    rng: RngStream,
    step: float = 1e-4,
    v2: CovMatrix | None = None,
    draws: list[ParamVector] | None = None,
) -> dict[int, VarianceReport]:
    """Simulation variance for several M sharing one refit pass.

    Because draw ``j`` is tied to sub-stream ``j``, the report for each
    ``m`` is identical to calling :func:`simulation_variance` with that
    ``m`` directly; only the largest ``m`` pays for refits.
    """
    if not m_values:
        raise DataError("m_values must be nonempty")
    for m in m_values:
        if m < 2:
            raise DataError(f"simulation variance needs M >= 2, got {m}")
    _check_sigma11(sigma11, theta1)
    if v2 is None:
        i22 = numeric_hessian_block(
            lambda a, b: model.full_loglik(data, theta1, a), theta2, theta2, step=step
        )
        v2 = _inverse_information(i22, theta2.names, "structural information")
    top = max(m_values)
    repaired = psd_repair(sigma11)
    if draws is None:
        draws = [mvn_sample(theta1, repaired, 1, rng.child(j))[0] for j in range(top)]
    results: dict[int, list[ParamVector | None]] = {}
    fitted: list[ParamVector | None] = []
    for draw in draws[:top]:
        try:
            out = model.refit_step2(data, draw, theta2)
            ok = (
                out.converged
                and out.theta2 is not None
                and bool(np.all(np.isfinite(out.theta2.values)))
            )
            fitted.append(out.theta2 if ok else None)
        except TwoStepError:
            fitted.append(None)
    out_reports: dict[int, VarianceReport] = {}
    for m in sorted(set(m_values)):
        prefix = fitted[:m]
        kept = [t for t in prefix if t is not None]
        n_failed = m - len(kept)
        if n_failed > 0.10 * m:
            raise ConvergenceError(
                f"simulation variance (M={m}): {n_failed} refits failed "
                "(more than the 10% ceiling)"
            )
        spread = (
            float(np.max(np.abs(np.stack([k.values for k in kept]) - theta2.values[None, :])))
            if kept
            else 0.0
        )
        if len(kept) >= 2 and spread > 0.0:
            v1m = sample_covariance(kept).m
        else:
            v1m = np.zeros_like(v2.m)
        out_reports[m] = _report("simulation", v2, v1m, m=m, n_failed=n_failed)
    return out_reports


def wald_interval(estimate: float, se: float, level: float = 0.95) -> tuple[float, float]:
    """Symmetric normal-quantile interval ``estimate +- z * se``."""
    if se < 0:
        raise DataError(f"standard error must be nonnegative, got {se}")
    if not 0.0 < level < 1.0:
        raise DataError(f"confidence level must be in (0, 1), got {level}")
    z = float(ndtri(0.5 * (1.0 + level)))
    return (float(estimate) - z * se, float(estimate) + z * se)
