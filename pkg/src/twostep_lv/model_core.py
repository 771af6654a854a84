"""Labeled parameter containers, seeded random streams, and the numeric
kernels every estimator in this package is built on.

The containers exist so that a flat vector of estimates never becomes
detached from the names of its coordinates: variance blocks, simulation
draws, and report tables all consume ``ParamVector`` / ``CovMatrix``
pairs and check label agreement instead of trusting positional order.

All derivatives in the package are central finite differences computed
here.  No analytic likelihood derivatives and no automatic
differentiation are used anywhere; fits hand plain log-likelihood
callables to these kernels.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import DataError, NumericError

__all__ = [
    "ParamVector",
    "CovMatrix",
    "RngStream",
    "mvn_sample",
    "sample_covariance",
    "numeric_gradient",
    "numeric_hessian_block",
    "psd_repair",
]

# Construction-time tolerance for CovMatrix: symmetry slack and the most
# negative eigenvalue accepted relative to the largest one.
_SYM_TOL = 1e-10
_EIG_TOL = 1e-8

# psd_repair: eigenvalue floor (relative to the largest eigenvalue) and
# the indefiniteness level beyond which repair refuses to proceed.
_REPAIR_FLOOR = 1e-10
_REPAIR_REFUSE = 1e-6


@dataclass(frozen=True)
class ParamVector:
    """A flat float vector with one unique name per coordinate."""

    values: np.ndarray
    names: tuple[str, ...]

    def __post_init__(self):
        v = np.array(self.values, dtype=float, copy=True).reshape(-1)
        object.__setattr__(self, "values", v)
        names = tuple(str(n) for n in self.names)
        object.__setattr__(self, "names", names)
        if v.shape[0] != len(names):
            raise DataError(
                f"parameter vector has {v.shape[0]} values but {len(names)} names"
            )
        if len(set(names)) != len(names):
            seen, dup = set(), None
            for n in names:
                if n in seen:
                    dup = n
                    break
                seen.add(n)
            raise DataError(f"duplicate parameter name {dup!r}")

    def __len__(self) -> int:
        return self.values.shape[0]

    @property
    def layout(self) -> dict[str, int]:
        """Name -> position map."""
        return {n: i for i, n in enumerate(self.names)}

    def __getitem__(self, name: str) -> float:
        try:
            return float(self.values[self.names.index(name)])
        except ValueError:
            raise KeyError(name) from None

    def with_values(self, values: np.ndarray) -> "ParamVector":
        """Same names, new values."""
        return ParamVector(np.asarray(values, dtype=float), self.names)

    def subset(self, names: Sequence[str]) -> "ParamVector":
        idx = [self.names.index(n) for n in names]
        return ParamVector(self.values[idx], tuple(names))

    @staticmethod
    def concat(parts: Sequence["ParamVector"]) -> "ParamVector":
        values = np.concatenate([p.values for p in parts]) if parts else np.empty(0)
        names: tuple[str, ...] = tuple(n for p in parts for n in p.names)
        return ParamVector(values, names)


@dataclass(frozen=True)
class CovMatrix:
    """A labeled covariance matrix.

    Construction validates that the matrix is square with one name per
    axis, symmetric within 1e-10, and numerically positive semidefinite
    (eigenvalues no smaller than -1e-8 times the largest).  The stored
    matrix is the symmetrized copy of the input.
    """

    m: np.ndarray
    axis_names: tuple[str, ...]

    def __post_init__(self):
        a = np.array(self.m, dtype=float, copy=True)
        names = tuple(str(n) for n in self.axis_names)
        object.__setattr__(self, "axis_names", names)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise DataError(f"covariance matrix must be square, got shape {a.shape}")
        if a.shape[0] != len(names):
            raise DataError(
                f"covariance matrix is {a.shape[0]}x{a.shape[0]} but has "
                f"{len(names)} axis names"
            )
        if len(set(names)) != len(names):
            raise DataError("covariance axis names must be unique")
        if not np.all(np.isfinite(a)):
            raise NumericError("covariance matrix contains non-finite entries")
        scale = max(1.0, float(np.max(np.abs(a)))) if a.size else 1.0
        asym = float(np.max(np.abs(a - a.T))) if a.size else 0.0
        if asym > _SYM_TOL * scale:
            raise DataError(f"covariance matrix asymmetric by {asym:.3e}")
        a = 0.5 * (a + a.T)
        if a.size:
            eigs = np.linalg.eigvalsh(a)
            top = max(float(eigs[-1]), 0.0)
            if float(eigs[0]) < -_EIG_TOL * max(top, 1e-300):
                raise NumericError(
                    f"covariance matrix is indefinite: min eigenvalue "
                    f"{eigs[0]:.3e} vs max {eigs[-1]:.3e}"
                )
        object.__setattr__(self, "m", a)

    def __len__(self) -> int:
        return self.m.shape[0]

    @property
    def layout(self) -> dict[str, int]:
        return {n: i for i, n in enumerate(self.axis_names)}

    def entry(self, row: str, col: str) -> float:
        lay = self.layout
        return float(self.m[lay[row], lay[col]])

    def diag_sqrt(self) -> ParamVector:
        """Per-coordinate standard deviations (sqrt of the diagonal)."""
        d = np.diag(self.m).copy()
        d[d < 0.0] = 0.0
        return ParamVector(np.sqrt(d), self.axis_names)

    def subset(self, names: Sequence[str]) -> "CovMatrix":
        idx = [self.axis_names.index(n) for n in names]
        return CovMatrix(self.m[np.ix_(idx, idx)], tuple(names))


@dataclass(frozen=True)
class RngStream:
    """A named, reproducible random stream.

    Streams are identified by ``(seed, stream_id)``; the generator for a
    given pair is always the same object state, no matter how many other
    streams exist or in which order they are used.  ``child(k)`` derives
    an independent sub-stream family, used to give every replication and
    every simulation draw its own stream.
    """

    seed: int
    stream_id: int = 0

    def _sequence(self) -> np.random.SeedSequence:
        return np.random.SeedSequence(self.seed, spawn_key=(self.stream_id,))

    def generator(self) -> np.random.Generator:
        """A fresh generator positioned at the start of this stream."""
        return np.random.default_rng(self._sequence())

    def child(self, k: int) -> "RngStream":
        """Sub-stream ``k``: folds this stream's identity into a new seed."""
        folded = int(self._sequence().generate_state(1, np.uint64)[0])
        return RngStream(folded, int(k))


def mvn_sample(
    mean: ParamVector, cov: CovMatrix, count: int, rng: RngStream
) -> list[ParamVector]:
    """Draw ``count`` multivariate normal vectors.

    The covariance goes through :func:`psd_repair` first, then a
    triangular (Cholesky) factor maps i.i.d. standard normals to draws.
    A zero covariance returns ``count`` copies of the mean exactly.
    """
    if count < 1:
        raise DataError(f"mvn_sample needs count >= 1, got {count}")
    if mean.names != cov.axis_names:
        raise DataError(
            "mvn_sample: mean and covariance labels disagree: "
            f"{mean.names} vs {cov.axis_names}"
        )
    repaired = psd_repair(cov)
    a = repaired.m
    d = len(mean)
    if float(np.max(np.abs(a))) == 0.0:
        return [mean.with_values(mean.values) for _ in range(count)]
    try:
        chol = np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        # One retry with a tiny diagonal jitter; repair guarantees the
        # spectrum is already nonnegative up to rounding.
        jitter = 1e-12 * float(np.max(np.abs(np.diag(a))))
        try:
            chol = np.linalg.cholesky(a + jitter * np.eye(d))
        except np.linalg.LinAlgError:
            raise NumericError(
                "mvn_sample: covariance factorization failed after repair"
            ) from None
    z = rng.generator().standard_normal((count, d))
    draws = mean.values[None, :] + z @ chol.T
    return [ParamVector(row, mean.names) for row in draws]


def sample_covariance(draws: Sequence[ParamVector]) -> CovMatrix:
    """Sample covariance of a list of draws, with divisor ``len - 1``."""
    if len(draws) < 2:
        raise DataError(f"sample_covariance needs at least 2 draws, got {len(draws)}")
    names = draws[0].names
    for i, d in enumerate(draws):
        if d.names != names:
            raise DataError(f"sample_covariance: draw {i} has mismatched labels")
    x = np.stack([d.values for d in draws])
    xc = x - x.mean(axis=0, keepdims=True)
    c = xc.T @ xc / (x.shape[0] - 1)
    return CovMatrix(0.5 * (c + c.T), names)


def _check_finite(value: float, what: str) -> float:
    value = float(value)
    if not np.isfinite(value):
        raise NumericError(f"non-finite function value while probing {what}")
    return value


def numeric_gradient(
    f: Callable[[ParamVector], float], x: ParamVector, step: float = 1e-6
) -> ParamVector:
    """Central-difference gradient of ``f`` at ``x``.

    Coordinate ``i`` uses step ``step * max(1, |x_i|)``.  A non-finite
    probe raises an error that names the coordinate being perturbed.
    """
    h = step * np.maximum(1.0, np.abs(x.values))
    grad = np.empty(len(x))
    for i in range(len(x)):
        up = x.values.copy()
        dn = x.values.copy()
        up[i] += h[i]
        dn[i] -= h[i]
        fu = _check_finite(f(x.with_values(up)), x.names[i])
        fd = _check_finite(f(x.with_values(dn)), x.names[i])
        grad[i] = (fu - fd) / (2.0 * h[i])
    return ParamVector(grad, x.names)


def numeric_hessian_block(
    f: Callable[[ParamVector, ParamVector], float],
    a: ParamVector,
    b: ParamVector,
    step: float = 1e-4,
    symmetrize: bool = True,
) -> np.ndarray:
    """Negated cross second-derivative block of ``f`` between ``a`` and ``b``.

    Entry ``(i, j)`` is the four-point central stencil

        -[f(a+h_i, b+h_j) - f(a+h_i, b-h_j)
          - f(a-h_i, b+h_j) + f(a-h_i, b-h_j)] / (4 h_i h_j)

    with per-coordinate steps ``step * max(1, |value|)``.  The sign
    convention makes log-likelihood inputs yield information blocks
    directly.

    When ``a`` and ``b`` are the same block (equal names and values),
    the two perturbations are combined into a single vector that is
    passed as both arguments, so ``f`` may read either one; the result
    is then the full second-derivative block and is symmetrized unless
    ``symmetrize`` is False.
    """
    same = a.names == b.names and np.array_equal(a.values, b.values)
    ha = step * np.maximum(1.0, np.abs(a.values))
    hb = step * np.maximum(1.0, np.abs(b.values))
    d1, d2 = len(a), len(b)
    out = np.full((d1, d2), np.nan)

    def probe(i: int, si: float, j: int, sj: float) -> float:
        what = f"({a.names[i]}, {b.names[j]})"
        if same:
            v = a.values.copy()
            v[i] += si * ha[i]
            v[j] += sj * hb[j]
            pv = a.with_values(v)
            return _check_finite(f(pv, pv), what)
        va = a.values.copy()
        vb = b.values.copy()
        va[i] += si * ha[i]
        vb[j] += sj * hb[j]
        return _check_finite(f(a.with_values(va), b.with_values(vb)), what)

    for i in range(d1):
        j_start = i if (same and symmetrize) else 0
        for j in range(j_start, d2):
            num = (
                probe(i, +1.0, j, +1.0)
                - probe(i, +1.0, j, -1.0)
                - probe(i, -1.0, j, +1.0)
                + probe(i, -1.0, j, -1.0)
            )
            out[i, j] = -num / (4.0 * ha[i] * hb[j])
    if same and symmetrize:
        iu = np.triu_indices(d1, k=1)
        out[(iu[1], iu[0])] = out[iu]
        out = 0.5 * (out + out.T)
    return out


def _repair_array(a: np.ndarray, what: str = "matrix") -> tuple[np.ndarray, bool]:
    """Eigenvalue-clip ``a`` to PSD.  Returns (matrix, changed flag).

    Refuses (raises) when the most negative eigenvalue is beyond
    ``-1e-6`` times the largest: that level of indefiniteness signals a
    broken fit, not rounding noise.
    """
    sym = 0.5 * (a + a.T)
    w, v = np.linalg.eigh(sym)
    top = max(float(w[-1]), 0.0)
    if float(w[0]) < -_REPAIR_REFUSE * max(top, 1e-300):
        raise NumericError(
            f"psd repair refused for {what}: eigenvalue {w[0]:.6e} is too "
            f"negative relative to the largest ({w[-1]:.6e})"
        )
    floor = _REPAIR_FLOOR * top
    if float(w[0]) >= floor or top == 0.0:
        return a, False
    rebuilt = (v * np.clip(w, floor, None)) @ v.T
    return 0.5 * (rebuilt + rebuilt.T), True


def psd_repair(cov: CovMatrix) -> CovMatrix:
    """Clip tiny negative eigenvalues of ``cov`` up to a small floor.

    Eigenvalues below ``1e-10`` times the largest are raised to that
    floor; an already-PSD input is returned unchanged (same object).
    Indefiniteness beyond ``-1e-6`` times the largest eigenvalue raises
    instead of repairing.
    """
    fixed, changed = _repair_array(cov.m, what="covariance")
    if not changed:
        return cov
    return CovMatrix(fixed, cov.axis_names)
