"""Dataset container and file loading.

A dataset holds integer item responses (code 0 means missing), optional
continuous covariates, and optional continuous distal outcomes.  On
disk it is a CSV whose column names carry the role:

* ``item.<name>``: integer responses, codes 1..h for an item with h
  categories; 0, an empty cell, or ``NA`` means missing.
* ``z.<name>``: covariate columns (floats, blanks allowed).
* ``y.<name>``: distal outcome columns (floats, blanks allowed).

A configuration mapping (inline dict, or a JSON/TOML sidecar file)
optionally supplies ``n_categories`` per item (otherwise inferred from
the largest observed code), ``item_blocks`` assigning items to latent
variables (default: one block with every item), and ``trait_names``.

Rows with a missing covariate or outcome stay in the dataset: they
contribute to measurement fitting, which tolerates item missingness,
but are excluded from structural fitting via ``step2_mask``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import DataError

__all__ = ["Dataset", "load_dataset", "save_dataset", "load_config_file"]


@dataclass(frozen=True)
class Dataset:
    """In-memory dataset with role-separated columns.

    ``items`` is an ``(n, p)`` integer array of codes, 0 = missing.
    ``item_blocks`` maps each latent variable to column indices of
    ``items``; blocks must partition the items.
    """

    items: np.ndarray
    n_categories: tuple[int, ...]
    item_names: tuple[str, ...]
    item_blocks: tuple[tuple[int, ...], ...]
    trait_names: tuple[str, ...]
    covariates: np.ndarray
    covariate_names: tuple[str, ...]
    outcomes: np.ndarray
    outcome_names: tuple[str, ...]

    def __post_init__(self):
        items = np.array(self.items, dtype=int, copy=True)
        if items.ndim != 2:
            raise DataError("items must be a 2-d array of integer codes")
        n, p = items.shape
        if p != len(self.item_names) or p != len(self.n_categories):
            raise DataError("item names / category counts do not match items shape")
        for k, h in enumerate(self.n_categories):
            if h < 2:
                raise DataError(
                    f"item {self.item_names[k]!r} needs at least 2 categories, got {h}"
                )
            col = items[:, k]
            if col.min(initial=0) < 0 or col.max(initial=0) > h:
                bad = col[(col < 0) | (col > h)][0]
                raise DataError(
                    f"item {self.item_names[k]!r} has code {bad} outside 0..{h}"
                )
        covered = sorted(i for block in self.item_blocks for i in block)
        if covered != list(range(p)):
            raise DataError("item_blocks must partition the items exactly once each")
        if len(self.trait_names) != len(self.item_blocks):
            raise DataError("one trait name per item block is required")
        cov = np.array(self.covariates, dtype=float, copy=True).reshape(n, -1)
        out = np.array(self.outcomes, dtype=float, copy=True).reshape(n, -1)
        if cov.shape[1] != len(self.covariate_names):
            raise DataError("covariate names do not match covariates shape")
        if out.shape[1] != len(self.outcome_names):
            raise DataError("outcome names do not match outcomes shape")
        object.__setattr__(self, "items", items)
        object.__setattr__(self, "covariates", cov)
        object.__setattr__(self, "outcomes", out)
        object.__setattr__(self, "item_names", tuple(self.item_names))
        object.__setattr__(self, "n_categories", tuple(int(h) for h in self.n_categories))
        object.__setattr__(
            self, "item_blocks", tuple(tuple(int(i) for i in b) for b in self.item_blocks)
        )
        object.__setattr__(self, "trait_names", tuple(self.trait_names))
        object.__setattr__(self, "covariate_names", tuple(self.covariate_names))
        object.__setattr__(self, "outcome_names", tuple(self.outcome_names))

    @property
    def n(self) -> int:
        return self.items.shape[0]

    @property
    def n_items(self) -> int:
        return self.items.shape[1]

    @property
    def step2_mask(self) -> np.ndarray:
        """Rows complete on every covariate and outcome column."""
        ok = np.ones(self.n, dtype=bool)
        if self.covariates.shape[1]:
            ok &= ~np.isnan(self.covariates).any(axis=1)
        if self.outcomes.shape[1]:
            ok &= ~np.isnan(self.outcomes).any(axis=1)
        return ok

    def block_items(self, j: int) -> np.ndarray:
        """Item response columns for latent variable ``j``."""
        return self.items[:, list(self.item_blocks[j])]

    @staticmethod
    def from_arrays(
        items: np.ndarray,
        n_categories=None,
        item_blocks=None,
        trait_names=None,
        covariates=None,
        covariate_names=(),
        outcomes=None,
        outcome_names=(),
        item_names=None,
    ) -> "Dataset":
        """Build a dataset from raw arrays with defaulted naming."""
        items = np.asarray(items, dtype=int)
        n, p = items.shape
        if item_names is None:
            item_names = tuple(str(k + 1) for k in range(p))
        if n_categories is None:
            n_categories = tuple(max(2, int(items[:, k].max())) for k in range(p))
        elif np.isscalar(n_categories):
            n_categories = (int(n_categories),) * p
        if item_blocks is None:
            item_blocks = (tuple(range(p)),)
        if trait_names is None:
            trait_names = tuple(f"eta{j + 1}" for j in range(len(item_blocks)))
        if covariates is None:
            covariates = np.empty((n, 0))
        if outcomes is None:
            outcomes = np.empty((n, 0))
        return Dataset(
            items=items,
            n_categories=tuple(n_categories),
            item_names=tuple(item_names),
            item_blocks=tuple(tuple(b) for b in item_blocks),
            trait_names=tuple(trait_names),
            covariates=np.asarray(covariates, dtype=float),
            covariate_names=tuple(covariate_names),
            outcomes=np.asarray(outcomes, dtype=float),
            outcome_names=tuple(outcome_names),
        )


def load_config_file(path) -> dict:
    """Read a JSON or TOML configuration file into a dict."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"configuration file not found: {path}")
    text = path.read_text()
    if path.suffix.lower() == ".toml":
        try:
            import tomllib  # Python 3.11+
        except ModuleNotFoundError:
            import tomli as tomllib
        try:
            return tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise DataError(f"could not parse TOML config {path}: {exc}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise DataError(f"could not parse JSON config {path}: {exc}") from None


def load_dataset(csv_path, config: dict | str | Path | None = None) -> Dataset:
    """Load a dataset from CSV plus an optional configuration.

    ``config`` may be a mapping or a path to a JSON/TOML file.
    Recognized keys: ``n_categories`` (mapping item name -> count),
    ``item_blocks`` (list of lists of item names), ``trait_names``.
    """
    csv_path = Path(csv_path)
    if not csv_path.exists():
        raise DataError(f"data file not found: {csv_path}")
    if config is None:
        config = {}
    elif not isinstance(config, dict):
        config = load_config_file(config)

    frame = pd.read_csv(csv_path, na_values=["NA"], skipinitialspace=True)
    item_cols = [c for c in frame.columns if c.startswith("item.")]
    z_cols = [c for c in frame.columns if c.startswith("z.")]
    y_cols = [c for c in frame.columns if c.startswith("y.")]
    if not item_cols:
        raise DataError(f"{csv_path} has no 'item.' columns")

    item_names = tuple(c[len("item."):] for c in item_cols)
    raw = frame[item_cols].to_numpy(dtype=float)
    if np.nanmin(raw, initial=0.0) < 0 or np.any(np.abs(raw - np.round(raw)) > 1e-9):
        raise DataError("item columns must contain nonnegative integer codes")
    items = np.where(np.isnan(raw), 0, np.round(raw)).astype(int)

    cat_cfg = config.get("n_categories", {})
    if isinstance(cat_cfg, (int, np.integer)):
        cat_cfg = {name: int(cat_cfg) for name in item_names}
    n_categories = []
    for k, name in enumerate(item_names):
        observed = int(items[:, k].max(initial=0))
        h = int(cat_cfg.get(name, 0)) or max(2, observed)
        if observed > h:
            raise DataError(
                f"item {name!r} has observed code {observed} above its "
                f"configured category count {h}"
            )
        n_categories.append(h)

    blocks_cfg = config.get("item_blocks")
    if blocks_cfg is None:
        item_blocks = (tuple(range(len(item_names))),)
    else:
        index = {name: k for k, name in enumerate(item_names)}
        item_blocks = []
        for block in blocks_cfg:
            cols = []
            for name in block:
                if str(name) not in index:
                    raise DataError(
                        f"item_blocks references unknown item {name!r}; "
                        f"data has items {list(item_names)}"
                    )
                cols.append(index[str(name)])
            item_blocks.append(tuple(cols))
        item_blocks = tuple(item_blocks)
    trait_names = tuple(
        config.get("trait_names", [f"eta{j + 1}" for j in range(len(item_blocks))])
    )

    covariates = (
        frame[z_cols].to_numpy(dtype=float) if z_cols else np.empty((len(frame), 0))
    )
    outcomes = (
        frame[y_cols].to_numpy(dtype=float) if y_cols else np.empty((len(frame), 0))
    )
    return Dataset(
        items=items,
        n_categories=tuple(n_categories),
        item_names=item_names,
        item_blocks=item_blocks,
        trait_names=trait_names,
        covariates=covariates,
        covariate_names=tuple(c[len("z."):] for c in z_cols),
        outcomes=outcomes,
        outcome_names=tuple(c[len("y."):] for c in y_cols),
    )


def save_dataset(dataset: Dataset, csv_path) -> None:
    """Write a dataset back to the CSV layout used by ``load_dataset``."""
    cols: dict[str, object] = {}
    for k, name in enumerate(dataset.item_names):
        col = dataset.items[:, k].astype(object)
        col[dataset.items[:, k] == 0] = ""
        cols[f"item.{name}"] = col
    for q, name in enumerate(dataset.covariate_names):
        cols[f"z.{name}"] = dataset.covariates[:, q]
    for r, name in enumerate(dataset.outcome_names):
        cols[f"y.{name}"] = dataset.outcomes[:, r]
    pd.DataFrame(cols).to_csv(csv_path, index=False)
