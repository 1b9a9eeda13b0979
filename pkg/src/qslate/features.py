"""User state construction and sparse principal component extraction.

The raw state of a session is its 10 portrait values followed by one 0/1
click indicator per catalog item (ascending item id), giving
``num_items + 10`` columns.  Sparse PCA compresses that wide, sparse state:
portrait columns are z-scored, click indicators are centered but not
variance-scaled (scaling would blow up rare-click columns), and components
are extracted one at a time by power iteration with soft-thresholded
loadings, deflating the standardized data between components.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ComponentCollapseError, DataError, FitError, ModelFileError
from .ingest import N_PORTRAITS, ItemCatalog, SessionRecord, UserRecord

COMPONENTS_FORMAT = "qslate-components"
COMPONENTS_VERSION = 1


@dataclass
class FeatureMatrix:
    """Dense raw state matrix plus the meaning of its columns."""

    values: np.ndarray
    item_ids: tuple[int, ...]
    n_portraits: int = N_PORTRAITS

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def n_cols(self) -> int:
        return self.values.shape[1]


def build_raw_features(
    records: list[SessionRecord] | list[UserRecord], catalog: ItemCatalog
) -> FeatureMatrix:
    """Stack portraits and one-hot click indicators, one row per record."""
    if len(catalog) == 0:
        raise DataError("catalog is empty")
    item_ids = catalog.item_ids
    col_of = {item_id: N_PORTRAITS + j for j, item_id in enumerate(item_ids)}
    values = np.zeros((len(records), N_PORTRAITS + len(item_ids)))
    for i, rec in enumerate(records):
        values[i, :N_PORTRAITS] = rec.portraits
        for item_id in rec.clicked_items:
            values[i, col_of[item_id]] = 1.0
    return FeatureMatrix(values=values, item_ids=item_ids)


@dataclass
class SparseComponents:
    """Fitted extractor: loadings plus the standardization that fed them.

    Each loading row has unit norm, or is all zero and flagged in
    ``degenerate`` (requested k exceeded the numeric rank of the data).
    A component zeroed by soft-thresholding itself raises instead.
    """

    loadings: np.ndarray
    column_means: np.ndarray
    column_scales: np.ndarray
    k: int
    l1_penalty: float
    explained_variance: np.ndarray
    degenerate: tuple[bool, ...]

    @property
    def n_cols(self) -> int:
        return self.loadings.shape[1]

    def save(self, path: str | Path, stamp: str | None = None) -> None:
        payload = {
            "format": COMPONENTS_FORMAT,
            "version": COMPONENTS_VERSION,
            "stamp": stamp,
            "k": self.k,
            "l1_penalty": self.l1_penalty,
            "column_means": self.column_means.tolist(),
            "column_scales": self.column_scales.tolist(),
            "loadings": self.loadings.tolist(),
            "explained_variance": self.explained_variance.tolist(),
            "degenerate": list(self.degenerate),
        }
        Path(path).write_text(json.dumps(payload, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> tuple["SparseComponents", str | None]:
        try:
            payload = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ModelFileError(path, f"cannot read components file: {exc}") from None
        if payload.get("format") != COMPONENTS_FORMAT:
            raise ModelFileError(path, "not a components file")
        if payload.get("version") != COMPONENTS_VERSION:
            raise ModelFileError(path, f"unsupported version {payload.get('version')}")
        comps = cls(
            loadings=np.asarray(payload["loadings"], dtype=np.float64),
            column_means=np.asarray(payload["column_means"], dtype=np.float64),
            column_scales=np.asarray(payload["column_scales"], dtype=np.float64),
            k=int(payload["k"]),
            l1_penalty=float(payload["l1_penalty"]),
            explained_variance=np.asarray(payload["explained_variance"], dtype=np.float64),
            degenerate=tuple(bool(b) for b in payload["degenerate"]),
        )
        return comps, payload.get("stamp")


def _column_stats(values: np.ndarray, zscore_mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    means = values.mean(axis=0)
    scales = np.ones(values.shape[1])
    if zscore_mask.any():
        stds = values[:, zscore_mask].std(axis=0)
        stds[stds == 0.0] = 1.0  # constant columns contribute zero after centering
        scales[zscore_mask] = stds
    return means, scales


def _soft_threshold(w: np.ndarray, level: float) -> np.ndarray:
    return np.sign(w) * np.maximum(np.abs(w) - level, 0.0)


def fit_sparse_pca(
    X: FeatureMatrix | np.ndarray,
    k: int,
    l1_penalty: float = 0.0,
    max_iter: int = 200,
    tol: float = 1e-7,
    seed: int = 0,
    zscore_mask: np.ndarray | None = None,
    sparsity_floor: float = 0.0,
) -> SparseComponents:
    """Fit ``k`` sparse components by thresholded power iteration.

    ``l1_penalty`` is relative: at each iteration, loading entries whose
    magnitude is at most ``l1_penalty`` times the largest magnitude are
    soft-thresholded away, so 0 recovers ordinary PCA and values approaching
    1 keep almost nothing.  Components are extracted in sequence, deflating
    the standardized data by projection after each one.  Deterministic for a
    fixed seed.

    When ``X`` is a :class:`FeatureMatrix` only the portrait columns are
    z-scored; a plain array has all columns z-scored unless ``zscore_mask``
    says otherwise.
    """
    if isinstance(X, FeatureMatrix):
        values = X.values
        if zscore_mask is None:
            zscore_mask = np.zeros(values.shape[1], dtype=bool)
            zscore_mask[: X.n_portraits] = True
    else:
        values = np.asarray(X, dtype=np.float64)
        if zscore_mask is None:
            zscore_mask = np.ones(values.shape[1], dtype=bool)
    n, p = values.shape
    if k < 1 or k > min(n, p):
        raise FitError(f"k={k} out of range [1, {min(n, p)}]")
    if max_iter < 1:
        raise FitError("max_iter must be >= 1")
    if tol <= 0:
        raise FitError("tol must be positive")
    if l1_penalty < 0:
        raise FitError("l1_penalty must be nonnegative")

    means, scales = _column_stats(values, zscore_mask)
    residual = (values - means) / scales
    rng = np.random.default_rng(seed)
    # Past this point the residual is numerical noise: the requested k
    # exceeds the data rank and the remaining components are degenerate.
    rank_floor = 1e-10 * np.linalg.norm(residual)

    loadings = np.zeros((k, p))
    explained = np.zeros(k)
    degenerate: list[bool] = []
    for j in range(k):
        if np.linalg.norm(residual) <= rank_floor:
            loadings[j] = 0.0
            degenerate.append(True)
            continue
        v = rng.normal(size=p)
        v /= np.linalg.norm(v)
        for _ in range(max_iter):
            w = residual.T @ (residual @ v) / n
            if l1_penalty > 0.0:
                w = _soft_threshold(w, l1_penalty * np.abs(w).max(initial=0.0))
            norm = np.linalg.norm(w)
            if norm == 0.0:
                if l1_penalty > 0.0:
                    raise ComponentCollapseError(
                        f"component {j} collapsed to zero: l1_penalty={l1_penalty} too large"
                    )
                v = np.zeros(p)
                break
            v_new = w / norm
            delta = float(np.linalg.norm(v_new - v))
            v = v_new
            if delta < tol:
                break
        is_zero = not v.any()
        if not is_zero:
            # Canonical orientation: largest-magnitude entry positive.
            pivot = int(np.argmax(np.abs(v)))
            if v[pivot] < 0:
                v = -v
        scores = residual @ v
        explained[j] = float(scores @ scores) / n
        loadings[j] = v
        degenerate.append(is_zero)
        residual = residual - np.outer(scores, v)

    comps = SparseComponents(
        loadings=loadings,
        column_means=means,
        column_scales=scales,
        k=k,
        l1_penalty=l1_penalty,
        explained_variance=explained,
        degenerate=tuple(degenerate),
    )
    if l1_penalty > 0.0 and sparsity_floor > 0.0:
        zero_frac = float((comps.loadings == 0.0).mean())
        if zero_frac < sparsity_floor:
            raise FitError(
                f"zero fraction {zero_frac:.3f} below sparsity floor {sparsity_floor:.3f}"
            )
    return comps


def transform(X: FeatureMatrix | np.ndarray, components: SparseComponents) -> np.ndarray:
    """Project rows onto the fitted components.

    The projection accumulates column by column in a fixed order so a row
    transforms to bit-identical values whether passed alone or inside any
    batch (a plain matmul would let BLAS blocking change the summation
    order).
    """
    values = X.values if isinstance(X, FeatureMatrix) else np.asarray(X, dtype=np.float64)
    if values.ndim == 1:
        values = values[None, :]
    if values.shape[1] != components.n_cols:
        raise DataError(
            f"feature matrix has {values.shape[1]} columns, components expect {components.n_cols}"
        )
    standardized = (values - components.column_means) / components.column_scales
    n = standardized.shape[0]
    out = np.zeros((n, components.k))
    loadings_t = components.loadings.T  # (p, k)
    for col in range(components.n_cols):
        out += standardized[:, col : col + 1] * loadings_t[col]
    return out
