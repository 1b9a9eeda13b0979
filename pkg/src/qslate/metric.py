"""Weighted revenue scoring, holdout splitting, and grid-search tuning.

The score credits a recommended item when the validation session actually
purchased that item somewhere in its log (identity matching, not position)
and the item's location permits the step it was recommended on; credited
items contribute their price.  Per-step revenue totals are combined as

    score = (1/N) * sum_st weight[st] * value[st]

with weights rising by step, because later steps mean the player kept
buying.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import DataError, FitError, QslateError
from .ingest import ItemCatalog, SessionRecord
from .pipeline import PipelineParams, fit_pipeline, recommend_for_sessions


@dataclass(frozen=True)
class MetricConfig:
    step_weights: tuple[float, float, float] = (1.0, 2.0, 3.0)

    def validate(self) -> None:
        if len(self.step_weights) != 3:
            raise DataError("step_weights must have exactly 3 entries")
        if any(w < 0 for w in self.step_weights):
            raise DataError("step weights must be nonnegative")
        if not any(w > 0 for w in self.step_weights):
            raise DataError("at least one step weight must be positive")


@dataclass
class ScoreReport:
    score: float
    per_step_value: tuple[float, float, float]
    n_sessions: int
    per_session: list[float] | None = None

    def to_dict(self) -> dict:
        out = {
            "score": self.score,
            "per_step_value": list(self.per_step_value),
            "n_sessions": self.n_sessions,
        }
        if self.per_session is not None:
            out["per_session"] = self.per_session
        return out


def _per_step_items(rec) -> tuple[Sequence[int], Sequence[int], Sequence[int]]:
    if len(rec) == 3 and all(isinstance(part, (list, tuple)) for part in rec):
        return tuple(rec)  # already grouped by step
    items = tuple(rec)
    if len(items) != 9:
        raise DataError(f"a recommendation holds 9 items or 3 per-step lists, got {rec!r}")
    return items[0:3], items[3:6], items[6:9]


def score(
    recommendations: Sequence,
    sessions: list[SessionRecord],
    catalog: ItemCatalog,
    cfg: MetricConfig = MetricConfig(),
    keep_breakdown: bool = False,
) -> ScoreReport:
    """Score recommendations against logged purchases.

    ``recommendations[i]`` belongs to ``sessions[i]`` and is either a flat
    9-item list in step order or three per-step item lists (the latter may
    have any length, which keeps the metric monotone under adding items).
    """
    cfg.validate()
    if len(sessions) == 0:
        raise DataError("cannot score zero sessions")
    if len(recommendations) != len(sessions):
        raise DataError(
            f"{len(sessions)} sessions but {len(recommendations)} recommendations"
        )
    value = [0.0, 0.0, 0.0]
    breakdown: list[float] | None = [] if keep_breakdown else None
    for i, (rec, sess) in enumerate(zip(recommendations, sessions)):
        if rec is None:
            raise DataError(f"missing recommendation for session {i}")
        steps = _per_step_items(rec)
        purchased = {
            it for it, lab in zip(sess.exposed_slate, sess.purchase_labels) if lab
        }
        contribution = 0.0
        for st, items in enumerate(steps, 1):
            for it in sorted(set(items)):
                if it in purchased and catalog.location(it) == st:
                    price = catalog.price(it)
                    value[st - 1] += price
                    contribution += cfg.step_weights[st - 1] * price
        if breakdown is not None:
            breakdown.append(contribution)
    n = len(sessions)
    total = sum(w * v for w, v in zip(cfg.step_weights, value)) / n
    return ScoreReport(
        score=total,
        per_step_value=(value[0], value[1], value[2]),
        n_sessions=n,
        per_session=breakdown,
    )


def holdout_split(
    sessions: list[SessionRecord], train_fraction: float, seed: int
) -> tuple[list[SessionRecord], list[SessionRecord]]:
    """Deterministic shuffled split into disjoint train and validation sets."""
    if not 0.0 < train_fraction < 1.0:
        raise DataError("train_fraction must be in (0, 1)")
    n = len(sessions)
    if n < 2:
        raise DataError("need at least 2 sessions to split")
    order = np.random.default_rng(seed).permutation(n)
    n_train = min(max(int(round(train_fraction * n)), 1), n - 1)
    train = [sessions[i] for i in order[:n_train]]
    validation = [sessions[i] for i in order[n_train:]]
    return train, validation


@dataclass
class GridCellResult:
    index: int
    params: dict
    report: ScoreReport | None = None
    n_clusters: int | None = None
    error: str | None = None


@dataclass
class TuneResult:
    best_index: int
    cells: list[GridCellResult]
    train_size: int
    validation_size: int

    @property
    def best(self) -> GridCellResult:
        return self.cells[self.best_index]


#: Grid keys tune understands; anything else is rejected early.
GRID_KEYS = ("k_features", "l1_penalty", "cluster", "alpha", "gamma", "epochs", "min_visits")


def expand_grid(grid: Mapping[str, Sequence]) -> list[dict]:
    """Cartesian product of the grid, in the mapping's key order."""
    if not grid:
        raise DataError("empty hyperparameter grid")
    for key, values in grid.items():
        if key not in GRID_KEYS:
            raise DataError(f"unknown grid key {key!r}; expected one of {GRID_KEYS}")
        if not isinstance(values, (list, tuple)) or len(values) == 0:
            raise DataError(f"grid key {key!r} must map to a nonempty list")
    keys = list(grid)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


def select_best(cells: list[GridCellResult]) -> int:
    """Argmax score; ties prefer fewer features, then fewer clusters."""
    valid = [c for c in cells if c.report is not None]
    if not valid:
        raise FitError("every grid cell failed; nothing to select")
    chosen = min(
        valid,
        key=lambda c: (
            -c.report.score,
            c.params.get("k_features", 0),
            c.n_clusters if c.n_clusters is not None else 0,
            c.index,
        ),
    )
    return chosen.index


def tune(
    grid: Mapping[str, Sequence],
    sessions: list[SessionRecord],
    catalog: ItemCatalog,
    cfg: MetricConfig = MetricConfig(),
    *,
    train_fraction: float = 0.8,
    seed: int = 0,
    base_params: PipelineParams | None = None,
) -> TuneResult:
    """Fit and score every grid cell on one shared holdout split.

    A cell whose pipeline fails at any stage is recorded with the failure
    message and excluded from selection.
    """
    cfg.validate()
    cells_params = expand_grid(grid)
    train_set, validation = holdout_split(sessions, train_fraction, seed)
    base = base_params or PipelineParams(seed=seed)

    cells: list[GridCellResult] = []
    for index, overrides in enumerate(cells_params):
        params = base.replace(**overrides)
        cell = GridCellResult(index=index, params=overrides)
        try:
            model, stats = fit_pipeline(train_set, catalog, params)
            recs = recommend_for_sessions(model, validation, catalog)
            cell.report = score(recs, validation, catalog, cfg)
            cell.n_clusters = stats.n_clusters
        except QslateError as exc:
            cell.error = str(exc)
        cells.append(cell)

    best_index = select_best(cells)
    return TuneResult(
        best_index=best_index,
        cells=cells,
        train_size=len(train_set),
        validation_size=len(validation),
    )
