"""End-to-end model fitting: features -> clustering -> Q-tables.

Shared by the train and tune entry points so a hyperparameter grid cell and
a production fit run exactly the same code.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .clustering import (
    ClusterModel,
    fit_dbscan,
    fit_kmeans,
    load_cluster_model,
    merge_small_clusters,
    save_cluster_model,
)
from .errors import DataError, ModelFileError
from .features import SparseComponents, build_raw_features, fit_sparse_pca, transform
from .ingest import ItemCatalog, SessionRecord, sessions_to_transitions
from .qlearning import QTableBank, TrainConfig, export_policies, train

DEFAULT_MIN_CLUSTER_SUPPORT = 500


@dataclass(frozen=True)
class PipelineParams:
    """Every knob of the fit, with the documented defaults."""

    k_features: int = 16
    l1_penalty: float = 0.1
    cluster: Mapping[str, Any] = field(default_factory=lambda: {"method": "kmeans", "k": 8})
    alpha: float = 0.1
    gamma: float = 0.9
    epochs: int = 10
    min_visits: int = 3
    min_cluster_support: int = DEFAULT_MIN_CLUSTER_SUPPORT
    seed: int = 0
    threads: int = 1
    deterministic: bool = False
    backend: str = "process"

    def replace(self, **overrides) -> "PipelineParams":
        return dataclasses.replace(self, **overrides)

    def resolved(self) -> dict:
        out = dataclasses.asdict(self)
        out["cluster"] = dict(self.cluster)
        return out


@dataclass
class PipelineModel:
    components: SparseComponents
    cluster_model: ClusterModel
    bank: QTableBank
    min_visits: int


@dataclass
class FitStats:
    timings: list[tuple[str, float]]
    n_clusters: int
    n_clusters_before_merge: int
    cluster_sizes: list[int]
    n_transitions: int
    table_cells: int

    def to_dict(self) -> dict:
        return {
            "timings": [{"stage": name, "seconds": secs} for name, secs in self.timings],
            "n_clusters": self.n_clusters,
            "n_clusters_before_merge": self.n_clusters_before_merge,
            "cluster_sizes": self.cluster_sizes,
            "n_transitions": self.n_transitions,
            "table_cells": self.table_cells,
        }


def _fit_cluster_model(Z: np.ndarray, spec: Mapping[str, Any], seed: int) -> ClusterModel:
    method = spec.get("method")
    if method == "kmeans":
        return fit_kmeans(Z, k=int(spec["k"]), seed=seed)
    if method == "dbscan":
        return fit_dbscan(Z, eps=float(spec["eps"]), min_pts=int(spec["min_pts"]))
    raise DataError(f"unknown cluster method {method!r}")


def fit_pipeline(
    sessions: list[SessionRecord], catalog: ItemCatalog, params: PipelineParams
) -> tuple[PipelineModel, FitStats]:
    """Fit the full pipeline on the given sessions."""
    if not sessions:
        raise DataError("cannot fit on zero sessions")
    if len(catalog) == 0:
        raise DataError("cannot fit with an empty catalog")
    seed_pca, seed_cluster = (
        int(s) for s in np.random.SeedSequence(params.seed).generate_state(2)
    )

    timings: list[tuple[str, float]] = []

    def timed(name: str, fn):
        start = time.perf_counter()
        result = fn()
        timings.append((name, time.perf_counter() - start))
        return result

    raw = timed("build_features", lambda: build_raw_features(sessions, catalog))
    components = timed(
        "fit_sparse_pca",
        lambda: fit_sparse_pca(
            raw, k=params.k_features, l1_penalty=params.l1_penalty, seed=seed_pca
        ),
    )
    reduced = timed("transform", lambda: transform(raw, components))
    cluster_model = timed(
        "fit_clusters", lambda: _fit_cluster_model(reduced, params.cluster, seed_cluster)
    )
    assignments = timed("assign", lambda: cluster_model.assign_many(reduced))
    transitions = timed("transitions", lambda: sessions_to_transitions(sessions, catalog))

    n_before = cluster_model.n_clusters
    counts = np.bincount(
        [assignments[t.session_ref] for t in transitions], minlength=n_before
    )
    cluster_model, remap = merge_small_clusters(
        cluster_model, counts, params.min_cluster_support
    )
    assignments = remap[assignments]

    bank = QTableBank(cluster_model.n_clusters)
    cfg = TrainConfig(
        alpha=params.alpha,
        gamma=params.gamma,
        epochs=params.epochs,
        threads=params.threads,
        deterministic=params.deterministic,
        backend=params.backend,
    )
    timed("train", lambda: train(bank, transitions, assignments, cfg))

    sizes = np.bincount(assignments, minlength=cluster_model.n_clusters)
    stats = FitStats(
        timings=timings,
        n_clusters=cluster_model.n_clusters,
        n_clusters_before_merge=n_before,
        cluster_sizes=[int(v) for v in sizes],
        n_transitions=len(transitions),
        table_cells=bank.n_cells(),
    )
    return PipelineModel(
        components=components,
        cluster_model=cluster_model,
        bank=bank,
        min_visits=params.min_visits,
    ), stats


def recommend_for_sessions(
    model: PipelineModel, sessions: list[SessionRecord], catalog: ItemCatalog
) -> list[list[int]]:
    """Batch recommendation: one 9-item list per session, in input order."""
    raw = build_raw_features(sessions, catalog)
    reduced = transform(raw, model.components)
    cluster_ids = model.cluster_model.assign_many(reduced)
    policies = export_policies(model.bank, catalog, model.min_visits)
    return [list(policies[int(c)]) for c in cluster_ids]


COMPONENTS_FILE = "components.json"
CLUSTERS_FILE = "clusters.json"
QTABLES_FILE = "qtables.json"


def save_models(model: PipelineModel, model_dir: str | Path, stamp: str) -> None:
    model_dir = Path(model_dir)
    model_dir.mkdir(parents=True, exist_ok=True)
    model.components.save(model_dir / COMPONENTS_FILE, stamp=stamp)
    save_cluster_model(model.cluster_model, model_dir / CLUSTERS_FILE, stamp=stamp)
    model.bank.save(model_dir / QTABLES_FILE, stamp=stamp)


def load_models(model_dir: str | Path, min_visits: int) -> tuple[PipelineModel, str]:
    """Load the three model files, requiring a common version stamp."""
    model_dir = Path(model_dir)
    components, stamp_a = SparseComponents.load(model_dir / COMPONENTS_FILE)
    cluster_model, stamp_b = load_cluster_model(model_dir / CLUSTERS_FILE)
    bank, stamp_c = QTableBank.load(model_dir / QTABLES_FILE)
    if not (stamp_a == stamp_b == stamp_c) or stamp_a is None:
        raise ModelFileError(
            model_dir,
            f"model files carry mismatched stamps ({stamp_a!r}, {stamp_b!r}, {stamp_c!r})",
        )
    return (
        PipelineModel(
            components=components,
            cluster_model=cluster_model,
            bank=bank,
            min_visits=min_visits,
        ),
        stamp_a,
    )
