"""Per-cluster tabular Q-learning over 3-item action slates.

One sparse table per (cluster, step); an absent cell reads as 0, which makes
the sparse map equivalent to a dense all-zero-initialized table while the
step-wise action space (~9.2 million slates per location at catalog scale)
stays out of memory.  Each update applies

    Q(s,a) += alpha * (r + gamma * max(0, max_a' Q(s',a')) - Q(s,a))

where the inner max ranges over the stored next-step actions of the same
cluster and transitions into the terminal state use the target ``r`` alone.

Three execution drivers share one update rule:

* serial, input order (always used when ``deterministic`` or one thread);
* a thread pool over transition shards with striped per-cell locks, so a
  read-modify-write of a cell never interleaves non-atomically;
* a process pool sharded by cluster.  Clusters never share cells, so each
  worker trains its clusters' tables serially and the merged result is
  bit-identical to a serial run.  This is the default parallel backend
  because CPython threads cannot speed up the pure-Python update loop.

Each table's running maximum is maintained incrementally (rescanning only
when the maximal cell decreases); a full scan per update would make training
quadratic in table size.
"""

from __future__ import annotations

import json
import math
import multiprocessing
import threading
from concurrent.futures import ProcessPoolExecutor, ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .clustering import ClusterModel
from .errors import DataError, ModelFileError, TrainError
from .features import SparseComponents, build_raw_features, transform
from .ingest import STEPS, ItemCatalog, SessionRecord, Transition, UserRecord

QTABLES_FORMAT = "qslate-qtables"
QTABLES_VERSION = 1

_N_STRIPES = 64  # power of two

Slate = tuple[int, int, int]


def make_slate(
    items, catalog: ItemCatalog | None = None, step: int | None = None
) -> Slate:
    """Build a validated action slate: 3 distinct ids, sorted ascending."""
    slate = tuple(sorted(int(i) for i in items))
    if len(slate) != 3:
        raise DataError(f"a slate holds exactly 3 items, got {len(slate)}")
    if len(set(slate)) != 3:
        raise DataError(f"slate {slate} contains duplicate items")
    if catalog is not None:
        locs = {catalog.location(i) for i in slate}
        if len(locs) != 1:
            raise DataError(f"slate {slate} mixes locations {sorted(locs)}")
        if step is not None and locs != {step}:
            raise DataError(f"slate {slate} has location {locs.pop()}, expected step {step}")
    return slate


@dataclass(frozen=True)
class ClusterState:
    """A Q-table address: which cluster, which slate step."""

    cluster_id: int
    step: int

    def __post_init__(self) -> None:
        if self.step not in STEPS:
            raise DataError(f"step {self.step} outside {{1,2,3}}")
        if self.cluster_id < 0:
            raise DataError(f"negative cluster_id {self.cluster_id}")


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 0.1
    gamma: float = 0.9
    epochs: int = 10
    threads: int = 1
    deterministic: bool = False
    backend: str = "process"

    def validate(self) -> None:
        if not 0.0 < self.alpha <= 1.0:
            raise DataError("alpha must be in (0, 1]")
        if not 0.0 <= self.gamma < 1.0:
            raise DataError("gamma must be in [0, 1)")
        if self.epochs < 1:
            raise DataError("epochs must be >= 1")
        if self.threads < 1:
            raise DataError("threads must be >= 1")
        if self.backend not in ("process", "thread"):
            raise DataError(f"unknown backend {self.backend!r}")


class QTableBank:
    """Sparse action-value tables: (cluster, step) -> {slate: [q, visits]}."""

    def __init__(self, n_clusters: int):
        if n_clusters < 1:
            raise DataError("bank needs at least one cluster")
        self.n_clusters = n_clusters
        self.tables: dict[tuple[int, int], dict[Slate, list]] = {
            (c, s): {} for c in range(n_clusters) for s in STEPS
        }

    def q_value(self, cluster_id: int, step: int, action: Slate) -> float:
        cell = self.tables[self._key(cluster_id, step)].get(tuple(action))
        return float(cell[0]) if cell is not None else 0.0

    def visit_count(self, cluster_id: int, step: int, action: Slate) -> int:
        cell = self.tables[self._key(cluster_id, step)].get(tuple(action))
        return int(cell[1]) if cell is not None else 0

    def n_cells(self) -> int:
        return sum(len(t) for t in self.tables.values())

    def cells(self):
        """Yield (cluster_id, step, slate, q, visits) over every stored cell."""
        for (c, s), tab in self.tables.items():
            for slate, (q, visits) in tab.items():
                yield c, s, slate, q, visits

    def _key(self, cluster_id: int, step: int) -> tuple[int, int]:
        key = (cluster_id, step)
        if key not in self.tables:
            raise DataError(f"no table for cluster {cluster_id}, step {step}")
        return key

    def save(self, path: str | Path, stamp: str | None = None) -> None:
        tables = {}
        for (c, s), tab in sorted(self.tables.items()):
            step_map = tables.setdefault(str(c), {})
            step_map[str(s)] = {
                "-".join(str(i) for i in slate): [cell[0], cell[1]]
                for slate, cell in sorted(tab.items())
            }
        payload = {
            "format": QTABLES_FORMAT,
            "version": QTABLES_VERSION,
            "stamp": stamp,
            "n_clusters": self.n_clusters,
            "tables": tables,
        }
        Path(path).write_text(json.dumps(payload, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> tuple["QTableBank", str | None]:
        try:
            payload = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ModelFileError(path, f"cannot read q-table file: {exc}") from None
        if payload.get("format") != QTABLES_FORMAT:
            raise ModelFileError(path, "not a q-table file")
        if payload.get("version") != QTABLES_VERSION:
            raise ModelFileError(path, f"unsupported version {payload.get('version')}")
        bank = cls(int(payload["n_clusters"]))
        for c_str, steps in payload["tables"].items():
            for s_str, cells in steps.items():
                tab = bank.tables[(int(c_str), int(s_str))]
                for slate_str, (q, visits) in cells.items():
                    slate = tuple(int(i) for i in slate_str.split("-"))
                    tab[slate] = [float(q), int(visits)]
        return bank, payload.get("stamp")


def q_value(bank: QTableBank, state: ClusterState, action, catalog: ItemCatalog | None = None) -> float:
    """Stored value of (state, action); 0 when the cell was never visited."""
    slate = make_slate(action, catalog=catalog, step=state.step if catalog else None)
    return bank.q_value(state.cluster_id, state.step, slate)


# ---------------------------------------------------------------------------
# Training drivers

# A prepared stream item: (cluster_id, step, slate, reward, terminal).
_StreamItem = tuple[int, int, Slate, float, bool]


def _prepare_stream(
    bank: QTableBank, transitions: list[Transition], session_clusters
) -> list[_StreamItem]:
    stream: list[_StreamItem] = []
    for t in transitions:
        try:
            cid = int(session_clusters[t.session_ref])
        except (KeyError, IndexError):
            raise TrainError(f"no cluster assignment for session {t.session_ref}") from None
        if not 0 <= cid < bank.n_clusters:
            raise TrainError(f"transition references unknown cluster {cid}")
        if not math.isfinite(t.reward):
            raise TrainError(f"non-finite reward in session {t.session_ref}")
        stream.append((cid, t.step, t.action, t.reward, t.next_step is None))
    return stream


def _init_maxes(tables) -> dict[tuple[int, int], float]:
    return {
        key: (max(cell[0] for cell in tab.values()) if tab else 0.0)
        for key, tab in tables.items()
    }


def _train_serial(tables, stream, alpha: float, gamma: float, epochs: int) -> None:
    tmax = _init_maxes(tables)
    for _ in range(epochs):
        for cid, step, action, reward, terminal in stream:
            if terminal:
                target = reward
            else:
                nm = tmax[(cid, step + 1)]
                target = reward + gamma * nm if nm > 0.0 else reward
            key = (cid, step)
            tab = tables[key]
            cell = tab.get(action)
            if cell is None:
                q_old = 0.0
                q_new = alpha * target
                tab[action] = [q_new, 1]
            else:
                q_old = cell[0]
                q_new = q_old + alpha * (target - q_old)
                cell[0] = q_new
                cell[1] += 1
            cur = tmax[key]
            if q_new >= cur:
                tmax[key] = q_new
            elif q_old >= cur:
                tmax[key] = max(c[0] for c in tab.values())


def _train_threads(tables, stream, alpha, gamma, epochs, threads) -> None:
    stripes = [threading.Lock() for _ in range(_N_STRIPES)]
    mask = _N_STRIPES - 1
    tmax = _init_maxes(tables)
    max_locks = {key: threading.Lock() for key in tables}
    shards = [stream[i::threads] for i in range(threads)]

    def worker(shard):
        for cid, step, action, reward, terminal in shard:
            if terminal:
                target = reward
            else:
                nm = tmax[(cid, step + 1)]
                target = reward + gamma * nm if nm > 0.0 else reward
            key = (cid, step)
            tab = tables[key]
            with stripes[hash((cid, step, action)) & mask]:
                cell = tab.get(action)
                if cell is None:
                    q_old = 0.0
                    q_new = alpha * target
                    tab[action] = [q_new, 1]
                else:
                    q_old = cell[0]
                    q_new = q_old + alpha * (target - q_old)
                    cell[0] = q_new
                    cell[1] += 1
            with max_locks[key]:
                cur = tmax[key]
                if q_new >= cur:
                    tmax[key] = q_new
                elif q_old >= cur:
                    # list() snapshots atomically; concurrent cell writes are fine.
                    tmax[key] = max(c[0] for c in list(tab.values()))

    with ThreadPoolExecutor(max_workers=threads) as pool:
        for _ in range(epochs):
            # Barrier per epoch so epoch semantics match the serial driver.
            for fut in [pool.submit(worker, sh) for sh in shards]:
                fut.result()


def _process_worker(args):
    n_clusters, tables_payload, packed, alpha, gamma, epochs = args
    tables = {
        (c, s): {} for c in range(n_clusters) for s in STEPS
    }
    for key_str, cells in tables_payload.items():
        c, s = (int(v) for v in key_str.split(","))
        tables[(c, s)] = {tuple(slate): [q, visits] for slate, q, visits in cells}
    cids, steps, a1, a2, a3, rewards, terminals = (col.tolist() for col in packed)
    actions = list(zip(a1, a2, a3))
    stream = list(zip(cids, steps, actions, rewards, terminals))
    _train_serial(tables, stream, alpha, gamma, epochs)
    out = {}
    for (c, s), tab in tables.items():
        if tab:
            out[f"{c},{s}"] = [(list(slate), cell[0], cell[1]) for slate, cell in tab.items()]
    return out


def _train_processes(bank, stream, alpha, gamma, epochs, workers) -> None:
    # Shard whole clusters across workers, largest stream volume first.
    volumes: dict[int, int] = {}
    for item in stream:
        volumes[item[0]] = volumes.get(item[0], 0) + 1
    order = sorted(volumes, key=lambda c: (-volumes[c], c))
    workers = min(workers, len(order)) or 1
    bins: list[list[int]] = [[] for _ in range(workers)]
    load = [0] * workers
    for cid in order:
        slot = min(range(workers), key=lambda i: (load[i], i))
        bins[slot].append(cid)
        load[slot] += volumes[cid]

    cid_of = np.fromiter((it[0] for it in stream), np.int64, len(stream))
    step_of = np.fromiter((it[1] for it in stream), np.int64, len(stream))
    a_of = np.array([it[2] for it in stream], dtype=np.int64).reshape(len(stream), 3)
    r_of = np.fromiter((it[3] for it in stream), np.float64, len(stream))
    t_of = np.fromiter((it[4] for it in stream), np.bool_, len(stream))

    jobs = []
    for members in bins:
        mask = np.isin(cid_of, np.asarray(members, dtype=np.int64))
        payload = {}
        for cid in members:
            for s in STEPS:
                tab = bank.tables[(cid, s)]
                if tab:
                    payload[f"{cid},{s}"] = [
                        (list(slate), cell[0], cell[1]) for slate, cell in tab.items()
                    ]
        # Arrays pickle as raw buffers; workers expand to lists locally.
        packed = (
            cid_of[mask],
            step_of[mask],
            a_of[mask, 0],
            a_of[mask, 1],
            a_of[mask, 2],
            r_of[mask],
            t_of[mask],
        )
        jobs.append((bank.n_clusters, payload, packed, alpha, gamma, epochs))

    try:
        ctx = multiprocessing.get_context("fork")
    except ValueError:
        ctx = multiprocessing.get_context("spawn")
    with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
        for result in pool.map(_process_worker, jobs):
            for key_str, cells in result.items():
                c, s = (int(v) for v in key_str.split(","))
                bank.tables[(c, s)] = {
                    tuple(slate): [q, visits] for slate, q, visits in cells
                }


def train(
    bank: QTableBank,
    transitions: list[Transition],
    session_clusters,
    cfg: TrainConfig,
) -> QTableBank:
    """Run ``cfg.epochs`` update passes over the transition stream.

    ``session_clusters`` maps ``Transition.session_ref`` to a cluster id
    (any indexable: list, array, or dict).  With ``deterministic`` set or a
    single thread, updates apply in input order on one thread; otherwise the
    configured parallel backend runs.  Cell values and visit counters are
    updated atomically per cell; parallel float results may differ across
    runs by summation order only.
    """
    cfg.validate()
    stream = _prepare_stream(bank, transitions, session_clusters)
    if not stream:
        return bank
    if cfg.deterministic or cfg.threads == 1:
        _train_serial(bank.tables, stream, cfg.alpha, cfg.gamma, cfg.epochs)
    elif cfg.backend == "thread":
        _train_threads(bank.tables, stream, cfg.alpha, cfg.gamma, cfg.epochs, cfg.threads)
    else:
        _train_processes(bank, stream, cfg.alpha, cfg.gamma, cfg.epochs, cfg.threads)
    return bank


# ---------------------------------------------------------------------------
# Policies

def _best(entries) -> Slate:
    """Highest q wins; ties go to the lexicographically smallest slate."""
    return min(entries, key=lambda e: (-e[1], e[0]))[0]


def greedy_policy(
    bank: QTableBank, cluster_id: int, catalog: ItemCatalog, min_visits: int = 3
) -> list[Slate]:
    """Greedy slate per step, restricted to sufficiently visited actions.

    Eligibility falls back in layers so the policy is total: the cluster's
    own cells with at least ``min_visits`` visits, then the union of every
    cluster's qualifying cells for that step, then any stored cell at all.
    Raises :class:`TrainError` only when no action was ever trained for a
    step.
    """
    if not 0 <= cluster_id < bank.n_clusters:
        raise DataError(f"unknown cluster {cluster_id}")
    slates: list[Slate] = []
    for step in STEPS:
        own = bank.tables[(cluster_id, step)]
        entries = [(slate, cell[0]) for slate, cell in own.items() if cell[1] >= min_visits]
        if not entries:
            entries = [
                (slate, cell[0])
                for c in range(bank.n_clusters)
                for slate, cell in bank.tables[(c, step)].items()
                if cell[1] >= min_visits
            ]
        if not entries:
            entries = [
                (slate, cell[0])
                for c in range(bank.n_clusters)
                for slate, cell in bank.tables[(c, step)].items()
            ]
        if not entries:
            raise TrainError(f"no trained action exists for step {step}")
        best = _best(entries)
        if catalog is not None:
            make_slate(best, catalog=catalog, step=step)
        slates.append(best)
    return slates


def export_policies(
    bank: QTableBank, catalog: ItemCatalog, min_visits: int = 3
) -> dict[int, tuple[int, ...]]:
    """Flattened 9-item recommendation per cluster, in step order."""
    out = {}
    for c in range(bank.n_clusters):
        steps = greedy_policy(bank, c, catalog, min_visits)
        out[c] = tuple(i for slate in steps for i in slate)
    return out


def recommend(
    bank: QTableBank,
    components: SparseComponents,
    cluster_model: ClusterModel,
    record: SessionRecord | UserRecord,
    catalog: ItemCatalog,
    min_visits: int = 3,
) -> list[int]:
    """Full pipeline for one user: features -> transform -> assign -> policy."""
    raw = build_raw_features([record], catalog)
    reduced = transform(raw, components)
    cluster_id = cluster_model.assign(reduced[0])
    steps = greedy_policy(bank, cluster_id, catalog, min_visits)
    return [i for slate in steps for i in slate]
