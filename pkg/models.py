from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from datetime import datetime
from enum import Enum
from functools import cached_property
from typing import Mapping, NamedTuple, Optional

import numpy as np

CATEGORIES = ("Academic", "Residential", "Administration", "Auxiliary")
ACTIVITIES = (
    "Residence",
    "Recreation",
    "Dining",
    "Exercise",
    "Library/Lab",
    "Classrooms",
    "Others",
)

# time mode -> number of slots
TIME_MODES = {"28": 28, "hour4": 4, "dow7": 7}

TIMESTAMP_FORMAT = "%Y-%m-%dT%H:%M"


class ValidationError(ValueError):
    """Input or configuration that breaks a documented precondition."""


class MalformedInputError(ValidationError):
    """Too many unparseable lines in a check-in file."""

    def __init__(self, message, line_numbers):
        super().__init__(message)
        self.line_numbers = list(line_numbers)


class TrainingDiverged(ValidationError):
    """Non-finite values showed up in the embedding store."""

    def __init__(self, step):
        super().__init__(f"Non-finite embedding values detected at step {step}")
        self.step = step


# --- Check-in data ---


@dataclass(frozen=True)
class CheckIn:
    user_id: str
    timestamp: datetime
    poi_id: str

    def __repr__(self):
        return f"<CheckIn {self.user_id}@{self.poi_id} {self.timestamp:%Y-%m-%dT%H:%M}>"


@dataclass(frozen=True)
class VenueProfile:
    poi_id: str
    category: str
    functionalities: tuple

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise ValidationError(f"Unknown category {self.category!r} for POI {self.poi_id}")
        if not self.functionalities:
            raise ValidationError(f"POI {self.poi_id} has no functionality")
        unknown = [f for f in self.functionalities if f not in ACTIVITIES]
        if unknown:
            raise ValidationError(f"Unknown functionalities {unknown} for POI {self.poi_id}")


@dataclass(frozen=True)
class TimeSlot:
    id: int
    day: int
    session: int


class Stay(NamedTuple):
    poi_id: str
    start: datetime
    end: datetime
    count: int = 1


@dataclass(frozen=True)
class Dataset:
    checkins: tuple
    venues: Mapping[str, VenueProfile]
    users: frozenset

    @cached_property
    def user_ids(self):
        """Users in index order."""
        return tuple(sorted(self.users))

    @cached_property
    def poi_ids(self):
        """POIs in index order."""
        return tuple(sorted(self.venues))

    @cached_property
    def user_index(self):
        return {u: i for i, u in enumerate(self.user_ids)}

    @cached_property
    def poi_index(self):
        return {b: i for i, b in enumerate(self.poi_ids)}

    def records_by_user(self):
        """Group check-ins per user, keeping their order in the dataset."""
        grouped = defaultdict(list)
        for record in self.checkins:
            grouped[record.user_id].append(record)
        return grouped

    def __len__(self):
        return len(self.checkins)

    def __repr__(self):
        return f"<Dataset users={len(self.users)} pois={len(self.venues)} checkins={len(self.checkins)}>"


# --- Graph ---


class NodeKind(str, Enum):
    USER = "user"
    POI = "poi"
    TIME = "time"
    ACTIVITY = "activity"


@dataclass(eq=False)
class BipartiteGraph:
    name: str
    context_kind: NodeKind
    target_kind: NodeKind
    n_context: int
    n_target: int
    context: np.ndarray
    target: np.ndarray
    weight: np.ndarray

    def __post_init__(self):
        self.context = np.asarray(self.context, dtype=np.int64)
        self.target = np.asarray(self.target, dtype=np.int64)
        self.weight = np.asarray(self.weight, dtype=np.float64)
        if not (len(self.context) == len(self.target) == len(self.weight)):
            raise ValidationError(f"Edge arrays of {self.name} differ in length")
        if len(self.weight) and (self.weight <= 0).any():
            raise ValidationError(f"Non-positive edge weight in {self.name}")
        if len(self.context) and (
            self.context.max() >= self.n_context or self.target.max() >= self.n_target
        ):
            raise ValidationError(f"Edge index out of range in {self.name}")
        keys = self.context * self.n_target + self.target
        if len(np.unique(keys)) != len(keys):
            raise ValidationError(f"Duplicate edges in {self.name}")
        self.degree_context = np.bincount(
            self.context, weights=self.weight, minlength=self.n_context
        )
        self.degree_target = np.bincount(
            self.target, weights=self.weight, minlength=self.n_target
        )

    @property
    def n_edges(self):
        return len(self.weight)

    @cached_property
    def _by_target(self):
        order = np.argsort(self.target, kind="stable")
        offsets = np.zeros(self.n_target + 1, dtype=np.int64)
        np.cumsum(np.bincount(self.target, minlength=self.n_target), out=offsets[1:])
        return order, offsets

    def target_adjacency(self, j):
        """Context indices adjacent to target j and the matching weights."""
        order, offsets = self._by_target
        rows = order[offsets[j]:offsets[j + 1]]
        return self.context[rows], self.weight[rows]

    @cached_property
    def edge_keys(self):
        """Sorted context * n_target + target keys, for adjacency lookups."""
        return np.sort(self.context * self.n_target + self.target)

    def __repr__(self):
        return (
            f"<BipartiteGraph {self.name} {self.context_kind.value}->{self.target_kind.value}"
            f" edges={self.n_edges}>"
        )


@dataclass(eq=False)
class HeteroGraph:
    g_bu: BipartiteGraph
    g_bt: BipartiteGraph
    g_ba: BipartiteGraph
    user_ids: tuple
    poi_ids: tuple
    poi_categories: tuple
    activities: tuple = ACTIVITIES
    time_mode: str = "28"
    g_bb: Optional[BipartiteGraph] = None

    @property
    def counts(self):
        return {
            NodeKind.USER: len(self.user_ids),
            NodeKind.POI: len(self.poi_ids),
            NodeKind.TIME: TIME_MODES[self.time_mode],
            NodeKind.ACTIVITY: len(self.activities),
        }

    def views(self):
        """Bipartite views in round-robin order."""
        graphs = [self.g_bu, self.g_bt, self.g_ba]
        if self.g_bb is not None:
            graphs.append(self.g_bb)
        return graphs

    def category_of(self, kind):
        """Per-node categories for a context kind (None outside POIs)."""
        if kind == NodeKind.POI:
            return list(self.poi_categories)
        return [None] * self.counts[kind]

    @cached_property
    def user_index(self):
        return {u: i for i, u in enumerate(self.user_ids)}

    @cached_property
    def poi_index(self):
        return {b: i for i, b in enumerate(self.poi_ids)}

    def __repr__(self):
        return f"<HeteroGraph users={len(self.user_ids)} pois={len(self.poi_ids)} mode={self.time_mode}>"


@dataclass(frozen=True)
class CategoryPrior:
    fractions: Mapping[str, float]

    def __getitem__(self, category):
        return self.fractions.get(category, 0.0)


# --- Training ---


@dataclass(eq=False)
class EmbeddingStore:
    d: int
    matrices: dict

    def matrix(self, kind):
        return self.matrices[NodeKind(kind)]

    @property
    def z_user(self):
        return self.matrices[NodeKind.USER]

    @property
    def z_poi(self):
        return self.matrices[NodeKind.POI]

    @property
    def z_time(self):
        return self.matrices[NodeKind.TIME]

    @property
    def z_activity(self):
        return self.matrices[NodeKind.ACTIVITY]

    def is_finite(self):
        return all(np.isfinite(m).all() for m in self.matrices.values())

    def copy(self):
        return EmbeddingStore(self.d, {k: m.copy() for k, m in self.matrices.items()})

    def __repr__(self):
        shapes = ", ".join(f"{k.value}={m.shape[0]}" for k, m in self.matrices.items())
        return f"<EmbeddingStore d={self.d} {shapes}>"


class Variant(str, Enum):
    EDHG = "edhg"
    EDHG_NS = "edhg-ns"
    EDHG_POI = "edhg-poi"


@dataclass
class TrainConfig:
    iterations: int = 10_000_000
    negatives: int = 10
    dim: int = 100
    lr_initial: float = 0.025
    lr_final: float = 1e-5
    seed: int = 0
    threads: int = 1
    variant: Variant = Variant.EDHG
    checkpoints: int = 10
    nan_check_every: int = 1_000_000
    block_size: int = 4096
    progress: bool = False

    def __post_init__(self):
        self.variant = Variant(self.variant)

    def validate(self):
        errors = []
        if self.iterations < 1:
            errors.append("iterations must be positive")
        if self.negatives < 0:
            errors.append("negatives must be non-negative")
        if self.dim < 1:
            errors.append("dim must be positive")
        if not 0 < self.lr_final < self.lr_initial:
            errors.append("need 0 < lr_final < lr_initial")
        if self.threads < 1:
            errors.append("threads must be positive")
        if self.checkpoints < 1:
            errors.append("checkpoints must be positive")
        if errors:
            raise ValidationError("; ".join(errors))
        return self

    def learning_rate(self, step, total=None):
        """Linear decay from lr_initial to lr_final over the run."""
        total = total or self.iterations
        return self.lr_initial - (self.lr_initial - self.lr_final) * (step / total)


@dataclass(frozen=True)
class LossSample:
    step: int
    estimate: float


# --- Prediction ---


@dataclass(frozen=True)
class Query:
    user_index: int
    timestamp: datetime


@dataclass(frozen=True, eq=False)
class RankedList:
    indices: np.ndarray
    scores: np.ndarray

    @property
    def items(self):
        return list(zip(self.indices.tolist(), self.scores.tolist()))

    def prefix(self, k):
        return RankedList(self.indices[:k], self.scores[:k])

    @cached_property
    def _positions(self):
        return {idx: pos for pos, idx in enumerate(self.indices.tolist())}

    def rank_of(self, index):
        """1-based rank of index, or None when absent."""
        pos = self._positions.get(index)
        return None if pos is None else pos + 1

    def __contains__(self, index):
        return index in self._positions

    def __len__(self):
        return len(self.indices)


# --- Evaluation ---


@dataclass(frozen=True)
class Split:
    train: Dataset
    test: Dataset


BUCKETS = ("visited", "unvisited", "total")


@dataclass
class AccuracyReport:
    ks: tuple
    hits: dict = field(default_factory=dict)
    n: dict = field(default_factory=dict)

    def accuracy(self, bucket, k):
        n = self.n.get(bucket, 0)
        return self.hits[bucket][k] / n if n else 0.0

    def rows(self):
        return [
            {
                "bucket": bucket,
                "k": k,
                "hits": self.hits[bucket][k],
                "n": self.n[bucket],
                "accuracy": self.accuracy(bucket, k),
            }
            for bucket in BUCKETS
            for k in self.ks
        ]


@dataclass
class CovisitMatrix:
    minutes: dict = field(default_factory=dict)

    def add(self, u, v, amount):
        if u == v or amount <= 0:
            return
        key = (u, v) if u < v else (v, u)
        self.minutes[key] = self.minutes.get(key, 0) + int(amount)

    def get(self, u, v):
        if u == v:
            return 0
        return self.minutes.get((u, v) if u < v else (v, u), 0)

    def __len__(self):
        return len(self.minutes)


@dataclass(eq=False)
class NbcModel:
    joint: dict
    poi_counts: np.ndarray
    total: int
    time_mode: str = "28"

    def count(self, u, t, b):
        pois, counts = self.joint.get((u, t), (np.empty(0, np.int64), np.empty(0, np.int64)))
        hit = np.flatnonzero(pois == b)
        return int(counts[hit[0]]) if len(hit) else 0


# --- Synthetic data ---


@dataclass
class GenConfig:
    n_users: int = 6250
    n_pois: int = 221
    n_clusters: int = 2
    records_per_user: int = 150
    seed: int = 0
    weeks: int = 16
    cluster_poi_affinity: float = 0.8
    temporal_sharpness: float = 1.0
    cluster_poi_count: Optional[int] = None
    start: datetime = datetime(2016, 8, 22)

    def validate(self):
        errors = []
        if min(self.n_users, self.n_pois, self.n_clusters, self.records_per_user, self.weeks) < 1:
            errors.append("counts must be positive")
        if self.n_clusters > self.n_users:
            errors.append("n_clusters must not exceed n_users")
        if self.n_pois < len(CATEGORIES):
            errors.append(f"n_pois must be at least {len(CATEGORIES)}")
        if not 0 < self.cluster_poi_affinity <= 1:
            errors.append("cluster_poi_affinity must lie in (0, 1]")
        if self.temporal_sharpness < 0:
            errors.append("temporal_sharpness must be non-negative")
        if not 1 <= self.subset_size <= self.n_pois // self.n_clusters:
            errors.append("cluster POI subsets must be non-empty and fit disjointly")
        if errors:
            raise ValidationError("; ".join(errors))
        return self

    @property
    def subset_size(self):
        if self.cluster_poi_count is not None:
            return self.cluster_poi_count
        return min(self.n_pois // self.n_clusters, max(1, math.ceil(self.n_pois * 0.18)))


@dataclass(eq=False)
class GroundTruth:
    cluster_of: dict
    preference: np.ndarray
    subsets: tuple
    censored: dict

    def row(self, cluster, slot):
        return self.preference[cluster, slot]


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: Optional[int] = None
    inputs: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    outputs: list = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True, default=str)
