import logging
import math
from collections import defaultdict

import numpy as np

from engine.ingest import merge_stays, slot_count, time_index
from engine.predict import rank
from engine.sampling import make_rng
from models import (
    BUCKETS,
    AccuracyReport,
    CovisitMatrix,
    Dataset,
    NbcModel,
    Query,
    RankedList,
    Split,
    ValidationError,
)

logger = logging.getLogger(__name__)

DEFAULT_KS = (1, 3, 5, 10)
TRUTH_SIZE = 10


def _prefix_size(fraction, n):
    # round first so 0.8 * 15 does not ceil to 13
    return math.ceil(round(fraction * n, 9))


def _dataset_like(data, checkins):
    return Dataset(tuple(checkins), data.venues, data.users)


def split_chrono(data, train_frac=0.8):
    """Per-user chronological split: the first ceil(frac * n) records train."""
    if not 0 < train_frac < 1:
        raise ValidationError("train_frac must lie strictly between 0 and 1")
    train, test = [], []
    for user_id, records in sorted(data.records_by_user().items()):
        ordered = sorted(records, key=lambda c: c.timestamp)
        if len(ordered) < 2:
            logger.info(f"User {user_id} has {len(ordered)} record(s); all go to train")
            train.extend(ordered)
            continue
        cut = _prefix_size(train_frac, len(ordered))
        train.extend(ordered[:cut])
        test.extend(ordered[cut:])
    return Split(_dataset_like(data, train), _dataset_like(data, test))


def truncate_train(data, fraction):
    """Keep the first fraction of each user's records (at least one)."""
    kept = []
    for _, records in sorted(data.records_by_user().items()):
        ordered = sorted(records, key=lambda c: c.timestamp)
        kept.extend(ordered[: max(1, _prefix_size(fraction, len(ordered)))])
    return _dataset_like(data, kept)


def accuracy_at_k(predictor, split, ks=DEFAULT_KS):
    """
    Hit rate of `predictor(query, k)` over the test records, bucketed by
    whether the user visited the POI in the train split.
    """
    ks = tuple(sorted(set(ks)))
    if not ks or ks[0] < 1:
        raise ValidationError("ks must be positive integers")
    user_index, poi_index = split.train.user_index, split.train.poi_index
    visited = {(user_index[c.user_id], poi_index[c.poi_id]) for c in split.train.checkins}

    hits = {bucket: dict.fromkeys(ks, 0) for bucket in BUCKETS}
    n = dict.fromkeys(BUCKETS, 0)
    k_max = ks[-1]
    for record in split.test.checkins:
        u, b = user_index[record.user_id], poi_index[record.poi_id]
        bucket = "visited" if (u, b) in visited else "unvisited"
        ranked = predictor(Query(u, record.timestamp), k_max)
        position = ranked.rank_of(b)
        n[bucket] += 1
        n["total"] += 1
        if position is None:
            continue
        for k in ks:
            if position <= k:
                hits[bucket][k] += 1
                hits["total"][k] += 1
    return AccuracyReport(ks, hits, n)


# --- Baselines ---


def nbc_fit(train, time_mode="28"):
    """Maximum-likelihood counts for p(b | u, t) with (user, slot) features."""
    if not train.checkins:
        raise ValidationError("NBC needs a non-empty train set")
    n_slots, n_pois = slot_count(time_mode), len(train.poi_ids)
    users = np.array([train.user_index[c.user_id] for c in train.checkins], dtype=np.int64)
    slots = np.array([time_index(c.timestamp, time_mode).id for c in train.checkins], dtype=np.int64)
    pois = np.array([train.poi_index[c.poi_id] for c in train.checkins], dtype=np.int64)

    keys, counts = np.unique((users * n_slots + slots) * n_pois + pois, return_counts=True)
    pair, poi = np.divmod(keys, n_pois)
    # keys are sorted, so each (user, slot) pair is one contiguous run
    pairs, starts = np.unique(pair, return_index=True)
    joint = {}
    for p, poi_run, count_run in zip(pairs.tolist(), np.split(poi, starts[1:]), np.split(counts, starts[1:])):
        joint[divmod(p, n_slots)] = (poi_run, count_run)
    return NbcModel(joint, np.bincount(pois, minlength=n_pois), len(pois), time_mode)


def nbc_predict(model, u, t, k):
    """score(b) = count(u, t, b) / total; ties by popularity, then index."""
    n_pois = len(model.poi_counts)
    if not 1 <= k <= n_pois:
        raise ValidationError(f"k must lie in [1, {n_pois}], got {k}")
    scores = np.zeros(n_pois, dtype=np.float64)
    pois, counts = model.joint.get((u, t), (np.empty(0, np.int64), np.empty(0, np.int64)))
    scores[pois] = counts / model.total
    order = np.lexsort((np.arange(n_pois), -model.poi_counts, -scores))[:k]
    return RankedList(order, scores[order])


class NbcPredictor:
    def __init__(self, model):
        self.model = model

    def __call__(self, query, k):
        t = time_index(query.timestamp, self.model.time_mode).id
        return nbc_predict(self.model, query.user_index, t, k)


class PopularityPredictor:
    """Rank POIs by train check-in count."""

    def __init__(self, train):
        counts = np.zeros(len(train.poi_ids))
        for c in train.checkins:
            counts[train.poi_index[c.poi_id]] += 1
        self.ranked = rank(counts)

    def __call__(self, query, k):
        return self.ranked.prefix(k)


class RandomPredictor:
    def __init__(self, n_pois, seed=0):
        self.n_pois = n_pois
        self.rng = make_rng(seed)

    def __call__(self, query, k):
        order = self.rng.permutation(self.n_pois)[:k]
        return RankedList(order, np.zeros(len(order)))


class BayesPredictor:
    """Rank POIs by the generating preference row of the user's cluster."""

    def __init__(self, truth, user_ids):
        self.truth = truth
        self.user_ids = user_ids

    def __call__(self, query, k):
        cluster = self.truth.cluster_of[self.user_ids[query.user_index]]
        slot = time_index(query.timestamp).id
        return rank(self.truth.row(cluster, slot)).prefix(k)


# --- Friend proxies ---


def stays_by_user(data, gap_minutes=10):
    """Merged stays per user index."""
    stays = {}
    for user_id, records in data.records_by_user().items():
        ordered = sorted(records, key=lambda c: c.timestamp)
        stays[data.user_index[user_id]] = merge_stays(ordered, gap_minutes)
    return stays


def covisit(stays):
    """Overlapping minutes per user pair, swept POI by POI."""
    by_poi = defaultdict(list)
    for user, user_stays in stays.items():
        for stay in user_stays:
            if stay.end > stay.start:
                by_poi[stay.poi_id].append((stay.start, stay.end, user))

    matrix = CovisitMatrix()
    for intervals in by_poi.values():
        intervals.sort(key=lambda x: (x[0], x[1]))
        active = []
        for start, end, user in intervals:
            active = [a for a in active if a[1] > start]
            for _, other_end, other in active:
                if other != user:
                    overlap = (min(end, other_end) - start).total_seconds() // 60
                    matrix.add(user, other, overlap)
            active.append((start, end, user))
    return matrix


def visit_counts(train):
    counts = np.zeros((len(train.user_ids), len(train.poi_ids)), dtype=np.int64)
    for c in train.checkins:
        counts[train.user_index[c.user_id], train.poi_index[c.poi_id]] += 1
    return counts


def rank_positions(counts):
    """Position of each POI in each user's visit ranking (count desc, index asc)."""
    counts = np.atleast_2d(counts)
    order = np.argsort(-counts, axis=1, kind="stable")
    positions = np.empty_like(order)
    np.put_along_axis(positions, order, np.arange(counts.shape[1])[None, :], axis=1)
    return positions


def location_distances(positions, u, candidates, chunk=256):
    """Normalised Kendall tau distance between user u and each candidate."""
    n = positions.shape[1]
    candidates = np.asarray(candidates, dtype=np.int64)
    if n < 2:
        return np.zeros(len(candidates))
    first, second = np.triu_indices(n, k=1)
    reference = np.sign(positions[u, first] - positions[u, second])
    out = np.empty(len(candidates), dtype=np.float64)
    for lo in range(0, len(candidates), chunk):
        block = positions[candidates[lo:lo + chunk]]
        signs = np.sign(block[:, first] - block[:, second])
        out[lo:lo + chunk] = (signs != reference).sum(axis=1)
    return out / len(first)


def location_distance(train, u, v):
    counts = visit_counts(train)
    if counts[u].sum() == 0 or counts[v].sum() == 0:
        raise ValidationError("Both users need at least one train check-in")
    return float(location_distances(rank_positions(counts), u, [v])[0])


def active_users(train, n):
    """Top-n users by train check-in count, ties by index."""
    counts = visit_counts(train).sum(axis=1)
    return np.argsort(-counts, kind="stable")[:n].tolist()


def covisit_truth(matrix, active, size=TRUTH_SIZE):
    """
    Top-`size` co-visitors of each active user by overlapping minutes.

    Only partners with positive overlap qualify; users with fewer than
    `size` of them get no truth set.
    """
    partners = defaultdict(dict)
    for (a, b), minutes in matrix.minutes.items():
        partners[a][b] = minutes
        partners[b][a] = minutes
    truth = {}
    for u in active:
        if len(partners[u]) < size:
            continue
        others = np.array(sorted(partners[u]), dtype=np.int64)
        minutes = np.array([partners[u][v] for v in others.tolist()], dtype=np.float64)
        truth[u] = set(others[np.argsort(-minutes, kind="stable")[:size]].tolist())
    skipped = len(active) - len(truth)
    if skipped:
        logger.info(f"{skipped} of {len(active)} active users have fewer than {size} co-visitors; no covisit truth")
    return truth


def location_truth(positions, active, size=TRUTH_SIZE):
    n_users = positions.shape[0]
    truth = {}
    for u in active:
        distances = location_distances(positions, u, np.arange(n_users))
        distances[u] = np.inf
        truth[u] = set(np.argsort(distances, kind="stable")[:size].tolist())
    return truth


def mrr(suggestions, truth, active, size=TRUTH_SIZE):
    """
    Mean over active users of the summed reciprocal ranks of their truth set.

    Every truth set must hold exactly `size` users; `size=None` skips the check.
    """
    active = list(active)
    if not active:
        raise ValidationError("MRR needs at least one active user")
    total = 0.0
    for u in active:
        if u not in truth:
            raise ValidationError(f"Active user {u} has no truth set")
        if size is not None and len(truth[u]) != size:
            raise ValidationError(f"Truth set of user {u} has {len(truth[u])} members, expected {size}")
        ranked = suggestions[u]
        for v in truth[u]:
            position = ranked.rank_of(v)
            if position is None:
                raise ValidationError(f"Truth friend {v} missing from the list of user {u}")
            total += 1.0 / position
    return total / len(active)


def mrr_curve(suggestions, truth, ranked_users, n_values, size=TRUTH_SIZE):
    """MRR as the active set grows along the activity ranking."""
    return [(n, mrr(suggestions, truth, ranked_users[:n], size)) for n in n_values]


# --- Learning curves ---


def learning_curve(split, fractions, train_fn, eval_fn):
    """
    Train on growing prefixes of each user's train records and evaluate on
    the fixed test split.
    """
    fractions = list(fractions)
    if any(not 0 < f <= 1 for f in fractions):
        raise ValidationError("fractions must lie in (0, 1]")
    if any(b <= a for a, b in zip(fractions, fractions[1:])):
        raise ValidationError("fractions must be strictly ascending")

    curve = []
    for fraction in fractions:
        train = split.train if fraction == 1 else truncate_train(split.train, fraction)
        logger.info(f"Learning curve: fraction {fraction} with {len(train)} train records")
        model = train_fn(train)
        curve.append((fraction, eval_fn(model, Split(train, split.test))))
    return curve


def learning_curve_rows(curve):
    return [
        {"fraction": fraction, "bucket": row["bucket"], "k": row["k"], "accuracy": row["accuracy"]}
        for fraction, report in curve
        for row in report.rows()
    ]
