from collections import OrderedDict

import numpy as np

from engine.ingest import time_index
from models import TIMESTAMP_FORMAT, Query, RankedList, ValidationError


def rank(scores, exclude=None):
    """Indices by descending score, ties by ascending index."""
    scores = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    if exclude is not None:
        order = order[order != exclude]
    return RankedList(order, scores[order])


def score_poi(store, b, u, t):
    z_b = store.z_poi[b]
    return float(z_b @ store.z_user[u] + z_b @ store.z_time[t])


def poi_scores(store, u, t):
    """score_poi for every POI at once."""
    return store.z_poi @ store.z_user[u] + store.z_poi @ store.z_time[t]


def top_k_pois(store, query, k, time_mode="28"):
    n_pois = store.z_poi.shape[0]
    if not 1 <= k <= n_pois:
        raise ValidationError(f"k must lie in [1, {n_pois}], got {k}")
    if not 0 <= query.user_index < store.z_user.shape[0]:
        raise ValidationError(f"Unknown user index {query.user_index}")
    t = time_index(query.timestamp, time_mode).id
    return rank(poi_scores(store, query.user_index, t)).prefix(k)


def friend_scores(store, u):
    """Every other user ranked by z_u . z_v."""
    n_users = store.z_user.shape[0]
    if n_users < 2:
        raise ValidationError("Friend suggestion needs at least two users")
    if not 0 <= u < n_users:
        raise ValidationError(f"Unknown user index {u}")
    return rank(store.z_user @ store.z_user[u], exclude=u)


class EmbeddingPredictor:
    """
    Query -> RankedList over POIs.

    Keeps the top-k prefix per (user, slot), at most `cache_size` of them;
    the least recently used prefix is dropped first.
    """

    def __init__(self, store, time_mode="28", cache_size=50_000):
        self.store = store
        self.time_mode = time_mode
        self.cache_size = cache_size
        self._cache = OrderedDict()

    def __call__(self, query, k):
        t = time_index(query.timestamp, self.time_mode).id
        key = (query.user_index, t)
        ranked = self._cache.get(key)
        if ranked is None or len(ranked) < k:
            ranked = top_k_pois(self.store, query, k, self.time_mode)
            self._cache[key] = ranked
        self._cache.move_to_end(key)
        if len(self._cache) > self.cache_size:
            self._cache.popitem(last=False)
        return ranked.prefix(k)

    def clear(self):
        self._cache.clear()


def prediction_rows(graph, store, queries, k):
    """CSV rows `user_id,timestamp,rank,poi_id,score` for (user_id, timestamp) queries."""
    rows = []
    for user_id, timestamp in queries:
        if user_id not in graph.user_index:
            raise ValidationError(f"Unknown user {user_id!r}")
        ranked = top_k_pois(store, Query(graph.user_index[user_id], timestamp), k, graph.time_mode)
        stamp = timestamp.strftime(TIMESTAMP_FORMAT)
        for position, (b, score) in enumerate(ranked.items, start=1):
            rows.append(
                {
                    "user_id": user_id,
                    "timestamp": stamp,
                    "rank": position,
                    "poi_id": graph.poi_ids[b],
                    "score": score,
                }
            )
    return rows


def friend_rows(graph, store, user_ids, k):
    rows = []
    for user_id in user_ids:
        if user_id not in graph.user_index:
            raise ValidationError(f"Unknown user {user_id!r}")
        ranked = friend_scores(store, graph.user_index[user_id]).prefix(k)
        for position, (v, score) in enumerate(ranked.items, start=1):
            rows.append(
                {
                    "user_id": user_id,
                    "rank": position,
                    "friend_id": graph.user_ids[v],
                    "score": score,
                }
            )
    return rows
