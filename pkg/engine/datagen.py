"""
Synthetic dense check-in generator with planted user clusters.

Each cluster prefers its own disjoint POI subset on top of a global
popularity tail, modulated by time of day and day of week through the
POIs' functionalities. One preferred POI per user is censored from the
main log and emitted separately for cold-start evaluation.
"""
import io
import logging
import os
from datetime import timedelta

import numpy as np
import pandas as pd

from engine.ingest import read_text, write_checkins, write_venues
from engine.sampling import make_rng
from models import (
    ACTIVITIES,
    CATEGORIES,
    CheckIn,
    Dataset,
    GroundTruth,
    VenueProfile,
)

logger = logging.getLogger(__name__)

SESSION_PRIOR = np.array([0.30, 0.30, 0.30, 0.10])
# minute of day where each session starts, and its length
SESSION_START = np.array([6 * 60, 12 * 60, 17 * 60, 0])
SESSION_LENGTH = np.array([6 * 60, 5 * 60, 7 * 60, 6 * 60])
POPULARITY_EXPONENT = 0.8
# a stay is 1..MAX_STAY_PINGS pings, consecutive pings at most MAX_PING_SPACING
# minutes apart so they merge under the default 10 minute stay gap
MAX_STAY_PINGS = 4
MAX_PING_SPACING = 8

# functionality -> log-weight per session (Morning, Afternoon, Evening, Night)
SESSION_BIAS = {
    "Residence": (-0.5, -0.5, 0.5, 1.0),
    "Recreation": (-0.5, 0.0, 1.0, 0.0),
    "Dining": (0.0, 1.0, 1.0, -1.0),
    "Exercise": (0.0, 0.0, 1.0, -1.0),
    "Library/Lab": (0.5, 0.5, 0.5, -0.5),
    "Classrooms": (1.0, 1.0, -0.5, -1.0),
    "Others": (0.0, 0.0, 0.0, 0.0),
}
WEEKEND_BIAS = {"Classrooms": -1.5, "Library/Lab": -0.5, "Recreation": 0.5}


def _ids(prefix, n):
    width = len(str(max(n - 1, 0)))
    return [f"{prefix}{i:0{width}d}" for i in range(n)]


def _log_modulation(venues, poi_ids):
    """Per-POI log-weight for each of the 28 slots, averaged over functionalities."""
    bias = np.zeros((len(poi_ids), 7, 4))
    for b, poi_id in enumerate(poi_ids):
        functionalities = venues[poi_id].functionalities
        for f in functionalities:
            session = np.array(SESSION_BIAS[f])
            bias[b, :, :] += session
            bias[b, 5:, :] += WEEKEND_BIAS.get(f, 0.0)
        bias[b] /= len(functionalities)
    return bias.reshape(len(poi_ids), 28)


def gen_population(config):
    """Venues plus the planted cluster structure and preference rows."""
    config.validate()
    rng = make_rng(config.seed)
    n_pois, n_users, n_clusters = config.n_pois, config.n_users, config.n_clusters

    poi_ids = _ids("b", n_pois)
    venues = {}
    for b, poi_id in enumerate(poi_ids):
        n_functions = int(rng.integers(1, 3))
        picks = np.sort(rng.choice(len(ACTIVITIES), size=n_functions, replace=False))
        venues[poi_id] = VenueProfile(
            poi_id, CATEGORIES[b % len(CATEGORIES)], tuple(ACTIVITIES[a] for a in picks)
        )

    user_ids = _ids("u", n_users)
    clusters = rng.permutation(np.arange(n_users) % n_clusters)
    cluster_of = {u: int(c) for u, c in zip(user_ids, clusters)}

    size = config.subset_size
    shuffled = rng.permutation(n_pois)
    subsets = tuple(np.sort(shuffled[c * size:(c + 1) * size]) for c in range(n_clusters))

    popularity = 1.0 / np.power(rng.permutation(n_pois) + 1.0, POPULARITY_EXPONENT)
    popularity /= popularity.sum()

    modulation = np.exp(config.temporal_sharpness * _log_modulation(venues, poi_ids))
    preference = np.empty((n_clusters, 28, n_pois))
    for c, subset in enumerate(subsets):
        focus = np.zeros(n_pois)
        focus[subset] = rng.uniform(0.5, 1.5, size=len(subset))
        focus /= focus.sum()
        base = config.cluster_poi_affinity * focus + (1 - config.cluster_poi_affinity) * popularity
        rows = base[None, :] * modulation.T
        preference[c] = rows / rows.sum(axis=1, keepdims=True)

    censored = {u: int(rng.choice(subsets[cluster_of[u]])) for u in user_ids}
    truth = GroundTruth(cluster_of, preference, subsets, censored)
    logger.info(f"Generated {n_pois} venues and {n_users} users in {n_clusters} clusters")
    return venues, truth


def gen_checkins(config, truth, venues):
    """
    Draw records_per_user check-ins per user.

    Each draw is a stay of a few pings at one POI. Stays at the user's
    censored POI are diverted into the second returned dataset instead of
    the main log.
    """
    rng = make_rng((config.seed, 1))
    poi_ids = sorted(venues)
    n_pois = len(poi_ids)
    cdf = np.cumsum(truth.preference, axis=2)
    first_dow = config.start.weekday()
    n_days = config.weeks * 7
    wanted = config.records_per_user

    main, cold = [], []
    for user_id in sorted(truth.cluster_of):
        cluster = truth.cluster_of[user_id]
        censored = truth.censored[user_id]
        kept_minutes, kept_pois = [], []
        have = 0
        while have < wanted:
            size = (wanted - have) // 2 + 8
            days = rng.integers(0, n_days, size=size)
            sessions = rng.choice(4, size=size, p=SESSION_PRIOR)
            pings = rng.integers(1, MAX_STAY_PINGS + 1, size=size)
            spacing = rng.integers(1, MAX_PING_SPACING + 1, size=size)
            # the whole stay fits inside its session
            offsets = rng.integers(0, SESSION_LENGTH[sessions] - (pings - 1) * spacing)
            starts = days * 1440 + SESSION_START[sessions] + offsets
            slots = ((first_dow + days) % 7) * 4 + sessions
            coins = rng.random(size) * cdf[cluster, slots, -1]
            stay_pois = np.minimum((cdf[cluster, slots] < coins[:, None]).sum(axis=1), n_pois - 1)

            stay = np.repeat(np.arange(size), pings)
            within = np.arange(len(stay)) - np.repeat(np.cumsum(pings) - pings, pings)
            minutes = starts[stay] + within * spacing[stay]
            pois = stay_pois[stay]

            diverted = pois == censored
            cold.extend((user_id, m, b) for m, b in zip(minutes[diverted].tolist(), pois[diverted].tolist()))
            kept_minutes.append(minutes[~diverted])
            kept_pois.append(pois[~diverted])
            have += int((~diverted).sum())

        minutes = np.concatenate(kept_minutes)[:wanted]
        pois = np.concatenate(kept_pois)[:wanted]
        order = np.argsort(minutes, kind="stable")
        main.extend((user_id, m, b) for m, b in zip(minutes[order].tolist(), pois[order].tolist()))

    def to_dataset(rows):
        rows = sorted(rows, key=lambda r: (r[0], r[1]))
        checkins = tuple(
            CheckIn(u, config.start + timedelta(minutes=m), poi_ids[b]) for u, m, b in rows
        )
        return Dataset(checkins, venues, frozenset(truth.cluster_of))

    data, coldstart = to_dataset(main), to_dataset(cold)
    logger.info(f"Generated {len(data)} check-ins and {len(coldstart)} censored cold-start records")
    return data, coldstart


def write_dataset(out_dir, venues, truth, data, coldstart):
    """Write checkins.csv, venues.csv, coldstart.csv and truth.csv."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "checkins": os.path.join(out_dir, "checkins.csv"),
        "venues": os.path.join(out_dir, "venues.csv"),
        "coldstart": os.path.join(out_dir, "coldstart.csv"),
        "truth": os.path.join(out_dir, "truth.csv"),
    }
    write_checkins(paths["checkins"], data.checkins)
    write_venues(paths["venues"], venues)
    write_checkins(paths["coldstart"], coldstart.checkins)
    users = sorted(truth.cluster_of)
    pd.DataFrame(
        {"user_id": users, "cluster": [truth.cluster_of[u] for u in users]}
    ).to_csv(paths["truth"], index=False, lineterminator="\n")
    return paths


def load_truth(path):
    """user_id -> cluster from truth.csv."""
    frame = pd.read_csv(io.StringIO(read_text(path)), dtype={"user_id": str, "cluster": int})
    return dict(zip(frame["user_id"], frame["cluster"].astype(int)))


def cluster_purity(store, user_ids, cluster_of, k=2, chunk=512):
    """Share of each user's k nearest neighbours (cosine) from the same cluster."""
    z = store.z_user
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    z = z / np.where(norms > 0, norms, 1.0)
    labels = np.array([cluster_of[u] for u in user_ids])
    agree = 0
    for lo in range(0, len(z), chunk):
        sims = z[lo:lo + chunk] @ z.T
        rows = np.arange(sims.shape[0])
        sims[rows, lo + rows] = -np.inf
        neighbours = np.argpartition(-sims, k, axis=1)[:, :k]
        agree += int((labels[neighbours] == labels[lo:lo + chunk, None]).sum())
    return agree / (len(z) * k)
